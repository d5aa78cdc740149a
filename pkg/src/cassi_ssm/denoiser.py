"""U-shaped denoiser built from spatial-spectral state-space blocks.

Each block chains three sub-stages: a four-direction spatial scan branch
(two global row-major directions plus two 4x4-patch-local directions), a
single cross spatial-spectral cube scan, and a gated depthwise feed-forward
unit.  Layer norms sit in front of each sub-stage; the spatial branch has
its residual added outside, the other two carry their residual internally.

The network conditions on the coded mask (concatenated channel-wise) and on
the stage noise level (one constant channel), and predicts a residual that
is added to its input, so zeroing the output convolution makes it exact
identity.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .scans import CubeSpec, cross_cube_order, global_order, local_patch_order
from .ssm import selective_scan

DELTA_BIAS_INIT = float(np.log(np.expm1(0.1)))  # softplus^-1(0.1)

SPATIAL_DIRECTIONS = ("gf", "gr", "lf", "lr")

_SSM_MATRIX_FIELDS = ("a_log", "w_b", "b_b", "w_c", "b_c")
_SSM_VECTOR_FIELDS = ("w_dt", "b_dt", "d")


@dataclass(frozen=True)
class BlockConfig:
    """Shape parameters of one spatial-spectral SSM block."""

    channels: int
    patch: int
    cube: CubeSpec
    state_size: int
    expansion: int


@dataclass(frozen=True)
class UNetConfig:
    """Denoiser shape: encoder levels, blocks per level, and block geometry."""

    bands: int
    base_channels: int = 28
    levels: int = 2
    blocks_per_level: int = 1
    patch: int = 4
    cube: tuple = (2, 2, 4)
    state_size: int = 16
    expansion: int = 2

    def __post_init__(self):
        if self.levels < 0 or self.blocks_per_level < 1:
            raise ValueError("levels must be >= 0 and blocks_per_level >= 1")
        if self.base_channels % self.cube[2]:
            raise ValueError(
                f"cube depth {self.cube[2]} must divide base channels {self.base_channels}")

    def channels_at(self, level: int) -> int:
        return self.base_channels * (2 ** level)

    def block_config(self, level: int) -> BlockConfig:
        c = self.channels_at(level)
        spec = CubeSpec(self.patch, self.cube[0], self.cube[1], self.cube[2])
        return BlockConfig(c, self.patch, spec, self.state_size, self.expansion)

    def validate_dims(self, height: int, width: int) -> None:
        need = (2 ** self.levels) * self.patch
        if height % need or width % need:
            raise ValueError(
                f"input dims {height}x{width} must be divisible by 2^levels * patch = {need}")


class ModelWeights:
    """Named store of trainable tensors (float64 leaves on the tape)."""

    def __init__(self):
        self._store: dict[str, ad.Node] = {}

    def add(self, name: str, array: np.ndarray) -> ad.Node:
        if name in self._store:
            raise ValueError(f"duplicate weight name: {name}")
        node = ad.parameter(np.asarray(array, dtype=np.float64).copy(), name=name)
        self._store[name] = node
        return node

    def __getitem__(self, name: str) -> ad.Node:
        return self._store[name]

    def __contains__(self, name: str) -> bool:
        return name in self._store

    def names(self):
        return list(self._store)

    def items(self):
        return self._store.items()

    def parameters(self):
        return list(self._store.values())

    def arrays(self) -> dict:
        return {k: v.value for k, v in self._store.items()}

    def zero_grad(self) -> None:
        for node in self._store.values():
            node.grad = None

    def load_arrays(self, arrays: dict) -> None:
        for name, value in arrays.items():
            node = self._store.get(name)
            if node is None:
                raise KeyError(f"unknown weight name in checkpoint: {name}")
            if node.value.shape != value.shape:
                raise ValueError(
                    f"shape mismatch for {name}: have {node.value.shape}, file {value.shape}")
            node.value = np.asarray(value, dtype=np.float64).copy()


# ---------------------------------------------------------------------------
# weight initialization

def _conv_init(rng, c_out, c_in, k):
    std = 1.0 / np.sqrt(c_in * k * k)
    return rng.normal(0.0, std, size=(c_out, c_in, k, k))


def _init_ssm_branch(weights: ModelWeights, rng, prefix: str, channels: int, state: int):
    a_log = np.tile(np.log(np.arange(1, state + 1, dtype=np.float64)), (channels, 1))
    weights.add(f"{prefix}/a_log", a_log)
    std = 1.0 / np.sqrt(state)
    for field in ("w_b", "b_b", "w_c", "b_c"):
        weights.add(f"{prefix}/{field}", rng.normal(0.0, std, size=(channels, state)))
    weights.add(f"{prefix}/w_dt", rng.normal(0.0, 0.05, size=(channels,)))
    weights.add(f"{prefix}/b_dt", np.full(channels, DELTA_BIAS_INIT))
    weights.add(f"{prefix}/d", np.ones(channels))


def _init_block(weights: ModelWeights, rng, prefix: str, cfg: BlockConfig):
    c, e = cfg.channels, cfg.expansion
    weights.add(f"{prefix}/ln1/g", np.ones(c))
    weights.add(f"{prefix}/ln1/b", np.zeros(c))
    for d in SPATIAL_DIRECTIONS:
        _init_ssm_branch(weights, rng, f"{prefix}/sp/{d}", c, cfg.state_size)
    weights.add(f"{prefix}/sp/proj_w", _conv_init(rng, c, c, 1))
    weights.add(f"{prefix}/sp/proj_b", np.zeros(c))
    weights.add(f"{prefix}/ln2/g", np.ones(c))
    weights.add(f"{prefix}/ln2/b", np.zeros(c))
    _init_ssm_branch(weights, rng, f"{prefix}/cx", 1, cfg.state_size)
    weights.add(f"{prefix}/ffn/ln/g", np.ones(c))
    weights.add(f"{prefix}/ffn/ln/b", np.zeros(c))
    weights.add(f"{prefix}/ffn/in_w", _conv_init(rng, 2 * e * c, c, 1))
    weights.add(f"{prefix}/ffn/in_b", np.zeros(2 * e * c))
    weights.add(f"{prefix}/ffn/dw1_w", rng.normal(0.0, 1.0 / 3.0, size=(e * c, 3, 3)))
    weights.add(f"{prefix}/ffn/dw1_b", np.zeros(e * c))
    weights.add(f"{prefix}/ffn/dw2_w", rng.normal(0.0, 1.0 / 3.0, size=(e * c, 3, 3)))
    weights.add(f"{prefix}/ffn/dw2_b", np.zeros(e * c))
    weights.add(f"{prefix}/ffn/out_w", _conv_init(rng, c, e * c, 1))
    weights.add(f"{prefix}/ffn/out_b", np.zeros(c))


def init_denoiser_weights(weights: ModelWeights, rng, prefix: str, config: UNetConfig,
                          zero_residual: bool = True) -> None:
    """Populate all tensors for one denoiser instance under the given prefix.

    With zero_residual the final 3x3 convolution starts at zero, so the
    freshly initialized denoiser is the exact identity.
    """
    nb = config.bands
    weights.add(f"{prefix}/embed/fuse_w", _conv_init(rng, nb, 2 * nb + 1, 1))
    weights.add(f"{prefix}/embed/fuse_b", np.zeros(nb))
    weights.add(f"{prefix}/embed/proj_w", _conv_init(rng, config.base_channels, nb, 3))
    weights.add(f"{prefix}/embed/proj_b", np.zeros(config.base_channels))
    for lvl in range(config.levels):
        cfg = config.block_config(lvl)
        for i in range(config.blocks_per_level):
            _init_block(weights, rng, f"{prefix}/enc{lvl}/blk{i}", cfg)
        weights.add(f"{prefix}/down{lvl}/w",
                    _conv_init(rng, config.channels_at(lvl + 1), cfg.channels, 3))
        weights.add(f"{prefix}/down{lvl}/b", np.zeros(config.channels_at(lvl + 1)))
    mid = config.block_config(config.levels)
    for i in range(config.blocks_per_level):
        _init_block(weights, rng, f"{prefix}/mid/blk{i}", mid)
    for lvl in reversed(range(config.levels)):
        cfg = config.block_config(lvl)
        weights.add(f"{prefix}/up{lvl}/w",
                    _conv_init(rng, cfg.channels, config.channels_at(lvl + 1), 3))
        weights.add(f"{prefix}/up{lvl}/b", np.zeros(cfg.channels))
        weights.add(f"{prefix}/dec{lvl}/fuse_w", _conv_init(rng, cfg.channels, 2 * cfg.channels, 1))
        weights.add(f"{prefix}/dec{lvl}/fuse_b", np.zeros(cfg.channels))
        for i in range(config.blocks_per_level):
            _init_block(weights, rng, f"{prefix}/dec{lvl}/blk{i}", cfg)
    out_w = np.zeros((nb, config.base_channels, 3, 3)) if zero_residual else \
        _conv_init(rng, nb, config.base_channels, 3)
    weights.add(f"{prefix}/out/w", out_w)
    weights.add(f"{prefix}/out/b", np.zeros(nb))


# ---------------------------------------------------------------------------
# forward pieces

def _ssm_branch(seq: "ad.Node", weights: ModelWeights, prefix: str) -> "ad.Node":
    """Per-channel selective scan over a [C, L] token sequence.

    Each channel carries its own selection: per-token B and C come from an
    affine map of the scalar token, the timescale from a softplus-affine map.
    """
    nch, length = seq.shape
    a = ad.neg(ad.exp(weights[f"{prefix}/a_log"]))
    nstate = a.shape[-1]
    x_e = ad.repeat_expand(seq, 2, nstate)
    b_tok = ad.add(ad.mul(x_e, ad.repeat_expand(weights[f"{prefix}/w_b"], 1, length)),
                   ad.repeat_expand(weights[f"{prefix}/b_b"], 1, length))
    c_tok = ad.add(ad.mul(x_e, ad.repeat_expand(weights[f"{prefix}/w_c"], 1, length)),
                   ad.repeat_expand(weights[f"{prefix}/b_c"], 1, length))
    delta = ad.softplus(ad.add(ad.mul(seq, ad.repeat_expand(weights[f"{prefix}/w_dt"], 1, length)),
                               ad.repeat_expand(weights[f"{prefix}/b_dt"], 1, length)))
    return selective_scan(seq, a, b_tok, c_tok, delta, weights[f"{prefix}/d"])


def spatial_ssm(f: "ad.Node", weights: ModelWeights, prefix: str, patch: int,
                orders=None) -> "ad.Node":
    """Four-direction spatial scan branch: global fwd/rev plus patch-local fwd/rev.

    Each direction permutes the flattened plane, scans per channel, and
    restores the original order; the four results are summed and mixed by a
    1x1 projection.
    """
    nch, height, width = f.shape
    if orders is None:
        orders = (
            global_order(height, width, False),
            global_order(height, width, True),
            local_patch_order(height, width, patch, False),
            local_patch_order(height, width, patch, True),
        )
    seq0 = ad.reshape(f, (nch, height * width))
    acc = None
    for name, order in zip(SPATIAL_DIRECTIONS, orders):
        s = ad.gather_by_order(seq0, order)
        y = _ssm_branch(s, weights, f"{prefix}/{name}")
        r = ad.gather_by_order(y, order.inverted())
        acc = r if acc is None else ad.add(acc, r)
    merged = ad.reshape(acc, (nch, height, width))
    return ad.conv2d(merged, weights[f"{prefix}/proj_w"], weights[f"{prefix}/proj_b"])


def spectral_cube_ssm(f: "ad.Node", weights: ModelWeights, prefix: str,
                      spec: CubeSpec, order=None) -> "ad.Node":
    """Single-direction scan over the whole tensor ordered by local cubes.

    The full C x H x W tensor becomes one scalar sequence whose neighbors
    are adjacent bands and pixels; the scan output is restored and added to
    the input.
    """
    nch, height, width = f.shape
    if order is None:
        order = cross_cube_order(height, width, nch, spec)
    flat = ad.reshape(f, (1, nch * height * width))
    s = ad.gather_by_order(flat, order)
    y = _ssm_branch(s, weights, prefix)
    r = ad.gather_by_order(y, order.inverted())
    return ad.add(f, ad.reshape(r, (nch, height, width)))


def gated_ffn(f: "ad.Node", weights: ModelWeights, prefix: str) -> "ad.Node":
    """Gated depthwise feed-forward: LN, expand 1x1, dual depthwise 3x3,
    GELU-gated product, contract 1x1, residual."""
    n = ad.layer_norm(f, weights[f"{prefix}/ln/g"], weights[f"{prefix}/ln/b"])
    u = ad.conv2d(n, weights[f"{prefix}/in_w"], weights[f"{prefix}/in_b"])
    half = u.shape[0] // 2
    ua, ub = ad.split(u, [half, half], axis=0)
    ga = ad.gelu(ad.depthwise_conv2d(ua, weights[f"{prefix}/dw1_w"], weights[f"{prefix}/dw1_b"]))
    gb = ad.depthwise_conv2d(ub, weights[f"{prefix}/dw2_w"], weights[f"{prefix}/dw2_b"])
    out = ad.conv2d(ad.mul(ga, gb), weights[f"{prefix}/out_w"], weights[f"{prefix}/out_b"])
    return ad.add(f, out)


def ssm_block(f: "ad.Node", weights: ModelWeights, prefix: str, cfg: BlockConfig) -> "ad.Node":
    """One spatial-spectral SSM block; see the module docstring for wiring."""
    g1 = ad.layer_norm(f, weights[f"{prefix}/ln1/g"], weights[f"{prefix}/ln1/b"])
    y1 = ad.add(f, spatial_ssm(g1, weights, f"{prefix}/sp", cfg.patch))
    g2 = ad.layer_norm(y1, weights[f"{prefix}/ln2/g"], weights[f"{prefix}/ln2/b"])
    y2 = spectral_cube_ssm(g2, weights, f"{prefix}/cx", cfg.cube)
    return gated_ffn(y2, weights, f"{prefix}/ffn")


def embed_with_mask(x: "ad.Node", mask: np.ndarray, weights: ModelWeights, prefix: str,
                    sigma=0.0) -> "ad.Node":
    """Fuse the cube with the coded mask and the noise-level channel.

    The mask is replicated to one channel per band and concatenated with the
    cube and a constant sigma channel; a 1x1 convolution integrates them and
    a 3x3 convolution embeds to the working channel count.
    """
    x = ad.as_node(x)
    nb, height, width = x.shape
    if mask.shape != (height, width):
        raise ValueError(f"mask shape {mask.shape} does not match cube plane {height}x{width}")
    mask_stack = ad.constant(np.repeat(np.asarray(mask, dtype=np.float64)[None], nb, axis=0))
    sigma = ad.as_node(sigma)
    if not np.isfinite(sigma.value).all():
        raise ValueError("noise level must be finite")
    sig_channel = ad.mul(ad.constant(np.ones((1, height, width))), sigma)
    stacked = ad.concat([x, mask_stack, sig_channel], axis=0)
    fused = ad.conv2d(stacked, weights[f"{prefix}/embed/fuse_w"], weights[f"{prefix}/embed/fuse_b"])
    return ad.conv2d(fused, weights[f"{prefix}/embed/proj_w"], weights[f"{prefix}/embed/proj_b"])


def denoise(x, sigma, mask: np.ndarray, weights: ModelWeights, config: UNetConfig,
            prefix: str, feature_mask=None) -> "ad.Node":
    """Run the U-shaped denoiser; returns input plus the predicted residual.

    `sigma` may be a float or a scalar Node (so stage parameters receive
    gradients).  When `feature_mask` is given, its 0/1 spatial pattern is
    multiplied into the embedded feature, the same mask at every stage.
    """
    x = ad.as_node(x)
    nb, height, width = x.shape
    if nb != config.bands:
        raise ValueError(f"cube has {nb} bands but config expects {config.bands}")
    config.validate_dims(height, width)

    f = embed_with_mask(x, mask, weights, prefix, sigma)
    if feature_mask is not None:
        f = feature_mask.apply(f)

    skips = []
    for lvl in range(config.levels):
        cfg = config.block_config(lvl)
        for i in range(config.blocks_per_level):
            f = ssm_block(f, weights, f"{prefix}/enc{lvl}/blk{i}", cfg)
        skips.append(f)
        f = ad.conv2d(f, weights[f"{prefix}/down{lvl}/w"], weights[f"{prefix}/down{lvl}/b"],
                      stride=2)
    mid = config.block_config(config.levels)
    for i in range(config.blocks_per_level):
        f = ssm_block(f, weights, f"{prefix}/mid/blk{i}", mid)
    for lvl in reversed(range(config.levels)):
        cfg = config.block_config(lvl)
        f = ad.upsample_nearest2x(f)
        f = ad.conv2d(f, weights[f"{prefix}/up{lvl}/w"], weights[f"{prefix}/up{lvl}/b"])
        f = ad.concat([f, skips[lvl]], axis=0)
        f = ad.conv2d(f, weights[f"{prefix}/dec{lvl}/fuse_w"], weights[f"{prefix}/dec{lvl}/fuse_b"])
        for i in range(config.blocks_per_level):
            f = ssm_block(f, weights, f"{prefix}/dec{lvl}/blk{i}", cfg)
    residual = ad.conv2d(f, weights[f"{prefix}/out/w"], weights[f"{prefix}/out/b"])
    return ad.add(x, residual)
