"""Bit-exact file formats: HSIC cubes, CSMW weights, PGM band export.

Payloads are 32-bit little-endian floats on disk (round-to-nearest-even
from the 64-bit working precision); headers are fixed-layout and every
malformed field has its own diagnostic.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .denoiser import UNetConfig
from .training import FeatureMask
from .unfolding import UnfoldConfig

CUBE_MAGIC = b"HSIC"
CUBE_VERSION = 1
KIND_CUBE = 0
KIND_MASK = 1
KIND_MEASUREMENT = 2
_KIND_NAMES = {KIND_CUBE: "cube", KIND_MASK: "mask", KIND_MEASUREMENT: "measurement"}
MAX_DIM = 65536

WEIGHTS_MAGIC = b"CSMW"
WEIGHTS_VERSION = 1

MASK_VALUES_KEY = "mask/values"
MASK_META_KEY = "mask/meta"
PROFILE_KEY = "meta/profile"


class FileFormatError(ValueError):
    """Raised for any malformed container file."""


# ---------------------------------------------------------------------------
# HSIC cubes

def save_cube(path, values: np.ndarray, kind: int = KIND_CUBE) -> None:
    """Write a [bands, H, W] array (band-major) as a kind-tagged HSIC file."""
    values = np.asarray(values, dtype=np.float64)
    if values.ndim == 2:
        values = values[None]
    if values.ndim != 3:
        raise ValueError(f"expected a 2-D or 3-D array, got shape {values.shape}")
    if kind not in _KIND_NAMES:
        raise ValueError(f"unknown kind {kind}")
    if kind in (KIND_MASK, KIND_MEASUREMENT) and values.shape[0] != 1:
        raise ValueError(f"{_KIND_NAMES[kind]} files must carry a single plane")
    nb, h, w = values.shape
    payload = values.astype("<f4").tobytes()
    header = CUBE_MAGIC + struct.pack("<BBIII", CUBE_VERSION, kind, h, w, nb)
    Path(path).write_bytes(header + payload)


def load_cube(path, expect_kind: int | None = None):
    """Read an HSIC file; returns (values [bands, H, W] float64, kind)."""
    raw = Path(path).read_bytes()
    if len(raw) < 18:
        raise FileFormatError(f"{path}: truncated header")
    if raw[:4] != CUBE_MAGIC:
        raise FileFormatError(f"{path}: not a HSIC file")
    version, kind, h, w, nb = struct.unpack("<BBIII", raw[4:18])
    if version != CUBE_VERSION:
        raise FileFormatError(f"{path}: unsupported HSIC version {version}")
    if kind not in _KIND_NAMES:
        raise FileFormatError(f"{path}: unknown HSIC kind byte {kind}")
    if not (1 <= h <= MAX_DIM and 1 <= w <= MAX_DIM and 1 <= nb <= MAX_DIM):
        raise FileFormatError(f"{path}: implausible dimensions {h}x{w}x{nb}")
    expected = 4 * h * w * nb
    body = raw[18:]
    if len(body) < expected:
        raise FileFormatError(f"{path}: truncated payload ({len(body)} of {expected} bytes)")
    if len(body) > expected:
        raise FileFormatError(f"{path}: oversized payload ({len(body) - expected} trailing bytes)")
    if expect_kind is not None and kind != expect_kind:
        raise FileFormatError(
            f"{path}: kind mismatch (expected {_KIND_NAMES[expect_kind]}, found {_KIND_NAMES[kind]})")
    values = np.frombuffer(body, dtype="<f4").astype(np.float64).reshape(nb, h, w)
    return values, kind


# ---------------------------------------------------------------------------
# CSMW weights

def _config_profile(config: UnfoldConfig) -> np.ndarray:
    net = config.net
    return np.array([
        config.stages, int(config.share_weights), net.bands, net.base_channels,
        net.levels, net.blocks_per_level, net.patch,
        net.cube[0], net.cube[1], net.cube[2], net.state_size, net.expansion,
    ], dtype=np.float64)


def config_from_profile(profile: np.ndarray) -> UnfoldConfig:
    p = [int(v) for v in np.asarray(profile).ravel()]
    if len(p) != 12:
        raise FileFormatError(f"weights profile has {len(p)} fields, expected 12")
    net = UNetConfig(bands=p[2], base_channels=p[3], levels=p[4], blocks_per_level=p[5],
                     patch=p[6], cube=(p[7], p[8], p[9]), state_size=p[10], expansion=p[11])
    return UnfoldConfig(stages=p[0], net=net, share_weights=bool(p[1]))


def config_digest(config: UnfoldConfig) -> bytes:
    net = config.net
    text = (f"stages={config.stages};share={int(config.share_weights)};bands={net.bands};"
            f"base={net.base_channels};levels={net.levels};blocks={net.blocks_per_level};"
            f"patch={net.patch};cube={net.cube[0]}x{net.cube[1]}x{net.cube[2]};"
            f"state={net.state_size};expansion={net.expansion}")
    return hashlib.sha256(text.encode()).digest()


@dataclass
class LoadedModel:
    config: UnfoldConfig
    arrays: dict
    feature_mask: FeatureMask | None


def save_weights(path, weights, config: UnfoldConfig, feature_mask: FeatureMask | None = None) -> None:
    """Serialize named tensors (f32 payloads) plus config profile and mask."""
    entries = dict(weights.arrays())
    entries[PROFILE_KEY] = _config_profile(config)
    if feature_mask is not None:
        entries[MASK_VALUES_KEY] = feature_mask.values
        seed = int(feature_mask.seed)
        entries[MASK_META_KEY] = np.array(
            [feature_mask.zero_ratio, seed & 0xFFFF, (seed >> 16) & 0xFFFF], dtype=np.float64)
    blob = bytearray()
    blob += WEIGHTS_MAGIC
    blob += struct.pack("<B", WEIGHTS_VERSION)
    blob += config_digest(config)
    blob += struct.pack("<I", len(entries))
    for name in sorted(entries):
        arr = np.asarray(entries[name], dtype=np.float64)
        encoded = name.encode("utf-8")
        blob += struct.pack("<H", len(encoded))
        blob += encoded
        blob += struct.pack("<B", arr.ndim)
        blob += struct.pack(f"<{arr.ndim}I", *arr.shape)
        blob += arr.astype("<f4").tobytes()
    Path(path).write_bytes(bytes(blob))


def load_weights(path) -> LoadedModel:
    """Read a CSMW file back; verifies the stored config digest."""
    raw = Path(path).read_bytes()
    if len(raw) < 4 or raw[:4] != WEIGHTS_MAGIC:
        raise FileFormatError(f"{path}: not a CSMW file")
    pos = 4
    if len(raw) < pos + 1 + 32 + 4:
        raise FileFormatError(f"{path}: truncated weights header")
    version = raw[pos]
    pos += 1
    if version != WEIGHTS_VERSION:
        raise FileFormatError(f"{path}: unsupported CSMW version {version}")
    digest = raw[pos:pos + 32]
    pos += 32
    (count,) = struct.unpack_from("<I", raw, pos)
    pos += 4
    arrays: dict[str, np.ndarray] = {}
    for _ in range(count):
        try:
            (name_len,) = struct.unpack_from("<H", raw, pos)
            pos += 2
            name = raw[pos:pos + name_len].decode("utf-8")
            pos += name_len
            rank = raw[pos]
            pos += 1
            dims = struct.unpack_from(f"<{rank}I", raw, pos)
            pos += 4 * rank
            n = int(np.prod(dims)) if rank else 1
            payload = raw[pos:pos + 4 * n]
            if len(payload) < 4 * n:
                raise FileFormatError(f"{path}: truncated weights payload")
            pos += 4 * n
        except (struct.error, IndexError, UnicodeDecodeError) as exc:
            raise FileFormatError(f"{path}: truncated weights file") from exc
        if name in arrays:
            raise FileFormatError(f"{path}: duplicate tensor name {name!r}")
        arrays[name] = np.frombuffer(payload, dtype="<f4").astype(np.float64).reshape(dims)
    if pos != len(raw):
        raise FileFormatError(f"{path}: oversized weights payload ({len(raw) - pos} trailing bytes)")
    if PROFILE_KEY not in arrays:
        raise FileFormatError(f"{path}: missing config profile entry")
    config = config_from_profile(arrays.pop(PROFILE_KEY))
    if config_digest(config) != digest:
        raise FileFormatError(f"{path}: config digest mismatch")
    feature_mask = None
    if MASK_VALUES_KEY in arrays:
        meta = arrays.pop(MASK_META_KEY, np.array([0.0, 0.0, 0.0]))
        values = arrays.pop(MASK_VALUES_KEY)
        seed = int(meta[1]) | (int(meta[2]) << 16)
        feature_mask = FeatureMask(values, float(meta[0]), seed)
    return LoadedModel(config=config, arrays=arrays, feature_mask=feature_mask)


# ---------------------------------------------------------------------------
# band export and dataset ingestion

def export_band(cube: np.ndarray, band: int, path) -> None:
    """Write one band as a binary PGM (P5), min-max normalized to [0, 255].

    A constant band has no range and maps to mid-gray (128) by contract.
    """
    cube = np.asarray(cube, dtype=np.float64)
    if not 0 <= band < cube.shape[0]:
        raise ValueError(f"band {band} out of range for {cube.shape[0]}-band cube")
    plane = cube[band]
    lo, hi = float(plane.min()), float(plane.max())
    if hi > lo:
        pixels = np.round((plane - lo) / (hi - lo) * 255.0).astype(np.uint8)
    else:
        pixels = np.full(plane.shape, 128, dtype=np.uint8)
    h, w = plane.shape
    header = f"P5\n{w} {h}\n255\n".encode("ascii")
    Path(path).write_bytes(header + pixels.tobytes())


def ingest_dataset(directory, crop: int, bands: int, mode: str = "center",
                   seed: int = 0) -> list[np.ndarray]:
    """Load every kind-0 HSIC scene in a directory, cropped and band-limited.

    mode "center" takes the central crop; "random" draws a seeded corner per
    scene, reproducible across runs.
    """
    paths = sorted(Path(directory).glob("*.hsic"))
    if not paths:
        raise FileNotFoundError(f"no .hsic scenes found in {directory}")
    rng = np.random.default_rng(seed)
    scenes = []
    for p in paths:
        values, kind = load_cube(p)
        if kind != KIND_CUBE:
            continue
        nb, h, w = values.shape
        if h < crop or w < crop:
            raise ValueError(f"{p}: scene {h}x{w} smaller than crop {crop}")
        if bands > nb:
            raise ValueError(f"{p}: scene has {nb} bands, requested {bands}")
        if mode == "center":
            r0, c0 = (h - crop) // 2, (w - crop) // 2
        elif mode == "random":
            r0 = int(rng.integers(0, h - crop + 1))
            c0 = int(rng.integers(0, w - crop + 1))
        else:
            raise ValueError(f"unknown crop mode {mode!r}")
        scenes.append(values[:bands, r0:r0 + crop, c0:c0 + crop].copy())
    if not scenes:
        raise FileNotFoundError(f"no cube-kind scenes found in {directory}")
    return scenes


# ---------------------------------------------------------------------------
# plain key=value config files

_CONFIG_KEYS = {
    "stages": int,
    "base_channels": int,
    "levels": int,
    "blocks": int,
    "patch": int,
    "state_size": int,
    "expansion": int,
    "mask_ratio": float,
    "mask_seed": int,
    "share_weights": int,
}


def parse_config_file(path) -> dict:
    """Parse `key=value` lines ('#' starts a comment); cube uses HxWxC syntax."""
    out: dict = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        text = line.split("#", 1)[0].strip()
        if not text:
            continue
        if "=" not in text:
            raise ValueError(f"{path}:{lineno}: expected key=value, got {line!r}")
        key, value = (part.strip() for part in text.split("=", 1))
        if key == "cube":
            dims = value.lower().split("x")
            if len(dims) != 3:
                raise ValueError(f"{path}:{lineno}: cube must be HxWxC, got {value!r}")
            out["cube"] = tuple(int(d) for d in dims)
        elif key in _CONFIG_KEYS:
            out[key] = _CONFIG_KEYS[key](value)
        else:
            raise ValueError(f"{path}:{lineno}: unknown config key {key!r}")
    return out
