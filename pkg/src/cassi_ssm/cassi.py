"""CASSI forward model: coded-mask modulation, dispersion shear, detector sum.

Cubes are band-major float64 arrays of shape [bands, H, W]; measurements are
[H, W'] with W' = W + d*(bands - 1).  Band 0 is the unshifted reference, so
band b lands on detector columns [d*b, d*b + W).  Out-of-range reads are
zero (no wraparound), which is what makes the detector width formula exact.

Every function here is pure; shot noise takes an explicit seed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad

DENSE_ORACLE_LIMIT = 4096


@dataclass(frozen=True)
class SensingOperator:
    """Coded mask plus shear geometry; induces Phi, Phi^T and diag(Phi Phi^T)."""

    mask: np.ndarray
    shift_step: int
    bands: int
    ref_band: int = 0

    def __post_init__(self):
        mask = np.ascontiguousarray(self.mask, dtype=np.float64)
        if mask.ndim != 2:
            raise ValueError(f"mask must be 2-D, got shape {mask.shape}")
        if not np.isfinite(mask).all():
            raise ValueError("mask contains non-finite values")
        if self.shift_step < 0:
            raise ValueError(f"shift step must be >= 0, got {self.shift_step}")
        if self.bands < 1:
            raise ValueError(f"band count must be >= 1, got {self.bands}")
        mask.setflags(write=False)
        object.__setattr__(self, "mask", mask)

    @property
    def height(self) -> int:
        return self.mask.shape[0]

    @property
    def width(self) -> int:
        return self.mask.shape[1]

    @property
    def detector_width(self) -> int:
        return self.width + self.shift_step * (self.bands - 1)

    def check_cube(self, cube: np.ndarray) -> None:
        if cube.shape != (self.bands, self.height, self.width):
            raise ValueError(
                f"cube shape {cube.shape} does not match operator "
                f"({self.bands}, {self.height}, {self.width})")

    def check_measurement(self, meas: np.ndarray) -> None:
        if meas.shape != (self.height, self.detector_width):
            raise ValueError(
                f"measurement shape {meas.shape} does not match operator "
                f"({self.height}, {self.detector_width})")


def forward_project(cube: np.ndarray, op: SensingOperator) -> np.ndarray:
    """Modulate each band by the mask, shear by d per band, sum on the detector."""
    cube = np.asarray(cube, dtype=np.float64)
    op.check_cube(cube)
    d, w = op.shift_step, op.width
    meas = np.zeros((op.height, op.detector_width))
    for b in range(op.bands):
        meas[:, d * b:d * b + w] += op.mask * cube[b]
    return meas


def adjoint_project(meas: np.ndarray, op: SensingOperator) -> np.ndarray:
    """Apply Phi^T: un-shear the measurement into each band and re-modulate."""
    meas = np.asarray(meas, dtype=np.float64)
    op.check_measurement(meas)
    d, w = op.shift_step, op.width
    cube = np.empty((op.bands, op.height, w))
    for b in range(op.bands):
        cube[b] = op.mask * meas[:, d * b:d * b + w]
    return cube


def shift_back(meas: np.ndarray, op: SensingOperator) -> np.ndarray:
    """Reverse the dispersion only: band b reads detector columns [d*b, d*b+W)."""
    meas = np.asarray(meas, dtype=np.float64)
    op.check_measurement(meas)
    d, w = op.shift_step, op.width
    cube = np.empty((op.bands, op.height, w))
    for b in range(op.bands):
        cube[b] = meas[:, d * b:d * b + w]
    return cube


def phi_diag(op: SensingOperator) -> np.ndarray:
    """diag(Phi Phi^T) as an [H, W'] map: summed squared mask per detector pixel.

    Each Phi entry is a mask value, so the diagonal entries are sums of M^2
    over the bands that hit a given detector column.
    """
    d, w = op.shift_step, op.width
    out = np.zeros((op.height, op.detector_width))
    m2 = op.mask * op.mask
    for b in range(op.bands):
        out[:, d * b:d * b + w] += m2
    return out


def build_dense_phi(op: SensingOperator) -> np.ndarray:
    """Explicit Phi matrix, [H*W', H*W*bands]; test oracle for the operator.

    Columns follow the band-major cube flattening b*H*W + r*W + x, rows the
    row-major measurement flattening r*W' + col.
    """
    n = op.height * op.width * op.bands
    if n > DENSE_ORACLE_LIMIT:
        raise ValueError(f"dense oracle limited to {DENSE_ORACLE_LIMIT} unknowns, got {n}")
    h, w, wp, d = op.height, op.width, op.detector_width, op.shift_step
    phi = np.zeros((h * wp, n))
    for b in range(op.bands):
        for r in range(h):
            for x in range(w):
                phi[r * wp + d * b + x, b * h * w + r * w + x] = op.mask[r, x]
    return phi


def add_shot_noise(meas: np.ndarray, bits: int, seed: int) -> np.ndarray:
    """Poisson photon noise at the count scale implied by the detector bit depth.

    The measurement is scaled so its maximum maps to 2**bits - 1, sampled
    per pixel, and rescaled.  Deterministic under the seed.
    """
    if not 1 <= bits <= 16:
        raise ValueError(f"bit depth must be in [1, 16], got {bits}")
    meas = np.asarray(meas, dtype=np.float64)
    if (meas < 0).any():
        raise ValueError("measurement must be nonnegative for shot noise")
    peak = meas.max()
    if peak == 0.0:
        return meas.copy()
    full_scale = float(2 ** bits - 1)
    gain = full_scale / peak
    rng = np.random.default_rng(seed)
    counts = rng.poisson(meas * gain).astype(np.float64)
    return counts / gain


# ---------------------------------------------------------------------------
# differentiable wrappers: the adjoint pair doubles as each other's backward

def forward_project_node(cube: "ad.Node", op: SensingOperator) -> "ad.Node":
    cube = ad.as_node(cube)
    op.check_cube(cube.value)
    out_value = forward_project(cube.value, op)

    def backward(g):
        cube.accumulate(adjoint_project(g, op))

    return ad._make(out_value, (cube,), backward)


def adjoint_project_node(meas: "ad.Node", op: SensingOperator) -> "ad.Node":
    meas = ad.as_node(meas)
    op.check_measurement(meas.value)
    out_value = adjoint_project(meas.value, op)

    def backward(g):
        meas.accumulate(forward_project(g, op))

    return ad._make(out_value, (meas,), backward)


def shift_back_node(meas: "ad.Node", op: SensingOperator) -> "ad.Node":
    meas = ad.as_node(meas)
    op.check_measurement(meas.value)
    out_value = shift_back(meas.value, op)
    d, w = op.shift_step, op.width

    def backward(g):
        gm = np.zeros((op.height, op.detector_width))
        for b in range(op.bands):
            gm[:, d * b:d * b + w] += g[b]
        meas.accumulate(gm)

    return ad._make(out_value, (meas,), backward)
