"""Dense optical flow between consecutive frames, motion-prior binarization,
and candidate patch extraction with background filtering.

The flow solver is classical Horn-Schunck: quadratic data + smoothness energy,
minimized by red-black successive over-relaxation sweeps of the standard
update equations under a fixed sweep budget (plain Jacobi needs far more than
the budgeted sweeps to converge for 2 px motions; SOR reaches the same fixed
point within it). Spatial gradients come from central differences on the mean
of the two frames, the temporal derivative is the plain frame difference; all
operations are linear in (u, v, It), so the solver is exactly antisymmetric
under swapping the frame order.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import DimensionError
from .imagecore import BinaryMask, Image, Rect, crop, crop_mask

__all__ = [
    "FlowConfig",
    "FlowField",
    "MotionPrior",
    "PatchSample",
    "estimate_flow",
    "binarize",
    "extract_patches",
    "prior_precision",
    "read_flow",
    "write_flow",
]


@dataclass(frozen=True)
class FlowConfig:
    """Horn-Schunck solver settings.

    smoothness weighs the flow-gradient penalty against the data term;
    iterations is the fixed sweep budget; omega is the over-relaxation factor
    (1.0 falls back to plain Gauss-Seidel). presmooth is the sigma of a
    Gaussian blur applied to both frames before gradient estimation, the
    classical noise/linearization treatment. data_scale multiplies intensities
    inside the data term only; it sets what one unit of the smoothness weight
    means against [0,1]-ranged inputs and was calibrated so that the default
    weight of 0.5 balances halo bleed against noise robustness.
    """

    smoothness: float = 0.5
    iterations: int = 200
    omega: float = 1.9
    presmooth: float = 1.2
    data_scale: float = 8.0

    def __post_init__(self):
        if self.smoothness <= 0.0:
            raise ValueError(f"smoothness weight must be > 0, got {self.smoothness}")
        if self.iterations < 1:
            raise ValueError(f"iteration budget must be >= 1, got {self.iterations}")
        if not (0.0 < self.omega < 2.0):
            raise ValueError(f"relaxation factor must be in (0,2), got {self.omega}")
        if self.presmooth < 0.0 or self.data_scale <= 0.0:
            raise ValueError("presmooth must be >= 0 and data_scale > 0")


@dataclass(frozen=True)
class FlowField:
    """Per-pixel displacement in pixels: u horizontal (+x right), v vertical (+y down)."""

    u: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        u = np.asarray(self.u, dtype=np.float64)
        v = np.asarray(self.v, dtype=np.float64)
        if u.ndim != 2 or u.shape != v.shape:
            raise DimensionError(f"u/v shapes differ or not 2-D: {u.shape} vs {v.shape}")
        if not (np.all(np.isfinite(u)) and np.all(np.isfinite(v))):
            raise ValueError("flow components must be finite")
        u.setflags(write=False)
        v.setflags(write=False)
        object.__setattr__(self, "u", u)
        object.__setattr__(self, "v", v)

    @property
    def shape(self) -> tuple[int, int]:
        return self.u.shape

    def magnitude(self) -> np.ndarray:
        return np.sqrt(self.u * self.u + self.v * self.v)


@dataclass(frozen=True)
class MotionPrior:
    """Binarized flow map: mask bit is 1 exactly where flow magnitude > tau."""

    mask: BinaryMask
    tau: float


@dataclass(frozen=True)
class PatchSample:
    """One selection candidate: a patch region with its appearance and prior crop.

    frame_index is a global index into the candidate pool's frame list;
    patch_index is the row-major tile number within the frame, assigned before
    background filtering.
    """

    frame_index: int
    patch_index: int
    region: Rect
    appearance: Image
    prior: BinaryMask

    def __post_init__(self):
        if self.appearance.shape != (self.region.h, self.region.w):
            raise DimensionError("appearance shape does not match region extent")
        if self.prior.shape != (self.region.h, self.region.w):
            raise DimensionError("prior shape does not match region extent")


def _central_diff(a: np.ndarray, axis: int) -> np.ndarray:
    """Central differences with one-sided differences at the borders."""
    return np.gradient(a, axis=axis)


def estimate_flow(frame_a: Image, frame_b: Image, cfg: FlowConfig = FlowConfig()) -> FlowField:
    """Dense Horn-Schunck flow carrying frame_a pixels onto frame_b."""
    if frame_a.shape != frame_b.shape:
        raise DimensionError(f"frame shapes differ: {frame_a.shape} vs {frame_b.shape}")
    a = frame_a.data * cfg.data_scale
    b = frame_b.data * cfg.data_scale
    if cfg.presmooth > 0.0:
        a = ndimage.gaussian_filter(a, cfg.presmooth)
        b = ndimage.gaussian_filter(b, cfg.presmooth)
    mean = 0.5 * (a + b)
    ix = _central_diff(mean, axis=1)
    iy = _central_diff(mean, axis=0)
    it = b - a
    denom = cfg.smoothness + ix * ix + iy * iy

    h, w = a.shape
    ys, xs = np.mgrid[0:h, 0:w]
    phases = ((ys + xs) % 2 == 0, (ys + xs) % 2 == 1)
    u = np.zeros_like(a)
    v = np.zeros_like(a)
    for _ in range(cfg.iterations):
        for phase in phases:
            u_bar = _neighbor_mean(u)
            v_bar = _neighbor_mean(v)
            alpha = (ix * u_bar + iy * v_bar + it) / denom
            u_new = u_bar - alpha * ix
            v_new = v_bar - alpha * iy
            u[phase] += cfg.omega * (u_new[phase] - u[phase])
            v[phase] += cfg.omega * (v_new[phase] - v[phase])
    return FlowField(u, v)


def _neighbor_mean(a: np.ndarray) -> np.ndarray:
    """4-neighbor average with replicated borders."""
    p = np.pad(a, 1, mode="edge")
    return 0.25 * (p[:-2, 1:-1] + p[2:, 1:-1] + p[1:-1, :-2] + p[1:-1, 2:])


def binarize(flow: FlowField, tau: float) -> MotionPrior:
    """Threshold flow magnitude: bit = 1 iff magnitude strictly exceeds tau."""
    if tau < 0.0:
        raise ValueError(f"tau must be >= 0, got {tau}")
    bits = (flow.magnitude() > tau).astype(np.uint8)
    return MotionPrior(BinaryMask(bits), tau)


def extract_patches(
    frame: Image,
    prior: MotionPrior,
    grid: int,
    frame_index: int = 0,
) -> list[PatchSample]:
    """Tile the frame into non-overlapping grid x grid patches and keep the ones
    whose prior contains at least one foreground pixel.

    Tiles are numbered row-major over the full grid before filtering; a final
    partial row/column that does not fit is dropped.
    """
    h, w = frame.shape
    if prior.mask.shape != (h, w):
        raise DimensionError(f"prior shape {prior.mask.shape} does not match frame {h}x{w}")
    if grid < 1 or grid > h or grid > w:
        raise ValueError(f"patch grid {grid} does not fit a {w}x{h} frame")
    out: list[PatchSample] = []
    n = 0
    for ty in range(h // grid):
        for tx in range(w // grid):
            r = Rect(tx * grid, ty * grid, grid, grid)
            prior_patch = crop_mask(prior.mask, r)
            if prior_patch.foreground_count() > 0:
                out.append(
                    PatchSample(
                        frame_index=frame_index,
                        patch_index=n,
                        region=r,
                        appearance=crop(frame, r),
                        prior=prior_patch,
                    )
                )
            n += 1
    return out


def prior_precision(prior_patch: BinaryMask, gt_patch: BinaryMask) -> float:
    """TP/(TP+FP) of a prior against ground truth; 0.0 for an empty prior."""
    if prior_patch.shape != gt_patch.shape:
        raise DimensionError(f"shapes differ: {prior_patch.shape} vs {gt_patch.shape}")
    p = prior_patch.bits.astype(bool)
    total = np.count_nonzero(p)
    if total == 0:
        return 0.0
    tp = np.count_nonzero(p & gt_patch.bits.astype(bool))
    return tp / total


# ---------------------------------------------------------------------------
# PFL1 flow files: 16-byte header = magic "PFL1", width and height as
# little-endian uint32, 4 reserved zero bytes; then the u plane followed by the
# v plane, row-major little-endian float32.
# ---------------------------------------------------------------------------

_PFL_MAGIC = b"PFL1"


def write_flow(flow: FlowField, path) -> None:
    h, w = flow.shape
    with open(path, "wb") as f:
        f.write(_PFL_MAGIC)
        f.write(struct.pack("<II", w, h))
        f.write(b"\x00" * 4)
        f.write(flow.u.astype("<f4").tobytes())
        f.write(flow.v.astype("<f4").tobytes())


def read_flow(path) -> FlowField:
    with open(path, "rb") as f:
        header = f.read(16)
        if len(header) != 16 or header[:4] != _PFL_MAGIC:
            raise ValueError(f"{path}: not a PFL1 flow file")
        w, h = struct.unpack("<II", header[4:12])
        plane = w * h * 4
        u = np.frombuffer(f.read(plane), dtype="<f4").reshape(h, w)
        v = np.frombuffer(f.read(plane), dtype="<f4").reshape(h, w)
    return FlowField(u.astype(np.float64), v.astype(np.float64))
