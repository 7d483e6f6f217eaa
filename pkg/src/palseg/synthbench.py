"""Deterministic synthetic cross-domain video benchmark.

Scenes are textured ellipse blobs drifting over a static textured background
under a stationary camera, with exact analytic ground-truth masks. The target
domain applies a severe per-pixel intensity transform (inversion + gamma +
noise) that preserves geometry, emulating an RGB-to-IR modality switch.
A controllable fraction of candidate patch priors can be corrupted
(morphology / shift / speckle) to create the good-versus-bad prior dichotomy
the selection policy has to learn.
"""
from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .flowprior import PatchSample
from .imagecore import BinaryMask, Image, read_mask, read_pgm, write_mask, write_pgm

__all__ = [
    "ROLES",
    "SceneSpec",
    "DomainTransform",
    "SplitManifest",
    "VideoData",
    "render_video",
    "rasterize_blobs",
    "generate",
    "load_video",
    "corrupt_prior",
    "corrupt_candidate_priors",
]

ROLES = ("source_train", "source_video", "source_holdout", "target_video", "target_eval")

_DEFAULT_VIDEOS = {
    "source_train": 25,
    "source_video": 12,
    "source_holdout": 2,
    "target_video": 12,
    "target_eval": 5,
}

CORRUPT_MODES = ("dilate", "erode", "shift", "speckle")


@dataclass(frozen=True)
class SceneSpec:
    """Scene geometry and texture parameters for one benchmark."""

    frame_size: int = 64
    n_blobs: int = 2
    blob_radius: tuple[float, float] = (10.0, 14.0)
    speed: tuple[float, float] = (1.0, 1.6)
    frames_per_video: int = 8
    videos_per_split: dict[str, int] = field(default_factory=lambda: dict(_DEFAULT_VIDEOS))
    background_seed: int = 0
    bg_range: tuple[float, float] = (0.05, 0.55)
    blob_range: tuple[float, float] = (0.70, 0.95)
    contrast_margin: float = 0.15
    turn_prob: float = 0.2
    bg_texture_sigma: float = 1.5
    blob_texture_sigma: float = 1.5

    def __post_init__(self):
        if self.speed[1] > 3.0:
            raise ValueError("blob speeds above 3 px/frame exceed the flow solver's range")
        if 2 * (self.blob_radius[1] + 2) >= self.frame_size:
            raise ValueError("largest blob does not fit inside the frame")
        if self.blob_range[0] - self.bg_range[1] < self.contrast_margin - 1e-9:
            raise ValueError("intensity ranges violate the configured contrast margin")
        for role in self.videos_per_split:
            if role not in ROLES:
                raise ValueError(f"unknown split role {role!r}")


@dataclass(frozen=True)
class DomainTransform:
    """Per-pixel intensity mapping applied to target-domain frames."""

    invert: bool = False
    gamma: float = 1.0
    noise_sigma: float = 0.0

    @staticmethod
    def identity() -> "DomainTransform":
        return DomainTransform()

    @staticmethod
    def ir_like() -> "DomainTransform":
        return DomainTransform(invert=True, gamma=1.6, noise_sigma=0.03)

    def apply(self, frame: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        out = 1.0 - frame if self.invert else frame.copy()
        if self.gamma != 1.0:
            out = np.power(np.clip(out, 0.0, 1.0), self.gamma)
        if self.noise_sigma > 0.0:
            out = out + rng.normal(0.0, self.noise_sigma, size=out.shape)
        return np.clip(out, 0.0, 1.0)


@dataclass(frozen=True)
class SplitManifest:
    """Role -> video directory names; video ids are globally unique."""

    root: str
    splits: dict[str, tuple[str, ...]]
    seed: int

    def video_dirs(self, role: str) -> list[str]:
        return [os.path.join(self.root, role, v) for v in self.splits.get(role, ())]


@dataclass(frozen=True)
class VideoData:
    frames: tuple[np.ndarray, ...]
    masks: tuple[np.ndarray, ...]
    # per frame, per blob: (cx, cy, rx, ry)
    trajectories: tuple[tuple[tuple[float, float, float, float], ...], ...]


def _smooth_noise(rng: np.random.Generator, shape: tuple[int, int], sigma: float,
                  lo: float, hi: float) -> np.ndarray:
    g = ndimage.gaussian_filter(rng.standard_normal(shape), sigma)
    g = g - g.min()
    peak = g.max()
    if peak > 0:
        g = g / peak
    return lo + (hi - lo) * g


def rasterize_blobs(
    size: int, blobs: tuple[tuple[float, float, float, float], ...]
) -> np.ndarray:
    """Union of analytic ellipse supports; the ground-truth mask definition."""
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64)
    mask = np.zeros((size, size), dtype=np.uint8)
    for cx, cy, rx, ry in blobs:
        inside = ((xs - cx) / rx) ** 2 + ((ys - cy) / ry) ** 2 <= 1.0
        mask[inside] = 1
    return mask


def render_video(spec: SceneSpec, seed_seq: np.random.SeedSequence) -> VideoData:
    """Pure function of (spec, seed): frames, exact masks, and trajectories."""
    rng = np.random.default_rng(seed_seq)
    size = spec.frame_size
    background = _smooth_noise(rng, (size, size), spec.bg_texture_sigma, *spec.bg_range)

    blobs = []
    for _ in range(spec.n_blobs):
        rx = rng.uniform(*spec.blob_radius)
        ry = rng.uniform(*spec.blob_radius)
        rmax = max(rx, ry)
        cx = rng.uniform(rmax + 1.5, size - rmax - 2.5)
        cy = rng.uniform(rmax + 1.5, size - rmax - 2.5)
        s = rng.uniform(*spec.speed)
        ang = rng.uniform(0.0, 2.0 * np.pi)
        tex_side = int(np.ceil(2 * rmax)) + 6
        texture = _smooth_noise(rng, (tex_side, tex_side), spec.blob_texture_sigma,
                                *spec.blob_range)
        blobs.append({
            "rx": rx, "ry": ry, "cx": cx, "cy": cy,
            "vx": s * np.cos(ang), "vy": s * np.sin(ang),
            "speed": s, "texture": texture,
        })

    frames = []
    masks = []
    traj = []
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64)
    for _t in range(spec.frames_per_video):
        frame = background.copy()
        state = []
        for blob in blobs:
            cx, cy, rx, ry = blob["cx"], blob["cy"], blob["rx"], blob["ry"]
            inside = ((xs - cx) / rx) ** 2 + ((ys - cy) / ry) ** 2 <= 1.0
            tex = blob["texture"]
            half = tex.shape[0] / 2.0
            sample = ndimage.map_coordinates(
                tex,
                [ys[inside] - cy + half, xs[inside] - cx + half],
                order=1,
                mode="nearest",
            )
            frame[inside] = sample
            state.append((cx, cy, rx, ry))
        traj.append(tuple(state))
        masks.append(rasterize_blobs(size, tuple(state)))
        frames.append(np.clip(frame, 0.0, 1.0))

        for blob in blobs:
            if rng.random() < spec.turn_prob:
                ang = rng.uniform(0.0, 2.0 * np.pi)
                blob["vx"] = blob["speed"] * np.cos(ang)
                blob["vy"] = blob["speed"] * np.sin(ang)
            rmax = max(blob["rx"], blob["ry"])
            lo, hi = rmax + 1.0, size - rmax - 2.0
            nx, ny = blob["cx"] + blob["vx"], blob["cy"] + blob["vy"]
            if nx < lo or nx > hi:
                blob["vx"] = -blob["vx"]
                nx = blob["cx"] + blob["vx"]
            if ny < lo or ny > hi:
                blob["vy"] = -blob["vy"]
                ny = blob["cy"] + blob["vy"]
            blob["cx"] = float(np.clip(nx, lo, hi))
            blob["cy"] = float(np.clip(ny, lo, hi))

    return VideoData(frames=tuple(frames), masks=tuple(masks), trajectories=tuple(traj))


def generate(
    spec: SceneSpec,
    transform: DomainTransform,
    seed: int,
    out_root,
) -> SplitManifest:
    """Write the full benchmark tree and its manifest; byte-reproducible from
    the seed. Target splits get the domain transform, source splits do not."""
    out_root = os.fspath(out_root)
    os.makedirs(out_root, exist_ok=True)
    splits: dict[str, tuple[str, ...]] = {}
    vid_counter = 0
    for role_idx, role in enumerate(ROLES):
        count = spec.videos_per_split.get(role, 0)
        names = []
        for j in range(count):
            name = f"video_{vid_counter:03d}"
            vid_counter += 1
            vdir = os.path.join(out_root, role, name)
            os.makedirs(vdir, exist_ok=True)
            data = render_video(spec, np.random.SeedSequence(entropy=seed, spawn_key=(role_idx, j)))
            t_rng = np.random.default_rng(
                np.random.SeedSequence(entropy=seed, spawn_key=(role_idx, j, 1))
            )
            for t, (frame, mask) in enumerate(zip(data.frames, data.masks)):
                if role.startswith("target"):
                    frame = transform.apply(frame, t_rng)
                write_pgm(Image(frame), os.path.join(vdir, f"frame_{t:03d}.pgm"))
                write_mask(BinaryMask(mask), os.path.join(vdir, f"mask_{t:03d}.psm"))
            names.append(name)
        splits[role] = tuple(names)
    manifest = SplitManifest(root=out_root, splits=splits, seed=seed)
    payload = {
        "seed": seed,
        "frame_size": spec.frame_size,
        "frames_per_video": spec.frames_per_video,
        "splits": {k: list(v) for k, v in splits.items()},
        "spec": dataclasses.asdict(spec),
        "transform": dataclasses.asdict(transform),
    }
    with open(os.path.join(out_root, "manifest.json"), "w") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
    return manifest


def load_manifest(root) -> SplitManifest:
    with open(os.path.join(os.fspath(root), "manifest.json")) as f:
        payload = json.load(f)
    return SplitManifest(
        root=os.fspath(root),
        splits={k: tuple(v) for k, v in payload["splits"].items()},
        seed=payload["seed"],
    )


def load_video(video_dir) -> list[tuple[Image, BinaryMask]]:
    """Read back (frame, ground-truth mask) pairs of one video directory."""
    vdir = os.fspath(video_dir)
    out = []
    t = 0
    while True:
        fpath = os.path.join(vdir, f"frame_{t:03d}.pgm")
        mpath = os.path.join(vdir, f"mask_{t:03d}.psm")
        if not os.path.exists(fpath):
            break
        out.append((read_pgm(fpath), read_mask(mpath)))
        t += 1
    return out


# ---------------------------------------------------------------------------
# Prior corruption
# ---------------------------------------------------------------------------


def corrupt_prior(mask: BinaryMask, mode: str, magnitude, seed: int = 0) -> BinaryMask:
    """Deterministic degradation of a binary mask.

    dilate/erode: 3x3 morphology, magnitude = iterations. shift: move all
    foreground right by magnitude pixels (clipped at the border). speckle:
    flip each pixel with probability magnitude using the seed. Magnitude 0 is
    the identity for every mode.
    """
    if mode not in CORRUPT_MODES:
        raise ValueError(f"unknown corruption mode {mode!r}")
    if magnitude < 0:
        raise ValueError(f"magnitude must be >= 0, got {magnitude}")
    bits = mask.bits
    if magnitude == 0:
        return BinaryMask(bits.copy())
    if mode == "dilate":
        out = ndimage.binary_dilation(bits, iterations=int(magnitude))
    elif mode == "erode":
        out = ndimage.binary_erosion(bits, iterations=int(magnitude))
    elif mode == "shift":
        s = int(magnitude)
        out = np.zeros_like(bits)
        if s < bits.shape[1]:
            out[:, s:] = bits[:, : bits.shape[1] - s]
    else:  # speckle
        rng = np.random.default_rng(seed)
        flips = rng.random(bits.shape) < float(magnitude)
        out = np.where(flips, 1 - bits, bits)
    return BinaryMask(out.astype(np.uint8))


def corrupt_candidate_priors(
    patches: list[PatchSample],
    fraction: float,
    seed: int,
) -> tuple[list[PatchSample], list[bool]]:
    """Corrupt a random fraction of candidate priors with a random mode and
    magnitude; returns the new candidate list plus per-candidate flags.

    A corruption that would empty a prior (violating the candidate invariant)
    falls back to dilating the original prior instead.
    """
    if not (0.0 <= fraction <= 1.0):
        raise ValueError(f"fraction must be in [0,1], got {fraction}")
    rng = np.random.default_rng(seed)
    out: list[PatchSample] = []
    flags: list[bool] = []
    for patch in patches:
        if rng.random() >= fraction:
            out.append(patch)
            flags.append(False)
            continue
        mode = CORRUPT_MODES[rng.integers(len(CORRUPT_MODES))]
        if mode == "dilate":
            mag = int(rng.integers(2, 5))
        elif mode == "erode":
            mag = int(rng.integers(1, 4))
        elif mode == "shift":
            mag = int(rng.integers(6, 13))
        else:
            mag = float(rng.uniform(0.2, 0.45))
        sub_seed = int(rng.integers(2**31))
        bad = corrupt_prior(patch.prior, mode, mag, seed=sub_seed)
        if bad.foreground_count() == 0:
            bad = corrupt_prior(patch.prior, "dilate", 3)
        out.append(dataclasses.replace(patch, prior=bad))
        flags.append(True)
    return out, flags
