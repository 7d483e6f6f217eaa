"""Small trainable pixelwise foreground/background segmenter.

Fixed architecture: four 3x3 same-padding conv layers (channels 1-8-16-8-1)
with ReLU between them and a sigmoid on the final logits. Weights are
He-uniform from a seed, biases start at zero, training is Adam on mean binary
cross-entropy. Parameters are plain float64 arrays, so a snapshot is just a
copy and restoring one reproduces evaluations bit-identically.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from . import nnops
from .errors import DimensionError, NumericError
from .imagecore import BinaryMask, Image, mean_iou

__all__ = [
    "CHANNELS",
    "SegmenterParams",
    "TrainBatch",
    "TrainSettings",
    "init_segmenter",
    "seg_forward",
    "seg_loss_grad",
    "seg_train",
    "seg_eval",
    "save_segmenter",
    "load_segmenter",
]

CHANNELS = (1, 8, 16, 8, 1)
_PROB_EPS = 1e-7


@dataclass(frozen=True)
class SegmenterParams:
    """Weights of the fixed conv net plus bookkeeping (init seed, train steps)."""

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    w3: np.ndarray
    b3: np.ndarray
    w4: np.ndarray
    b4: np.ndarray
    seed: int = 0
    steps: int = 0

    def as_dict(self) -> dict[str, np.ndarray]:
        return {
            "w1": self.w1, "b1": self.b1,
            "w2": self.w2, "b2": self.b2,
            "w3": self.w3, "b3": self.b3,
            "w4": self.w4, "b4": self.b4,
        }

    def with_arrays(self, arrays: dict[str, np.ndarray], steps: int | None = None) -> "SegmenterParams":
        return SegmenterParams(
            w1=arrays["w1"], b1=arrays["b1"],
            w2=arrays["w2"], b2=arrays["b2"],
            w3=arrays["w3"], b3=arrays["b3"],
            w4=arrays["w4"], b4=arrays["b4"],
            seed=self.seed,
            steps=self.steps if steps is None else steps,
        )

    def copy(self) -> "SegmenterParams":
        return self.with_arrays({k: v.copy() for k, v in self.as_dict().items()})


@dataclass(frozen=True)
class TrainBatch:
    """Non-empty list of (image, target mask) pairs; shapes match per pair."""

    pairs: tuple[tuple[Image, BinaryMask], ...]

    def __post_init__(self):
        if len(self.pairs) == 0:
            raise ValueError("training batch must be non-empty")
        for img, tgt in self.pairs:
            if img.shape != tgt.shape:
                raise DimensionError(f"image/target shapes differ: {img.shape} vs {tgt.shape}")


@dataclass(frozen=True)
class TrainSettings:
    """Adam settings for segmenter training."""

    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError(f"learning rate must be > 0, got {self.lr}")


def init_segmenter(seed: int = 0) -> SegmenterParams:
    """He-uniform weights, zero biases, from the given seed."""
    rng = np.random.default_rng(seed)
    arrays = {}
    for i in range(4):
        cin, cout = CHANNELS[i], CHANNELS[i + 1]
        arrays[f"w{i+1}"] = nnops.he_uniform(rng, (cout, cin, 3, 3), fan_in=9 * cin)
        arrays[f"b{i+1}"] = np.zeros(cout)
    return SegmenterParams(**arrays, seed=seed, steps=0)


def _forward_batch(params: SegmenterParams, x: np.ndarray):
    """Forward on a (N,1,H,W) stack; returns probabilities and the cache."""
    z1 = nnops.conv2d(x, params.w1, params.b1)
    a1 = nnops.relu(z1)
    z2 = nnops.conv2d(a1, params.w2, params.b2)
    a2 = nnops.relu(z2)
    z3 = nnops.conv2d(a2, params.w3, params.b3)
    a3 = nnops.relu(z3)
    z4 = nnops.conv2d(a3, params.w4, params.b4)
    probs = nnops.sigmoid(z4)
    return probs, (x, z1, a1, z2, a2, z3, a3)


def seg_forward(params: SegmenterParams, img: Image) -> np.ndarray:
    """Per-pixel foreground probability grid, same shape as the input."""
    nnops.check_finite(params.as_dict(), "segmenter weights")
    probs, _ = _forward_batch(params, img.data[None, None, :, :])
    return probs[0, 0]


def _backward_batch(params: SegmenterParams, cache, dz4: np.ndarray) -> dict[str, np.ndarray]:
    x, z1, a1, z2, a2, z3, a3 = cache
    da3, dw4, db4 = nnops.conv2d_backward(a3, params.w4, dz4)
    dz3 = nnops.drelu(z3, da3)
    da2, dw3, db3 = nnops.conv2d_backward(a2, params.w3, dz3)
    dz2 = nnops.drelu(z2, da2)
    da1, dw2, db2 = nnops.conv2d_backward(a1, params.w2, dz2)
    dz1 = nnops.drelu(z1, da1)
    _, dw1, db1 = nnops.conv2d_backward(x, params.w1, dz1)
    return {
        "w1": dw1, "b1": db1,
        "w2": dw2, "b2": db2,
        "w3": dw3, "b3": db3,
        "w4": dw4, "b4": db4,
    }


def seg_loss_grad(params: SegmenterParams, batch: TrainBatch) -> tuple[float, dict[str, np.ndarray]]:
    """Mean binary cross-entropy over every pixel in the batch, plus its gradient.

    Probabilities are clamped to [1e-7, 1-1e-7] before the log; in the clamped
    region the gradient is exactly zero, matching the clamp.
    """
    nnops.check_finite(params.as_dict(), "segmenter weights")
    # Group same-shaped pairs so each group runs as one batched conv pass.
    groups: dict[tuple[int, int], list[tuple[Image, BinaryMask]]] = {}
    for img, tgt in batch.pairs:
        groups.setdefault(img.shape, []).append((img, tgt))

    total_pixels = sum(img.data.size for img, _ in batch.pairs)
    loss_sum = 0.0
    grads = {k: np.zeros_like(v) for k, v in params.as_dict().items()}
    for pairs in groups.values():
        x = np.stack([img.data for img, _ in pairs])[:, None, :, :]
        t = np.stack([tgt.bits for _, tgt in pairs]).astype(np.float64)[:, None, :, :]
        probs, cache = _forward_batch(params, x)
        pc = np.clip(probs, _PROB_EPS, 1.0 - _PROB_EPS)
        loss_sum += -np.sum(t * np.log(pc) + (1.0 - t) * np.log1p(-pc))
        inside = (probs > _PROB_EPS) & (probs < 1.0 - _PROB_EPS)
        dz4 = np.where(inside, probs - t, 0.0) / total_pixels
        for k, g in _backward_batch(params, cache, dz4).items():
            grads[k] += g
    return loss_sum / total_pixels, grads


def seg_train(
    params: SegmenterParams,
    batches: Iterable[TrainBatch],
    opt: TrainSettings = TrainSettings(),
) -> SegmenterParams:
    """Run one Adam step per batch in the stream; returns the updated parameters.

    An empty stream returns the input unchanged. Raises NumericError naming the
    step index if the loss turns non-finite.
    """
    adam = nnops.Adam(lr=opt.lr, beta1=opt.beta1, beta2=opt.beta2, eps=opt.eps)
    arrays = {k: v.copy() for k, v in params.as_dict().items()}
    current = params.with_arrays(arrays)
    step = params.steps
    for batch in batches:
        loss, grads = seg_loss_grad(current, batch)
        if not np.isfinite(loss):
            raise NumericError(f"training diverged: non-finite loss at step {step}")
        step += 1
        current = current.with_arrays(adam.step(current.as_dict(), grads), steps=step)
    return current


def seg_eval(
    params: SegmenterParams,
    eval_set: Sequence[tuple[Image, BinaryMask]],
    threshold: float = 0.5,
) -> float:
    """Mean foreground IoU of thresholded predictions over a labeled set.

    Ties at the threshold go to background (strict > comparison).
    """
    if len(eval_set) == 0:
        raise ValueError("evaluation set must be non-empty")
    preds = []
    gts = []
    for img, gt in eval_set:
        probs = seg_forward(params, img)
        preds.append(BinaryMask((probs > threshold).astype(np.uint8)))
        gts.append(gt)
    return mean_iou(preds, gts)


# ---------------------------------------------------------------------------
# Checkpoints: flat little-endian float32 blob + JSON sidecar.
# ---------------------------------------------------------------------------


def _sidecar(path) -> str:
    return os.path.splitext(os.fspath(path))[0] + ".json"


def save_segmenter(params: SegmenterParams, path) -> None:
    arrays = params.as_dict()
    blob = np.concatenate([a.ravel() for a in arrays.values()]).astype("<f4")
    with open(path, "wb") as f:
        f.write(blob.tobytes())
    meta = {
        "kind": "segmenter",
        "layers": [[k, list(v.shape)] for k, v in arrays.items()],
        "seed": params.seed,
        "steps": params.steps,
    }
    with open(_sidecar(path), "w") as f:
        json.dump(meta, f, indent=2)


def load_segmenter(path) -> SegmenterParams:
    with open(_sidecar(path)) as f:
        meta = json.load(f)
    if meta.get("kind") != "segmenter":
        raise ValueError(f"{path}: sidecar does not describe a segmenter checkpoint")
    blob = np.fromfile(path, dtype="<f4").astype(np.float64)
    arrays = {}
    off = 0
    for name, shape in meta["layers"]:
        size = int(np.prod(shape))
        arrays[name] = blob[off : off + size].reshape(shape)
        off += size
    if off != blob.size:
        raise ValueError(f"{path}: blob size {blob.size} does not match sidecar shapes")
    return SegmenterParams(**arrays, seed=meta["seed"], steps=meta["steps"])
