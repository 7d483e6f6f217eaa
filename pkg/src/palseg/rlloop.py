"""Episodic REINFORCE training of the selection policy.

Each episode streams a freshly shuffled candidate pool through the policy,
stops once the selection budget is spent, finetunes a copy of the frozen
segmenter on the selected pseudo-labels, scores it on the labeled hold-out
set, and turns the baseline-subtracted hold-out IoU into a single terminal
reward that weights every decision of the episode (discount 1). The segmenter
is reset afterwards; only the policy persists across episodes.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .errors import NumericError
from .flowprior import PatchSample
from .imagecore import BinaryMask, Image
from .policymem import (
    Decision,
    MemoryState,
    PolicyParams,
    act,
    logpi_grad,
    memory_write,
)
from .segmenter import SegmenterParams, TrainBatch, TrainSettings, seg_eval, seg_train

__all__ = [
    "EpisodeConfig",
    "RewardBaseline",
    "EpisodeResult",
    "TrainLogRow",
    "PolicyTrainResult",
    "run_episode",
    "reward",
    "policy_update",
    "train_policy",
    "finetune_on_patches",
]


@dataclass
class RewardBaseline:
    """Reward reference value: the frozen-segmenter anchor during warmup, then
    an exponential moving average of recent episode IoUs."""

    anchor: float
    mode: str = "moving"  # "moving" or "initial"
    decay: float = 0.9
    warmup: int = 50
    ema: float | None = None
    episodes_seen: int = 0

    def __post_init__(self):
        if self.mode not in ("moving", "initial"):
            raise ValueError(f"unknown baseline mode {self.mode!r}")
        if not (0.0 < self.decay < 1.0):
            raise ValueError(f"EMA decay must be in (0,1), got {self.decay}")
        if self.ema is None:
            self.ema = self.anchor

    @property
    def value(self) -> float:
        if self.mode == "initial" or self.episodes_seen < self.warmup:
            return self.anchor
        return self.ema

    def observe(self, episode_iou: float) -> None:
        self.ema = self.decay * self.ema + (1.0 - self.decay) * episode_iou
        self.episodes_seen += 1


@dataclass(frozen=True)
class EpisodeConfig:
    """Knobs of one policy-training run."""

    budget: int = 16
    finetune_steps: int = 100
    finetune_lr: float = 1e-3
    policy_lr: float = 0.2
    max_episodes: int = 1500
    baseline_mode: str = "moving"
    baseline_decay: float = 0.9
    baseline_warmup: int = 50
    seed: int = 0
    validate_every: int = 50

    def __post_init__(self):
        if self.budget < 1:
            raise ValueError(f"budget must be >= 1, got {self.budget}")
        if self.policy_lr <= 0 or self.finetune_lr <= 0:
            raise ValueError("learning rates must be > 0")
        if self.max_episodes < 0:
            raise ValueError("max_episodes must be >= 0")


@dataclass(frozen=True)
class EpisodeResult:
    """Outcome of one episode; the finetuned segmenter itself is discarded."""

    selected: tuple[tuple[int, int], ...]  # (frame_index, patch_index) pairs
    reward: float
    iou: float
    trace: tuple[Decision, ...]
    seconds: float
    no_selection: bool


@dataclass(frozen=True)
class TrainLogRow:
    episode: int
    reward: float
    iou: float
    selections: int
    seconds: float


@dataclass(frozen=True)
class PolicyTrainResult:
    policy: PolicyParams  # best-by-validation (falls back to final)
    final_policy: PolicyParams
    log: tuple[TrainLogRow, ...]
    anchor_iou: float
    best_validation_iou: float


def finetune_on_patches(
    theta0: SegmenterParams,
    patches: list[PatchSample],
    steps: int,
    lr: float,
) -> SegmenterParams:
    """Full-batch Adam finetuning of a copy of theta0 on (appearance, prior)
    pairs used as ground truth."""
    if len(patches) == 0 or steps == 0:
        return theta0.copy()
    batch = TrainBatch(tuple((p.appearance, p.prior) for p in patches))
    return seg_train(theta0, (batch for _ in range(steps)), TrainSettings(lr=lr))


def reward(
    holdout: list[tuple[Image, BinaryMask]],
    theta: SegmenterParams,
    baseline: RewardBaseline,
) -> float:
    """Hold-out IoU of theta minus the current baseline value."""
    return seg_eval(theta, holdout) - baseline.value


def run_episode(
    policy: PolicyParams,
    theta0: SegmenterParams,
    candidates: list[PatchSample],
    holdout: list[tuple[Image, BinaryMask]],
    cfg: EpisodeConfig,
    baseline: RewardBaseline,
    rng: np.random.Generator,
    deterministic: bool = False,
) -> EpisodeResult:
    """One episode over an already-ordered candidate stream.

    The stream is never advanced past the decision that spends the budget.
    theta0 is left untouched; the finetuned copy exists only to produce the
    reward.
    """
    if len(candidates) == 0:
        raise ValueError("candidate stream must be non-empty")
    if len(holdout) == 0:
        raise ValueError("hold-out set must be non-empty")
    t_start = time.perf_counter()
    mem = MemoryState(capacity=policy.cfg.slots)
    trace: list[Decision] = []
    selected: list[PatchSample] = []
    for patch in candidates:
        outcome = act(policy, mem, patch, rng=rng, deterministic=deterministic)
        trace.append(Decision(patch=patch, memory=mem, action=outcome.action))
        if outcome.action == 1:
            selected.append(patch)
            mem = memory_write(mem, outcome.feature)
            if len(selected) >= cfg.budget:
                break

    if selected:
        theta = finetune_on_patches(theta0, selected, cfg.finetune_steps, cfg.finetune_lr)
        iou = seg_eval(theta, holdout)
    else:
        # Nothing selected: the segmenter is exactly theta0.
        iou = seg_eval(theta0, holdout)
    r = iou - baseline.value
    return EpisodeResult(
        selected=tuple((p.frame_index, p.patch_index) for p in selected),
        reward=r,
        iou=iou,
        trace=tuple(trace),
        seconds=time.perf_counter() - t_start,
        no_selection=not selected,
    )


def policy_update(
    policy: PolicyParams, trace: tuple[Decision, ...] | list[Decision], r: float, lr: float
) -> PolicyParams:
    """REINFORCE ascent step: phi += lr * r * grad(sum log pi) / #decisions.

    The terminal reward weights every decision of the episode uniformly,
    rejections included.
    """
    if not np.isfinite(r):
        raise NumericError("episode reward is non-finite")
    if len(trace) == 0 or r == 0.0:
        return policy.copy()
    grads = logpi_grad(policy, list(trace))
    scale = lr * r / len(trace)
    out = {}
    for k, v in policy.as_dict().items():
        g = grads[k]
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite policy gradient in {k}")
        out[k] = v + scale * g
    return policy.with_arrays(out)


def _episode_rng(seed: int, episode: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(episode,)))


def train_policy(
    policy0: PolicyParams,
    theta0: SegmenterParams,
    pool: list[PatchSample],
    holdout: list[tuple[Image, BinaryMask]],
    cfg: EpisodeConfig,
    progress: bool = False,
) -> PolicyTrainResult:
    """Run up to cfg.max_episodes episodes with per-episode reshuffled candidate
    order; returns the best-by-validation policy and the per-episode log.

    Validation runs every cfg.validate_every episodes as a deterministic-action
    episode (no sampling, no update); the snapshot with the highest validation
    IoU wins. Fully deterministic given cfg.seed.
    """
    if len(pool) == 0:
        raise ValueError("candidate pool must be non-empty")
    anchor = seg_eval(theta0, holdout)
    baseline = RewardBaseline(
        anchor=anchor,
        mode=cfg.baseline_mode,
        decay=cfg.baseline_decay,
        warmup=cfg.baseline_warmup,
    )
    policy = policy0.copy()
    best_policy = policy0.copy()
    best_val = -np.inf
    rows: list[TrainLogRow] = []
    for ep in range(cfg.max_episodes):
        rng = _episode_rng(cfg.seed, ep)
        order = rng.permutation(len(pool))
        stream = [pool[i] for i in order]
        result = run_episode(policy, theta0, stream, holdout, cfg, baseline, rng)
        policy = policy_update(policy, result.trace, result.reward, cfg.policy_lr)
        baseline.observe(result.iou)
        rows.append(
            TrainLogRow(
                episode=ep,
                reward=result.reward,
                iou=result.iou,
                selections=len(result.selected),
                seconds=result.seconds,
            )
        )
        if cfg.validate_every > 0 and (ep + 1) % cfg.validate_every == 0:
            val = _validate(policy, theta0, pool, holdout, cfg)
            if val > best_val:
                best_val = val
                best_policy = policy.copy()
            if progress:
                sel = rows[-1].selections
                print(
                    f"[train_policy] ep {ep + 1}/{cfg.max_episodes} "
                    f"iou {result.iou:.4f} reward {result.reward:+.4f} "
                    f"sel {sel} val {val:.4f} best {best_val:.4f}",
                    flush=True,
                )
    if not np.isfinite(best_val) and rows:
        best_policy = policy.copy()
        best_val = float("nan")
    return PolicyTrainResult(
        policy=best_policy if rows else policy0.copy(),
        final_policy=policy,
        log=tuple(rows),
        anchor_iou=anchor,
        best_validation_iou=float(best_val) if rows else float("nan"),
    )


def _validate(
    policy: PolicyParams,
    theta0: SegmenterParams,
    pool: list[PatchSample],
    holdout: list[tuple[Image, BinaryMask]],
    cfg: EpisodeConfig,
) -> float:
    """Deterministic-selection episode in pool order; returns hold-out IoU."""
    mem = MemoryState(capacity=policy.cfg.slots)
    selected: list[PatchSample] = []
    scored: list[tuple[float, int]] = []
    for idx, patch in enumerate(pool):
        outcome = act(policy, mem, patch, deterministic=True)
        scored.append((outcome.p_select, idx))
        if outcome.action == 1:
            selected.append(patch)
            mem = memory_write(mem, outcome.feature)
            if len(selected) >= cfg.budget:
                break
    if not selected:
        # Degenerate policy that rejects everything: fall back to the top
        # probabilities so validation stays comparable across snapshots.
        scored.sort(key=lambda t: (-t[0], t[1]))
        selected = [pool[i] for _, i in scored[: cfg.budget]]
    theta = finetune_on_patches(theta0, selected, cfg.finetune_steps, cfg.finetune_lr)
    return seg_eval(theta, holdout)
