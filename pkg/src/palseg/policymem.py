"""Selection policy: two-stream patch encoder with late fusion, a FIFO
key-value memory read by soft attention, and a Bernoulli action head.

The two conv streams embed patch appearance and motion prior separately (the
prior stream carries twice the channels), global-average-pool, and a linear
map fuses the concatenation into the content feature. The memory holds the raw
features of the last L selected patches; key/value projections are applied at
read time, which is forward-equivalent to projecting at write time for weights
that are fixed within an episode, and lets the projections accumulate gradient
from every read. Stored entries themselves are treated as constants during
backprop, so the gradient of an episode's summed log-probabilities is exactly
the sum of the per-decision gradients.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from . import nnops
from .errors import DimensionError, NumericError
from .flowprior import PatchSample

__all__ = [
    "PolicyConfig",
    "PolicyParams",
    "MemoryState",
    "ActionOutcome",
    "Decision",
    "init_policy",
    "encode",
    "memory_read",
    "memory_write",
    "act",
    "logpi_grad",
    "save_policy",
    "load_policy",
]

_LOG_EPS = 1e-7


@dataclass(frozen=True)
class PolicyConfig:
    """Dimensions of the policy network.

    feature_dim is the fused content feature length (e), memory_dim the
    key/value embedding length (d), slots the FIFO capacity (L).
    """

    patch_size: int = 32
    feature_dim: int = 64
    memory_dim: int = 32
    slots: int = 8
    head_hidden: int = 32
    app_channels: tuple[int, int] = (4, 8)
    prior_channels: tuple[int, int] = (8, 16)

    def __post_init__(self):
        if self.slots < 1:
            raise ValueError("memory needs at least one slot")
        if self.prior_channels[1] != 2 * self.app_channels[1]:
            raise ValueError("prior stream must carry twice the appearance channels")


@dataclass(frozen=True)
class PolicyParams:
    """All learnable arrays of the policy, plus its configuration."""

    cfg: PolicyConfig
    app_w1: np.ndarray
    app_w2: np.ndarray
    pri_w1: np.ndarray
    pri_w2: np.ndarray
    fuse_w: np.ndarray
    fuse_b: np.ndarray
    w_key: np.ndarray
    w_val: np.ndarray
    w_h: np.ndarray
    head_w1: np.ndarray
    head_b1: np.ndarray
    head_w2: np.ndarray
    head_b2: np.ndarray
    seed: int = 0

    def as_dict(self) -> dict[str, np.ndarray]:
        return {
            "app_w1": self.app_w1, "app_w2": self.app_w2,
            "pri_w1": self.pri_w1, "pri_w2": self.pri_w2,
            "fuse_w": self.fuse_w, "fuse_b": self.fuse_b,
            "w_key": self.w_key, "w_val": self.w_val, "w_h": self.w_h,
            "head_w1": self.head_w1, "head_b1": self.head_b1,
            "head_w2": self.head_w2, "head_b2": self.head_b2,
        }

    def with_arrays(self, arrays: dict[str, np.ndarray]) -> "PolicyParams":
        return PolicyParams(cfg=self.cfg, seed=self.seed, **arrays)

    def copy(self) -> "PolicyParams":
        return self.with_arrays({k: v.copy() for k, v in self.as_dict().items()})


@dataclass(frozen=True)
class MemoryState:
    """FIFO buffer of up to `capacity` content features of selected patches.

    Writes return a new state; an existing state is never mutated, so episode
    traces can snapshot memory by reference.
    """

    capacity: int
    entries: tuple[np.ndarray, ...] = ()

    def __post_init__(self):
        if self.capacity < 1:
            raise ValueError("memory capacity must be >= 1")
        if len(self.entries) > self.capacity:
            raise ValueError("memory overfilled")

    @property
    def fill(self) -> int:
        return len(self.entries)


@dataclass(frozen=True)
class ActionOutcome:
    """Result of one select/reject decision.

    feature caches the encoded content vector so a selection can be written to
    memory without re-encoding; attention is None when the memory was empty.
    """

    p_select: float
    action: int
    log_pi: float
    attention: np.ndarray | None
    cold: bool
    feature: np.ndarray


@dataclass(frozen=True)
class Decision:
    """One replayable step of an episode trace: inputs, memory snapshot, action."""

    patch: PatchSample
    memory: MemoryState
    action: int


def init_policy(cfg: PolicyConfig = PolicyConfig(), seed: int = 0) -> PolicyParams:
    """He-uniform conv/linear weights; the output layer starts near zero so the
    initial selection probability sits close to 0.5 everywhere."""
    rng = np.random.default_rng(seed)
    ca1, ca2 = cfg.app_channels
    cp1, cp2 = cfg.prior_channels
    e, d, hid = cfg.feature_dim, cfg.memory_dim, cfg.head_hidden
    concat = ca2 + cp2
    return PolicyParams(
        cfg=cfg,
        seed=seed,
        app_w1=nnops.he_uniform(rng, (ca1, 1, 3, 3), fan_in=9),
        app_w2=nnops.he_uniform(rng, (ca2, ca1, 3, 3), fan_in=9 * ca1),
        pri_w1=nnops.he_uniform(rng, (cp1, 1, 3, 3), fan_in=9),
        pri_w2=nnops.he_uniform(rng, (cp2, cp1, 3, 3), fan_in=9 * cp1),
        fuse_w=nnops.he_uniform(rng, (e, concat), fan_in=concat),
        fuse_b=np.zeros(e),
        w_key=nnops.he_uniform(rng, (d, e), fan_in=e),
        w_val=nnops.he_uniform(rng, (d, e), fan_in=e),
        w_h=nnops.he_uniform(rng, (d, e), fan_in=e),
        head_w1=nnops.he_uniform(rng, (hid, e + d), fan_in=e + d),
        head_b1=np.zeros(hid),
        head_w2=rng.uniform(-0.1, 0.1, size=(hid,)) / np.sqrt(hid),
        head_b2=np.zeros(()),
    )


def _stream_forward(x: np.ndarray, w1: np.ndarray, w2: np.ndarray):
    """Bias-free conv-relu-conv-relu with global average pooling; returns the
    pooled feature row and the cache needed for backprop."""
    z1 = nnops.conv2d(x, w1)
    a1 = nnops.relu(z1)
    z2 = nnops.conv2d(a1, w2)
    a2 = nnops.relu(z2)
    pooled = nnops.global_avg_pool(a2)[0]
    return pooled, (x, z1, a1, z2, a2)


def _stream_backward(cache, w1, w2, dpool: np.ndarray):
    x, z1, a1, z2, a2 = cache
    n, c, h, w = a2.shape
    da2 = nnops.global_avg_pool_backward(dpool[None, :], h, w)
    dz2 = nnops.drelu(z2, da2)
    da1, dw2, _ = nnops.conv2d_backward(a1, w2, dz2)
    dz1 = nnops.drelu(z1, da1)
    _, dw1, _ = nnops.conv2d_backward(x, w1, dz1)
    return dw1, dw2


def _check_patch(params: PolicyParams, patch: PatchSample) -> None:
    ps = params.cfg.patch_size
    if patch.appearance.shape != (ps, ps) or patch.prior.shape != (ps, ps):
        raise DimensionError(
            f"patch shape {patch.appearance.shape} does not match configured size {ps}"
        )


def _encode_forward(params: PolicyParams, patch: PatchSample):
    _check_patch(params, patch)
    xa = patch.appearance.data[None, None, :, :]
    xp = patch.prior.bits.astype(np.float64)[None, None, :, :]
    app_feat, app_cache = _stream_forward(xa, params.app_w1, params.app_w2)
    pri_feat, pri_cache = _stream_forward(xp, params.pri_w1, params.pri_w2)
    concat = np.concatenate([app_feat, pri_feat])
    e_k = params.fuse_w @ concat + params.fuse_b
    return e_k, (concat, app_cache, pri_cache)


def encode(params: PolicyParams, patch: PatchSample) -> np.ndarray:
    """Fused content feature of a (appearance, prior) patch pair."""
    e_k, _ = _encode_forward(params, patch)
    return e_k


def _read_forward(params: PolicyParams, mem: MemoryState, e_k: np.ndarray):
    if mem.fill == 0:
        return np.zeros(params.cfg.memory_dim), None
    ent = np.stack(mem.entries)  # (F, e)
    keys = ent @ params.w_key.T  # (F, d)
    vals = ent @ params.w_val.T  # (F, d)
    h = params.w_h @ e_k  # (d,)
    logits = keys @ h
    logits = logits - logits.max()
    ex = np.exp(logits)
    att = ex / ex.sum()
    o_k = att @ vals
    return o_k, (ent, keys, vals, h, att)


def memory_read(
    params: PolicyParams, mem: MemoryState, e_k: np.ndarray
) -> tuple[np.ndarray, np.ndarray | None]:
    """Soft-attention read: returns (retrieved output, attention weights).

    An empty memory is a defined cold start: the output is the zero vector and
    the attention is None.
    """
    o_k, cache = _read_forward(params, mem, e_k)
    return o_k, (cache[4] if cache is not None else None)


def memory_write(mem: MemoryState, e_k: np.ndarray) -> MemoryState:
    """Append a selected patch's feature; FIFO-evict the oldest at capacity."""
    entries = mem.entries + (np.array(e_k, dtype=np.float64, copy=True),)
    if len(entries) > mem.capacity:
        entries = entries[1:]
    return MemoryState(capacity=mem.capacity, entries=entries)


def _head_forward(params: PolicyParams, e_k: np.ndarray, o_k: np.ndarray):
    z = np.concatenate([e_k, o_k])
    pre = params.head_w1 @ z + params.head_b1
    u = nnops.relu(pre)
    logit = float(params.head_w2 @ u + params.head_b2)
    return logit, (z, pre, u)


def act(
    params: PolicyParams,
    mem: MemoryState,
    patch: PatchSample,
    rng: np.random.Generator | None = None,
    deterministic: bool = False,
) -> ActionOutcome:
    """Select-or-reject decision on one candidate patch.

    Sampling draws a ~ Bernoulli(p_select) from rng; deterministic mode takes
    a = 1 iff p_select > 0.5 (used for target-domain inference).
    """
    e_k, _ = _encode_forward(params, patch)
    o_k, att = memory_read(params, mem, e_k)
    logit, _ = _head_forward(params, e_k, o_k)
    if not np.isfinite(logit):
        raise NumericError("policy produced a non-finite action logit")
    p = float(nnops.sigmoid(np.array(logit)))
    if deterministic:
        a = int(p > 0.5)
    else:
        if rng is None:
            raise ValueError("sampling mode needs an rng")
        a = int(rng.random() < p)
    mass = p if a == 1 else 1.0 - p
    log_pi = float(np.log(max(mass, _LOG_EPS)))
    return ActionOutcome(
        p_select=p, action=a, log_pi=log_pi, attention=att, cold=mem.fill == 0, feature=e_k
    )


def logpi_grad(params: PolicyParams, trace: list[Decision]) -> dict[str, np.ndarray]:
    """Gradient of the summed log action probabilities of a trace w.r.t. all
    policy arrays. Memory entries are constants; the result is exactly the sum
    of per-decision gradients."""
    grads = {k: np.zeros_like(v) for k, v in params.as_dict().items()}
    for dec in trace:
        _accumulate_decision_grad(params, dec, grads)
    return grads


def _accumulate_decision_grad(params: PolicyParams, dec: Decision, grads: dict[str, np.ndarray]) -> None:
    e_k, (concat, app_cache, pri_cache) = _encode_forward(params, dec.patch)
    o_k, read_cache = _read_forward(params, dec.memory, e_k)
    logit, (z, pre, u) = _head_forward(params, e_k, o_k)
    p = float(nnops.sigmoid(np.array(logit)))

    a = dec.action
    mass = p if a == 1 else 1.0 - p
    if mass <= _LOG_EPS:
        return  # clamped log-mass: zero gradient
    dlogit = a - p  # d log pi / d logit for a Bernoulli head

    grads["head_w2"] += dlogit * u
    grads["head_b2"] += dlogit
    du = dlogit * params.head_w2
    dpre = np.where(pre > 0, du, 0.0)
    grads["head_w1"] += np.outer(dpre, z)
    grads["head_b1"] += dpre
    dz = params.head_w1.T @ dpre
    e = params.cfg.feature_dim
    de = dz[:e].copy()
    do = dz[e:]

    if read_cache is not None:
        ent, keys, vals, h, att = read_cache
        dvals = att[:, None] * do[None, :]
        datt = vals @ do
        dlog_att = att * (datt - float(att @ datt))
        dh = keys.T @ dlog_att
        dkeys = np.outer(dlog_att, h)
        grads["w_val"] += dvals.T @ ent
        grads["w_key"] += dkeys.T @ ent
        grads["w_h"] += np.outer(dh, e_k)
        de += params.w_h.T @ dh

    grads["fuse_w"] += np.outer(de, concat)
    grads["fuse_b"] += de
    dconcat = params.fuse_w.T @ de
    ca2 = params.cfg.app_channels[1]
    dw1a, dw2a = _stream_backward(app_cache, params.app_w1, params.app_w2, dconcat[:ca2])
    dw1p, dw2p = _stream_backward(pri_cache, params.pri_w1, params.pri_w2, dconcat[ca2:])
    grads["app_w1"] += dw1a
    grads["app_w2"] += dw2a
    grads["pri_w1"] += dw1p
    grads["pri_w2"] += dw2p


# ---------------------------------------------------------------------------
# Checkpoints: flat little-endian float32 blob + JSON sidecar (dims + seed).
# ---------------------------------------------------------------------------


def _sidecar(path) -> str:
    return os.path.splitext(os.fspath(path))[0] + ".json"


def save_policy(params: PolicyParams, path) -> None:
    arrays = params.as_dict()
    blob = np.concatenate([a.ravel() for a in arrays.values()]).astype("<f4")
    with open(path, "wb") as f:
        f.write(blob.tobytes())
    cfg = params.cfg
    meta = {
        "kind": "policy",
        "layers": [[k, list(np.shape(v))] for k, v in arrays.items()],
        "seed": params.seed,
        "cfg": {
            "patch_size": cfg.patch_size,
            "feature_dim": cfg.feature_dim,
            "memory_dim": cfg.memory_dim,
            "slots": cfg.slots,
            "head_hidden": cfg.head_hidden,
            "app_channels": list(cfg.app_channels),
            "prior_channels": list(cfg.prior_channels),
        },
    }
    with open(_sidecar(path), "w") as f:
        json.dump(meta, f, indent=2)


def load_policy(path) -> PolicyParams:
    with open(_sidecar(path)) as f:
        meta = json.load(f)
    if meta.get("kind") != "policy":
        raise ValueError(f"{path}: sidecar does not describe a policy checkpoint")
    c = meta["cfg"]
    cfg = PolicyConfig(
        patch_size=c["patch_size"],
        feature_dim=c["feature_dim"],
        memory_dim=c["memory_dim"],
        slots=c["slots"],
        head_hidden=c["head_hidden"],
        app_channels=tuple(c["app_channels"]),
        prior_channels=tuple(c["prior_channels"]),
    )
    blob = np.fromfile(path, dtype="<f4").astype(np.float64)
    arrays = {}
    off = 0
    for name, shape in meta["layers"]:
        size = int(np.prod(shape)) if shape else 1
        arrays[name] = blob[off : off + size].reshape(shape)
        off += size
    if off != blob.size:
        raise ValueError(f"{path}: blob size {blob.size} does not match sidecar shapes")
    return PolicyParams(cfg=cfg, seed=meta["seed"], **arrays)
