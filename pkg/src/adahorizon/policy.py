"""Dual-head feed-forward policy over low-dimensional state observations.

A shared tanh MLP trunk feeds two heads: a continuous head regressing K*D
normalized actions (L1 loss) and a discrete head emitting K*D*256 token
logits (cross-entropy). Both are trained jointly on L = CE + lambda * L1
with mean reduction over the K*D positions. Gradients are analytic;
training uses Adam. Checkpoints are npz containers with a format tag.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict

import numpy as np

from .actionspace import (
    ACTION_DIM,
    DEFAULT_CHUNK_LEN,
    NUM_BINS,
    ActionChunk,
    NormStats,
    compute_norm_stats,
    dequantize,
    denormalize,
    normalize,
    quantize,
)
from .ensemble import DualChunk

CHECKPOINT_FORMAT = "policy-net/1"
STATE_DIM = 13  # ee pos/euler, grip, object pos, goal pos
DEFAULT_NUM_INSTRUCTIONS = 9


@dataclass(frozen=True)
class Observation:
    """Simulator-state observation; flattens to 13 + n_instructions features."""

    ee_pos: np.ndarray  # m
    ee_euler: np.ndarray  # rad
    grip_state: float  # 0 or 1
    object_pos: np.ndarray  # m
    goal_pos: np.ndarray  # m
    instruction_id: int

    def __post_init__(self):
        for name in ("ee_pos", "ee_euler", "object_pos", "goal_pos"):
            v = np.asarray(getattr(self, name), dtype=np.float64).reshape(3).copy()
            if not np.all(np.isfinite(v)):
                raise ValueError(f"{name} must be finite")
            v.setflags(write=False)
            object.__setattr__(self, name, v)
        g = float(self.grip_state)
        if g not in (0.0, 1.0):
            raise ValueError("grip_state must be 0 or 1")
        object.__setattr__(self, "grip_state", g)
        iid = int(self.instruction_id)
        if iid < 0:
            raise ValueError("instruction_id must be >= 0")
        object.__setattr__(self, "instruction_id", iid)

    def features(self, n_instructions: int = DEFAULT_NUM_INSTRUCTIONS) -> np.ndarray:
        if self.instruction_id >= n_instructions:
            raise ValueError("instruction_id out of range")
        onehot = np.zeros(n_instructions)
        onehot[self.instruction_id] = 1.0
        return np.concatenate(
            [self.ee_pos, self.ee_euler, [self.grip_state], self.object_pos, self.goal_pos, onehot]
        )


@dataclass
class TrainConfig:
    lam: float = 1.0  # weight on the continuous head's L1 term
    learning_rate: float = 1e-3
    batch_size: int = 192
    iterations: int = 3000
    seed: int = 0
    # Extension over the published objective: weight on the CE term, so the
    # single-head regression baseline (ce_weight=0) trains through the same
    # path as the joint objective. 1.0 reproduces L = CE + lam * L1.
    ce_weight: float = 1.0

    def validate(self) -> None:
        if self.lam < 0.0:
            raise ValueError("lam must be >= 0")
        if self.ce_weight < 0.0:
            raise ValueError("ce_weight must be >= 0")
        if self.batch_size < 1 or self.iterations < 0:
            raise ValueError("batch_size >= 1 and iterations >= 0 required")


@dataclass
class PolicyNet:
    """Trunk (2 hidden layers, tanh) + continuous and token heads.

    Weight matrices are (out, in); forward computes x @ w.T + b. The
    continuous head predicts in normalized action space; stats are carried
    on the net so outputs denormalize consistently.
    """

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    wc: np.ndarray
    bc: np.ndarray
    wd: np.ndarray
    bd: np.ndarray
    stats: NormStats
    k: int = DEFAULT_CHUNK_LEN
    d: int = ACTION_DIM
    bins: int = NUM_BINS
    n_instructions: int = DEFAULT_NUM_INSTRUCTIONS

    PARAM_NAMES = ("w1", "b1", "w2", "b2", "wc", "bc", "wd", "bd")

    def params(self) -> dict:
        return {name: getattr(self, name) for name in self.PARAM_NAMES}

    @property
    def feature_dim(self) -> int:
        return self.w1.shape[1]


def init_net(
    stats: NormStats,
    seed: int = 0,
    k: int = DEFAULT_CHUNK_LEN,
    d: int = ACTION_DIM,
    bins: int = NUM_BINS,
    n_instructions: int = DEFAULT_NUM_INSTRUCTIONS,
    hidden: int = 256,
) -> PolicyNet:
    """Random trunk, zero heads (so an untrained net emits biases / uniform logits)."""
    rng = np.random.default_rng(seed)
    f = STATE_DIM + n_instructions
    w1 = rng.normal(0.0, 1.0 / np.sqrt(f), size=(hidden, f))
    w2 = rng.normal(0.0, 1.0 / np.sqrt(hidden), size=(hidden, hidden))
    return PolicyNet(
        w1=w1,
        b1=np.zeros(hidden),
        w2=w2,
        b2=np.zeros(hidden),
        wc=np.zeros((k * d, hidden)),
        bc=np.zeros(k * d),
        wd=np.zeros((k * d * bins, hidden)),
        bd=np.zeros(k * d * bins),
        stats=stats,
        k=k,
        d=d,
        bins=bins,
        n_instructions=n_instructions,
    )


def softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    z = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def _trunk(net: PolicyNet, x: np.ndarray):
    h1 = np.tanh(x @ net.w1.T + net.b1)
    h2 = np.tanh(h1 @ net.w2.T + net.b2)
    return h1, h2


def forward(net: PolicyNet, obs: Observation) -> DualChunk:
    """One inference: continuous chunk, argmax-token discrete chunk, confidences."""
    x = obs.features(net.n_instructions)[None, :]
    _, h2 = _trunk(net, x)
    cont_n = (h2 @ net.wc.T + net.bc).reshape(net.k, net.d)
    logits = (h2 @ net.wd.T + net.bd).reshape(net.k, net.d, net.bins)
    probs = softmax(logits)
    tokens = probs.argmax(axis=-1)
    disc_conf = probs.max(axis=-1).mean(axis=1)
    cont = denormalize(cont_n, net.stats)
    disc = dequantize(tokens, net.stats, net.bins)
    return DualChunk(cont=ActionChunk(cont), disc=ActionChunk(disc), disc_conf=disc_conf)


def _prepare_targets(net: PolicyNet, chunks, stats: NormStats):
    y = np.stack([c.data for c in chunks])  # (B, K, D)
    yn = normalize(y, stats)
    tokens = quantize(yn, net.bins)
    return yn, tokens


def _loss_grads_batch(net: PolicyNet, x: np.ndarray, yn: np.ndarray, tokens: np.ndarray, lam: float, ce_weight: float = 1.0):
    """Combined loss, per-head components, parameter grads, and dlogits.

    Mean reduction over batch and the K*D positions for both heads; dlogits
    for the true token is ce_weight * (p_true - 1) / (K * D * B).
    """
    b = x.shape[0]
    kd = net.k * net.d
    h1, h2 = _trunk(net, x)
    cont = h2 @ net.wc.T + net.bc  # (B, K*D)
    logits = (h2 @ net.wd.T + net.bd).reshape(b, kd, net.bins)

    yflat = yn.reshape(b, kd)
    tflat = tokens.reshape(b, kd)

    probs = softmax(logits)
    rows = np.arange(b)[:, None]
    cols = np.arange(kd)[None, :]
    p_true = probs[rows, cols, tflat]
    ce = float(-np.log(np.maximum(p_true, 1e-300)).mean())
    l1 = float(np.abs(cont - yflat).mean())
    loss = ce_weight * ce + lam * l1

    dlogits = probs.copy()
    dlogits[rows, cols, tflat] -= 1.0
    dlogits *= ce_weight / (kd * b)
    dcont = lam * np.sign(cont - yflat) / (kd * b)

    dlog2 = dlogits.reshape(b, kd * net.bins)
    grads = {
        "wd": dlog2.T @ h2,
        "bd": dlog2.sum(axis=0),
        "wc": dcont.T @ h2,
        "bc": dcont.sum(axis=0),
    }
    dh2 = dlog2 @ net.wd + dcont @ net.wc
    da2 = dh2 * (1.0 - h2**2)
    grads["w2"] = da2.T @ h1
    grads["b2"] = da2.sum(axis=0)
    dh1 = da2 @ net.w2
    da1 = dh1 * (1.0 - h1**2)
    grads["w1"] = da1.T @ x
    grads["b1"] = da1.sum(axis=0)
    return loss, ce, l1, grads, dlogits


def loss(net: PolicyNet, obs: Observation, gt: ActionChunk, stats: NormStats | None = None, lam: float = 1.0, ce_weight: float = 1.0):
    """Returns (combined, ce, l1) on one (observation, chunk) pair."""
    stats = stats or net.stats
    x = obs.features(net.n_instructions)[None, :]
    yn, tokens = _prepare_targets(net, [gt], stats)
    total, ce, l1, _, _ = _loss_grads_batch(net, x, yn, tokens, lam, ce_weight)
    return total, ce, l1


def grad(net: PolicyNet, obs: Observation, gt: ActionChunk, stats: NormStats | None = None, lam: float = 1.0, ce_weight: float = 1.0) -> dict:
    """Analytic parameter gradients of the combined loss on one pair."""
    stats = stats or net.stats
    x = obs.features(net.n_instructions)[None, :]
    yn, tokens = _prepare_targets(net, [gt], stats)
    _, _, _, grads, _ = _loss_grads_batch(net, x, yn, tokens, lam, ce_weight)
    return grads


class Adam:
    def __init__(self, params: dict, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, params: dict, grads: dict) -> None:
        self.t += 1
        b1c = 1.0 - self.beta1**self.t
        b2c = 1.0 - self.beta2**self.t
        for k, g in grads.items():
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g * g
            params[k] -= self.lr * (self.m[k] / b1c) / (np.sqrt(self.v[k] / b2c) + self.eps)


def train(
    dataset,
    cfg: TrainConfig,
    stats: NormStats | None = None,
    n_instructions: int = DEFAULT_NUM_INSTRUCTIONS,
    log_fn=None,
    log_every: int = 50,
) -> PolicyNet:
    """Minibatch Adam on (Observation, ActionChunk) pairs; reproducible by seed.

    When stats is omitted it is computed from the dataset's actions. log_fn,
    if given, receives (iteration, loss, ce, l1) every log_every iterations
    and at the final one.
    """
    cfg.validate()
    pairs = list(dataset)
    if not pairs:
        raise ValueError("empty dataset")
    obs_list, chunks = zip(*pairs)
    if stats is None:
        stats = compute_norm_stats(np.concatenate([c.data for c in chunks]))

    k = chunks[0].k
    net = init_net(stats, seed=cfg.seed, k=k, n_instructions=n_instructions)
    x_all = np.stack([o.features(n_instructions) for o in obs_list])
    yn_all, tok_all = _prepare_targets(net, chunks, stats)

    rng = np.random.default_rng(cfg.seed)
    params = net.params()
    opt = Adam(params, lr=cfg.learning_rate)
    n = len(pairs)
    for it in range(1, cfg.iterations + 1):
        idx = rng.integers(0, n, size=min(cfg.batch_size, n))
        total, ce, l1, grads, _ = _loss_grads_batch(
            net, x_all[idx], yn_all[idx], tok_all[idx], cfg.lam, cfg.ce_weight
        )
        opt.step(params, grads)
        if log_fn is not None and (it % log_every == 0 or it == cfg.iterations):
            log_fn(it, total, ce, l1)
    return net


def dataset_loss(net: PolicyNet, dataset, lam: float = 1.0, ce_weight: float = 1.0, max_samples: int = 2048, seed: int = 0):
    """Mean (combined, ce, l1) over a sample of the dataset, for reporting."""
    pairs = list(dataset)
    if not pairs:
        raise ValueError("empty dataset")
    rng = np.random.default_rng(seed)
    if len(pairs) > max_samples:
        idx = rng.choice(len(pairs), size=max_samples, replace=False)
        pairs = [pairs[i] for i in idx]
    obs_list, chunks = zip(*pairs)
    x = np.stack([o.features(net.n_instructions) for o in obs_list])
    yn, tokens = _prepare_targets(net, chunks, net.stats)
    total, ce, l1, _, _ = _loss_grads_batch(net, x, yn, tokens, lam, ce_weight)
    return total, ce, l1


def save_checkpoint(net: PolicyNet, path, train_cfg: TrainConfig | None = None) -> None:
    meta = {
        "format": CHECKPOINT_FORMAT,
        "k": net.k,
        "d": net.d,
        "bins": net.bins,
        "n_instructions": net.n_instructions,
        "train_config": asdict(train_cfg) if train_cfg is not None else None,
    }
    np.savez(
        path,
        meta=np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8),
        stats_lo=net.stats.lo,
        stats_hi=net.stats.hi,
        **net.params(),
    )


def load_checkpoint(path) -> tuple:
    """Returns (net, meta dict). Rejects unknown format tags."""
    with np.load(path) as z:
        meta = json.loads(bytes(z["meta"]))
        if meta.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"unsupported checkpoint format {meta.get('format')!r}")
        stats = NormStats(lo=z["stats_lo"], hi=z["stats_hi"])
        net = PolicyNet(
            w1=z["w1"], b1=z["b1"], w2=z["w2"], b2=z["b2"],
            wc=z["wc"], bc=z["bc"], wd=z["wd"], bd=z["bd"],
            stats=stats,
            k=meta["k"], d=meta["d"], bins=meta["bins"],
            n_instructions=meta["n_instructions"],
        )
    return net, meta
