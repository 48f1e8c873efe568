"""Imitation learning: truncated-BPTT trajectory loss, RMSProp, early stopping, two-round curriculum."""

from __future__ import annotations

import json
import logging
import time
import warnings
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from qmdpnet import qntd
from qmdpnet import tensor as tt
from qmdpnet.dataset import Dataset, Trajectory, split_train_val
from qmdpnet.domains.core import NO_ACTION
from qmdpnet.net import NetConfig, QMDPNet, load_model, obs_bits, params_checksum, save_model
from qmdpnet.tensor import Tape, Tensor

log = logging.getLogger(__name__)

RMS_EPS = 1e-10


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 100
    lr: float | None = None  # None: 1e-3 for the tied net, 1e-4 for the untied one
    rms_decay: float = 0.9
    bptt_window: int = 4
    round_limits: tuple[int, int] = (4, 100)
    patience: int = 30
    lr_decay: float = 0.9
    max_decays: int = 15
    val_fraction: float = 0.1
    seed: int = 0
    fixed_env: bool | None = None  # None: read from the dataset manifest
    max_epochs: int | None = None  # per round; None runs until the decay budget is spent
    clip_norm: float | None = None
    time_limit: float | None = None  # wall-clock seconds per round

    def __post_init__(self):
        ints = (self.batch_size, self.bptt_window, self.patience, self.max_decays, *self.round_limits)
        if any(v < 1 for v in ints):
            raise ValueError("batch size, window, limits, patience and decays must be positive")
        if self.bptt_window > min(self.round_limits):
            raise ValueError("bptt window must not exceed the step limit")
        if self.lr is not None and self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if not 0 < self.rms_decay < 1 or not 0 < self.lr_decay < 1:
            raise ValueError("decay factors must be in (0, 1)")
        if self.max_epochs is not None and self.max_epochs < 1:
            raise ValueError("max_epochs must be positive")
        if self.time_limit is not None and self.time_limit <= 0:
            raise ValueError("time_limit must be positive")

    def learning_rate(self, variant: str) -> float:
        if self.lr is not None:
            return self.lr
        return 1e-4 if variant == "untied" else 1e-3


@dataclass
class OptState:
    acc: dict[str, np.ndarray]
    lr: float
    decays: int = 0

    @classmethod
    def fresh(cls, params: dict[str, Tensor], lr: float) -> "OptState":
        return cls({k: np.zeros_like(p.data) for k, p in params.items()}, lr)


@dataclass
class TrainReport:
    round_index: int
    step_limit: int
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    val_accuracy: list[float] = field(default_factory=list)
    lr_trace: list[float] = field(default_factory=list)
    best_epoch: int = -1
    stop_reason: str = ""
    initial_checksum: str = ""
    final_checksum: str = ""

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------- batching


@dataclass
class _Batch:
    theta: np.ndarray  # B x H x W x C
    prev: np.ndarray  # B x T
    bits: np.ndarray  # B x T x n_bits
    labels: np.ndarray  # B x T
    mask: np.ndarray  # B x T


def _make_batch(trajs: list[Trajectory], cfg: NetConfig, L: int) -> _Batch:
    if not trajs:
        raise ValueError("empty batch")
    lengths = [min(L, t.length) for t in trajs]
    if min(lengths) < 1:
        raise ValueError("empty trajectory")
    B, T = len(trajs), max(lengths)
    pad_action = cfg.stay_action if cfg.stay_action is not None else 0
    prev = np.full((B, T), pad_action, dtype=np.int64)
    obs = np.zeros((B, T), dtype=np.int64)
    labels = np.zeros((B, T), dtype=np.int64)
    mask = np.zeros((B, T))
    for i, (t, n) in enumerate(zip(trajs, lengths)):
        prev[i, :n] = t.prev_actions[:n]
        obs[i, :n] = t.observations[:n]
        obs[i, n:] = t.observations[n - 1]
        labels[i, :n] = t.actions[:n]
        mask[i, :n] = 1.0
    theta = np.stack([t.theta for t in trajs]).astype(np.float64)
    return _Batch(theta, prev, obs_bits(obs, cfg.n_obs_bits), labels, mask)


def _forward_beliefs(net: QMDPNet, batch: _Batch, z: Tensor, wos: list[Tensor]) -> list[np.ndarray]:
    """Belief values b_0..b_T, computed off-tape."""
    with tt.no_grad():
        b = net.init_belief(batch.theta)
        out = [b.data]
        for t in range(batch.prev.shape[1]):
            b = net.filter_step(b, batch.prev[:, t], None, z=z, wo=wos[t])
            out.append(b.data)
    return out


def batch_loss(net: QMDPNet, trajs: list[Trajectory], L: int, W: int) -> tuple[Tensor, int]:
    """Mean cross-entropy over supervised steps; call inside a Tape to differentiate.

    Each loss term sees gradients through at most ``W`` filter steps; the
    belief ``W`` steps before it is a constant.
    """
    if W < 1:
        raise ValueError("window must be positive")
    cfg = net.config
    batch = _make_batch(trajs, cfg, L)
    theta = Tensor(batch.theta)
    z = net.observation_map(theta)
    q = net.planner(theta)
    T = batch.prev.shape[1]
    wos = [net.observation_weights(batch.bits[:, t]) for t in range(T)]
    values = _forward_beliefs(net, batch, z, wos)
    total = None
    for t in range(1, T + 1):
        start = max(0, t - W)
        b = Tensor(values[start])
        for u in range(start, t):
            b = net.filter_step(b, batch.prev[:, u], None, z=z, wo=wos[u])
        ce = tt.cross_entropy(net.action_head(q, b), batch.labels[:, t - 1])
        term = tt.dot_const(ce, batch.mask[:, t - 1])
        total = term if total is None else tt.add(total, term)
    n = int(batch.mask.sum())
    return tt.scale(total, 1.0 / n), n


def trajectory_loss(net: QMDPNet, trajectory: Trajectory, L: int, W: int) -> Tensor:
    if trajectory.length < 1:
        raise ValueError("empty trajectory")
    return batch_loss(net, [trajectory], L, W)[0]


def evaluate_loss(net: QMDPNet, trajs: list[Trajectory], L: int, batch_size: int = 100) -> tuple[float, float]:
    """(mean step cross-entropy, greedy action accuracy) without building a tape."""
    cfg = net.config
    tot = correct = n = 0.0
    with tt.no_grad():
        for i in range(0, len(trajs), batch_size):
            batch = _make_batch(trajs[i:i + batch_size], cfg, L)
            theta = Tensor(batch.theta)
            z = net.observation_map(theta)
            q = net.planner(theta)
            b = net.init_belief(batch.theta)
            for t in range(batch.prev.shape[1]):
                b = net.filter_step(b, batch.prev[:, t], batch.bits[:, t], z=z)
                p = net.action_head(q, b).data
                m = batch.mask[:, t]
                picked = p[np.arange(len(p)), batch.labels[:, t]]
                tot += float((-np.log(picked + tt.LOG_EPS) * m).sum())
                correct += float(((p.argmax(axis=1) == batch.labels[:, t]) * m).sum())
                n += float(m.sum())
    return tot / n, correct / n


# ---------------------------------------------------------------- optimizer


def rmsprop_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: OptState,
                 decay: float = 0.9) -> None:
    """acc <- decay*acc + (1-decay)*g^2; p <- p - lr*g/sqrt(acc + 1e-10), in place."""
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise tt.NonFiniteError(f"non-finite gradient for parameter {name}")
    for name, g in grads.items():
        p = params[name]
        if g.shape != p.data.shape:
            raise ValueError(f"{name}: gradient shape {g.shape} != parameter shape {p.data.shape}")
        acc = state.acc[name]
        acc *= decay
        acc += (1.0 - decay) * g * g
        p.data = p.data - state.lr * g / np.sqrt(acc + RMS_EPS)


def compute_grads(net: QMDPNet, trajs: list[Trajectory], L: int, W: int) -> tuple[float, dict[str, np.ndarray]]:
    with Tape() as tape:
        loss, _ = batch_loss(net, trajs, L, W)
    g = tt.backward(tape, loss)
    grads = {name: g.get(p, np.zeros_like(p.data)) for name, p in net.params.items()}
    return loss.item(), grads


def _clip(grads: dict[str, np.ndarray], max_norm: float) -> None:
    norm = np.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if norm > max_norm:
        for g in grads.values():
            g *= max_norm / norm


def network_grad_check(seed: int, size: int = 4, K: int = 3, steps: int = 2, eps: float = 1e-6,
                       tolerance: float = 1e-3, max_coords: int = 20) -> tt.GradCheckReport:
    """Finite-difference check of filter steps + planner + action head + cross-entropy.

    A seeded random grid task of ``size`` x ``size`` with a randomly
    initialized network; every parameter group is checked.
    """
    rng = np.random.default_rng(seed)
    cfg = NetConfig(kind="grid", height=size, width=size, K=K, fz_hidden=8, fr_hidden=8)
    net = QMDPNet(cfg, seed=seed)
    for p in net.params.values():  # biases start at zero; move them off any ReLU kink
        if p.data.ndim == 1:
            p.data = rng.normal(0.0, 0.1, p.shape)
    obst = (rng.random((size, size)) < 0.25).astype(float)
    goal = np.zeros((size, size))
    goal[divmod(int(rng.integers(size * size)), size)] = 1.0
    belief = rng.random((size, size))
    theta = np.stack([obst, goal, belief / belief.sum()], axis=-1)
    acts = rng.integers(0, cfg.n_actions, size=steps)
    bits = obs_bits(rng.integers(0, 16, size=steps), cfg.n_obs_bits)
    labels = rng.integers(0, cfg.n_actions, size=steps)

    def build() -> Tensor:
        th = Tensor(theta)
        z = net.observation_map(th)
        q = net.planner(th)
        b = net.init_belief(theta)
        total = None
        for t in range(steps):
            b = net.filter_step(b, acts[t:t + 1], bits[t:t + 1], z=z)
            ce = tt.sum_all(tt.cross_entropy(net.action_head(q, b), labels[t:t + 1]))
            total = ce if total is None else tt.add(total, ce)
        return total

    return tt.grad_check(build, net.params, eps=eps, tolerance=tolerance, max_coords=max_coords, seed=seed)


# ---------------------------------------------------------------- rounds


def _snapshot(params: dict[str, Tensor]) -> dict[str, np.ndarray]:
    return {k: p.data.copy() for k, p in params.items()}


def _restore(params: dict[str, Tensor], snap: dict[str, np.ndarray]) -> None:
    for k, v in snap.items():
        params[k].data = v.copy()


def _split(dataset: Dataset, cfg: TrainConfig) -> tuple[list[Trajectory], list[Trajectory]]:
    if dataset.train_idx is None or dataset.val_idx is None:
        split_train_val(dataset, cfg.val_fraction, cfg.seed)
    tr = [dataset.trajectories[i] for i in dataset.train_idx]
    va = [dataset.trajectories[i] for i in dataset.val_idx]
    return tr, va


def train_round(net: QMDPNet, dataset: Dataset, cfg: TrainConfig, round_index: int,
                step_limit: int | None = None, opt: OptState | None = None) -> tuple[QMDPNet, TrainReport]:
    """Epochs of shuffled mini-batches with patience-based learning-rate decay.

    The parameters of the best validation epoch are restored at the end.
    """
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    L = step_limit if step_limit is not None else cfg.round_limits[min(round_index, 1)]
    W = min(cfg.bptt_window, L)
    train, val = _split(dataset, cfg)
    if len(train) < cfg.batch_size:
        warnings.warn(f"{len(train)} training trajectories is less than one batch of {cfg.batch_size}",
                      stacklevel=2)
    opt = opt if opt is not None else OptState.fresh(net.params, cfg.learning_rate(net.config.variant))
    rng = np.random.default_rng([cfg.seed, round_index])
    report = TrainReport(round_index, L, initial_checksum=params_checksum(net.params))
    best, best_snap = float("inf"), _snapshot(net.params)
    wait = epoch = 0
    start = time.monotonic()
    while True:
        order = rng.permutation(len(train))
        losses, weights = [], []
        for i in range(0, len(order), cfg.batch_size):
            chunk = [train[j] for j in order[i:i + cfg.batch_size]]
            loss, grads = compute_grads(net, chunk, L, W)
            if cfg.clip_norm is not None:
                _clip(grads, cfg.clip_norm)
            rmsprop_step(net.params, grads, opt, cfg.rms_decay)
            losses.append(loss)
            weights.append(len(chunk))
        vloss, vacc = evaluate_loss(net, val, L, cfg.batch_size)
        report.train_loss.append(float(np.average(losses, weights=weights)))
        report.val_loss.append(vloss)
        report.val_accuracy.append(vacc)
        report.lr_trace.append(opt.lr)
        log.info("round %d epoch %d: train %.4f val %.4f acc %.3f lr %.2e", round_index, epoch,
                 report.train_loss[-1], vloss, vacc, opt.lr)
        if vloss < best:
            best, best_snap, wait = vloss, _snapshot(net.params), 0
            report.best_epoch = epoch
        else:
            wait += 1
            if wait >= cfg.patience:
                opt.lr *= cfg.lr_decay
                opt.decays += 1
                wait = 0
                if opt.decays >= cfg.max_decays:
                    report.stop_reason = "lr_decay_budget"
                    break
        epoch += 1
        if cfg.max_epochs is not None and epoch >= cfg.max_epochs:
            report.stop_reason = "max_epochs"
            break
        if cfg.time_limit is not None and time.monotonic() - start >= cfg.time_limit:
            report.stop_reason = "time_limit"
            break
    _restore(net.params, best_snap)
    report.final_checksum = params_checksum(net.params)
    return net, report


def curriculum_train(dataset: Dataset, net_cfg: NetConfig, cfg: TrainConfig,
                     init_seed: int | None = None) -> tuple[QMDPNet, list[TrainReport]]:
    """Round 1 with the short step limit, then round 2 with the long one.

    Fixed-environment datasets run only the long round.
    """
    fixed = cfg.fixed_env
    if fixed is None:
        fixed = bool(dataset.manifest.get("domain", {}).get("fixed_env", False))
    net = QMDPNet(net_cfg, seed=cfg.seed if init_seed is None else init_seed)
    limits = cfg.round_limits[1:] if fixed else cfg.round_limits
    reports = []
    for r, L in enumerate(limits):
        round_index = r + (1 if fixed else 0)
        net, rep = train_round(net, dataset, cfg, round_index, step_limit=L)
        reports.append(rep)
    return net, reports


# ---------------------------------------------------------------- checkpoints


def save_checkpoint(directory: str | Path, net: QMDPNet, opt: OptState | None,
                    reports: list[TrainReport], train_cfg: TrainConfig | None = None) -> Path:
    d = Path(directory)
    meta = {"train_config": asdict(train_cfg) if train_cfg else None,
            "checksum": params_checksum(net.params)}
    save_model(net, d, meta)
    if opt is not None:
        od = d / "optimizer"
        od.mkdir(exist_ok=True)
        for k, a in opt.acc.items():
            qntd.save(od / f"{k}.qntd", a, "float32")
        (od / "state.json").write_text(json.dumps({"lr": opt.lr, "decays": opt.decays}, sort_keys=True))
    (d / "train_report.json").write_text(
        json.dumps([r.to_dict() for r in reports], indent=2, sort_keys=True), encoding="utf-8")
    return d


def load_checkpoint(directory: str | Path) -> tuple[QMDPNet, OptState | None, list[dict]]:
    d = Path(directory)
    net, _ = load_model(d)
    opt = None
    od = d / "optimizer"
    if od.is_dir():
        st = json.loads((od / "state.json").read_text())
        acc = {k: qntd.load(od / f"{k}.qntd", "float32", p.shape).astype(np.float64)
               for k, p in net.params.items()}
        opt = OptState(acc, st["lr"], st["decays"])
    rp = d / "train_report.json"
    reports = json.loads(rp.read_text()) if rp.exists() else []
    return net, opt, reports


def config_from_dict(d: dict) -> TrainConfig:
    d = dict(d)
    if "round_limits" in d:
        d["round_limits"] = tuple(d["round_limits"])
    return replace(TrainConfig(), **d)
