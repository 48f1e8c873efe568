"""The QMDP-net: a differentiable Bayes filter and a value-iteration planner.

Tensors are batched as B x H x W x C. Channel layouts:

* belief          H x W x headings
* filter kernel   3 x 3 x headings x (A * headings), action-major: channel a*Hd + h'
* Q, R            H x W x (headings * A), heading-major: channel h*A + a
* Z               H x W x (|O| * headings), observation-major: channel o*Hd + h

Kernel constraints live in the forward graph: raw parameters are
unconstrained logits and :meth:`QMDPNet.filter_kernel` /
:meth:`QMDPNet.planner_kernel` apply the softmax. The f_Z and f_R stacks see
theta plus a constant all-ones channel; zero padding turns that channel into
an indicator of the map edge.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from qmdpnet import qntd
from qmdpnet import tensor as tt
from qmdpnet.domains.core import DIRS, NO_ACTION, GridEnv, TaskParams
from qmdpnet.pomdp import TabularPOMDP
from qmdpnet.tensor import Tensor

MODEL_FORMAT_VERSION = 1
KINDS = {"grid": (1, 5, 4), "maze": (4, 4, 4), "hallway2": (4, 5, 4), "grasp": (1, 4, 6)}


class UnsupportedVariantError(ValueError):
    pass


class InjectionError(ValueError):
    """The true model cannot be expressed by the network's local, stationary kernels."""


@dataclass(frozen=True)
class NetConfig:
    kind: str = "grid"
    height: int = 10
    width: int = 10
    K: int = 30
    variant: str = "tied"
    n_obs_model: int | None = None
    ft_kernel: int = 3
    fz_kernel: int | None = None
    fr_kernel: int = 3
    fz_hidden: int = 150
    fr_hidden: int = 150
    fo_hidden: int = 17
    fz_activation: str = "linear"
    fr_activation: str = "relu"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown kind {self.kind!r}")
        if self.K < 1:
            raise ValueError("K must be at least 1")
        if self.variant not in ("tied", "untied"):
            raise ValueError("variant must be 'tied' or 'untied'")
        for k in (self.ft_kernel, self.fz_size, self.fr_kernel):
            if k % 2 == 0 or k < 1:
                raise ValueError(f"kernel sizes must be odd, got {k}")
        for act in (self.fz_activation, self.fr_activation):
            if act not in ("linear", "relu", "tanh", "sigmoid"):
                raise ValueError(f"unknown activation {act!r}")

    @property
    def headings(self) -> int:
        return KINDS[self.kind][0]

    @property
    def n_actions(self) -> int:
        return KINDS[self.kind][1]

    @property
    def n_obs_bits(self) -> int:
        return KINDS[self.kind][2]

    @property
    def n_obs(self) -> int:
        if self.n_obs_model is not None:
            return self.n_obs_model
        return 16 if self.kind == "grasp" else 17

    @property
    def fz_size(self) -> int:
        if self.fz_kernel is not None:
            return self.fz_kernel
        return 5 if self.kind == "grasp" else 3

    @property
    def theta_channels(self) -> int:
        return 2 + self.headings

    @property
    def stay_action(self) -> int | None:
        return None if self.kind == "grasp" else self.n_actions - 1

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "NetConfig":
        return cls(**d)

    @classmethod
    def for_env(cls, env: GridEnv, **kw) -> "NetConfig":
        return cls(kind=env.kind, height=env.height, width=env.width, **kw)


def param_shapes(cfg: NetConfig) -> dict[str, tuple[int, ...]]:
    Hd, A, O, nb = cfg.headings, cfg.n_actions, cfg.n_obs, cfg.n_obs_bits
    cin = cfg.theta_channels + 1
    kt = cfg.ft_kernel
    shapes = {"fT": (kt, kt, Hd, A * Hd)}
    if cfg.variant == "tied":
        shapes["fTp"] = (kt, kt, Hd, Hd * A)
    else:
        for k in range(cfg.K):
            shapes[f"fTp_{k}"] = (kt, kt, Hd, Hd * A)
    kz, kr = cfg.fz_size, cfg.fr_kernel
    shapes.update({
        "fZ_w1": (kz, kz, cin, cfg.fz_hidden), "fZ_b1": (cfg.fz_hidden,),
        "fZ_w2": (1, 1, cfg.fz_hidden, O * Hd), "fZ_b2": (O * Hd,),
        "fR_w1": (kr, kr, cin, cfg.fr_hidden), "fR_b1": (cfg.fr_hidden,),
        "fR_w2": (1, 1, cfg.fr_hidden, Hd * A), "fR_b2": (Hd * A,),
        "fO_w1": (nb, cfg.fo_hidden), "fO_b1": (cfg.fo_hidden,),
        "fO_w2": (cfg.fo_hidden, O), "fO_b2": (O,),
        "fPi_w": (A, A), "fPi_b": (A,),
    })
    return shapes


def _fans(shape: tuple[int, ...]) -> int:
    if len(shape) == 4:
        kh, kw, ci, co = shape
        return kh * kw * (ci + co)
    return shape[0] + shape[1]


def init_params(cfg: NetConfig, seed: int = 0) -> dict[str, Tensor]:
    """Uniform(+-sqrt(6 / (fan_in + fan_out))) weights and logits, zero biases."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(cfg).items():
        if len(shape) == 1:
            data = np.zeros(shape)
        else:
            lim = np.sqrt(6.0 / _fans(shape))
            data = rng.uniform(-lim, lim, size=shape)
        params[name] = Tensor(data, requires_grad=True, name=name)
    return params


def params_checksum(params: dict[str, Tensor]) -> str:
    h = hashlib.sha256()
    for name in sorted(params):
        h.update(name.encode())
        h.update(np.ascontiguousarray(params[name].data).tobytes())
    return h.hexdigest()


def obs_bits(observations, n_bits: int) -> np.ndarray:
    """Bit-vector view (..., n_bits) of observation indices."""
    o = np.asarray(observations, dtype=np.int64)
    return ((o[..., None] >> np.arange(n_bits)) & 1).astype(np.float64)


def _batched(x: np.ndarray, rank: int) -> np.ndarray:
    return x[None] if x.ndim == rank else x


class QMDPNet:
    def __init__(self, config: NetConfig, params: dict[str, Tensor] | None = None, seed: int = 0):
        self.config = config
        self.params = params if params is not None else init_params(config, seed)
        expected = param_shapes(config)
        if set(self.params) != set(expected):
            raise ValueError(f"parameter names {sorted(self.params)} do not match config")
        for name, shape in expected.items():
            if self.params[name].shape != shape:
                raise ValueError(f"{name}: shape {self.params[name].shape}, expected {shape}")

    # ------------------------------------------------------------ constrained views

    def filter_kernel(self) -> Tensor:
        """Softmax over (dx, dy, destination heading) for every (source heading, action)."""
        cfg = self.config
        k, Hd, A = cfg.ft_kernel, cfg.headings, cfg.n_actions
        x = tt.reshape(self.params["fT"], (k * k, Hd, A, Hd))
        x = tt.transpose(x, (1, 2, 0, 3))
        x = tt.reshape(x, (Hd * A, k * k * Hd))
        x = tt.softmax(x, axis=1)
        x = tt.reshape(x, (Hd, A, k * k, Hd))
        x = tt.transpose(x, (2, 0, 1, 3))
        return tt.reshape(x, (k, k, Hd, A * Hd))

    def planner_kernel(self, iteration: int = 0) -> Tensor:
        """Tied: softmax over (dx, dy, heading) per output channel. Untied: raw weights."""
        cfg = self.config
        if cfg.variant == "untied":
            return self.params[f"fTp_{iteration}"]
        k, Hd, A = cfg.ft_kernel, cfg.headings, cfg.n_actions
        x = tt.reshape(self.params["fTp"], (k * k * Hd, Hd * A))
        return tt.reshape(tt.softmax(x, axis=0), (k, k, Hd, Hd * A))

    # ------------------------------------------------------------ theta encoders

    def _theta_in(self, theta: Tensor) -> Tensor:
        d = _batched(theta.data, 3)
        ones = np.ones(d.shape[:3] + (1,))
        return Tensor(np.concatenate([d, ones], axis=3))

    def _conv_stack(self, theta: Tensor, prefix: str, activation: str) -> Tensor:
        p = self.params
        x = self._theta_in(theta)
        h = tt.add_bias(tt.conv2d(x, p[f"{prefix}_w1"]), p[f"{prefix}_b1"])
        h = tt.pointwise(h, activation)
        return tt.add_bias(tt.conv2d(h, p[f"{prefix}_w2"]), p[f"{prefix}_b2"])

    def observation_map(self, theta: Tensor) -> Tensor:
        """Z(s, o) in (0, 1): B x H x W x (|O| * headings)."""
        return tt.sigmoid(self._conv_stack(theta, "fZ", self.config.fz_activation))

    def reward_map(self, theta: Tensor) -> Tensor:
        return self._conv_stack(theta, "fR", self.config.fr_activation)

    def observation_weights(self, bits: np.ndarray) -> Tensor:
        p = self.params
        x = Tensor(np.atleast_2d(bits))
        h = tt.tanh(tt.fully_connected(x, p["fO_w1"], p["fO_b1"]))
        return tt.softmax(tt.fully_connected(h, p["fO_w2"], p["fO_b2"]), axis=-1)

    # ------------------------------------------------------------ modules

    def init_belief(self, theta) -> Tensor:
        """Copy of the belief channels (f_B is the identity); float32 storage error is renormalized."""
        d = _batched(np.asarray(theta.data if isinstance(theta, Tensor) else theta, dtype=np.float64), 3)
        b = d[..., 2:].copy()
        tot = b.sum(axis=(1, 2, 3), keepdims=True)
        if (np.abs(tot - 1.0) > 1e-6).any() or (b < 0).any():
            raise ValueError("belief channels of theta are not a distribution")
        return Tensor(b / tot)

    def filter_step(self, b: Tensor, actions, bits, theta: Tensor | None = None,
                    z: Tensor | None = None, wo: Tensor | None = None) -> Tensor:
        """One Bayes-filter step for a batch: predict with the action, correct with the observation.

        ``z`` (observation map) and ``wo`` (observation weights for ``bits``)
        may be passed in when already computed.
        """
        cfg = self.config
        Hd = cfg.headings
        if z is None:
            z = self.observation_map(theta)
        acts = np.atleast_1d(np.asarray(actions, dtype=np.int64))
        if (acts == NO_ACTION).all():
            pred = b
        elif (acts == NO_ACTION).any():
            raise ValueError("a batch must apply the prior-action skip to all items at once")
        else:
            if (acts < 0).any() or (acts >= cfg.n_actions).any():
                raise IndexError("action index out of range")
            moved = tt.conv2d(b, self.filter_kernel())
            wa = Tensor(np.eye(cfg.n_actions)[acts])
            pred = tt.weighted_channel_sum(moved, wa, block=Hd, keepdims=True)
        if wo is None:
            wo = self.observation_weights(np.asarray(bits, dtype=np.float64).reshape(len(acts), -1))
        zo = tt.weighted_channel_sum(z, wo, block=Hd, keepdims=True)
        return tt.normalize_sum1(tt.mul(pred, zo), batched=True)

    def planner(self, theta: Tensor, K: int | None = None, r: Tensor | None = None) -> Tensor:
        """K value-iteration layers from V0 = 0; returns Q_K (B x H x W x headings*A)."""
        K = self.config.K if K is None else K
        if K < 1:
            raise ValueError("K must be at least 1")
        if self.config.variant == "untied" and K != self.config.K:
            raise UnsupportedVariantError("an untied planner runs exactly its trained number of iterations")
        R = self.reward_map(theta) if r is None else r
        q = R
        tied = self.planner_kernel(0) if self.config.variant == "tied" else None
        for k in range(1, K):
            v = tt.channel_group_max(q, self.config.headings)
            kern = tied if tied is not None else self.planner_kernel(k)
            q = tt.add(R, tt.conv2d(v, kern))
        return q

    def action_head(self, q: Tensor, b: Tensor) -> Tensor:
        """softmax(f_pi(sum_s Q(s, a) b(s)))."""
        qa = tt.qmdp_contract(q, b)
        return tt.softmax(tt.fully_connected(qa, self.params["fPi_w"], self.params["fPi_b"]), axis=-1)

    def value_map(self, q: Tensor) -> np.ndarray:
        return tt.channel_group_max(q, self.config.headings).data

    # ------------------------------------------------------------ transfer

    def expand_K(self, K_new: int) -> "QMDPNet":
        """Same parameters (shared, not copied), planner depth ``K_new``."""
        if self.config.variant != "tied":
            raise UnsupportedVariantError("only the tied variant can change its planner depth")
        return QMDPNet(replace(self.config, K=K_new), self.params)

    def n_parameters(self) -> int:
        return int(sum(p.data.size for p in self.params.values()))


# ---------------------------------------------------------------- policy wrapper


class NetPolicy:
    """Greedy QMDP-net policy; Q_K and Z are computed once per task."""

    def __init__(self, net: QMDPNet, K: int | None = None):
        self.net = net
        self.K = K
        self.q = self.z = self.b = None

    def reset(self, task: TaskParams) -> None:
        theta = Tensor(task.theta)
        self.q = self.net.planner(theta, self.K)
        self.z = self.net.observation_map(theta)
        self.b = self.net.init_belief(theta)

    def observe(self, prev_action: int, observation: int) -> None:
        bits = obs_bits([observation], self.net.config.n_obs_bits)
        try:
            self.b = self.net.filter_step(self.b, [prev_action], bits, z=self.z)
        except tt.DegenerateBeliefError as exc:
            from qmdpnet.pomdp import ImpossibleObservationError

            raise ImpossibleObservationError(str(exc)) from exc

    def probabilities(self) -> np.ndarray:
        return self.net.action_head(self.q, self.b).data[0]

    def act(self) -> int:
        return int(np.argmax(self.probabilities()))


# ---------------------------------------------------------------- ground-truth weights

_BIG = 1000.0  # reward penalty that pins V to 0 on obstacle and goal cells
_LOGIT_CAP = 40.0  # |logit| used for probabilities 0 and 1 in f_Z
_FO_GAIN = 40.0  # pre-activation scale of the f_O pattern detectors
_FO_OUT = 25.0  # f_O output logit magnitude (one-hot gap 50)
_LOG_ZERO = -100.0


def _logit(p: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore"):
        out = np.log(p) - np.log1p(-p)
    return np.clip(out, -_LOGIT_CAP, _LOGIT_CAP)


def _neighbour_taps(k: int) -> dict[int, tuple[int, int]]:
    c = k // 2
    return {d: (c + DIRS[d][0], c + DIRS[d][1]) for d in range(4)}


def inject_ground_truth(cfg: NetConfig, model: TabularPOMDP, env: GridEnv,
                        goal: tuple[int, int]) -> dict[str, Tensor]:
    """Weights under which the network computes the true filter and rewards of a grid model.

    Requires a grid config whose f_Z hidden layer uses ReLU (the observation
    model is an exact pattern lookup) and a model whose motion is the same
    displacement kernel at every free, non-goal cell whose target is free.
    """
    if cfg.kind != "grid" or env.kind != "grid":
        raise InjectionError("ground-truth injection is implemented for grid navigation only")
    if cfg.fz_activation != "relu" or cfg.fr_activation != "relu":
        raise InjectionError("injection needs ReLU hidden layers in f_Z and f_R")
    if cfg.fz_hidden < 16 or cfg.fr_hidden < 10 or cfg.fo_hidden < 16:
        raise InjectionError("hidden layers too narrow for the injected pattern detectors")
    if (cfg.height, cfg.width) != (env.height, env.width):
        raise InjectionError("config and environment sizes differ")
    if model.nO != 16 or cfg.n_obs < 16:
        raise InjectionError("expected a 16-symbol observation model")
    H, W, A = env.height, env.width, cfg.n_actions
    kt, kz, kr = cfg.ft_kernel, cfg.fz_size, cfg.fr_kernel
    if min(kt, kz, kr) < 3:
        raise InjectionError("kernels must be at least 3x3")

    # -- displacement kernels, checked against every representable transition row
    target, bumps = model.meta.get("target"), model.meta.get("bumps")
    if target is None:
        raise InjectionError("model lacks successor metadata; build it with build_ground_truth_pomdp")
    free = env.free_cells().reshape(-1)
    g = goal[0] * W + goal[1]
    probs = np.zeros((A, 3, 3))  # probability of displacement (dr, dc) at [1 + dr, 1 + dc]
    for a in range(A):
        rows = [s for s in range(H * W) if free[s] and s != g and not bumps[s, a]]
        if not rows:
            raise InjectionError(f"action {a} never moves freely")
        s0 = rows[0]
        ref = _displacement_row(model, a, s0, W)
        for s in rows:
            if not np.allclose(_displacement_row(model, a, s, W), ref, atol=1e-12, rtol=0):
                raise InjectionError(f"action {a} is not translation invariant (state {s})")
        probs[a] = ref
    c = kt // 2
    fT = np.full((kt, kt, 1, A), _LOG_ZERO)
    fTp = np.full((kt, kt, 1, A), _LOG_ZERO)
    for a in range(A):
        for dr in (-1, 0, 1):
            for dc in (-1, 0, 1):
                p = probs[a, 1 + dr, 1 + dc]
                if p > 0:
                    fT[c - dr, c - dc, 0, a] = np.log(p)  # the filter pushes mass along the move
                    fTp[c + dr, c + dc, 0, a] = np.log(p)  # the planner pulls values back

    cin = cfg.theta_channels + 1
    OBST, GOAL, ONES = 0, 1, cfg.theta_channels

    # -- f_Z: one ReLU unit per wall pattern, then logit(Z) per pattern
    zc = kz // 2
    taps = _neighbour_taps(kz)
    fz_w1 = np.zeros((kz, kz, cin, cfg.fz_hidden))
    fz_b1 = np.zeros(cfg.fz_hidden)
    for q in range(16):
        bits = [(q >> d) & 1 for d in range(4)]
        bias = 1.0 - sum(bits)
        for d, (i, j) in taps.items():
            sgn = 2.0 * bits[d] - 1.0
            # blocked = obstacle + (1 - ones): out of bounds counts as blocked
            fz_w1[i, j, OBST, q] += sgn
            fz_w1[i, j, ONES, q] -= sgn
            bias += sgn
        fz_w1[zc, zc, OBST, q] -= 4.0
        fz_b1[q] = bias
    zq = _pattern_likelihoods(model, free, bumps)
    fz_w2 = np.zeros((1, 1, cfg.fz_hidden, cfg.n_obs))
    fz_b2 = np.full(cfg.n_obs, -_LOGIT_CAP)
    fz_w2[0, 0, :16, :16] = _logit(zq) + _LOGIT_CAP

    # -- f_O: tanh pattern detectors, one-hot output over the first 16 symbols
    fo_w1 = np.zeros((4, cfg.fo_hidden))
    fo_b1 = np.zeros(cfg.fo_hidden)
    for q in range(16):
        bits = np.array([(q >> d) & 1 for d in range(4)], dtype=float)
        fo_w1[:, q] = _FO_GAIN * (2 * bits - 1)
        fo_b1[q] = _FO_GAIN * (0.5 - bits.sum())
    fo_w2 = np.zeros((cfg.fo_hidden, cfg.n_obs))
    fo_w2[:16, :16] = _FO_OUT * np.eye(16)
    fo_b2 = np.zeros(cfg.n_obs)
    fo_b2[:16] = 0.0
    fo_b2[16:] = -_FO_OUT

    # -- f_R: indicators for (centre blocked or goal), target blocked, target goal
    rc = kr // 2
    rtaps = _neighbour_taps(kr)
    fr_w1 = np.zeros((kr, kr, cin, cfg.fr_hidden))
    fr_b1 = np.zeros(cfg.fr_hidden)
    fr_w1[rc, rc, OBST, 0] = 1.0
    fr_w1[rc, rc, GOAL, 0] = 1.0
    for d, (i, j) in rtaps.items():
        fr_w1[i, j, OBST, 1 + d] = 1.0
        fr_w1[i, j, ONES, 1 + d] = -1.0
        fr_b1[1 + d] = 1.0
        fr_w1[i, j, GOAL, 5 + d] = 1.0
    R_free, R_bump, R_goal = _reward_levels(model, env, goal, free, bumps, target)
    fr_w2 = np.zeros((1, 1, cfg.fr_hidden, A))
    fr_b2 = np.full(A, R_free)
    stay = cfg.stay_action
    fr_w2[0, 0, 0, stay] = -R_free  # stay on obstacle/goal cells earns exactly 0
    for d in range(4):
        fr_w2[0, 0, 0, d] = -_BIG
        fr_w2[0, 0, 1 + d, d] = R_bump - R_free
        fr_w2[0, 0, 5 + d, d] = R_goal - R_free

    params = {
        "fT": fT, "fTp": fTp,
        "fZ_w1": fz_w1, "fZ_b1": fz_b1, "fZ_w2": fz_w2, "fZ_b2": fz_b2,
        "fR_w1": fr_w1, "fR_b1": fr_b1, "fR_w2": fr_w2, "fR_b2": fr_b2,
        "fO_w1": fo_w1, "fO_b1": fo_b1, "fO_w2": fo_w2, "fO_b2": fo_b2,
        "fPi_w": np.eye(A), "fPi_b": np.zeros(A),
    }
    if cfg.variant != "tied":
        raise InjectionError("injection targets the tied planner")
    return {k: Tensor(v, requires_grad=True, name=k) for k, v in params.items()}


def _displacement_row(model: TabularPOMDP, a: int, s: int, W: int) -> np.ndarray:
    t = model.T[a]
    lo, hi = t.indptr[s], t.indptr[s + 1]
    out = np.zeros((3, 3))
    r, c = divmod(s, W)
    for s2, p in zip(t.indices[lo:hi], t.data[lo:hi]):
        r2, c2 = divmod(int(s2), W)
        dr, dc = r2 - r, c2 - c
        if max(abs(dr), abs(dc)) > 1:
            raise InjectionError("transition jumps farther than one cell")
        out[1 + dr, 1 + dc] += p
    return out


def _pattern_likelihoods(model: TabularPOMDP, free: np.ndarray, bumps: np.ndarray) -> np.ndarray:
    """16 x 16 table P(o | wall pattern q), checked to be the same symmetric bit-flip noise everywhere."""
    states = np.flatnonzero(free)
    pattern = (bumps[states, :4].astype(np.int64) << np.arange(4)).sum(axis=1)
    alphabet = np.arange(16)
    ref = model.Z[0, states[0]][alphabet ^ pattern[0]]  # P(o ^ q | q) does not depend on q
    for s, q in zip(states, pattern):
        for a in range(model.nA):
            if not np.allclose(model.Z[a, s], ref[alphabet ^ q], atol=1e-15, rtol=0):
                raise InjectionError(f"observation noise at state {s} is not symmetric bit flips")
    return np.stack([ref[alphabet ^ q] for q in range(16)])


def _reward_levels(model, env, goal, free, bumps, target):
    """(free move, bump, move into goal) rewards, checked to be stationary across the map."""
    W = env.width
    g = goal[0] * W + goal[1]
    free_r, bump_r, goal_r = [], [], []
    for s in np.flatnonzero(free):
        if s == g:
            continue
        for d in range(4):
            r = model.R[s, d]
            if bumps[s, d]:
                bump_r.append(r)
            elif target[s, d] == g:
                goal_r.append(r)
            else:
                free_r.append(r)
        free_r.append(model.R[s, 4])
    levels = []
    for vals in (free_r, bump_r, goal_r):
        vals = np.array(sorted(vals))
        if vals.size and vals[-1] - vals[0] > 1e-12:
            raise InjectionError("rewards are not stationary across the map")
        levels.append(float(np.median(vals)) if vals.size else None)
    fr = levels[0]
    return fr, fr if levels[1] is None else levels[1], fr if levels[2] is None else levels[2]


# ---------------------------------------------------------------- persistence


def save_model(net: QMDPNet, directory: str | Path, metadata: dict | None = None) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    tensors = {}
    for name, p in net.params.items():
        qntd.save(d / f"{name}.qntd", p.data, "float32")
        tensors[name] = {"file": f"{name}.qntd", "dtype": "float32", "shape": list(p.shape)}
    manifest = {"format_version": MODEL_FORMAT_VERSION, "config": net.config.to_dict(),
                "tensors": tensors, "metadata": metadata or {}}
    (d / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True), encoding="utf-8")
    return d


def load_model(directory: str | Path) -> tuple[QMDPNet, dict]:
    d = Path(directory)
    try:
        manifest = json.loads((d / "manifest.json").read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ValueError(f"no manifest.json in {d}") from None
    if manifest.get("format_version") != MODEL_FORMAT_VERSION:
        raise ValueError(f"model format version {manifest.get('format_version')} != {MODEL_FORMAT_VERSION}")
    cfg = NetConfig.from_dict(manifest["config"])
    expected = param_shapes(cfg)
    params = {}
    for name, shape in expected.items():
        spec = manifest["tensors"].get(name)
        if spec is None:
            raise ValueError(f"model is missing tensor {name}")
        arr = qntd.load(d / spec["file"], spec["dtype"], tuple(shape))
        params[name] = Tensor(arr.astype(np.float64), requires_grad=True, name=name)
    return QMDPNet(cfg, params), manifest.get("metadata", {})
