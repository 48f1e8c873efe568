"""Tabular POMDP container, exact Bayes filter, value iteration and QMDP.

Transition matrices are stored sparse (one CSR matrix per action) because
navigation models are local: a 29x29 maze with 4 headings already has 3364
states and dense storage would need hundreds of megabytes per model.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
import scipy.sparse as sp

ROW_TOL = 1e-9
IMPOSSIBLE_MASS = 1e-12


class ImpossibleObservationError(ValueError):
    """The observation has zero likelihood under the current belief."""


@dataclass(frozen=True, eq=False)
class TabularPOMDP:
    """Explicit (S, A, O, T, Z, R, gamma) model.

    ``T[a]`` is an nS x nS CSR matrix with rows indexed by the source state,
    ``Z[a, s', o]`` is the probability of observing o after action a lands in
    s', and ``R[s, a]`` is the expected immediate reward.
    """

    T: tuple[sp.csr_matrix, ...]
    Z: np.ndarray
    R: np.ndarray
    gamma: float
    terminal: frozenset[int] = frozenset()
    start: np.ndarray | None = None
    state_names: tuple[str, ...] | None = None
    action_names: tuple[str, ...] | None = None
    observation_names: tuple[str, ...] | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        T = self.T
        if isinstance(T, np.ndarray):
            T = tuple(sp.csr_matrix(t) for t in T)
        else:
            T = tuple(sp.csr_matrix(t) for t in T)
        object.__setattr__(self, "T", T)
        object.__setattr__(self, "Z", np.asarray(self.Z, dtype=np.float64))
        object.__setattr__(self, "R", np.asarray(self.R, dtype=np.float64))
        object.__setattr__(self, "terminal", frozenset(int(s) for s in self.terminal))
        if self.start is not None:
            object.__setattr__(self, "start", np.asarray(self.start, dtype=np.float64))
        self.validate()

    @property
    def nS(self) -> int:
        return self.Z.shape[1]

    @property
    def nA(self) -> int:
        return self.Z.shape[0]

    @property
    def nO(self) -> int:
        return self.Z.shape[2]

    def validate(self) -> None:
        nA, nS, _ = self.Z.shape
        if len(self.T) != nA or any(t.shape != (nS, nS) for t in self.T):
            raise ValueError("T must hold one nS x nS matrix per action")
        if self.R.shape != (nS, nA):
            raise ValueError(f"R must be {nS} x {nA}, got {self.R.shape}")
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError(f"discount {self.gamma} outside (0, 1]")
        for a, t in enumerate(self.T):
            if t.nnz and t.data.min() < 0:
                raise ValueError(f"negative transition probability for action {a}")
            rows = np.asarray(t.sum(axis=1)).ravel()
            bad = np.flatnonzero(np.abs(rows - 1.0) > ROW_TOL)
            if bad.size:
                raise ValueError(f"T[{a}] row {bad[0]} sums to {rows[bad[0]]}")
        if (self.Z < 0).any():
            raise ValueError("negative observation probability")
        zs = self.Z.sum(axis=2)
        if (np.abs(zs - 1.0) > ROW_TOL).any():
            a, s = np.argwhere(np.abs(zs - 1.0) > ROW_TOL)[0]
            raise ValueError(f"Z[{a}][{s}] sums to {zs[a, s]}")
        if not np.isfinite(self.R).all():
            raise ValueError("non-finite rewards")
        for s in self.terminal:
            for a, t in enumerate(self.T):
                if abs(t[s, s] - 1.0) > ROW_TOL:
                    raise ValueError(f"terminal state {s} does not self-loop under action {a}")
        if self.start is not None:
            if self.start.shape != (nS,) or (self.start < 0).any() or abs(self.start.sum() - 1) > 1e-9:
                raise ValueError("start must be a distribution over states")

    def T_dense(self) -> np.ndarray:
        return np.stack([t.toarray() for t in self.T])

    def replace(self, **changes) -> "TabularPOMDP":
        kw = {f: getattr(self, f) for f in self.__dataclass_fields__}
        kw.update(changes)
        return TabularPOMDP(**kw)


def restrict(model: TabularPOMDP, keep: np.ndarray) -> TabularPOMDP:
    """Sub-model on the states where ``keep`` is true (they must be closed under T)."""
    keep = np.asarray(keep, dtype=bool)
    idx = np.flatnonzero(keep)
    remap = -np.ones(model.nS, dtype=np.int64)
    remap[idx] = np.arange(len(idx))
    T = tuple(t[idx][:, idx] for t in model.T)
    start = None
    if model.start is not None:
        start = model.start[idx] / model.start[idx].sum()
    return TabularPOMDP(T=T, Z=model.Z[:, idx], R=model.R[idx], gamma=model.gamma,
                        terminal=frozenset(int(remap[s]) for s in model.terminal if keep[s]), start=start)


# ---------------------------------------------------------------- filtering


def exact_filter_step(model: TabularPOMDP, belief: np.ndarray, action: int, observation: int) -> np.ndarray:
    """Posterior b'(s') proportional to Z[a, s', o] * sum_s T[a][s, s'] b(s)."""
    pred = model.T[action].T @ belief
    post = pred * model.Z[action, :, observation]
    mass = post.sum()
    if mass < IMPOSSIBLE_MASS:
        raise ImpossibleObservationError(
            f"observation {observation} after action {action} has likelihood {mass:.3g}"
        )
    return post / mass


# ---------------------------------------------------------------- planning


def bellman_backup(model: TabularPOMDP, V: np.ndarray) -> np.ndarray:
    Q = np.empty((model.nS, model.nA))
    for a, t in enumerate(model.T):
        Q[:, a] = model.R[:, a] + model.gamma * (t @ V)
    return Q


def value_iteration(
    model: TabularPOMDP,
    max_iters: int | None = None,
    tol: float = 1e-6,
    trace: bool = False,
):
    """MDP Q-values by repeated Bellman backups from V0 = 0.

    Stops after ``max_iters`` backups or once the sup-norm change in V drops
    below ``tol``. With ``trace`` also returns the list of sup-norm changes.
    """
    if max_iters is None and model.gamma >= 1.0:
        raise ValueError("undiscounted value iteration needs an iteration cap")
    V = np.zeros(model.nS)
    Q = np.zeros((model.nS, model.nA))
    deltas: list[float] = []
    k = 0
    while max_iters is None or k < max_iters:
        Q = bellman_backup(model, V)
        V_new = Q.max(axis=1)
        delta = float(np.abs(V_new - V).max())
        deltas.append(delta)
        V = V_new
        k += 1
        if delta < tol:
            break
    return (Q, deltas) if trace else Q


def qmdp_scores(Q: np.ndarray, belief: np.ndarray) -> np.ndarray:
    return belief @ Q


def qmdp_action(Q: np.ndarray, belief: np.ndarray) -> int:
    """Belief-weighted greedy action; np.argmax resolves ties to the lowest index."""
    return int(np.argmax(qmdp_scores(Q, belief)))


def discounted_return(rewards: Iterable[float], gamma: float) -> float:
    total, w = 0.0, 1.0
    for r in rewards:
        total += w * r
        w *= gamma
    return total


def sample_transition(model: TabularPOMDP, state: int, action: int, rng: np.random.Generator) -> int:
    t = model.T[action]
    lo, hi = t.indptr[state], t.indptr[state + 1]
    cols, probs = t.indices[lo:hi], t.data[lo:hi]
    return int(cols[_pick(probs, rng)])


def sample_observation(model: TabularPOMDP, state: int, action: int, rng: np.random.Generator) -> int:
    return _pick(model.Z[action, state], rng)


def _pick(probs: np.ndarray, rng: np.random.Generator) -> int:
    c = np.cumsum(probs)
    i = int(np.searchsorted(c, rng.random() * c[-1], side="right"))
    return min(i, len(probs) - 1)


# ---------------------------------------------------------------- .pomdp text format


class PomdpSyntaxError(ValueError):
    def __init__(self, line: int, msg: str):
        super().__init__(f"line {line}: {msg}")
        self.line = line


_NORM_TOL = 1e-6
_EXACT_TOL = 1e-12


class _Tokens:
    def __init__(self, text: str):
        self.items: list[tuple[str, int]] = []
        for lineno, raw in enumerate(text.splitlines(), start=1):
            body = raw.split("#", 1)[0].replace(":", " : ")
            self.items.extend((tok, lineno) for tok in body.split())
        self.pos = 0

    def peek(self) -> str | None:
        return self.items[self.pos][0] if self.pos < len(self.items) else None

    def line(self) -> int:
        if self.pos < len(self.items):
            return self.items[self.pos][1]
        return self.items[-1][1] if self.items else 0

    def next(self) -> str:
        if self.pos >= len(self.items):
            raise PomdpSyntaxError(self.line(), "unexpected end of file")
        tok = self.items[self.pos][0]
        self.pos += 1
        return tok

    def expect(self, tok: str) -> None:
        line = self.line()
        got = self.next()
        if got != tok:
            raise PomdpSyntaxError(line, f"expected {tok!r}, got {got!r}")

    def number(self) -> float:
        line = self.line()
        tok = self.next()
        try:
            return float(tok)
        except ValueError:
            raise PomdpSyntaxError(line, f"expected a number, got {tok!r}") from None

    def at_number(self) -> bool:
        tok = self.peek()
        if tok is None:
            return False
        try:
            float(tok)
        except ValueError:
            return False
        return True


_HEADERS = {"discount", "values", "states", "actions", "observations", "start"}
_ENTRIES = {"T", "O", "R"}


def parse_pomdp_file(text: str) -> TabularPOMDP:
    """Parse the classic discrete ``.pomdp`` text format.

    Unspecified transition rows default to identity, observation rows to
    uniform and rewards to 0. Rows off by more than 1e-6 from summing to one
    are rejected; smaller deviations are renormalized. States that collect a
    positive reward on entry, or that are absorbing with zero reward and
    enterable from another state, are treated as terminal goals and made
    absorbing.
    """
    tk = _Tokens(text)
    gamma = 1.0
    cost = False
    names: dict[str, list[str] | None] = {}
    counts: dict[str, int] = {}
    start_spec: tuple | None = None

    while tk.peek() in _HEADERS:
        key = tk.next()
        if key == "start":
            start_spec = _parse_start(tk)
            continue
        tk.expect(":")
        if key == "discount":
            gamma = tk.number()
        elif key == "values":
            line = tk.line()
            v = tk.next()
            if v not in ("reward", "cost"):
                raise PomdpSyntaxError(line, f"values must be reward or cost, got {v!r}")
            cost = v == "cost"
        else:
            if tk.at_number():
                line = tk.line()
                n = tk.number()
                if n != int(n) or n < 1:
                    raise PomdpSyntaxError(line, f"bad {key} count {n}")
                counts[key], names[key] = int(n), None
            else:
                lst = []
                while tk.peek() is not None and tk.peek() not in _HEADERS | _ENTRIES and tk.peek() != ":":
                    lst.append(tk.next())
                if not lst:
                    raise PomdpSyntaxError(tk.line(), f"empty {key} list")
                counts[key], names[key] = len(lst), lst
    for key in ("states", "actions", "observations"):
        if key not in counts:
            raise PomdpSyntaxError(tk.line(), f"missing {key} header")
    nS, nA, nO = counts["states"], counts["actions"], counts["observations"]
    index = {k: ({n: i for i, n in enumerate(v)} if v else {}) for k, v in names.items()}

    T = np.full((nA, nS, nS), np.nan)
    Z = np.full((nA, nS, nO), np.nan)
    Tline = np.zeros((nA, nS), dtype=np.int64)
    Zline = np.zeros((nA, nS), dtype=np.int64)
    R4: list[tuple] = []  # (a, s, s2, o, value) in file order
    start = _resolve_start(start_spec, nS, index["states"], tk)

    def ids(kind: str, n: int) -> list[int]:
        line = tk.line()
        tok = tk.next()
        if tok == "*":
            return list(range(n))
        if tok in index[kind]:
            return [index[kind][tok]]
        try:
            i = int(tok)
        except ValueError:
            raise PomdpSyntaxError(line, f"unknown {kind[:-1]} {tok!r}") from None
        if not 0 <= i < n:
            raise PomdpSyntaxError(line, f"{kind[:-1]} index {i} out of range")
        return [i]

    def matrix(rows: int, cols: int) -> tuple[np.ndarray, np.ndarray]:
        # per-row source lines so row-sum errors point at the offending row
        lines = np.zeros(rows, dtype=np.int64)
        mat = np.empty((rows, cols))
        for r in range(rows):
            lines[r] = tk.line()
            mat[r] = [tk.number() for _ in range(cols)]
        return mat, lines

    def row(n: int, line: int) -> np.ndarray:
        if tk.peek() == "uniform":
            tk.next()
            return np.full(n, 1.0 / n)
        vals = [tk.number() for _ in range(n)]
        return np.array(vals)

    while tk.peek() is not None:
        line = tk.line()
        kind = tk.next()
        if kind not in _ENTRIES:
            raise PomdpSyntaxError(line, f"unexpected token {kind!r}")
        tk.expect(":")
        acts = ids("actions", nA)
        if kind == "T":
            if tk.peek() == ":":
                tk.next()
                src = ids("states", nS)
                if tk.peek() == ":":
                    tk.next()
                    dst = ids("states", nS)
                    p = tk.number()
                    for a in acts:
                        for s in src:
                            T[a, s, dst] = p
                    Tline[np.ix_(acts, src)] = line
                elif tk.peek() == "reset":
                    tk.next()
                    for a in acts:
                        T[a, src] = start
                    Tline[np.ix_(acts, src)] = line
                else:
                    r = row(nS, line)
                    for a in acts:
                        T[a, src] = r
                    Tline[np.ix_(acts, src)] = line
            else:
                tok = tk.peek()
                mlines = np.full(nS, line, dtype=np.int64)
                if tok == "identity":
                    tk.next()
                    mat = np.eye(nS)
                elif tok == "uniform":
                    tk.next()
                    mat = np.full((nS, nS), 1.0 / nS)
                else:
                    mat, mlines = matrix(nS, nS)
                for a in acts:
                    T[a] = mat
                Tline[acts] = mlines
        elif kind == "O":
            if tk.peek() == ":":
                tk.next()
                dst = ids("states", nS)
                if tk.peek() == ":":
                    tk.next()
                    obs = ids("observations", nO)
                    p = tk.number()
                    for a in acts:
                        for s in dst:
                            Z[a, s, obs] = p
                    Zline[np.ix_(acts, dst)] = line
                else:
                    r = row(nO, line)
                    for a in acts:
                        Z[a, dst] = r
                    Zline[np.ix_(acts, dst)] = line
            else:
                mlines = np.full(nS, line, dtype=np.int64)
                if tk.peek() == "uniform":
                    tk.next()
                    mat = np.full((nS, nO), 1.0 / nO)
                else:
                    mat, mlines = matrix(nS, nO)
                for a in acts:
                    Z[a] = mat
                Zline[acts] = mlines
        else:
            tk.expect(":")
            src = ids("states", nS)
            if tk.peek() == ":":
                tk.next()
                wild = tk.peek() == "*"
                dst = ids("states", nS)
                if tk.peek() == ":":
                    tk.next()
                    obs = ids("observations", nO)
                    R4.append((acts, src, dst, obs, tk.number(), wild))
                else:
                    vals = [tk.number() for _ in range(nO)]
                    for o, v in enumerate(vals):
                        R4.append((acts, src, dst, [o], v, wild))
            else:
                vals = np.array([tk.number() for _ in range(nS * nO)]).reshape(nS, nO)
                for s2 in range(nS):
                    for o in range(nO):
                        R4.append((acts, src, [s2], [o], vals[s2, o], False))

    # unspecified entries of a partially specified row are zero; whole rows default
    for a in range(nA):
        for s in range(nS):
            if np.isnan(T[a, s]).all():
                T[a, s] = 0.0
                T[a, s, s] = 1.0
            if np.isnan(Z[a, s]).all():
                Z[a, s] = 1.0 / nO
    np.nan_to_num(T, copy=False, nan=0.0)
    np.nan_to_num(Z, copy=False, nan=0.0)
    _normalize_rows(T, "T", Tline)
    _normalize_rows(Z, "O", Zline)

    # full reward table r(a, s, s', o); later entries override earlier ones
    Rfull = np.zeros((nA, nS, nS, nO))
    specific = np.zeros((nA, nS, nS), dtype=bool)
    for acts_, src, dst, obs, v, wild in R4:
        sel = np.ix_(acts_, src, dst, obs)
        Rfull[sel] = -v if cost else v
        specific[np.ix_(acts_, src, dst)] = not wild
    R = np.einsum("ast,atz,astz->sa", T, Z, Rfull)
    flat = Rfull.reshape(nA, nS, -1)
    const = flat.min(axis=2) == flat.max(axis=2)
    R[const.T] = flat[:, :, 0].T[const.T]  # keep constant rewards exact
    moved = (T > 0) & ~np.eye(nS, dtype=bool)[None]
    entering = ((Rfull.max(axis=3) > 0) & specific & moved).any(axis=(0, 1))

    absorbing = np.all(np.isclose(T[:, np.arange(nS), np.arange(nS)], 1.0), axis=0) & np.all(R == 0.0, axis=1)
    inflow = T.sum(axis=0)
    inflow[np.arange(nS), np.arange(nS)] = 0.0
    absorbing &= inflow.sum(axis=0) > 0.0  # unreachable sinks (e.g. obstacle cells) are not goals
    terminal = np.flatnonzero(entering | absorbing)
    for g in terminal:
        T[:, g] = 0.0
        T[:, g, g] = 1.0
        R[g] = 0.0
    return TabularPOMDP(
        T=T, Z=Z, R=R, gamma=gamma, terminal=frozenset(int(g) for g in terminal), start=start,
        state_names=tuple(names["states"]) if names.get("states") else None,
        action_names=tuple(names["actions"]) if names.get("actions") else None,
        observation_names=tuple(names["observations"]) if names.get("observations") else None,
    )


def _parse_start(tk: _Tokens) -> tuple:
    line = tk.line()
    if tk.peek() in ("include", "exclude"):
        mode = tk.next()
        tk.expect(":")
        lst = []
        while tk.peek() is not None and tk.peek() not in _HEADERS | _ENTRIES:
            lst.append(tk.next())
        return (mode, lst, line)
    tk.expect(":")
    if tk.peek() == "uniform":
        tk.next()
        return ("uniform", None, line)
    if tk.at_number():
        vals = []
        while tk.at_number():
            vals.append(tk.number())
        return ("vector", vals, line)
    return ("state", [tk.next()], line)


def _resolve_start(spec, nS: int, names: dict[str, int], tk: _Tokens) -> np.ndarray | None:
    if spec is None:
        return None
    kind, vals, line = spec

    def lookup(tok: str) -> int:
        if tok in names:
            return names[tok]
        try:
            return int(tok)
        except ValueError:
            raise PomdpSyntaxError(line, f"unknown start state {tok!r}") from None

    if kind == "uniform":
        return np.full(nS, 1.0 / nS)
    if kind == "vector":
        if len(vals) == 1 and nS != 1:
            b = np.zeros(nS)
            b[int(vals[0])] = 1.0
            return b
        if len(vals) != nS:
            raise PomdpSyntaxError(line, f"start vector has {len(vals)} entries, expected {nS}")
        b = np.array(vals)
        s = b.sum()
        if abs(s - 1) > _NORM_TOL:
            raise PomdpSyntaxError(line, f"start distribution sums to {s}")
        return b / s if abs(s - 1) > _EXACT_TOL else b
    if kind == "state":
        b = np.zeros(nS)
        b[lookup(vals[0])] = 1.0
        return b
    mask = np.zeros(nS, dtype=bool)
    for tok in vals:
        mask[lookup(tok)] = True
    if kind == "exclude":
        mask = ~mask
    return mask / mask.sum()


def _normalize_rows(M: np.ndarray, label: str, lines: np.ndarray) -> None:
    sums = M.sum(axis=-1)
    bad = np.abs(sums - 1.0) > _NORM_TOL
    if bad.any():
        a, s = np.argwhere(bad)[0]
        raise PomdpSyntaxError(int(lines[a, s]), f"{label}: row for action {a}, state {s} sums to {sums[a, s]:.12g}")
    fix = np.abs(sums - 1.0) > _EXACT_TOL
    M[fix] /= sums[fix][:, None]


def format_pomdp(model: TabularPOMDP) -> str:
    """Serialize to the ``.pomdp`` text format with round-trip exact floats."""
    nS, nA, nO = model.nS, model.nA, model.nO
    out = [f"discount: {model.gamma!r}", "values: reward"]
    for key, n, nm in (("states", nS, model.state_names), ("actions", nA, model.action_names),
                       ("observations", nO, model.observation_names)):
        out.append(f"{key}: " + (" ".join(nm) if nm else str(n)))
    if model.start is not None:
        out.append("start: " + " ".join(repr(float(p)) for p in model.start))
    out.append("")
    for a, t in enumerate(model.T):
        t = t.tocsr()
        for s in range(nS):
            lo, hi = t.indptr[s], t.indptr[s + 1]
            for s2, p in zip(t.indices[lo:hi], t.data[lo:hi]):
                if p != 0.0:
                    out.append(f"T: {a} : {s} : {s2} {float(p)!r}")
    for a in range(nA):
        for s in range(nS):
            out.append(f"O: {a} : {s} " + " ".join(repr(float(p)) for p in model.Z[a, s]))
    for s in range(nS):
        for a in range(nA):
            if model.R[s, a] != 0.0:
                out.append(f"R: {a} : {s} : * : * {float(model.R[s, a])!r}")
    return "\n".join(out) + "\n"
