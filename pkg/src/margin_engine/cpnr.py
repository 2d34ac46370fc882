"""Conditional probability of negative return (CPNR) for a margin loan on a Markov price chain.

Events are judged at state level through the representative prices ``q_k``:

* day-m call region: states ``1..k_m`` with ``q_k < (w*P0 - Q0)(1+r)^m``
* day-t loss region: states ``1..a_t`` with ``q_k < (P0 - Q0)(1+r)^t``

The first-call probability is the product of pairwise conditionals
``Prob(D_m | not D_{m-1})`` built from unconditional (m-1)-step rows, then
``Prob(AB)`` weights each first-call day by the chance of landing in the loss
region at liquidation.  The loan rate equals the riskless rate throughout.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import EnumerationSizeError
from .markov import StateSpace, TransitionModel

__all__ = [
    "LoanQuery",
    "CpnrResult",
    "ExactResult",
    "CpnrGrid",
    "call_threshold_index",
    "loss_threshold_index",
    "thresholds",
    "prob_first_call",
    "prob_loss_and_call",
    "cpnr",
    "cpnr_exact_enumeration",
]


@dataclass(frozen=True)
class LoanQuery:
    """One margin loan: price P0, initial margin Q0, maintenance ratio w, daily rate r."""

    p0: float
    q0: float
    w: float
    r: float
    horizon: int
    h: int

    def __post_init__(self):
        if not self.p0 > 0:
            raise ValueError("p0 must be positive")
        if self.q0 < 0:
            raise ValueError("q0 must be nonnegative")
        if self.w < 1:
            raise ValueError("maintenance ratio w must be >= 1")
        if self.r <= -1:
            raise ValueError("daily rate must exceed -1")
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if self.h < 1:
            raise ValueError("state index h is 1-based")


@dataclass(frozen=True)
class CpnrResult:
    prob_B: float
    prob_AB: float
    cpnr: float
    per_day_call_probs: tuple[float, ...]
    survival_product: float

    def to_dict(self) -> dict:
        return {
            "prob_B": self.prob_B,
            "prob_AB": self.prob_AB,
            "cpnr": self.cpnr,
            "per_day_call_probs": list(self.per_day_call_probs),
            "survival_product": self.survival_product,
        }


@dataclass(frozen=True)
class ExactResult:
    prob_B: float
    prob_AB: float
    cpnr: float
    per_day_call_probs: tuple[float, ...]


def _count_below(q: np.ndarray, threshold: float | np.ndarray) -> np.ndarray:
    # number of representatives strictly below the threshold == largest qualifying 1-based index
    return np.searchsorted(q, threshold, side="left")


def _check_query(space: StateSpace, query: LoanQuery) -> None:
    if query.h > space.n:
        raise ValueError(f"state index {query.h} outside 1..{space.n}")


def call_threshold_index(space: StateSpace, query: LoanQuery, m: int) -> int:
    if not 1 <= m <= query.horizon:
        raise ValueError(f"day {m} outside 1..{query.horizon}")
    level = (query.w * query.p0 - query.q0) * (1 + query.r) ** m
    return int(_count_below(space.representatives, level))


def loss_threshold_index(space: StateSpace, query: LoanQuery, t: int) -> int:
    if not 1 <= t <= query.horizon:
        raise ValueError(f"day {t} outside 1..{query.horizon}")
    level = (query.p0 - query.q0) * (1 + query.r) ** t
    return int(_count_below(space.representatives, level))


def thresholds(space: StateSpace, query: LoanQuery) -> tuple[np.ndarray, np.ndarray]:
    """(k_1..k_T, a_1..a_T) as integer arrays."""
    growth = (1 + query.r) ** np.arange(1, query.horizon + 1)
    q = space.representatives
    k = _count_below(q, (query.w * query.p0 - query.q0) * growth)
    a = _count_below(q, (query.p0 - query.q0) * growth)
    return k, a


def _first_call_terms(model: TransitionModel, query: LoanQuery, k: np.ndarray):
    """Per-day Prob(B_t) and the final survival product."""
    h = query.h - 1
    p1 = model.one_step
    survival = 1.0
    per_day: list[float] = []
    for t in range(1, query.horizon + 1):
        if survival == 0.0:
            per_day.append(0.0)
            continue
        if t == 1:
            cond = float(model.power(1)[h, : k[0]].sum())
        else:
            prev = model.power(t - 1)[h]
            lo, hi = k[t - 2], k[t - 1]
            denom = float(prev[lo:].sum())
            if denom > 0.0:
                cond = float((prev[lo:] @ p1[lo:, :hi]).sum()) / denom
            else:
                # every path already sits in the call region
                cond = 1.0
        cond = min(max(cond, 0.0), 1.0)
        per_day.append(survival * cond)
        survival *= 1.0 - cond
    return per_day, survival


def _loss_given_call(model: TransitionModel, query: LoanQuery, k: np.ndarray, a: np.ndarray) -> list[float]:
    """Prob(A | D_t) for t = 1..T; zero where the call region carries no mass."""
    h = query.h - 1
    horizon = query.horizon
    p1 = model.one_step
    out: list[float] = []
    for t in range(1, horizon + 1):
        row = model.power(t)[h]
        kt, at = k[t - 1], a[t - 1]
        denom = float(row[:kt].sum())
        if denom <= 0.0:
            out.append(0.0)
            continue
        if t < horizon:
            num = float((row[:kt] @ p1[:kt, :at]).sum())
        else:
            num = float(row[:at].sum())
        out.append(num / denom)
    return out


def prob_first_call(model: TransitionModel, space: StateSpace, query: LoanQuery):
    """Return (prob_B, per-day Prob(B_t) tuple, survival product)."""
    _check_query(space, query)
    k, _ = thresholds(space, query)
    per_day, survival = _first_call_terms(model, query, k)
    return float(sum(per_day)), tuple(per_day), survival


def prob_loss_and_call(model: TransitionModel, space: StateSpace, query: LoanQuery) -> float:
    _check_query(space, query)
    k, a = thresholds(space, query)
    per_day, _ = _first_call_terms(model, query, k)
    loss = _loss_given_call(model, query, k, a)
    return float(sum(b * l for b, l in zip(per_day, loss)))


def cpnr(model: TransitionModel, space: StateSpace, query: LoanQuery) -> CpnrResult:
    _check_query(space, query)
    k, a = thresholds(space, query)
    per_day, survival = _first_call_terms(model, query, k)
    loss = _loss_given_call(model, query, k, a)
    prob_b = float(sum(per_day))
    prob_ab = float(sum(b * l for b, l in zip(per_day, loss)))
    ratio = prob_ab / prob_b if prob_b > 0 else 0.0
    return CpnrResult(prob_b, prob_ab, min(ratio, 1.0), tuple(per_day), survival)


class CpnrGrid:
    """Vectorised CPNR over many (Q0, w) pairs sharing one fitted chain, P0, r and horizon.

    All sums the recursion needs are tabulated once as cumulative arrays, so
    each query costs O(horizon) table lookups.  Agrees with `cpnr` to rounding.
    """

    def __init__(self, model: TransitionModel, space: StateSpace, p0: float, h: int, r: float, horizon: int):
        if not 1 <= h <= space.n:
            raise ValueError(f"state index {h} outside 1..{space.n}")
        self.q = space.representatives
        self.p0, self.h, self.r, self.horizon = float(p0), h, float(r), horizon
        n = space.n
        p1 = model.one_step

        rows = np.zeros((horizon + 1, n))
        rows[0, h - 1] = 1.0
        for t in range(1, horizon + 1):
            rows[t] = model.power(t)[h - 1]
        # cum_p1[i, b] = sum_{j < b} P1[i, j]
        cum_p1 = np.zeros((n, n + 1))
        cum_p1[:, 1:] = np.cumsum(p1, axis=1)

        # head[t, k] = sum_{j < k} p_h(t)_j ; tail[t, a] = sum_{i >= a} p_h(t)_i
        self._head = np.zeros((horizon + 1, n + 1))
        self._head[:, 1:] = np.cumsum(rows, axis=1)
        self._tail = np.zeros((horizon + 1, n + 1))
        self._tail[:, :n] = np.cumsum(rows[:, ::-1], axis=1)[:, ::-1]

        weighted = rows[:, :, None] * cum_p1[None, :, :]  # (t, i, b)
        # escape[t, a, b] = sum_{i >= a} p_h(t)_i * sum_{j < b} P1[i, j]
        self._escape = np.zeros((horizon + 1, n + 1, n + 1))
        self._escape[:, :n, :] = np.cumsum(weighted[:, ::-1, :], axis=1)[:, ::-1, :]
        # inside[t, k, a] = sum_{j < k} p_h(t)_j * sum_{l < a} P1[j, l]
        self._inside = np.zeros((horizon + 1, n + 1, n + 1))
        self._inside[:, 1:, :] = np.cumsum(weighted, axis=1)

    def thresholds(self, q0: np.ndarray, w: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        growth = (1 + self.r) ** np.arange(1, self.horizon + 1)
        call_level = (w * self.p0 - q0)[:, None] * growth[None, :]
        loss_level = (self.p0 - q0)[:, None] * growth[None, :]
        k = _count_below(self.q, call_level.ravel()).reshape(call_level.shape)
        a = _count_below(self.q, loss_level.ravel()).reshape(loss_level.shape)
        return k, a

    def evaluate(self, q0, w) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Return (prob_B, prob_AB, cpnr) arrays broadcast over `q0` and `w`."""
        q0, w = np.broadcast_arrays(np.asarray(q0, dtype=float), np.asarray(w, dtype=float))
        shape = q0.shape
        k, a = self.thresholds(q0.ravel(), w.ravel())
        size = k.shape[0]
        survival = np.ones(size)
        prob_b = np.zeros(size)
        prob_ab = np.zeros(size)
        T = self.horizon
        for t in range(1, T + 1):
            kt, at = k[:, t - 1], a[:, t - 1]
            if t == 1:
                cond = self._head[1, kt]
            else:
                kp = k[:, t - 2]
                denom = self._tail[t - 1, kp]
                num = self._escape[t - 1, kp, kt]
                cond = np.divide(num, denom, out=np.ones(size), where=denom > 0)
            cond = np.clip(cond, 0.0, 1.0)
            b_t = np.where(survival > 0, survival * cond, 0.0)

            den_a = self._head[t, kt]
            num_a = self._inside[t, kt, at] if t < T else self._head[T, at]
            loss = np.divide(num_a, den_a, out=np.zeros(size), where=den_a > 0)

            prob_b += b_t
            prob_ab += b_t * loss
            survival = survival * (1.0 - cond)
        ratio = np.divide(prob_ab, prob_b, out=np.zeros(size), where=prob_b > 0)
        ratio = np.minimum(ratio, 1.0)
        return prob_b.reshape(shape), prob_ab.reshape(shape), ratio.reshape(shape)


def cpnr_exact_enumeration(model: TransitionModel, space: StateSpace, query: LoanQuery,
                           max_states: int = 8, max_horizon: int = 8) -> ExactResult:
    """Exact path-level probabilities by enumerating every state path from h.

    Each path is classified by its true first call day tau, liquidation day
    min(tau + 1, T) and whether the liquidation state lies in the loss region.
    These are not expected to equal the recursion, which multiplies pairwise
    conditionals instead of conditioning on the whole surviving history.
    """
    _check_query(space, query)
    n, T = space.n, query.horizon
    if n > max_states or T > max_horizon:
        raise EnumerationSizeError(f"enumeration limited to n <= {max_states}, T <= {max_horizon}; got n={n}, T={T}")
    k, a = thresholds(space, query)
    p1 = model.one_step
    h = query.h - 1

    per_day = [0.0] * T
    prob_ab = 0.0
    # depth-first over path prefixes; once liquidation day is reached the
    # remaining suffixes carry total probability 1 and need no expansion
    stack: list[tuple[int, int, float, int | None]] = [(0, h, 1.0, None)]
    while stack:
        day, state, prob, tau = stack.pop()
        if tau is not None:
            liq = min(tau + 1, T)
            if day == liq:
                per_day[tau - 1] += prob
                if state < a[liq - 1]:
                    prob_ab += prob
                continue
        elif day == T:
            continue
        nxt = day + 1
        for s in range(n):
            step = p1[state, s]
            if step == 0.0:
                continue
            new_tau = tau
            if tau is None and s < k[nxt - 1]:
                new_tau = nxt
            stack.append((nxt, s, prob * step, new_tau))
    prob_b = float(sum(per_day))
    ratio = prob_ab / prob_b if prob_b > 0 else 0.0
    return ExactResult(prob_b, prob_ab, ratio, tuple(per_day))
