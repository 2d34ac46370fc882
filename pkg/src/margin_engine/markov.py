"""Grouped-price Markov chain: state space, transition estimates, matrix powers, chi-square test.

State indices in the public API are 1-based (``1..n``) so that a threshold
count ``k`` reads directly as "states ``1..k``"; ``k = 0`` means no state.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field

import numpy as np
from scipy.special import gammaincc

from .errors import MarkovTestUndefinedError
from .prices import PriceWindow

__all__ = [
    "StateSpace",
    "CountMatrix",
    "TransitionModel",
    "MarkovTestResult",
    "MarkovFit",
    "build_state_space",
    "state_of",
    "count_transitions",
    "estimate_one_step",
    "n_step",
    "markov_chi_square_test",
    "fit_window",
]


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.array(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class StateSpace:
    """Distinct prices sorted and chunked into blocks of `group_size`.

    ``lows[k]``/``highs[k]`` bound block k (0-based storage), and
    ``representatives[k]`` is the mean of the block's prices.
    """

    lows: np.ndarray
    highs: np.ndarray
    representatives: np.ndarray
    group_size: int

    def __post_init__(self):
        for name in ("lows", "highs", "representatives"):
            object.__setattr__(self, name, _readonly(np.asarray(getattr(self, name), dtype=float)))

    @property
    def n(self) -> int:
        return int(self.representatives.size)

    def __len__(self) -> int:
        return self.n


@dataclass(frozen=True)
class CountMatrix:
    counts: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "counts", _readonly(np.asarray(self.counts, dtype=np.int64)))

    @property
    def row_totals(self) -> np.ndarray:
        return self.counts.sum(axis=1)

    @property
    def col_totals(self) -> np.ndarray:
        return self.counts.sum(axis=0)

    @property
    def total(self) -> int:
        return int(self.counts.sum())


class TransitionModel:
    """One-step matrix P(1) with a cache of its powers.

    Powers are built by repeated multiplication, never by eigendecomposition.
    The cache is filled under a lock so concurrent readers see the same arrays.
    """

    def __init__(self, one_step: np.ndarray, precompute: int = 1):
        p = np.array(one_step, dtype=float)
        if p.ndim != 2 or p.shape[0] != p.shape[1]:
            raise ValueError("transition matrix must be square")
        if np.any(p < 0) or np.any(p > 1) or not np.allclose(p.sum(axis=1), 1.0, atol=1e-12, rtol=0):
            raise ValueError("transition matrix must be row-stochastic")
        p.setflags(write=False)
        self._powers: list[np.ndarray] = [p]
        self._lock = threading.Lock()
        if precompute > 1:
            self.power(precompute)

    @property
    def one_step(self) -> np.ndarray:
        return self._powers[0]

    @property
    def n(self) -> int:
        return self._powers[0].shape[0]

    def power(self, steps: int) -> np.ndarray:
        if steps < 1:
            raise ValueError("step count must be >= 1")
        if steps <= len(self._powers):
            return self._powers[steps - 1]
        with self._lock:
            while len(self._powers) < steps:
                nxt = self._powers[-1] @ self._powers[0]
                nxt.setflags(write=False)
                self._powers.append(nxt)
        return self._powers[steps - 1]

    @property
    def cached_powers(self) -> dict[int, np.ndarray]:
        return {i + 1: m for i, m in enumerate(self._powers)}

    def __repr__(self) -> str:
        return f"TransitionModel(n={self.n}, cached={len(self._powers)})"


@dataclass(frozen=True)
class MarkovTestResult:
    chi_square: float
    degrees_of_freedom: int
    p_value: float
    effective_states: int

    def to_dict(self) -> dict:
        return {
            "chi_square": self.chi_square,
            "df": self.degrees_of_freedom,
            "p_value": self.p_value,
            "effective_states": self.effective_states,
        }


def build_state_space(window: PriceWindow | np.ndarray, g: int) -> StateSpace:
    prices = window.prices if isinstance(window, PriceWindow) else np.asarray(window, dtype=float)
    if g < 1:
        raise ValueError("group size must be >= 1")
    if prices.size == 0:
        raise ValueError("cannot build a state space from an empty window")
    distinct = np.unique(prices)
    blocks = [distinct[i : i + g] for i in range(0, distinct.size, g)]
    return StateSpace(
        lows=np.array([b[0] for b in blocks]),
        highs=np.array([b[-1] for b in blocks]),
        representatives=np.array([b.mean() for b in blocks]),
        group_size=g,
    )


def _states_of(space: StateSpace, prices: np.ndarray) -> np.ndarray:
    """Vectorised `state_of`, 0-based."""
    prices = np.asarray(prices, dtype=float)
    # first block whose high is >= price
    idx = np.searchsorted(space.highs, prices, side="left")
    idx = np.minimum(idx, space.n - 1)
    inside = prices >= space.lows[idx]
    # price sits in the gap below block idx: choose nearer representative, ties go lower
    lower = np.maximum(idx - 1, 0)
    gap = ~inside & (idx > 0)
    d_lo = np.abs(prices - space.representatives[lower])
    d_hi = np.abs(prices - space.representatives[idx])
    return np.where(gap & (d_lo <= d_hi), lower, idx)


def state_of(space: StateSpace, price: float) -> int:
    """1-based state holding `price`; out-of-range prices clamp to the end states."""
    if not price > 0:
        raise ValueError("price must be positive")
    return int(_states_of(space, np.array([price]))[0]) + 1


def count_transitions(window: PriceWindow | np.ndarray, space: StateSpace) -> CountMatrix:
    prices = window.prices if isinstance(window, PriceWindow) else np.asarray(window, dtype=float)
    if prices.size < 2:
        raise ValueError("need at least two prices to count transitions")
    states = _states_of(space, prices)
    counts = np.zeros((space.n, space.n), dtype=np.int64)
    np.add.at(counts, (states[:-1], states[1:]), 1)
    return CountMatrix(counts)


def estimate_one_step(counts: CountMatrix) -> TransitionModel:
    f = counts.counts.astype(float)
    totals = f.sum(axis=1)
    p = np.eye(f.shape[0])
    visited = totals > 0
    p[visited] = f[visited] / totals[visited, None]
    return TransitionModel(p)


def n_step(model: TransitionModel, n: int) -> np.ndarray:
    return model.power(n)


def markov_chi_square_test(counts: CountMatrix) -> MarkovTestResult:
    """Chi-square test of independence of consecutive states.

    Cells whose expected count is zero are skipped and the degrees of freedom
    use only states that appear in some transition.
    """
    f = counts.counts.astype(float)
    total = f.sum()
    if total < 1:
        raise MarkovTestUndefinedError("no transitions counted")
    rows, cols = f.sum(axis=1), f.sum(axis=0)
    effective = int(np.count_nonzero((rows > 0) | (cols > 0)))
    if effective < 2:
        raise MarkovTestUndefinedError(f"test needs at least 2 visited states, got {effective}")
    expected = np.outer(rows, cols) / total
    mask = expected > 0
    chi2 = float(np.sum((f[mask] - expected[mask]) ** 2 / expected[mask]))
    df = (effective - 1) ** 2
    p_value = float(gammaincc(df / 2.0, chi2 / 2.0))
    return MarkovTestResult(chi2, df, min(max(p_value, 0.0), 1.0), effective)


@dataclass(frozen=True)
class MarkovFit:
    """Everything fitted from one window: state space, counts, model and P0's state."""

    window: PriceWindow = field(repr=False)
    space: StateSpace = field(repr=False)
    counts: CountMatrix = field(repr=False)
    model: TransitionModel

    @property
    def p0(self) -> float:
        return self.window.p0

    @property
    def h(self) -> int:
        return state_of(self.space, self.window.p0)


def fit_window(win: PriceWindow, group: int, horizon: int = 1) -> MarkovFit:
    space = build_state_space(win, group)
    counts = count_transitions(win, space)
    model = estimate_one_step(counts)
    model.power(max(horizon, 1))
    return MarkovFit(win, space, counts, model)

