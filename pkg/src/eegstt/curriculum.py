"""Intensity-aware curriculum: difficulty scoring and subset scheduling.

Each epoch the whole training set is evaluated. A sample's difficulty is its
current cross-entropy loss plus ``beta`` times its historical error rate. A
Gaussian kernel over difficulty, whose centre moves from easy to hard
quantiles while its width shrinks, gives selection probabilities. A subset
of linearly growing size is drawn without replacement and trained in
ascending difficulty order.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError

log = logging.getLogger(__name__)

SPREAD_EPS = 1e-8
HIST_BINS = 20


@dataclass(frozen=True)
class CurriculumConfig:
    beta: float = 1.0
    alpha0: float = 0.3
    mu_q0: float = 0.2
    mu_q1: float = 0.8
    sigma_frac0: float = 0.5
    sigma_frac1: float = 0.15
    total_epochs: int = 50
    hist_max: float = 4.0  # upper edge of the fixed difficulty histogram

    def __post_init__(self):
        if not 0 < self.alpha0 <= 1:
            raise ConfigError("alpha0 must lie in (0, 1]")
        if not 0 <= self.mu_q0 <= self.mu_q1 <= 1:
            raise ConfigError("need 0 <= mu_q0 <= mu_q1 <= 1")
        if self.sigma_frac0 <= 0 or self.sigma_frac1 <= 0:
            raise ConfigError("sigma fractions must be positive")
        if self.beta < 0:
            raise ConfigError("beta must be non-negative")
        if self.total_epochs < 1:
            raise ConfigError("total_epochs must be >= 1")


@dataclass
class CurriculumState:
    size: int
    history: list = field(default_factory=list)
    difficulty: np.ndarray = None
    probability: np.ndarray = None
    train_slot: list = field(default_factory=list)
    epoch: int = 0
    subset: list = field(default_factory=list)

    def __post_init__(self):
        if self.size < 1:
            raise ConfigError("curriculum needs at least one sample")
        if not self.history:
            self.history = [[] for _ in range(self.size)]
        if self.difficulty is None:
            self.difficulty = np.zeros(self.size)
        if self.probability is None:
            self.probability = np.full(self.size, 1.0 / self.size)
        if not self.train_slot:
            self.train_slot = [None] * self.size


def update_history(state: CurriculumState, i: int, correct: bool):
    if not 0 <= i < state.size:
        raise IndexError(f"sample index {i} out of range for {state.size} samples")
    state.history[i].append(bool(correct))
    return state


def record_train_prediction(state: CurriculumState, i: int, correct: bool):
    """Train-time correctness; kept apart from the evaluation history."""
    if not 0 <= i < state.size:
        raise IndexError(f"sample index {i} out of range for {state.size} samples")
    state.train_slot[i] = bool(correct)


def compute_difficulty(loss, history, beta, k=None):
    """Current loss plus ``beta`` times the historical error rate.

    ``k`` defaults to ``len(history)``; an empty history contributes no error.
    """
    k = len(history) if k is None else k
    if k <= 0:
        return float(loss)
    return float(loss) + beta * (1.0 - sum(bool(h) for h in history) / k)


def schedule_params(k, config: CurriculumConfig, difficulty):
    """``(mu_k, sigma_k, alpha_k)`` for epoch ``k`` (1-based)."""
    d = np.asarray(difficulty, dtype=np.float64)
    if d.size == 0:
        raise ConfigError("difficulty table is empty")
    spread = float(d.max() - d.min()) + SPREAD_EPS
    n = config.total_epochs
    if n < 2:
        return float(np.quantile(d, 0.5)), config.sigma_frac1 * spread, 1.0
    frac = min(max((k - 1) / (n - 1), 0.0), 1.0)
    q = config.mu_q0 + (config.mu_q1 - config.mu_q0) * frac
    sigma_frac = config.sigma_frac0 + (config.sigma_frac1 - config.sigma_frac0) * frac
    alpha = config.alpha0 + (1.0 - config.alpha0) * frac
    if k >= n:
        alpha = 1.0
    return float(np.quantile(d, q)), sigma_frac * spread, alpha


def selection_probabilities(difficulty, mu, sigma):
    """Gaussian kernel around ``mu`` normalized over all samples."""
    if not sigma > 0:
        raise ConfigError(f"sigma must be positive, got {sigma}")
    d = np.asarray(difficulty, dtype=np.float64)
    expo = -((d - mu) ** 2) / (2.0 * sigma * sigma)
    w = np.exp(expo - expo.max())
    return w / w.sum()


def subset_size(alpha, m):
    return max(1, int(np.floor(alpha * m + 1e-12)))


def sample_subset(probability, size, rng):
    """Draw ``size`` distinct indices by repeated weighted draws, renormalizing each time.

    If fewer than ``size`` samples have non-zero probability, the rest are
    filled uniformly from the zero-probability samples and a warning is logged.
    """
    p = np.array(probability, dtype=np.float64)
    m = p.size
    if size > m:
        raise ConfigError(f"subset size {size} exceeds {m} samples")
    if not np.all(np.isfinite(p)) or np.any(p < 0):
        raise ConfigError("selection probabilities must be finite and non-negative")
    chosen = []
    avail = np.ones(m, dtype=bool)
    w = p.copy()
    for _ in range(size):
        cum = np.cumsum(w)
        total = cum[-1]
        if total <= 0:
            break
        j = min(int(np.searchsorted(cum, rng.random() * total, side="right")), m - 1)
        while w[j] == 0:  # float edge: step back onto a live entry
            j -= 1
        chosen.append(j)
        avail[j] = False
        w[j] = 0.0
    if len(chosen) < size:
        log.warning("only %d samples have non-zero selection probability; filling %d uniformly",
                    len(chosen), size - len(chosen))
        rest = np.flatnonzero(avail)
        chosen += [int(j) for j in rng.choice(rest, size=size - len(chosen), replace=False)]
    return chosen


def sort_by_difficulty(indices, difficulty):
    """Ascending difficulty; ties keep the smaller sample index first."""
    d = np.asarray(difficulty)
    return sorted((int(i) for i in indices), key=lambda i: (d[i], i))


def difficulty_histogram(difficulty, hist_max=4.0, bins=HIST_BINS):
    """Counts over fixed edges ``linspace(0, hist_max, bins+1)``; values past the ends are clipped in."""
    d = np.clip(np.asarray(difficulty, dtype=np.float64), 0.0, hist_max)
    counts, _ = np.histogram(d, bins=bins, range=(0.0, hist_max))
    return counts


class Curriculum:
    """Epoch driver owning a :class:`CurriculumState`.

    ``evaluate_fn(indices)`` must return ``(losses, correct)`` for those
    training samples with no parameter updates; ``train_fn(order)`` trains on
    the ordered sample indices and returns per-sample train-time correctness.
    """

    def __init__(self, size, config: CurriculumConfig, rng):
        self.config = config
        self.state = CurriculumState(size)
        self.rng = rng
        self.log = []
        self.current = None  # (mu, sigma, alpha) for the subset about to be trained

    def start(self, evaluate_fn):
        """Score the untrained model and pick the epoch-1 subset."""
        losses, _ = evaluate_fn(np.arange(self.state.size))
        self.state.difficulty = np.asarray(losses, dtype=np.float64).copy()
        self._select(1)

    def _select(self, k):
        st = self.state
        mu, sigma, alpha = schedule_params(k, self.config, st.difficulty)
        st.probability = selection_probabilities(st.difficulty, mu, sigma)
        size = subset_size(alpha, st.size)
        picked = sample_subset(st.probability, size, self.rng)
        st.subset = sort_by_difficulty(picked, st.difficulty)
        self.current = (mu, sigma, alpha)
        self._picked_difficulty = st.difficulty[st.subset]

    def run_epoch(self, k, train_fn, evaluate_fn):
        """Train on the current subset, re-score everything, pick the next subset."""
        st = self.state
        if st.epoch != k - 1:
            raise ConfigError(f"curriculum expected epoch {st.epoch + 1}, got {k}")
        order = list(st.subset)
        mu, sigma, alpha = self.current
        for i, ok in zip(order, train_fn(order)):
            record_train_prediction(st, i, ok)
        losses, correct = evaluate_fn(np.arange(st.size))
        for i in range(st.size):
            update_history(st, i, correct[i])
            st.train_slot[i] = bool(correct[i])
        st.difficulty = np.array([
            compute_difficulty(losses[i], st.history[i], self.config.beta, k) for i in range(st.size)])
        st.epoch = k
        sub_d = self._picked_difficulty
        self.log.append({
            "epoch": k, "mu": mu, "sigma": sigma, "alpha": alpha, "subset_size": len(order),
            "mean_difficulty": float(sub_d.mean()), "median_difficulty": float(np.median(sub_d)),
            "hist": difficulty_histogram(st.difficulty, self.config.hist_max).tolist(),
        })
        if k < self.config.total_epochs:
            self._select(k + 1)
        return st
