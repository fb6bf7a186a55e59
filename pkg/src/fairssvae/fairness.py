"""Differentiable fairness metrics and the expected fairness risk over missing
groups and labels.

Three metrics are supported, all as absolute differences of group-conditional
mean predicted positive probabilities:

``md``    demographic parity mean difference, in [0, 1]
``eopp``  equal-opportunity difference (positive class only), in [0, 1]
``deo``   difference of equalized odds, summed over both classes, in [0, 2]

A term whose group/class cell is empty contributes 0 and triggers an
:class:`EmptyCellWarning`.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import autodiff as ad
from . import kernels
from .autodiff import Tensor
from .distributions import DEFAULT_TEMPERATURE, gumbel_noise, gumbel_softmax_sample, straight_through_round
from .observation import MISSING

METRIC_CODES = {"md": 0, "eopp": 1, "deo": 2}
METRIC_BOUND = {"md": 1.0, "eopp": 1.0, "deo": 2.0}
MAX_BRUTEFORCE = 20


class EmptyCellWarning(UserWarning):
    def __init__(self, metric, cells):
        self.metric = metric
        self.cells = cells
        super().__init__(f"{metric}: empty cell(s) {cells} contributed 0")


def check_metric(metric: str) -> str:
    if metric not in METRIC_CODES:
        raise ValueError(f"unknown metric {metric!r}; expected one of {sorted(METRIC_CODES)}")
    return metric


def metric_bound(metric: str) -> float:
    return METRIC_BOUND[check_metric(metric)]


def _warn_empty(metric, empty):
    if not np.any(empty):
        return
    cells = []
    for idx in np.flatnonzero(empty):
        a, y = divmod(int(idx), 2)
        cells.append({"a": a} if metric == "md" else {"a": a, "y": y})
    warnings.warn(EmptyCellWarning(metric, cells), stacklevel=3)


@dataclass
class PredictionBatch:
    p: object  # Tensor or array of P(Yhat=1 | x_i)
    y: np.ndarray
    a: np.ndarray

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=np.int8)
        self.a = np.asarray(self.a, dtype=np.int8)
        n = ad.as_tensor(self.p).size
        if not (len(self.y) == len(self.a) == n):
            raise ValueError(f"length mismatch: p={n}, y={len(self.y)}, a={len(self.a)}")


@dataclass
class MCConfig:
    n_samples: int = 100
    seed: int = 0
    temperature: float = DEFAULT_TEMPERATURE

    def __post_init__(self):
        if self.n_samples < 1:
            raise ValueError("n_samples must be >= 1")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")


@dataclass
class MissingnessPosteriors:
    """Sampling distributions for the unknown groups and labels.

    ``a_fixed``/``y_fixed`` hold committed 0/1 values, or ``MISSING`` where the
    value is drawn from ``q_a``/``q_y`` (probabilities of value 1).
    """
    q_a: np.ndarray
    a_fixed: np.ndarray
    q_y: np.ndarray
    y_fixed: np.ndarray

    def __post_init__(self):
        # stop-gradient: only plain values are kept
        self.q_a = np.asarray(ad.stop_gradient(self.q_a).values, dtype=np.float64).reshape(-1)
        self.q_y = np.asarray(ad.stop_gradient(self.q_y).values, dtype=np.float64).reshape(-1)
        self.a_fixed = np.asarray(self.a_fixed, dtype=np.int8).reshape(-1)
        self.y_fixed = np.asarray(self.y_fixed, dtype=np.int8).reshape(-1)
        n = len(self.q_a)
        if not (len(self.a_fixed) == len(self.q_y) == len(self.y_fixed) == n):
            raise ValueError("posterior arrays must have equal length")
        for q in (self.q_a, self.q_y):
            if np.any((q < 0) | (q > 1)):
                raise ValueError("posterior probabilities must lie in [0, 1]")

    @classmethod
    def from_observations(cls, q_a, a_obs, q_y, y_obs):
        """Clamp observed values; sample only where the observation is missing."""
        return cls(q_a, a_obs, q_y, y_obs)

    def __len__(self):
        return len(self.q_a)

    @property
    def n_missing(self) -> int:
        return int(np.sum(self.a_fixed == MISSING) + np.sum(self.y_fixed == MISSING))


def _p_tensor(p) -> Tensor:
    p = ad.as_tensor(p)
    if p.values.ndim != 1:
        p = ad.reshape(p, (-1,))
    return p


def _risk_op(p: Tensor, value: float, grad: np.ndarray) -> Tensor:
    return ad.custom(np.asarray(value), (p,), lambda g: (g * grad,))


def empirical_metric(batch: PredictionBatch, metric: str = "deo") -> Tensor:
    """Fairness violation of predictions ``batch.p`` under committed labels/groups."""
    code = METRIC_CODES[check_metric(metric)]
    p = _p_tensor(batch.p)
    values, grad, empty = kernels.metric_rows(
        p.values, batch.a[None, :], batch.y[None, :], code, np.ones(1))
    _warn_empty(metric, empty)
    return _risk_op(p, values[0], grad)


def _uniforms(rng, n_samples, n):
    return rng.random((n_samples, n)), rng.random((n_samples, n))


def mc_fairness_risk(posteriors: MissingnessPosteriors, predictions, metric: str = "deo",
                     cfg: Optional[MCConfig] = None, rng: Optional[np.random.Generator] = None,
                     warn: bool = True) -> Tensor:
    """Monte Carlo estimate of the expected fairness risk.

    Draws ``cfg.n_samples`` joint assignments of the missing groups/labels
    from ``posteriors`` and averages the metric.  Differentiable in
    ``predictions`` only.
    """
    cfg = cfg or MCConfig()
    code = METRIC_CODES[check_metric(metric)]
    p = _p_tensor(predictions)
    if p.size != len(posteriors):
        raise ValueError("predictions and posteriors are not aligned")
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    ua, uy = _uniforms(rng, cfg.n_samples, p.size)
    values, grad, empty = kernels.mc_rows(
        p.values, posteriors.a_fixed, posteriors.q_a, posteriors.y_fixed, posteriors.q_y,
        ua, uy, code)
    if warn:
        _warn_empty(metric, empty)
    return _risk_op(p, float(values.mean()), grad)


def _tile(v: Tensor, rows: int) -> Tensor:
    return ad.matmul(np.ones((rows, 1)), ad.reshape(v, (1, -1)))


def _st_sample(q: Tensor, fixed: np.ndarray, noise_a, noise_b, temperature, hard=True) -> Tensor:
    soft = gumbel_softmax_sample(q, noise_a, noise_b, temperature)
    hard = straight_through_round(soft) if hard else soft
    mask = np.broadcast_to(fixed >= 0, hard.shape)
    return ad.where(mask, np.broadcast_to(fixed, hard.shape).astype(np.float64), hard)


def relaxed_metric(p: Tensor, A: Tensor, Y: Tensor, metric: str) -> Tensor:
    """Per-row metric where cell membership is expressed through products of
    (possibly straight-through) 0/1 tensors, so gradients reach A and Y."""
    rows = A.shape[0]
    P = _tile(p, rows)
    a1, a0 = A, 1.0 - A
    if metric == "md":
        cells = [(a0, a1)]
    else:
        ys = [1] if metric == "eopp" else [0, 1]
        cells = []
        for y in ys:
            yy = Y if y == 1 else 1.0 - Y
            cells.append((a0 * yy, a1 * yy))
    total = ad.Tensor(np.zeros(rows))
    for m0, m1 in cells:
        c0, c1 = ad.sum_(m0, 1), ad.sum_(m1, 1)
        s0, s1 = ad.sum_(m0 * P, 1), ad.sum_(m1 * P, 1)
        ok = (c0.values > 1e-12) & (c1.values > 1e-12)
        mean0 = ad.where(ok, s0, 0.0) / ad.where(ok, c0, 1.0)
        mean1 = ad.where(ok, s1, 0.0) / ad.where(ok, c1, 1.0)
        total = total + ad.where(ok, ad.abs_(mean0 - mean1), 0.0)
    return total


def vanilla_fairness_risk(q_a, a_obs, q_y, y_obs, predictions, metric: str = "deo",
                          cfg: Optional[MCConfig] = None, rng: Optional[np.random.Generator] = None,
                          noise=None, straight_through: bool = True) -> Tensor:
    """Expected fairness risk with gradients through the sampling distributions.

    Missing groups and labels are drawn by straight-through Gumbel-Softmax
    from the differentiable ``q_a`` and ``q_y``; observed values are clamped.
    ``noise`` optionally supplies the four (N, n) Gumbel arrays
    ``(alpha_a, beta_a, alpha_y, beta_y)`` for reproducible checks.  With
    ``straight_through=False`` the soft relaxed samples are used in the
    forward pass as well, giving a smooth surrogate.
    """
    cfg = cfg or MCConfig()
    check_metric(metric)
    p = _p_tensor(predictions)
    q_a, q_y = _p_tensor(q_a), _p_tensor(q_y)
    n, N = p.size, cfg.n_samples
    if noise is None:
        rng = rng if rng is not None else np.random.default_rng(cfg.seed)
        noise = [gumbel_noise(rng, (N, n)) for _ in range(4)]
    a_obs = np.asarray(a_obs, dtype=np.int8)
    y_obs = np.asarray(y_obs, dtype=np.int8)
    A = _st_sample(_tile(q_a, N), a_obs, noise[0], noise[1], cfg.temperature, straight_through)
    Y = _st_sample(_tile(q_y, N), y_obs, noise[2], noise[3], cfg.temperature, straight_through)
    return ad.mean(relaxed_metric(p, A, Y, metric))


def required_sample_size(C: float, eps: float, delta: float) -> int:
    """Smallest N with ``2 exp(-2 N eps^2 / C^2) <= delta``."""
    if C <= 0 or eps <= 0 or not 0 < delta < 1:
        raise ValueError(f"need C > 0, eps > 0, 0 < delta < 1 (got {C}, {eps}, {delta})")
    return max(1, math.ceil(C * C / (2 * eps * eps) * math.log(2 / delta)))


def hoeffding_bound(N: int, eps: float, C: float) -> float:
    return min(1.0, 2 * math.exp(-2 * N * eps * eps / (C * C)))


def exact_risk_bruteforce(posteriors: MissingnessPosteriors, predictions, metric: str = "deo",
                          chunk: int = 1 << 15) -> float:
    """Exact expected metric by enumerating every joint assignment."""
    code = METRIC_CODES[check_metric(metric)]
    p = np.asarray(ad.as_tensor(predictions).values, dtype=np.float64).reshape(-1)
    a_miss = np.flatnonzero(posteriors.a_fixed == MISSING)
    y_miss = np.flatnonzero(posteriors.y_fixed == MISSING)
    m = len(a_miss) + len(y_miss)
    if m > MAX_BRUTEFORCE:
        raise ValueError(f"{m} missing values exceed the enumeration limit of {MAX_BRUTEFORCE}")
    probs = np.concatenate([posteriors.q_a[a_miss], posteriors.q_y[y_miss]])
    total = 0.0
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", EmptyCellWarning)
        for start in range(0, 1 << m, chunk):
            idx = np.arange(start, min(start + chunk, 1 << m))
            bits = ((idx[:, None] >> np.arange(m)) & 1).astype(np.int8)
            w = np.prod(np.where(bits == 1, probs, 1.0 - probs), axis=1)
            A = np.repeat(posteriors.a_fixed[None, :], len(idx), axis=0)
            Y = np.repeat(posteriors.y_fixed[None, :], len(idx), axis=0)
            A[:, a_miss] = bits[:, :len(a_miss)]
            Y[:, y_miss] = bits[:, len(a_miss):]
            values, _, _ = kernels.metric_rows(p, A, Y, code, w)
            total += float(values @ w)
    return total


def concentration_harness(posteriors: MissingnessPosteriors, predictions, metric: str,
                          eps: float, delta: float = 0.05, repetitions: int = 1000,
                          n_samples: Optional[int] = None, C: Optional[float] = None,
                          seed: int = 0) -> float:
    """Fraction of independent estimates deviating from the exact risk by more than eps.

    ``n_samples`` defaults to ``required_sample_size(C, eps, delta)``.
    """
    code = METRIC_CODES[check_metric(metric)]
    if repetitions < 1:
        raise ValueError("repetitions must be >= 1")
    C = metric_bound(metric) if C is None else C
    N = n_samples or required_sample_size(C, eps, delta)
    exact = exact_risk_bruteforce(posteriors, predictions, metric)
    p = np.asarray(ad.as_tensor(predictions).values, dtype=np.float64).reshape(-1)
    rng = np.random.default_rng(seed)
    violations = 0
    for _ in range(repetitions):
        ua, uy = _uniforms(rng, N, len(p))
        values, _, _ = kernels.mc_rows(p, posteriors.a_fixed, posteriors.q_a,
                                       posteriors.y_fixed, posteriors.q_y, ua, uy, code)
        if abs(values.mean() - exact) > eps:
            violations += 1
    return violations / repetitions


def bound_fixture():
    """Small instance used by the bound-verification command: six records,
    four missing groups and two missing labels."""
    p = np.array([0.9, 0.2, 0.7, 0.4, 0.6, 0.1])
    a_fixed = np.array([MISSING, 0, MISSING, 1, MISSING, MISSING])
    q_a = np.array([0.5, 0.0, 0.3, 1.0, 0.8, 0.4])
    y_fixed = np.array([1, MISSING, 0, 1, MISSING, 0])
    q_y = np.array([1.0, 0.6, 0.0, 1.0, 0.3, 0.0])
    return MissingnessPosteriors(q_a, a_fixed, q_y, y_fixed), p

