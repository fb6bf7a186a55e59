"""Binary categorical and diagonal Gaussian helpers, Dirichlet/Beta densities,
Gumbel noise and the straight-through Gumbel-Softmax relaxation."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln

from . import autodiff as ad
from .autodiff import CLAMP, Tensor

DEFAULT_TEMPERATURE = 0.5


@dataclass(frozen=True)
class BinaryCategorical:
    p1: float

    def __post_init__(self):
        if not 0.0 <= self.p1 <= 1.0:
            raise ValueError(f"p1 must lie in [0, 1], got {self.p1}")

    @property
    def probs(self):
        return np.array([1.0 - self.p1, self.p1])

    def hard(self) -> int:
        # ties go to 1
        return int(self.p1 >= 0.5)


@dataclass
class DiagGaussian:
    mean: Tensor
    log_variance: Tensor

    def __post_init__(self):
        self.mean = ad.as_tensor(self.mean)
        self.log_variance = ad.as_tensor(self.log_variance)
        if self.mean.shape != self.log_variance.shape:
            raise ad.ShapeError(
                f"mean {self.mean.shape} and log_variance {self.log_variance.shape} differ")


def reparam_sample(g: DiagGaussian, noise) -> Tensor:
    noise = np.asarray(noise, dtype=np.float64)
    if noise.shape != g.mean.shape:
        raise ad.ShapeError(f"noise shape {noise.shape} does not match mean {g.mean.shape}")
    return g.mean + ad.exp(g.log_variance * 0.5) * noise


def kl_gaussian_standard(g: DiagGaussian, axis=None) -> Tensor:
    """KL(N(mean, exp(lv)) || N(0, I)), summed over ``axis`` (all axes by default)."""
    lv = g.log_variance
    inner = ad.exp(lv) + g.mean * g.mean - 1.0 - lv
    return ad.sum_(inner, axis) * 0.5


def kl_categorical(q, p) -> Tensor:
    """KL(q || p) for binary categoricals given as P(outcome = 1).

    ``q`` may be a tensor of per-record probabilities; ``p`` is a fixed prior
    strictly inside (0, 1), or a scalar tensor when the prior is learned.
    Uses ``0 log 0 = 0``.
    """
    q = ad.as_tensor(q)
    q0 = 1.0 - q
    neg_entropy = ad.xlogx(q) + ad.xlogx(q0)
    if isinstance(p, Tensor):
        if not np.all((p.values > 0) & (p.values < 1)):
            raise ValueError(f"degenerate prior p1={p.values}")
        return neg_entropy - (q * ad.log(p) + q0 * ad.log(1.0 - p))
    p1 = p.p1 if isinstance(p, BinaryCategorical) else float(p)
    if not 0.0 < p1 < 1.0:
        raise ValueError(f"degenerate prior p1={p1}")
    cross = q * np.log(p1) + q0 * np.log(1.0 - p1)
    return neg_entropy - cross


def log_beta_fn(concentration) -> float:
    c = np.asarray(concentration, dtype=np.float64)
    return float(gammaln(c).sum() - gammaln(c.sum()))


def dirichlet_log_density(probs, concentration) -> Tensor:
    """Log Dirichlet density at ``probs`` (normaliser included).

    ``probs`` may be a tensor so the density is differentiable in it.
    """
    conc = np.asarray(concentration, dtype=np.float64)
    if np.any(conc <= 0):
        raise ValueError("concentration entries must be positive")
    probs = ad.as_tensor(probs)
    v = probs.values
    if v.shape != conc.shape:
        raise ad.ShapeError(f"probs {v.shape} and concentration {conc.shape} differ")
    if np.any(v < -1e-9) or abs(v.sum() - 1.0) > 1e-9:
        raise ValueError(f"point {v} is not on the simplex")
    # (c - 1) log p with 0 * log 0 = 0 when c == 1
    safe = ad.where(v > 0, probs, 1.0)
    terms = ad.log(safe) * (conc - 1.0)
    return ad.sum_(terms) - log_beta_fn(conc)


def beta_log_density(x, a: float, b: float) -> Tensor:
    x = ad.as_tensor(x)
    return (ad.log(x) * (a - 1.0) + ad.log(1.0 - x) * (b - 1.0)) - log_beta_fn([a, b])


def gumbel_noise(rng: np.random.Generator, shape) -> np.ndarray:
    u = rng.random(shape)
    # open interval: rng.random can return exactly 0
    u = np.clip(u, np.finfo(float).tiny, 1.0 - np.finfo(float).eps)
    return -np.log(-np.log(u))


def gumbel_softmax_sample(q1, alpha, beta, temperature: float = DEFAULT_TEMPERATURE) -> Tensor:
    """Relaxed Bernoulli draw ``exp(l1/T) / (exp(l1/T) + exp(l0/T))``.

    ``q1`` is clamped to ``[CLAMP, 1 - CLAMP]`` before taking logs, which keeps
    the result finite for degenerate probabilities.
    """
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    q1 = ad.as_tensor(q1)
    lo = ad.where(q1.values < CLAMP, CLAMP, q1)
    q = ad.where(lo.values > 1.0 - CLAMP, 1.0 - CLAMP, lo)
    l1 = (ad.log(q) + np.asarray(alpha, dtype=np.float64)) * (1.0 / temperature)
    l0 = (ad.log(1.0 - q) + np.asarray(beta, dtype=np.float64)) * (1.0 / temperature)
    # two-way softmax == sigmoid of the logit gap
    return ad.sigmoid(l1 - l0)


def straight_through_round(soft) -> Tensor:
    """Forward: hard threshold at 0.5 (ties to 1).  Backward: identity."""
    soft = ad.as_tensor(soft)
    hard = (soft.values >= 0.5).astype(np.float64)
    return ad.custom(hard, (soft,), lambda g: (g,))
