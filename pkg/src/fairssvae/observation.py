"""Learnable observation channels P(observed | latent) over outcomes {0, 1, missing}.

Rows are indexed by the latent value, columns by the observed outcome in the
order (0, 1, missing).  Missing is encoded as ``MISSING`` (-1) in data arrays.
"""
from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .distributions import BinaryCategorical, beta_log_density, dirichlet_log_density

MISSING = -1
NO_MISREPRESENTATION = "no-misrepresentation"
FULL_CHANNEL = "full-channel"
# row prior for full-channel mode, ordered (truthful, misrepresented, missing)
DEFAULT_DIRICHLET = (0.5, 0.1, 0.4)


class InconsistentObservation(ValueError):
    pass


def _logit(p):
    return float(np.log(p) - np.log1p(-p))


def obs_column(codes) -> np.ndarray:
    codes = np.asarray(codes)
    return np.where(codes == MISSING, 2, codes).astype(np.intp)


class ObservationModel:
    """Row-stochastic channel for one binary latent variable.

    In no-misrepresentation mode the two missing rates ``P(missing | latent=1)``
    (alpha) and ``P(missing | latent=0)`` (beta) are stored as logits.  In
    full-channel mode each row is a softmax over three logits.  With
    ``learnable=False`` the channel is a constant and contributes no
    parameters and no prior penalty.
    """

    def __init__(self, name="obs_a", mode=NO_MISREPRESENTATION, init_rate=0.3,
                 beta_prior=(2.0, 2.0), dirichlet_prior=DEFAULT_DIRICHLET, learnable=True):
        if mode not in (NO_MISREPRESENTATION, FULL_CHANNEL):
            raise ValueError(f"unknown mode {mode!r}")
        self.name = name
        self.mode = mode
        self.learnable = learnable
        self.beta_prior = tuple(float(v) for v in beta_prior)
        self.dirichlet_prior = tuple(float(v) for v in dirichlet_prior)
        rates = np.broadcast_to(np.asarray(init_rate, dtype=np.float64), (2,)).copy()
        if not learnable:
            # a fixed channel may have rate 0 (fully observed); keep logits finite
            rates = np.clip(rates, 1e-9, 1 - 1e-9)
        if np.any((rates <= 0) | (rates >= 1)):
            raise ValueError("initial rates must lie strictly inside (0, 1)")
        if mode == NO_MISREPRESENTATION:
            # index 0 -> latent 0 (beta), index 1 -> latent 1 (alpha)
            init = np.array([_logit(r) for r in rates])
        else:
            init = np.zeros((2, 3))
            for a in (0, 1):
                row = np.full(3, 1e-3)
                row[a] = 1.0 - rates[a] - 1e-3
                row[2] = rates[a]
                init[a] = np.log(row)
        self.param = Parameter(f"{name}.logits", init)
        if not learnable:
            self.param.tensor.requires_grad = False

    @classmethod
    def fixed(cls, rate, name="obs_y"):
        return cls(name=name, init_rate=rate, learnable=False)

    @property
    def params(self):
        return [self.param] if self.learnable else []

    def structural_zeros(self) -> np.ndarray:
        mask = np.zeros((2, 3), dtype=bool)
        if self.mode == NO_MISREPRESENTATION:
            mask[0, 1] = mask[1, 0] = True
        return mask

    def matrix(self) -> Tensor:
        t = self.param.tensor
        if self.mode == FULL_CHANNEL:
            return ad.softmax(t)
        r = ad.sigmoid(t)
        keep = 1.0 - r
        zero = ad.Tensor(np.zeros(1))
        row0 = ad.concat([ad.getitem(keep, slice(0, 1)), zero, ad.getitem(r, slice(0, 1))])
        row1 = ad.concat([zero, ad.getitem(keep, slice(1, 2)), ad.getitem(r, slice(1, 2))])
        return ad.reshape(ad.concat([row0, row1]), (2, 3))

    def obs_prob(self, observed, latent) -> float:
        return float(self.matrix().values[latent, obs_column(observed)])

    def likelihood(self, observed) -> tuple[Tensor, np.ndarray]:
        """Per-record ``P(observed_i | latent)`` as an (n, 2) tensor plus the
        mask of structural zeros (entries that are exactly 0 by construction)."""
        cols = obs_column(observed)
        lik = ad.transpose(ad.getitem(self.matrix(), (slice(None), cols)))
        return lik, self.structural_zeros()[:, cols].T

    def posterior(self, prior_p1, observed) -> Tensor:
        """q(latent=1 | x, observed) proportional to prior(latent) * P(observed | latent)."""
        prior_p1 = ad.as_tensor(prior_p1)
        lik, _ = self.likelihood(observed)
        w1 = prior_p1 * ad.getitem(lik, (slice(None), 1))
        w0 = (1.0 - prior_p1) * ad.getitem(lik, (slice(None), 0))
        denom = w0 + w1
        bad = np.flatnonzero(denom.values <= 0)
        if bad.size:
            raise InconsistentObservation(
                f"record {int(bad[0])}: observation {int(np.asarray(observed)[bad[0]])} "
                f"is impossible under {self.name}")
        return w1 / denom

    def marginal(self, prior_p1, observed) -> Tensor:
        """Per-record ``sum_latent prior(latent) * P(observed | latent)``."""
        prior_p1 = ad.as_tensor(prior_p1)
        lik, _ = self.likelihood(observed)
        return (prior_p1 * ad.getitem(lik, (slice(None), 1))
                + (1.0 - prior_p1) * ad.getitem(lik, (slice(None), 0)))

    def prior_penalty(self) -> Tensor:
        """Negative log prior density of the channel (0 when not learnable)."""
        if not self.learnable:
            return ad.Tensor(0.0)
        if self.mode == NO_MISREPRESENTATION:
            r = ad.sigmoid(self.param.tensor)
            a, b = self.beta_prior
            return -ad.sum_(beta_log_density(r, a, b))
        m = self.matrix()
        total = ad.Tensor(0.0)
        for a in (0, 1):
            row = ad.getitem(m, a)
            # reorder to (truthful, misrepresented, missing)
            ordered = ad.getitem(row, np.array([a, 1 - a, 2]))
            total = total - dirichlet_log_density(ordered, self.dirichlet_prior)
        return total

    def extract_rates(self) -> dict:
        m = self.matrix().values
        return {"alpha": float(m[1, 2]), "beta": float(m[0, 2]), "mode": self.mode}

    def set_rates(self, alpha, beta):
        if self.mode != NO_MISREPRESENTATION:
            raise ValueError("set_rates is only defined in no-misrepresentation mode")
        self.param.values = np.array([_logit(beta), _logit(alpha)])

    def to_dict(self) -> dict:
        return {"mode": self.mode, "learnable": self.learnable,
                "matrix": self.matrix().values.round(12).tolist(), **self.extract_rates()}


def condition_posterior(prior: BinaryCategorical, model: ObservationModel, observed) -> BinaryCategorical:
    p = model.posterior(np.array([prior.p1]), np.array([observed])).values[0]
    return BinaryCategorical(float(np.clip(p, 0.0, 1.0)))
