"""Semi-supervised VAE with latent class y, latent group a and Gaussian z.

Encoder: a shared tanh backbone over x feeds four linear heads, the class
head (``q(y|x)``), the group head (``q(a|x)``) and the Gaussian heads for z,
plus a fifth linear head, the fairness-oblivious label imputer.  Observed
labels and groups enter through the observation channels, which turn the
head outputs into ``q(y|x, y_obs)`` and ``q(a|x, a_obs)``.

Decoder: a tanh MLP from ``(onehot(a), onehot(y), z)`` to the mean of a
unit-variance Gaussian over x.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .distributions import DiagGaussian, kl_categorical, kl_gaussian_standard, reparam_sample
from .fairness import MCConfig, MissingnessPosteriors, mc_fairness_risk, vanilla_fairness_risk
from .observation import MISSING, NO_MISREPRESENTATION, ObservationModel

LOG_2PI = float(np.log(2 * np.pi))


class MLP:
    def __init__(self, name, sizes, rng, activation="tanh"):
        self.layers = []
        for k, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            w = rng.standard_normal((fan_in, fan_out)) / np.sqrt(fan_in)
            self.layers.append((Parameter(f"{name}.{k}.w", w),
                                Parameter(f"{name}.{k}.b", np.zeros(fan_out))))
        self.activation = activation

    @property
    def params(self):
        return [p for layer in self.layers for p in layer]

    def __call__(self, x, final_activation=False):
        h = ad.as_tensor(x)
        last = len(self.layers) - 1
        for k, (w, b) in enumerate(self.layers):
            h = ad.affine(h, w.tensor, b.tensor)
            if k < last or final_activation:
                h = ad.tanh(h)
        return h


@dataclass
class Batch:
    x: np.ndarray
    a_obs: np.ndarray
    y_obs: np.ndarray

    @classmethod
    def of(cls, view, idx=None):
        if idx is None:
            return cls(np.asarray(view.x, dtype=np.float64), np.asarray(view.a_obs, np.int8),
                       np.asarray(view.y_obs, np.int8))
        return cls(view.x[idx], view.a_obs[idx].astype(np.int8), view.y_obs[idx].astype(np.int8))

    def __len__(self):
        return len(self.x)


@dataclass
class Posteriors:
    z: DiagGaussian
    q_y: Tensor        # q(y=1 | x, y_obs), shape (n,)
    q_a: Tensor        # q(a=1 | x, a_obs), shape (n,)
    p_y: Tensor        # q(y=1 | x): the classifier
    p_a: Tensor        # q(a=1 | x)
    features: Tensor   # backbone output
    imputer_logits: Tensor


class SsVaeModel:
    def __init__(self, d, z_dim=8, hidden=(64, 64), pi_y=0.5, pi_a=0.5,
                 group_channel: Optional[ObservationModel] = None,
                 label_channel: Optional[ObservationModel] = None,
                 rng: Optional[np.random.Generator] = None, learn_pi_a: bool = False):
        rng = rng if rng is not None else np.random.default_rng(0)
        hidden = tuple(hidden)
        self.d, self.z_dim = d, z_dim
        self.pi_y, self.pi_a = float(pi_y), float(pi_a)
        # learned group prior, stored as a logit; pi_a is its initial value
        self.pi_a_logit = (Parameter("pi_a.logit", np.array([np.log(pi_a / (1 - pi_a))]))
                           if learn_pi_a else None)
        self.backbone = MLP("backbone", (d, *hidden), rng)
        width = hidden[-1]
        self.y_head = MLP("y_head", (width, 2), rng)
        self.a_head = MLP("a_head", (width, 2), rng)
        self.mu_head = MLP("mu_head", (width, z_dim), rng)
        self.logvar_head = MLP("logvar_head", (width, z_dim), rng)
        self.imputer = MLP("imputer", (width, 2), rng)
        self.decoder = MLP("decoder", (4 + z_dim, *hidden, d), rng)
        self.group_channel = group_channel or ObservationModel("obs_a")
        self.label_channel = label_channel or ObservationModel.fixed(DEFAULT_LABEL_RATE, "obs_y")

    @property
    def params(self):
        out = []
        for m in (self.backbone, self.y_head, self.a_head, self.mu_head, self.logvar_head,
                  self.imputer, self.decoder):
            out.extend(m.params)
        out.extend(self.group_channel.params)
        out.extend(self.label_channel.params)
        if self.pi_a_logit is not None:
            out.append(self.pi_a_logit)
        return out

    def group_prior(self):
        """``pi_a`` as a float, or a differentiable scalar tensor when learned."""
        if self.pi_a_logit is None:
            return self.pi_a
        return ad.getitem(ad.sigmoid(self.pi_a_logit.tensor), 0)

    def group_prior_value(self) -> float:
        p = self.group_prior()
        return float(p.values) if isinstance(p, Tensor) else p

    def head_params(self, which):
        return getattr(self, which).params

    def state_dict(self):
        return {p.name: p.values.copy() for p in self.params}

    def load_state_dict(self, state):
        for p in self.params:
            if p.name not in state:
                raise KeyError(f"checkpoint lacks {p.name}")
            if state[p.name].shape != p.shape:
                raise ValueError(f"{p.name}: shape {state[p.name].shape} != {p.shape}")
            p.values = state[p.name].copy()


DEFAULT_LABEL_RATE = 0.25


def _softmax_p1(logits: Tensor) -> Tensor:
    return ad.getitem(ad.softmax(logits), (slice(None), 1))


def encode(model: SsVaeModel, x, a_obs, y_obs) -> Posteriors:
    feats = model.backbone(x, final_activation=True)
    p_y = _softmax_p1(model.y_head(feats))
    p_a = _softmax_p1(model.a_head(feats))
    z = DiagGaussian(model.mu_head(feats), model.logvar_head(feats))
    q_y = model.label_channel.posterior(p_y, y_obs)
    q_a = model.group_channel.posterior(p_a, a_obs)
    return Posteriors(z, q_y, q_a, p_y, p_a, feats, model.imputer(feats))


def _onehot(v, n):
    v = np.broadcast_to(np.asarray(v, dtype=np.intp), (n,))
    out = np.zeros((n, 2))
    out[np.arange(n), v] = 1.0
    return out


def decode(model: SsVaeModel, a, y, z) -> Tensor:
    z = ad.as_tensor(z)
    n = z.shape[0]
    inp = ad.concat([ad.Tensor(_onehot(a, n)), ad.Tensor(_onehot(y, n)), z], axis=-1)
    return model.decoder(inp)


def gaussian_loglik(x, mean: Tensor) -> Tensor:
    """Per-record unit-variance Gaussian log density of x at ``mean``."""
    diff = ad.as_tensor(x) - mean
    d = mean.shape[1]
    return ad.sum_(diff * diff, 1) * -0.5 - 0.5 * d * LOG_2PI


def _pair(q1: Tensor) -> Tensor:
    """(n,) probability of outcome 1 -> (n, 2) rows (P(0), P(1))."""
    col = ad.reshape(q1, (-1, 1))
    return ad.concat([1.0 - col, col], axis=-1)


def expected_log_channel(channel: ObservationModel, q1: Tensor, observed) -> Tensor:
    """Per-record ``E_{latent ~ q}[log P(observed | latent)]`` with 0 log 0 = 0."""
    lik, mask = channel.likelihood(observed)
    safe = ad.log(ad.where(mask, 1.0, lik))
    return ad.sum_(ad.where(mask, 0.0, _pair(q1) * safe), 1)


def reconstruction(model, x, z: Tensor, q_a: Tensor, q_y: Tensor, mode="enumerate",
                   rng: Optional[np.random.Generator] = None) -> Tensor:
    """Per-record ``E_{a, y ~ q}[log p(x | a, y, z)]``.

    ``enumerate`` sums over the four (a, y) pairs in one stacked decoder call;
    ``commit`` requires degenerate q and decodes once at the committed values;
    ``sample`` draws a single (a, y) per record from q using ``rng``.
    """
    n = z.shape[0]
    if mode == "enumerate":
        combos = [(a, y) for a in (0, 1) for y in (0, 1)]
        a_idx = np.repeat([c[0] for c in combos], n)
        y_idx = np.repeat([c[1] for c in combos], n)
        means = decode(model, a_idx, y_idx, ad.concat([z] * 4, axis=0))
        ll = gaussian_loglik(np.concatenate([x] * 4, axis=0), means)
        total = None
        for k, (a, y) in enumerate(combos):
            wa = q_a if a == 1 else 1.0 - q_a
            wy = q_y if y == 1 else 1.0 - q_y
            term = wa * wy * ad.getitem(ll, slice(k * n, (k + 1) * n))
            total = term if total is None else total + term
        return total
    if mode == "commit":
        qa, qy = q_a.values, q_y.values
        if not (np.all((qa == 0) | (qa == 1)) and np.all((qy == 0) | (qy == 1))):
            raise ValueError("commit mode needs degenerate posteriors")
        return gaussian_loglik(x, decode(model, qa.astype(int), qy.astype(int), z))
    if mode == "sample":
        a = (rng.random(n) < q_a.values).astype(int)
        y = (rng.random(n) < q_y.values).astype(int)
        return gaussian_loglik(x, decode(model, a, y, z))
    raise ValueError(f"unknown reconstruction mode {mode!r}")


@dataclass
class ElboTerms:
    elbo: Tensor        # per record
    recon: Tensor
    log_channel_y: Tensor
    log_channel_a: Tensor
    kl_z: Tensor
    kl_y: Tensor
    kl_a: Tensor


def elbo_terms(model: SsVaeModel, batch: Batch, post: Posteriors, noise,
               mode="enumerate", rng=None) -> ElboTerms:
    z = reparam_sample(post.z, noise)
    recon = reconstruction(model, batch.x, z, post.q_a, post.q_y, mode, rng)
    ly = expected_log_channel(model.label_channel, post.q_y, batch.y_obs)
    la = expected_log_channel(model.group_channel, post.q_a, batch.a_obs)
    kl_z = kl_gaussian_standard(post.z, axis=1)
    kl_y = kl_categorical(post.q_y, model.pi_y)
    kl_a = kl_categorical(post.q_a, model.group_prior())
    total = recon + ly + la - kl_z - kl_y - kl_a
    return ElboTerms(total, recon, ly, la, kl_z, kl_y, kl_a)


def elbo(model: SsVaeModel, x, a_obs, y_obs, noise, mode="enumerate", rng=None) -> Tensor:
    batch = Batch(np.asarray(x, dtype=np.float64), np.asarray(a_obs, np.int8), np.asarray(y_obs, np.int8))
    post = encode(model, batch.x, batch.a_obs, batch.y_obs)
    return elbo_terms(model, batch, post, noise, mode, rng).elbo


def _observed_log_marginal(channel, p1: Tensor, observed, include_missing=False) -> Tensor:
    observed = np.asarray(observed)
    idx = np.arange(len(observed)) if include_missing else np.flatnonzero(observed != MISSING)
    if idx.size == 0:
        return ad.Tensor(0.0)
    m = channel.marginal(ad.getitem(p1, idx), np.asarray(observed)[idx])
    return ad.sum_(ad.log(m))


@dataclass
class LossParts:
    loss: Tensor
    post: Posteriors
    terms: ElboTerms
    risk: Optional[Tensor] = None
    imputer_ce: Optional[Tensor] = None


def ssvae_parts(model: SsVaeModel, batch: Batch, noise, omega_weight: float = 1.0,
                missing_group_term: bool = False) -> LossParts:
    """Loss pieces of the SS-VAE objective.

    ``missing_group_term`` extends the group-marginal term
    ``log sum_a h(a|x) P(a_obs|a)`` to records whose group is unavailable,
    making it the full likelihood of the observed group pattern.
    """
    post = encode(model, batch.x, batch.a_obs, batch.y_obs)
    terms = elbo_terms(model, batch, post, noise)
    n = len(batch)
    supervised = (_observed_log_marginal(model.group_channel, post.p_a, batch.a_obs, missing_group_term)
                  + _observed_log_marginal(model.label_channel, post.p_y, batch.y_obs))
    omega = (model.group_channel.prior_penalty() + model.label_channel.prior_penalty()) * omega_weight
    loss = omega - (ad.sum_(terms.elbo) + supervised) * (1.0 / n)
    return LossParts(loss, post, terms)


def ssvae_loss(model: SsVaeModel, batch: Batch, noise) -> Tensor:
    return ssvae_parts(model, batch, noise).loss


def imputer_cross_entropy(post: Posteriors, y_obs) -> Tensor:
    idx = np.flatnonzero(np.asarray(y_obs) != MISSING)
    if idx.size == 0:
        return ad.Tensor(0.0)
    logp = ad.log_softmax(ad.getitem(post.imputer_logits, idx))
    picked = ad.getitem(logp, (np.arange(idx.size), np.asarray(y_obs)[idx].astype(np.intp)))
    return -ad.mean(picked)


def imputed_label_probs(post: Posteriors, y_obs) -> np.ndarray:
    """P_g(y=1|x): degenerate at observed labels, imputer head elsewhere.
    Returned as plain values (no gradient)."""
    y_obs = np.asarray(y_obs)
    g = ad.stop_gradient(_softmax_p1(post.imputer_logits)).values
    return np.where(y_obs == MISSING, g, y_obs.astype(np.float64))


def impute_labels(model: SsVaeModel, x, y_obs) -> np.ndarray:
    y_obs = np.asarray(y_obs)
    if not np.any(y_obs != MISSING):
        raise ValueError("label imputation needs at least one observed label")
    feats = model.backbone(x, final_activation=True)
    logits = model.imputer(feats)
    g = ad.stop_gradient(_softmax_p1(logits)).values
    return np.where(y_obs == MISSING, g, y_obs.astype(np.float64))


def risk_posteriors(model: SsVaeModel, post: Posteriors, batch: Batch) -> MissingnessPosteriors:
    a_fixed = (batch.a_obs if model.group_channel.mode == NO_MISREPRESENTATION
               else np.full(len(batch), MISSING, dtype=np.int8))
    return MissingnessPosteriors(
        ad.stop_gradient(post.q_a).values, a_fixed,
        imputed_label_probs(post, batch.y_obs), batch.y_obs)


def fair_parts(model: SsVaeModel, batch: Batch, lam: float, metric: str, cfg: MCConfig,
               noise, rng: Optional[np.random.Generator] = None, risk: str = "final",
               gumbel=None, warn=True, straight_through=True, omega_weight=1.0,
               missing_group_term=False) -> LossParts:
    """SS-VAE loss plus ``lam`` times the fairness risk.

    ``risk="final"`` uses the stop-gradient Monte Carlo risk with the imputer
    for missing labels; ``risk="vanilla"`` is the ablation with straight-through
    Gumbel-Softmax sampling from the live posteriors.
    """
    if lam < 0:
        raise ValueError("lam must be nonnegative")
    parts = ssvae_parts(model, batch, noise, omega_weight, missing_group_term)
    if lam == 0:
        return parts
    post = parts.post
    if risk == "final":
        r = mc_fairness_risk(risk_posteriors(model, post, batch), post.p_y, metric, cfg, rng, warn=warn)
    elif risk == "vanilla":
        a_obs = (batch.a_obs if model.group_channel.mode == NO_MISREPRESENTATION
                 else np.full(len(batch), MISSING, dtype=np.int8))
        r = vanilla_fairness_risk(post.q_a, a_obs, post.q_y, batch.y_obs, post.p_y, metric, cfg,
                                  rng, noise=gumbel, straight_through=straight_through)
    else:
        raise ValueError(f"unknown risk {risk!r}")
    parts.loss = parts.loss + r * lam
    parts.risk = r
    return parts


def fair_objective(model, batch, lam, metric="deo", cfg=None, noise=None, rng=None,
                   risk="final", gumbel=None, straight_through=True) -> Tensor:
    cfg = cfg or MCConfig()
    if noise is None:
        noise = np.zeros((len(batch), model.z_dim))
    return fair_parts(model, batch, lam, metric, cfg, noise, rng, risk, gumbel,
                      straight_through=straight_through).loss


def build_model(view, z_dim=8, hidden=(64, 64), rng=None, init_rate=0.3, group_mode=NO_MISREPRESENTATION,
                learn_label_channel=False, learn_pi_a=False) -> SsVaeModel:
    """Model with priors and label channel set from the observed data."""
    y_obs, a_obs = np.asarray(view.y_obs), np.asarray(view.a_obs)
    if not np.any(y_obs != MISSING):
        raise ValueError("at least one observed label is required")
    pi_y = float(np.mean(y_obs[y_obs != MISSING]))
    pi_a = float(np.mean(a_obs[a_obs != MISSING])) if np.any(a_obs != MISSING) else 0.5
    pi_y, pi_a = (float(np.clip(v, 0.01, 0.99)) for v in (pi_y, pi_a))
    label_rate = float(np.mean(y_obs == MISSING))
    if learn_label_channel:
        label_channel = ObservationModel("obs_y", init_rate=init_rate)
    else:
        label_channel = ObservationModel.fixed(label_rate, "obs_y")
    group_channel = ObservationModel("obs_a", mode=group_mode, init_rate=init_rate)
    return SsVaeModel(view.x.shape[1], z_dim, hidden, pi_y, pi_a, group_channel, label_channel, rng,
                      learn_pi_a=learn_pi_a)
