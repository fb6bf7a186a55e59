"""Training loop, evaluation, model selection and test-time labelling."""
from __future__ import annotations

import logging
import math
import warnings
from dataclasses import asdict, dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from . import autodiff as ad
from . import kernels
from .data import TabularDataset, TrainingView
from .autodiff import CLAMP
from .distributions import DEFAULT_TEMPERATURE
from .fairness import METRIC_CODES, EmptyCellWarning, MCConfig, PredictionBatch, check_metric, empirical_metric
from .observation import MISSING, NO_MISREPRESENTATION
from .seeding import stream
from .ssvae import Batch, SsVaeModel, build_model, fair_parts, imputer_cross_entropy

log = logging.getLogger(__name__)

class NumericalError(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    lam: float = 0.0
    lr: float = 1e-3
    epochs: int = 100
    batch_size: int = 128
    mc_samples: int = 100
    temperature: float = DEFAULT_TEMPERATURE
    seed: int = 0
    metric: str = "deo"
    optimizer: str = "adam"
    risk: str = "final"
    z_dim: int = 8
    hidden: tuple = (64, 64)
    learn_label_channel: bool = False
    init_rate: float = 0.3
    group_mode: str = NO_MISREPRESENTATION
    # prior weight per batch; None spreads it over the data set (B/N)
    omega_weight: Optional[float] = None
    learn_group_prior: bool = True
    missing_group_term: bool = True
    channel_lr: Optional[float] = 1e-2

    def __post_init__(self):
        self.hidden = tuple(self.hidden)
        check_metric(self.metric)
        if self.lam < 0:
            raise ValueError("lam must be nonnegative")
        if self.lr <= 0 or self.epochs < 1 or self.batch_size < 1 or self.mc_samples < 1:
            raise ValueError("learning rate, epochs, batch size and MC samples must be positive")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.risk not in ("final", "vanilla"):
            raise ValueError(f"unknown risk {self.risk!r}")

    def to_dict(self):
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d


class Adam:
    """Adam with bias correction; moment buffers live on the parameters."""

    def __init__(self, params, lr=1e-3, b1=0.9, b2=0.999, eps=1e-8, lr_overrides=None):
        self.params = list(params)
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.lr_overrides = dict(lr_overrides or {})
        self.t = 0

    def step(self, grads):
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for p in self.params:
            g = grads[p.name]
            p.m = self.b1 * p.m + (1 - self.b1) * g
            p.v = self.b2 * p.v + (1 - self.b2) * g * g
            lr = self.lr_overrides.get(p.name, self.lr)
            p.values = p.values - lr * (p.m / c1) / (np.sqrt(p.v / c2) + self.eps)


class SGD:
    def __init__(self, params, lr=1e-3, lr_overrides=None):
        self.params = list(params)
        self.lr = lr
        self.lr_overrides = dict(lr_overrides or {})

    def step(self, grads):
        for p in self.params:
            p.values = p.values - self.lr_overrides.get(p.name, self.lr) * grads[p.name]


# --------------------------------------------------------------- prediction

def predict_proba(model: SsVaeModel, x) -> np.ndarray:
    """q(y=1 | x); observed groups are never consulted."""
    feats = model.backbone(np.asarray(x, dtype=np.float64), final_activation=True)
    return ad.softmax(model.y_head(feats)).values[:, 1]


def hard_labels(p) -> np.ndarray:
    # ties go to 1
    return (np.asarray(p) >= 0.5).astype(np.int8)


def predict(model: SsVaeModel, x):
    p = predict_proba(model, x)
    return p, hard_labels(p)


def group_posterior(model: SsVaeModel, x, a_obs) -> np.ndarray:
    feats = model.backbone(np.asarray(x, dtype=np.float64), final_activation=True)
    p_a = ad.softmax(model.a_head(feats)).values[:, 1]
    return model.group_channel.posterior(p_a, np.asarray(a_obs, dtype=np.int8)).values


def evaluate(model: SsVaeModel, ds: TabularDataset, metric: str = "deo") -> dict:
    """Accuracy and fairness of hard predictions against the hidden truth."""
    if len(ds) == 0:
        raise ValueError("empty evaluation set")
    if not ds.has_truth:
        raise ValueError("evaluation needs hidden ground truth")
    _, yhat = predict(model, ds.x)
    acc = float(np.mean(yhat == ds.y_true))
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", EmptyCellWarning)
        fair = empirical_metric(PredictionBatch(yhat.astype(np.float64), ds.y_true, ds.a_true), metric).item()
    out = {"accuracy": acc, metric: fair}
    if caught:
        out["empty_cells"] = [c for w in caught for c in getattr(w.message, "cells", [])]
    return out


def _observed_accuracy(model, view) -> float:
    mask = view.y_obs != MISSING
    if not np.any(mask):
        return float("nan")
    _, yhat = predict(model, view.x[mask])
    return float(np.mean(yhat == view.y_obs[mask]))


# ----------------------------------------------------------------- training

@dataclass
class TrainResult:
    model: SsVaeModel
    curve: List[dict] = field(default_factory=list)
    empty_cell_events: int = 0


def _as_view(data) -> TrainingView:
    # strip any ground truth: training only ever sees x, y_obs, a_obs
    return TrainingView(np.asarray(data.x, dtype=np.float64), np.asarray(data.y_obs, np.int8),
                        np.asarray(data.a_obs, np.int8))


def init_model(data, cfg: TrainConfig) -> SsVaeModel:
    return build_model(_as_view(data), cfg.z_dim, cfg.hidden, stream(cfg.seed, "init"),
                       cfg.init_rate, cfg.group_mode, cfg.learn_label_channel,
                       cfg.learn_group_prior)


def train(data, cfg: TrainConfig, model: Optional[SsVaeModel] = None,
          validation: Optional[TabularDataset] = None, on_batch=None) -> TrainResult:
    """Mini-batch minimisation of SS-VAE loss + lam * fairness risk + imputer CE.

    ``data`` may be any object with ``x``, ``y_obs`` and ``a_obs``; ground
    truth is never read.  ``validation`` (with hidden truth) is only used to
    log the validation fairness metric per epoch.
    """
    view = _as_view(data)
    n = len(view)
    if n == 0:
        raise ValueError("empty training set")
    if not np.any(view.y_obs != MISSING):
        raise ValueError("at least one observed label is required")
    model = model or init_model(view, cfg)
    params = model.params
    overrides = {}
    if cfg.channel_lr is not None:
        extra = [model.pi_a_logit] if model.pi_a_logit is not None else []
        for p in model.group_channel.params + model.label_channel.params + extra:
            overrides[p.name] = cfg.channel_lr
    opt = (Adam if cfg.optimizer == "adam" else SGD)(params, cfg.lr, lr_overrides=overrides)
    mc_cfg = MCConfig(cfg.mc_samples, cfg.seed, cfg.temperature)
    shuffle_rng = stream(cfg.seed, "shuffle")
    result = TrainResult(model)
    for epoch in range(cfg.epochs):
        order = shuffle_rng.permutation(n)
        sums = {"loss": 0.0, "elbo": 0.0, "risk": 0.0, "kl_min": math.inf}
        n_batches = 0
        for b, start in enumerate(range(0, n, cfg.batch_size)):
            idx = order[start:start + cfg.batch_size]
            batch = Batch.of(view, idx)
            # None spreads the prior over the data set (weight B/N per batch)
            omega_w = len(idx) / n if cfg.omega_weight is None else cfg.omega_weight
            noise = stream(cfg.seed, "z", epoch, b).standard_normal((len(idx), model.z_dim))
            with warnings.catch_warnings(record=True) as caught:
                warnings.simplefilter("always", EmptyCellWarning)
                gumbel_rng = stream(cfg.seed, "gumbel", epoch, b) if cfg.risk == "vanilla" else None
                parts = fair_parts(model, batch, cfg.lam, cfg.metric, mc_cfg, noise,
                                   rng=gumbel_rng or stream(cfg.seed, "mc", epoch, b), risk=cfg.risk,
                                   omega_weight=omega_w, missing_group_term=cfg.missing_group_term)
            result.empty_cell_events += len(caught)
            total = parts.loss + imputer_cross_entropy(parts.post, batch.y_obs)
            value = total.item()
            if not np.isfinite(value):
                raise NumericalError(f"non-finite loss at epoch {epoch}, batch {b}")
            grads = ad.backward(total, params)
            opt.step(grads)
            terms = parts.terms
            sums["loss"] += parts.loss.item()
            sums["elbo"] += float(terms.elbo.values.mean())
            sums["kl_min"] = min(sums["kl_min"], float(terms.kl_z.values.min()),
                                 float(terms.kl_y.values.min()), float(terms.kl_a.values.min()))
            if parts.risk is not None:
                sums["risk"] += parts.risk.item()
            n_batches += 1
            if on_batch is not None:
                on_batch(epoch, b, parts)
        row = {"epoch": epoch, "loss": sums["loss"] / n_batches, "elbo": sums["elbo"] / n_batches,
               "min_kl": sums["kl_min"], "train_acc": _observed_accuracy(model, view)}
        if cfg.lam > 0:
            row["fairness_risk"] = sums["risk"] / n_batches
        if validation is not None and validation.has_truth:
            row["val_" + cfg.metric] = evaluate(model, validation, cfg.metric)[cfg.metric]
        row.update({f"rate_{k}": v for k, v in model.group_channel.extract_rates().items() if k != "mode"})
        result.curve.append(row)
        log.debug("epoch %d: %s", epoch, row)
    return result


def extract_rates(model: SsVaeModel) -> dict:
    return model.group_channel.extract_rates()


# ---------------------------------------------------------- model selection

@dataclass
class Candidate:
    lam: float
    val_deo: float
    train_acc: float
    model: Optional[SsVaeModel] = None
    config: Optional[TrainConfig] = None


@dataclass(frozen=True)
class SelectionProtocol:
    start: float = 0.01
    step: float = 0.01
    accuracy_ratio: float = 0.97

    def __post_init__(self):
        if self.start <= 0 or self.step <= 0 or not 0 < self.accuracy_ratio <= 1:
            raise ValueError("invalid selection protocol")


def select_model(candidates: Sequence[Candidate], reference_acc: float,
                 protocol: SelectionProtocol = SelectionProtocol()):
    """Pick the most accurate candidate whose validation fairness metric is
    below the threshold and whose training accuracy is at least
    ``accuracy_ratio * reference_acc``; raise the threshold until one
    qualifies.  Ties: highest training accuracy, then smallest lambda.

    Returns ``(candidate, threshold)``.
    """
    if not candidates:
        raise ValueError("no candidates")
    floor = protocol.accuracy_ratio * reference_acc
    eligible = [c for c in candidates if c.train_acc >= floor]
    if not eligible:
        # nobody meets the floor: fall back to the fairness threshold alone
        eligible = list(candidates)
    k = 0
    while True:
        threshold = round(protocol.start + k * protocol.step, 10)
        under = [c for c in eligible if c.val_deo < threshold]
        if under:
            best = min(under, key=lambda c: (-c.train_acc, c.lam))
            return best, threshold
        k += 1


# -------------------------------------------------------- softened threshold

def soften_threshold(f, tau, temperature=1.0, a=None, tau0=None, tau1=None):
    """``sigmoid((logit(f) - tau) / T)``; with ``a`` given, the threshold is
    ``tau1 * a + tau0 * (1 - a)``."""
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    f = np.clip(np.asarray(f, dtype=np.float64), CLAMP, 1 - CLAMP)
    if a is not None:
        a = np.asarray(a, dtype=np.float64)
        tau = tau1 * a + tau0 * (1 - a)
    z = (np.log(f) - np.log1p(-f) - tau) / temperature
    return ad._sigmoid(np.atleast_1d(z)).reshape(np.shape(z))


# ---------------------------------------------------- test-time risk labels

class LabelingObjective:
    """Negative log-likelihood of a labelling plus the expected fairness risk,
    where the classifier probabilities are fixed and the labelling defines the
    class cells.  The expectation over groups uses fixed draws (or exact
    enumeration weights), so the objective is deterministic."""

    def __init__(self, p, A, weights, metric):
        self.p = np.asarray(p, dtype=np.float64)
        self.A = np.asarray(A, dtype=np.int8)
        self.w = np.asarray(weights, dtype=np.float64)
        self.code = METRIC_CODES[check_metric(metric)]
        pc = np.clip(self.p, CLAMP, 1 - CLAMP)
        self.logp1, self.logp0 = np.log(pc), np.log1p(-pc)

    def __call__(self, labels) -> float:
        labels = np.asarray(labels, dtype=np.int8)
        nll = -np.mean(np.where(labels == 1, self.logp1, self.logp0))
        Y = np.broadcast_to(labels, self.A.shape)
        values, _, _ = kernels.metric_rows(self.p, self.A, Y, self.code, np.zeros(len(self.w)))
        return float(nll + values @ self.w)


def group_draws(q_a, a_fixed, n_samples, rng, exact_limit=12):
    """Group assignments and weights for the fairness expectation: exact
    enumeration when at most ``exact_limit`` groups are missing, else
    ``n_samples`` Monte Carlo draws."""
    q_a = np.asarray(q_a, dtype=np.float64)
    a_fixed = np.asarray(a_fixed, dtype=np.int8)
    miss = np.flatnonzero(a_fixed == MISSING)
    if len(miss) <= exact_limit:
        m = len(miss)
        idx = np.arange(1 << m)
        bits = ((idx[:, None] >> np.arange(m)) & 1).astype(np.int8)
        A = np.repeat(a_fixed[None, :], len(idx), axis=0)
        A[:, miss] = bits
        w = np.prod(np.where(bits == 1, q_a[miss], 1 - q_a[miss]), axis=1)
        return A, w
    U = rng.random((n_samples, len(q_a)))
    A = np.where(a_fixed >= 0, a_fixed, (U < q_a).astype(np.int8)).astype(np.int8)
    return A, np.full(n_samples, 1.0 / n_samples)


def coordinate_descent(objective, labels, max_passes=100):
    """Flip single labels while the objective strictly decreases; stop after a
    pass without flips.  Returns (labels, flips, passes)."""
    labels = np.array(labels, dtype=np.int8)
    current = objective(labels)
    flips = passes = 0
    while passes < max_passes:
        passes += 1
        changed = False
        for i in range(len(labels)):
            labels[i] ^= 1
            trial = objective(labels)
            if trial < current - 1e-15:
                current = trial
                flips += 1
                changed = True
            else:
                labels[i] ^= 1
        if not changed:
            break
    return labels, flips, passes


def tune_group_thresholds(objective, p, groups, grid=None):
    """Best (tau0, tau1) on ``p`` for hard groups; (0.5, 0.5) included."""
    p = np.asarray(p)
    if grid is None:
        grid = np.unique(np.concatenate([[0.5], np.quantile(p, np.linspace(0.05, 0.95, 19))]))
    best = (objective(hard_labels(p)), 0.5, 0.5)
    for t0 in grid:
        for t1 in grid:
            labels = np.where(groups == 1, p >= t1, p >= t0).astype(np.int8)
            val = objective(labels)
            if val < best[0] - 1e-15:
                best = (val, float(t0), float(t1))
    return best[1], best[2]


def test_time_risk_labeling(p, q_a, a_obs=None, metric="deo", n_samples=100, seed=0,
                            tune_thresholds=True):
    """Labels minimising NLL + expected fairness risk by coordinate descent.

    Starts from rounding ``p``; optionally tunes group-specific thresholds
    (with groups set to the argmax of ``q_a``) and keeps them only if they
    lower the objective; then flips labels one at a time.
    """
    p = np.asarray(p, dtype=np.float64)
    q_a = np.asarray(q_a, dtype=np.float64)
    a_obs = np.full(len(p), MISSING, dtype=np.int8) if a_obs is None else np.asarray(a_obs, np.int8)
    a_fixed = np.where(a_obs != MISSING, a_obs, MISSING).astype(np.int8)
    A, w = group_draws(q_a, a_fixed, n_samples, stream(seed, "test"))
    full = LabelingObjective(p, A, w, metric)
    labels = hard_labels(p)
    info = {"initial_objective": full(labels), "thresholds": (0.5, 0.5)}
    if tune_thresholds and len(p) > 1:
        groups = np.where(a_fixed != MISSING, a_fixed, (q_a >= 0.5)).astype(np.int8)
        hard_obj = LabelingObjective(p, groups[None, :], np.ones(1), metric)
        t0, t1 = tune_group_thresholds(hard_obj, p, groups)
        tuned = np.where(groups == 1, p >= t1, p >= t0).astype(np.int8)
        if full(tuned) < info["initial_objective"]:
            labels = tuned
            info["thresholds"] = (t0, t1)
    labels, flips, passes = coordinate_descent(full, labels)
    info.update(flips=flips, passes=passes, final_objective=full(labels))
    return labels, info


def label_test_set(model: SsVaeModel, ds: TabularDataset, metric="deo", n_samples=100, seed=0):
    p = predict_proba(model, ds.x)
    q_a = group_posterior(model, ds.x, ds.a_obs)
    return test_time_risk_labeling(p, q_a, ds.a_obs, metric, n_samples, seed)
