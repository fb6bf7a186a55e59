import itertools
import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from fairssvae import autodiff as ad
from fairssvae.autodiff import Parameter
from fairssvae.fairness import (METRIC_CODES, EmptyCellWarning, MCConfig, MissingnessPosteriors, PredictionBatch,
                                bound_fixture, concentration_harness, empirical_metric, exact_risk_bruteforce,
                                hoeffding_bound, mc_fairness_risk, metric_bound, required_sample_size,
                                vanilla_fairness_risk)
from fairssvae.observation import MISSING

METRICS = sorted(METRIC_CODES)


def metric(p, y, a, kind):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", EmptyCellWarning)
        return empirical_metric(PredictionBatch(np.asarray(p, float), y, a), kind).item()


def naive(p, y, a, kind):
    """Loop-based reference for the three metrics."""
    p, y, a = map(np.asarray, (p, y, a))

    def gap(sel):
        g0, g1 = sel & (a == 0), sel & (a == 1)
        if not g0.any() or not g1.any():
            return 0.0
        return abs(p[g0].mean() - p[g1].mean())

    everyone = np.ones(len(p), bool)
    if kind == "md":
        return gap(everyone)
    if kind == "eopp":
        return gap(y == 1)
    return gap(y == 0) + gap(y == 1)


# ---------------------------------------------------------------- metrics

def test_deo_with_empty_cell_warns():
    with pytest.warns(EmptyCellWarning) as rec:
        v = empirical_metric(PredictionBatch(np.array([1.0, 0, 1, 1]), [1, 1, 1, 0], [0, 0, 1, 1]), "deo")
    assert v.item() == pytest.approx(0.5)
    assert {"a": 0, "y": 0} in rec[0].message.cells


def test_md_identical_predictions_zero():
    assert metric([0.3, 0.3, 0.3], [0, 1, 1], [0, 1, 0], "md") == 0.0


def test_md_hand_example():
    assert metric([0.2, 0.4, 0.6, 0.8], [0, 1, 0, 1], [0, 0, 1, 1], "md") == pytest.approx(0.4)


def test_length_mismatch_rejected():
    with pytest.raises(ValueError):
        PredictionBatch(np.ones(3), [0, 1], [0, 1, 1])


def test_unknown_metric_rejected():
    with pytest.raises(ValueError):
        empirical_metric(PredictionBatch(np.ones(2), [0, 1], [0, 1]), "ratio")


def test_metric_gradient_matches_fd():
    p = Parameter("p", np.array([0.1, 0.8, 0.4, 0.6, 0.3, 0.9]))
    batch = lambda: PredictionBatch(p.tensor, [0, 1, 0, 1, 1, 0], [0, 0, 1, 1, 0, 1])  # noqa: E731
    for kind in METRICS:
        assert ad.finite_difference_check(lambda: empirical_metric(batch(), kind), [p]) <= 1e-6


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 12).flatmap(lambda n: st.tuples(
    arrays(np.float64, n, elements=st.floats(0, 1)),
    arrays(np.int8, n, elements=st.integers(0, 1)),
    arrays(np.int8, n, elements=st.integers(0, 1)))), st.sampled_from(METRICS))
def test_metric_matches_loop_reference_and_bounds(data, kind):
    p, y, a = data
    v = metric(p, y, a, kind)
    assert v == pytest.approx(naive(p, y, a, kind), abs=1e-12)
    assert 0 <= v <= metric_bound(kind) + 1e-12


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 10).flatmap(lambda n: st.tuples(
    arrays(np.float64, n, elements=st.floats(0, 1)),
    arrays(np.int8, n, elements=st.integers(0, 1)),
    arrays(np.int8, n, elements=st.integers(0, 1)),
    st.permutations(range(n)))), st.sampled_from(METRICS))
def test_permutation_and_group_swap_invariance(data, kind):
    p, y, a, perm = data
    perm = np.asarray(perm)
    base = metric(p, y, a, kind)
    assert metric(p[perm], y[perm], a[perm], kind) == pytest.approx(base, abs=1e-12)
    assert metric(p, y, 1 - a, kind) == pytest.approx(base, abs=1e-12)


# ---------------------------------------------------------------- kernels

def _random_instance(rng, n=40, S=30):
    p = rng.random(n)
    a_fixed = np.where(rng.random(n) < 0.4, MISSING, rng.integers(0, 2, n)).astype(np.int8)
    y_fixed = np.where(rng.random(n) < 0.3, MISSING, rng.integers(0, 2, n)).astype(np.int8)
    return p, a_fixed, rng.random(n), y_fixed, rng.random(n), rng.random((S, n)), rng.random((S, n))


@pytest.mark.parametrize("kind", METRICS)
def test_backends_agree_with_reference(backend, kind, rng):
    from fairssvae import kernels
    ref = kernels.available_backends()["python"]
    args = _random_instance(rng)
    v1, g1, e1 = backend.mc_rows(*args, METRIC_CODES[kind])
    v0, g0, e0 = ref.mc_rows(*args, METRIC_CODES[kind])
    np.testing.assert_allclose(v1, v0, atol=1e-12)
    np.testing.assert_allclose(g1, g0, atol=1e-12)
    np.testing.assert_array_equal(e1, e0)


def test_metric_rows_matches_loop(backend, rng):
    n = 15
    p = rng.random(n)
    A, Y = rng.integers(0, 2, (4, n)).astype(np.int8), rng.integers(0, 2, (4, n)).astype(np.int8)
    for kind in METRICS:
        values, _, _ = backend.metric_rows(p, A, Y, METRIC_CODES[kind], np.ones(4))
        for r in range(4):
            assert values[r] == pytest.approx(naive(p, Y[r], A[r], kind), abs=1e-12)


# ------------------------------------------------------------ expectation

def two_record_case():
    post = MissingnessPosteriors(np.array([0.5, 1.0]), np.array([MISSING, 1]), np.array([0.0, 0.0]),
                                 np.array([0, 0]))
    return post, np.array([1.0, 0.0])


def test_two_record_exact_and_mc():
    post, p = two_record_case()
    assert exact_risk_bruteforce(post, p, "md") == pytest.approx(0.5)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", EmptyCellWarning)
        est = mc_fairness_risk(post, p, "md", MCConfig(n_samples=100_000, seed=0)).item()
    assert abs(est - 0.5) <= 0.01


def test_degenerate_posteriors_give_committed_metric():
    a = np.array([0, 1, 0, 1, 1])
    y = np.array([1, 1, 0, 0, 1])
    p = np.array([0.9, 0.3, 0.5, 0.2, 0.7])
    post = MissingnessPosteriors(a.astype(float), np.full(5, MISSING), y.astype(float), np.full(5, MISSING))
    for kind in METRICS:
        for N in (1, 7):
            est = mc_fairness_risk(post, p, kind, MCConfig(n_samples=N)).item()
            assert est == pytest.approx(metric(p, y, a, kind), abs=1e-12)
        assert exact_risk_bruteforce(post, p, kind) == pytest.approx(metric(p, y, a, kind), abs=1e-12)


def test_no_missing_bruteforce_equals_empirical():
    post = MissingnessPosteriors(np.zeros(4), [0, 0, 1, 1], np.zeros(4), [0, 1, 0, 1])
    p = np.array([0.1, 0.5, 0.7, 0.2])
    assert exact_risk_bruteforce(post, p, "deo") == pytest.approx(metric(p, [0, 1, 0, 1], [0, 0, 1, 1], "deo"))


def test_bruteforce_limit_reports_count():
    n = 21
    post = MissingnessPosteriors(np.full(n, 0.5), np.full(n, MISSING), np.zeros(n), np.zeros(n))
    with pytest.raises(ValueError, match="21"):
        exact_risk_bruteforce(post, np.full(n, 0.5), "md")


def _itertools_expectation(posts_and_preds, kind):
    """E[sum of per-block metrics] by enumerating the joint product space."""
    slots = []
    for b, (post, _) in enumerate(posts_and_preds):
        slots += [(b, "a", i, post.q_a[i]) for i in np.flatnonzero(post.a_fixed == MISSING)]
        slots += [(b, "y", i, post.q_y[i]) for i in np.flatnonzero(post.y_fixed == MISSING)]
    total = 0.0
    for bits in itertools.product((0, 1), repeat=len(slots)):
        w = 1.0
        filled = [(post.a_fixed.astype(int).copy(), post.y_fixed.astype(int).copy()) for post, _ in posts_and_preds]
        for (b, kind_, i, q), bit in zip(slots, bits):
            w *= q if bit else 1 - q
            filled[b][0 if kind_ == "a" else 1][i] = bit
        total += w * sum(naive(p, y, a, kind) for (_, p), (a, y) in zip(posts_and_preds, filled))
    return total


def test_bruteforce_matches_itertools_and_is_linear():
    rng = np.random.default_rng(11)
    blocks = []
    for _ in range(2):
        n = 5
        post = MissingnessPosteriors(rng.random(n), np.where(rng.random(n) < 0.5, MISSING, rng.integers(0, 2, n)),
                                     rng.random(n), np.where(rng.random(n) < 0.3, MISSING, rng.integers(0, 2, n)))
        blocks.append((post, rng.random(n)))
    for kind in METRICS:
        split_sum = sum(exact_risk_bruteforce(post, p, kind) for post, p in blocks)
        assert split_sum == pytest.approx(_itertools_expectation(blocks, kind), abs=1e-12)
        for blk in blocks:
            assert exact_risk_bruteforce(*blk, kind) == pytest.approx(_itertools_expectation([blk], kind), abs=1e-12)


@pytest.mark.parametrize("kind", METRICS)
def test_mc_matches_bruteforce_within_001(kind):
    rng = np.random.default_rng(METRIC_CODES[kind])
    n = 8
    p = rng.random(n)
    a_fixed = np.array([MISSING, 0, MISSING, 1, MISSING, 0, MISSING, 1])
    y_fixed = np.array([1, MISSING, 0, 1, MISSING, 0, 1, MISSING])
    post = MissingnessPosteriors(rng.random(n), a_fixed, rng.random(n), y_fixed)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", EmptyCellWarning)
        est = mc_fairness_risk(post, p, kind, MCConfig(n_samples=100_000, seed=1)).item()
    assert abs(est - exact_risk_bruteforce(post, p, kind)) <= 0.01


def test_mc_is_unbiased():
    post, p = bound_fixture()
    exact = exact_risk_bruteforce(post, p, "deo")
    rng = np.random.default_rng(0)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", EmptyCellWarning)
        draws = np.array([mc_fairness_risk(post, p, "deo", MCConfig(n_samples=1), rng=rng).item()
                          for _ in range(10_000)])
    se = draws.std(ddof=1) / math.sqrt(len(draws))
    assert abs(draws.mean() - exact) <= 4 * se


def test_mc_gradient_matches_fd_with_fixed_draws():
    post, p0 = bound_fixture()
    p = Parameter("p", p0.copy())

    def f():
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", EmptyCellWarning)
            return mc_fairness_risk(post, p.tensor, "deo", MCConfig(n_samples=50, seed=4))

    assert ad.finite_difference_check(f, [p]) <= 1e-6


def test_mc_gradient_is_zero_for_posterior_parameters():
    logit = Parameter("h", np.array([0.2, -0.4, 0.9, 0.0]))
    pred = Parameter("f", np.array([0.3, 0.4, 0.8, 0.5]))
    q = ad.sigmoid(logit.tensor)
    post = MissingnessPosteriors(q, np.full(4, MISSING), q, np.full(4, MISSING))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", EmptyCellWarning)
        risk = mc_fairness_risk(post, ad.sigmoid(pred.tensor), "deo", MCConfig(n_samples=64))
    grads = ad.backward(risk + ad.sum_(q) * 0.0, [logit, pred])
    assert np.array_equal(grads["h"], np.zeros(4))
    assert np.any(grads["f"] != 0)


def test_posteriors_validate():
    with pytest.raises(ValueError):
        MissingnessPosteriors(np.array([1.2]), [MISSING], np.array([0.5]), [MISSING])
    with pytest.raises(ValueError):
        MissingnessPosteriors(np.array([0.2, 0.3]), [MISSING], np.array([0.5]), [MISSING])
    with pytest.raises(ValueError):
        MCConfig(n_samples=0)


# ---------------------------------------------------------------- vanilla

def test_vanilla_matches_mc_for_degenerate_posteriors():
    rng = np.random.default_rng(2)
    n = 10
    a = rng.integers(0, 2, n)
    y = rng.integers(0, 2, n)
    p = rng.random(n)
    cfg = MCConfig(n_samples=20, temperature=0.1)
    for kind in METRICS:
        # groups observed, labels committed through degenerate (clamped) posteriors
        v = vanilla_fairness_risk(np.clip(a, 1e-12, 1 - 1e-12), a, np.clip(y, 1e-12, 1 - 1e-12),
                                  np.full(n, MISSING), p, kind, cfg).item()
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", EmptyCellWarning)
            m = mc_fairness_risk(MissingnessPosteriors(a, a, y, np.full(n, MISSING)), p, kind, cfg).item()
        assert v == pytest.approx(m, abs=1e-6)


def test_vanilla_gradient_reaches_posterior():
    logit = Parameter("h", np.array([0.2, -0.4, 0.9, 0.0, 0.3]))
    p = np.array([0.3, 0.4, 0.8, 0.5, 0.9])
    q = ad.sigmoid(logit.tensor)
    risk = vanilla_fairness_risk(q, np.full(5, MISSING), np.full(5, 0.5), [0, 1, 0, 1, 1], p, "md",
                                 MCConfig(n_samples=64))
    assert np.any(ad.backward(risk, [logit])["h"] != 0)


def test_vanilla_soft_relaxation_fd():
    rng = np.random.default_rng(3)
    n, N = 6, 8
    noise = [rng.gumbel(size=(N, n)) for _ in range(4)]
    logit = Parameter("h", rng.standard_normal(n))
    pred = Parameter("f", rng.standard_normal(n))
    a_obs = np.array([MISSING, 0, MISSING, 1, MISSING, MISSING])
    y_obs = np.array([1, MISSING, 0, 1, MISSING, 0])

    def f():
        return vanilla_fairness_risk(ad.sigmoid(logit.tensor), a_obs, np.full(n, 0.6), y_obs,
                                     ad.sigmoid(pred.tensor), "deo", MCConfig(n_samples=N, temperature=0.7),
                                     noise=noise, straight_through=False)

    assert ad.finite_difference_check(f, [logit, pred]) <= 1e-4


# ----------------------------------------------------------- sample sizing

def test_required_sample_size_examples():
    assert required_sample_size(1, 0.1, 0.05) == 185 == math.ceil(math.log(40) / 0.02)
    assert required_sample_size(1e-9, 0.1, 0.05) == 1
    assert required_sample_size(1, 0.05, 0.05) == 738
    # C=1, eps=0.01 over 10^4 records costs on the order of 10^8
    assert 1e7 < 10_000 * required_sample_size(1, 0.01, 0.05) < 1e9


@pytest.mark.parametrize("args", [(0, 0.1, 0.05), (1, 0, 0.05), (1, 0.1, 1.0), (1, 0.1, 0.0)])
def test_required_sample_size_rejects(args):
    with pytest.raises(ValueError):
        required_sample_size(*args)


def test_hoeffding_bound_value():
    assert hoeffding_bound(1000, 0.05, 1) == pytest.approx(2 * math.exp(-5))


def test_harness_deterministic_posteriors_zero():
    post = MissingnessPosteriors(np.array([1.0, 0.0, 1.0]), np.full(3, MISSING), np.ones(3), np.full(3, MISSING))
    assert concentration_harness(post, np.array([0.2, 0.5, 0.9]), "md", eps=0.05, repetitions=20) == 0.0


def test_harness_rejects_zero_repetitions():
    post, p = bound_fixture()
    with pytest.raises(ValueError):
        concentration_harness(post, p, "md", eps=0.05, repetitions=0)


def test_harness_rate_under_bound():
    post, p = bound_fixture()
    rate = concentration_harness(post, p, "md", eps=0.05, repetitions=300, n_samples=1000, C=1)
    assert rate <= 2 * hoeffding_bound(1000, 0.05, 1)
