"""Vectorised numpy implementation of the fairness-metric kernels.

Used when the compiled extension is unavailable (or when
``FAIRSSVAE_PURE_PYTHON=1``).  Semantics match ``_ckernels.pyx`` exactly.

Metric codes: 0 = demographic-parity mean difference, 1 = equal-opportunity
difference, 2 = difference of equalized odds.  ``empty`` counts, per sample
batch, how often a term had an empty cell; it is indexed ``2*a + y`` (for
the mean difference the group-level cell uses ``y = 0``).
"""
import numpy as np


def _terms(kind):
    # (y value or None for "all y") for each absolute-difference term
    if kind == 0:
        return (None,)
    if kind == 1:
        return (1,)
    if kind == 2:
        return (0, 1)
    raise ValueError(f"unknown metric code {kind}")


def metric_rows(p, A, Y, kind, weights):
    """Metric value for each assignment row and the weighted gradient.

    Parameters
    ----------
    p : (n,) float64 predicted positive probabilities
    A, Y : (S, n) int8 group and label assignments in {0, 1}
    kind : int metric code
    weights : (S,) float64; ``grad = sum_s weights[s] * dF_s/dp``

    Returns
    -------
    values : (S,) float64
    grad : (n,) float64
    empty : (4,) int64
    """
    p = np.asarray(p, dtype=np.float64)
    A = np.asarray(A)
    Y = np.asarray(Y)
    S = A.shape[0]
    values = np.zeros(S)
    grad = np.zeros(p.shape[0])
    empty = np.zeros(4, dtype=np.int64)
    g1 = A == 1
    for y in _terms(kind):
        if y is None:
            m1 = g1
            m0 = ~g1
            slot = 0
        else:
            yy = Y == y
            m1 = g1 & yy
            m0 = ~g1 & yy
            slot = y
        c0 = m0.sum(axis=1)
        c1 = m1.sum(axis=1)
        s0 = m0 @ p
        s1 = m1 @ p
        ok = (c0 > 0) & (c1 > 0)
        empty[slot] += int(np.count_nonzero(c0 == 0))
        empty[2 + slot] += int(np.count_nonzero(c1 == 0))
        safe0 = np.where(c0 > 0, c0, 1)
        safe1 = np.where(c1 > 0, c1, 1)
        diff = s0 / safe0 - s1 / safe1
        values += np.where(ok, np.abs(diff), 0.0)
        sgn = np.where(ok, np.sign(diff), 0.0) * weights
        grad += (sgn / safe0) @ m0 - (sgn / safe1) @ m1
    return values, grad, empty


def sample_rows(fixed, q, U):
    """Assignment matrix: ``fixed[i]`` where it is 0/1, else ``U[s, i] < q[i]``."""
    fixed = np.asarray(fixed)
    drawn = (np.asarray(U) < np.asarray(q)).astype(np.int8)
    return np.where(fixed >= 0, fixed.astype(np.int8), drawn)


def mc_rows(p, a_fixed, q_a, y_fixed, q_y, Ua, Uy, kind):
    """Sample assignments from uniforms then evaluate ``metric_rows`` with
    uniform weights ``1/S``."""
    A = sample_rows(a_fixed, q_a, Ua)
    Y = sample_rows(y_fixed, q_y, Uy)
    S = A.shape[0]
    return metric_rows(p, A, Y, kind, np.full(S, 1.0 / S))
