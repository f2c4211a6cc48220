"""Recovery and diagnostic metrics.

AUPRC uses the step-wise rule: scores are sorted descending, equal
scores collapse into one threshold step, and the area is the sum of
precision times recall increment over distinct thresholds (no linear
interpolation).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import model as mdl
from .graphs import DirectedGraph

__all__ = [
    "PrCurve",
    "pr_curve",
    "auprc",
    "graph_recovery",
    "target_recovery",
    "squared_jacobian_proxy",
    "heldout_nll",
    "histogram_kl",
]


@dataclass(frozen=True)
class PrCurve:
    """(threshold, precision, recall) at each distinct score, plus area."""

    points: tuple[tuple[float, float, float], ...]
    area: float


def pr_curve(scores, labels) -> PrCurve:
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel().astype(np.int64)
    if scores.shape != labels.shape:
        raise ValueError("scores and labels must have equal length")
    n_pos = int(labels.sum())
    if n_pos == 0:
        raise ValueError("AUPRC is undefined without positive labels")

    order = np.argsort(-scores, kind="stable")
    s = scores[order]
    y = labels[order]
    # last index of each run of equal scores marks one threshold step
    boundary = np.ones(len(s), dtype=bool)
    boundary[:-1] = s[:-1] != s[1:]
    tp = np.cumsum(y)[boundary]
    pred_pos = np.arange(1, len(s) + 1)[boundary]
    precision = tp / pred_pos
    recall = tp / n_pos
    thresholds = s[boundary]

    prev_recall = np.concatenate([[0.0], recall[:-1]])
    area = float(np.sum((recall - prev_recall) * precision))
    points = tuple(
        (float(t), float(p), float(r)) for t, p, r in zip(thresholds, precision, recall)
    )
    return PrCurve(points=points, area=area)


def auprc(scores, labels) -> float:
    return pr_curve(scores, labels).area


def _offdiag_entries(matrix: np.ndarray) -> np.ndarray:
    matrix = np.asarray(matrix)
    d = matrix.shape[0]
    mask = ~np.eye(d, dtype=bool)
    return matrix[mask]


def graph_recovery(scores: np.ndarray, truth: DirectedGraph | np.ndarray) -> float:
    """AUPRC of edge scores against the binary adjacency, diagonal excluded."""
    truth_adj = truth.adjacency if isinstance(truth, DirectedGraph) else np.asarray(truth)
    scores = np.asarray(scores, dtype=np.float64)
    if scores.shape != truth_adj.shape:
        raise ValueError("score and adjacency shapes differ")
    return auprc(_offdiag_entries(scores), _offdiag_entries(truth_adj))


def target_recovery(scores: np.ndarray, truth_targets: np.ndarray) -> float:
    """AUPRC of intervention scores against the (K, d) target matrix."""
    scores = np.asarray(scores, dtype=np.float64)
    truth_targets = np.asarray(truth_targets)
    if scores.shape != truth_targets.shape:
        raise ValueError("score and target shapes differ")
    return auprc(scores.ravel(), truth_targets.ravel())


def squared_jacobian_proxy(
    mechanism, probes: np.ndarray, tau: float = 0.001
) -> tuple[np.ndarray, np.ndarray]:
    """Mean squared Jacobian over probe inputs, thresholded to an adjacency.

    ``S[i, j]`` measures the influence of x_j on output i; the returned
    binary matrix is in edge orientation (entry (j, i) for j -> i) with
    the diagonal zeroed, matching the no-self-loop convention.
    """
    probes = np.asarray(probes, dtype=np.float64)
    if probes.ndim != 2 or probes.shape[0] < 1:
        raise ValueError("probes must be a nonempty (N, d) array")
    jac = mechanism.jacobian(probes)  # (N, d, d)
    s = np.mean(jac**2, axis=0)
    adjacency = (s > tau).T.astype(np.int8)
    np.fill_diagonal(adjacency, 0)
    return s, adjacency


def heldout_nll(
    state: mdl.ModelState,
    x: np.ndarray,
    experiments: np.ndarray,
    poisson_mean: float = 4.0,
    est_rng=None,
) -> float:
    """Mean negative log-density under hard-thresholded masks.

    Uses the exact log-det path up to d = 64, the series estimator
    beyond (needs ``est_rng`` then).
    """
    masks = mdl.threshold_masks(state)
    x = np.asarray(x, dtype=np.float64)
    if x.shape[1] <= 64:
        ld = mdl.log_density_rows(state, x, experiments, masks, mode="exact")
    else:
        ld = mdl.log_density_rows(
            state,
            x,
            experiments,
            masks,
            mode="series",
            est_rng=est_rng,
            poisson_mean=poisson_mean,
        )
    return float(-np.mean(ld.value))


def histogram_kl(
    x_int: np.ndarray,
    k_int: np.ndarray,
    x_obs: np.ndarray,
    bins: int = 100,
    smoothing: float = 1e-10,
) -> tuple[np.ndarray, float]:
    """Per-(experiment, node) KL between interventional and observational
    marginals on shared histogram bins, plus the grand mean.

    Each (k, i) pair shares one binning spanning the overlap of the two
    sample ranges (outside the overlap one side has no coverage at all
    and the density ratio is not estimable); ``smoothing`` mass is added
    to every bin before normalizing so occasional empty bins inside the
    overlap stay finite.
    """
    x_int = np.asarray(x_int, dtype=np.float64)
    x_obs = np.asarray(x_obs, dtype=np.float64)
    k_int = np.asarray(k_int, dtype=np.int64)
    if x_int.shape[0] == 0 or x_obs.shape[0] == 0:
        raise ValueError("both sample sets must be nonempty")
    if x_int.shape[1] != x_obs.shape[1]:
        raise ValueError("dimension mismatch between sample sets")
    d = x_int.shape[1]
    ks = int(k_int.max()) + 1

    div = np.zeros((ks, d))
    for k in range(ks):
        rows = x_int[k_int == k]
        for i in range(d):
            p_samples = rows[:, i]
            q_samples = x_obs[:, i]
            lo = max(p_samples.min(), q_samples.min())
            hi = min(p_samples.max(), q_samples.max())
            if lo >= hi:
                lo, hi = hi, lo
                hi = lo + 1e-12 if lo == hi else hi
            edges = np.linspace(lo, hi, bins + 1)
            p = np.histogram(p_samples, bins=edges)[0] / max(len(p_samples), 1)
            q = np.histogram(q_samples, bins=edges)[0] / max(len(q_samples), 1)
            p = p + smoothing
            q = q + smoothing
            p = p / p.sum()
            q = q / q.sum()
            div[k, i] = float(np.sum(p * np.log(p / q)))
    return div, float(div.mean())
