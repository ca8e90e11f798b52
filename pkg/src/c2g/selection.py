"""Selection procedures and evaluation metrics.

Holds the posterior step-down rule shared by both estimators, the
Benjamini-Hochberg baseline, density-level p-values for the frequentist
comparison, and the FDR/power/valid-power/Jaccard metrics used in the
experiment harness.
"""

from dataclasses import dataclass, field

import numpy as np

from .validation import as_float_vector


@dataclass(frozen=True)
class PosteriorScores:
    """Per-treated-sample null posterior estimates with provenance."""

    indices: np.ndarray
    w: np.ndarray
    source: str = "additive"

    def __post_init__(self):
        indices = np.asarray(self.indices, dtype=np.intp)
        w = np.asarray(self.w, dtype=float)
        if indices.shape != w.shape:
            raise ValueError("indices and w must have equal lengths")
        if w.size and (np.min(w) < 0.0 or np.max(w) > 1.0):
            raise ValueError("posterior scores must lie in [0, 1]")
        object.__setattr__(self, "indices", indices)
        object.__setattr__(self, "w", w)


@dataclass(frozen=True)
class SelectionResult:
    """A selected index set with the level used and the estimated FDR."""

    selected: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.intp))
    level: float = 0.0
    estimated_fdr: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "selected", np.asarray(self.selected, dtype=np.intp))

    @property
    def n_selected(self):
        return int(self.selected.size)


def select_by_average(scores: PosteriorScores, alpha: float) -> SelectionResult:
    """Largest subset whose average posterior score stays at or below alpha.

    Scores are sorted ascending (ties broken by original index) and the
    longest prefix with running mean <= alpha is selected; an empty selection
    is valid.
    """
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha}")
    w = scores.w
    if w.size == 0:
        return SelectionResult(level=alpha)
    order = np.argsort(w, kind="stable")
    running_mean = np.cumsum(w[order]) / np.arange(1, w.size + 1)
    ok = np.flatnonzero(running_mean <= alpha)
    if ok.size == 0:
        return SelectionResult(level=alpha)
    size = int(ok[-1]) + 1
    chosen = order[:size]
    return SelectionResult(
        selected=np.sort(scores.indices[chosen]),
        level=alpha,
        estimated_fdr=float(running_mean[size - 1]),
    )


def bh_procedure(pvalues, alpha: float) -> np.ndarray:
    """Benjamini-Hochberg step-up: indices of the rejected hypotheses."""
    p = as_float_vector(pvalues, "pvalues")
    if np.min(p) < 0.0 or np.max(p) > 1.0:
        raise ValueError("p-values must lie in [0, 1]")
    m = p.size
    order = np.argsort(p, kind="stable")
    thresholds = alpha * np.arange(1, m + 1) / m
    passing = np.flatnonzero(p[order] <= thresholds)
    if passing.size == 0:
        return np.empty(0, dtype=np.intp)
    k = int(passing[-1]) + 1
    return np.sort(order[:k])


def frequentist_pvalues(f0_model, x_query, y_query, y_grid) -> np.ndarray:
    """Density-level p-values under an estimated null conditional density.

    For each query, ``p = Pr_{Y ~ f0(.|x)}[f0(Y|x) <= f0(y|x)]`` by trapezoid
    quadrature over ``y_grid``. For a unimodal symmetric null this is the
    familiar two-sided tail probability. Raises if the quadrature mass of any
    conditional deviates from one by more than 1e-3.
    """
    y_grid = np.asarray(y_grid, dtype=float).ravel()
    profile = f0_model.pdf_profile(x_query, y_grid)
    at_point = f0_model.pdf_at(x_query, y_query)
    mass = np.trapezoid(profile, y_grid, axis=1)
    off = np.abs(mass - 1.0)
    if np.any(off > 1e-3):
        i = int(np.argmax(off))
        raise ValueError(
            f"null density mass {mass[i]:.6f} deviates from 1 by more than 1e-3 for query {i}; "
            "widen the quadrature grid"
        )
    level_sets = np.where(profile <= at_point[:, None], profile, 0.0)
    return np.trapezoid(level_sets, y_grid, axis=1) / mass


def fdr_metric(selected, h_truth) -> float:
    """False discovery proportion of a selection against truth labels."""
    selected = np.asarray(selected, dtype=np.intp)
    h = np.asarray(h_truth)
    if selected.size == 0:
        return 0.0
    false = int(np.sum(h[selected] == 0))
    return false / max(1, selected.size)


def power_metric(selected, h_truth) -> float:
    """Fraction of true responders selected; NaN when there are none."""
    selected = np.asarray(selected, dtype=np.intp)
    h = np.asarray(h_truth)
    responders = int(np.sum(h == 1))
    if responders == 0:
        return float("nan")
    if selected.size == 0:
        return 0.0
    return float(np.sum(h[selected] == 1)) / responders


def valid_power(alphas, fdr_curve, power_curve, ci_halfwidths, alpha) -> float:
    """Power counted only when the FDR curve respects the nominal level.

    Returns 0 when the mean FDR at ``alpha`` minus its 95% CI half-width
    strictly exceeds ``alpha``, otherwise the mean power at ``alpha``.
    """
    alphas = np.asarray(alphas, dtype=float).ravel()
    idx = int(np.argmin(np.abs(alphas - alpha)))
    if not np.isclose(alphas[idx], alpha):
        raise ValueError(f"alpha {alpha} not on the curve grid")
    fdr = float(np.asarray(fdr_curve, dtype=float).ravel()[idx])
    power = float(np.asarray(power_curve, dtype=float).ravel()[idx])
    half = float(np.asarray(ci_halfwidths, dtype=float).ravel()[idx])
    if fdr - half > alpha:
        return 0.0
    return power


def normal_ci_halfwidth(values) -> float:
    """95% normal-approximation CI half-width of the mean across repetitions."""
    values = np.asarray(values, dtype=float)
    values = values[np.isfinite(values)]
    if values.size < 2:
        return 0.0
    return 1.96 * float(np.std(values, ddof=1)) / np.sqrt(values.size)


def _merge_intervals(intervals):
    spans = [(float(lo), float(hi)) for lo, hi in intervals if hi > lo]
    spans.sort()
    merged = []
    for lo, hi in spans:
        if merged and lo <= merged[-1][1]:
            merged[-1][1] = max(merged[-1][1], hi)
        else:
            merged.append([lo, hi])
    return merged


def _measure(merged):
    return sum(hi - lo for lo, hi in merged)


def jaccard_intervals(intervals_a, intervals_b) -> float:
    """Jaccard index of two finite unions of real intervals.

    Lebesgue measure of the intersection over the union by a merge-sweep;
    two measure-zero sets have Jaccard index 1 by convention.
    """
    a = _merge_intervals(np.atleast_2d(np.asarray(intervals_a, dtype=float)))
    b = _merge_intervals(np.atleast_2d(np.asarray(intervals_b, dtype=float)))
    union = _measure(_merge_intervals(a + b))
    if union == 0.0:
        return 1.0
    inter = 0.0
    for lo_a, hi_a in a:
        for lo_b, hi_b in b:
            inter += max(0.0, min(hi_a, hi_b) - max(lo_a, lo_b))
    return inter / union
