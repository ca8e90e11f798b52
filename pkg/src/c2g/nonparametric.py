"""Fully nonparametric causal two-groups estimator.

Estimates the treated and untreated conditional outcome densities with
nearest-neighbor kernel CDEs, derives the most conservative responder prior
``pi* = 1 - min_y f_t(y|x) / f_0(y|x)``, forms conservative null posteriors
from bootstrap quantile envelopes of the density ratio, and selects responders
with an empirically controlled step-down rule. Because the mixture is not
identifiable, effect estimands are reported as intervals between the CATE and
the extremal responder effect.
"""

from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator

from .dataset import Dataset
from .density import (
    DEFAULT_CDE_H1_SCALES,
    DEFAULT_CDE_H2_SCALES,
    DEFAULT_CDE_K_GRID,
    NearestNeighborCDE,
    bootstrap_envelopes,
    bootstrap_quantile_envelopes,
    loo_objective_table,
    normal_pdf,
    select_from_loo_table,
    silverman_bandwidth,
)
from .kernels import median_heuristic, sq_distances as _sq_distances
from .selection import PosteriorScores, SelectionResult, select_by_average
from .simulate import GeneratorTruth
from .validation import as_binary_vector, as_float_matrix, as_float_vector

DEFAULT_ALPHA_GRID = tuple(np.round(np.linspace(0.01, 0.30, 30), 2))


@dataclass(frozen=True)
class EstimandReport:
    """Per-sample and population effect estimands.

    ``care_lo``/``care_hi`` bound each treated sample's conditional average
    response effect; ``are_lo``/``are_hi`` average them over the population.
    ``erpf`` is the expected responder population fraction. ``unbounded``
    flags samples whose conservative prior fell below the floor, where no
    finite interval exists; they are excluded from the averages.
    """

    indices: np.ndarray
    care_lo: np.ndarray
    care_hi: np.ndarray
    are_lo: float
    are_hi: float
    erpf: float
    pi_star: np.ndarray | None = None
    unbounded: np.ndarray | None = None

    def __post_init__(self):
        lo, hi = np.asarray(self.care_lo), np.asarray(self.care_hi)
        ok = np.isfinite(lo) & np.isfinite(hi)
        if np.any(lo[ok] > hi[ok]):
            raise ValueError("care_lo must not exceed care_hi")

    @property
    def are_interval(self):
        return (self.are_lo, self.are_hi)

    @property
    def n_unbounded(self):
        return 0 if self.unbounded is None else int(np.sum(self.unbounded))


def pi_star_from_profiles(ft_profile, f0_profile, support_floor=0.05):
    """Conservative prior ``1 - min_grid ft/f0`` from density profiles.

    The minimization runs over the null density's estimable support: grid
    points where ``f0`` falls below ``support_floor`` times its per-query
    maximum are excluded, since the ratio there reflects kernel-tail
    extrapolation rather than data. Trimming can only lower the estimate, so
    the bound ``pi >= pi*`` is preserved. A query whose null density
    underflows everywhere raises.
    """
    ft_profile = np.atleast_2d(np.asarray(ft_profile, dtype=float))
    f0_profile = np.atleast_2d(np.asarray(f0_profile, dtype=float))
    peak = f0_profile.max(axis=1, keepdims=True)
    if np.any(peak <= 0.0):
        i = int(np.where(peak.ravel() <= 0.0)[0][0])
        raise ValueError(f"null density underflows at every grid point for query {i}")
    ok = f0_profile >= support_floor * peak
    with np.errstate(over="ignore"):
        ratio = np.where(ok, ft_profile / np.where(ok, f0_profile, 1.0), np.inf)
    return np.clip(1.0 - ratio.min(axis=1), 0.0, 1.0)


def _profiles(density, x, y_grid):
    if hasattr(density, "pdf_profile"):
        return density.pdf_profile(x, y_grid)
    x = as_float_matrix(x, "x")
    return np.stack([np.asarray(density(row, y_grid), dtype=float) for row in x])


def conservative_pi(f0, ft, x, y_grid, support_floor=0.05):
    """Most conservative responder prior consistent with two densities.

    ``f0`` and ``ft`` are fitted conditional density models (anything with a
    ``pdf_profile(x, y_grid)`` method) or callables ``f(x_row, y_grid)``.
    Returns one value in [0, 1] per row of ``x``.
    """
    y_grid = np.asarray(y_grid, dtype=float).ravel()
    return pi_star_from_profiles(
        _profiles(ft, x, y_grid), _profiles(f0, x, y_grid), support_floor=support_floor
    )


def posterior_w_from_envelopes(env_t, env_0, support_floor=0.05):
    """Conservative null posteriors from bootstrap density envelopes.

    ``w = [f0_hi(y|x) / ft_lo(y|x)] * min_grid [ft_hi(y|x) / f0_lo(y|x)]``,
    clamped to [0, 1], with the grid minimum restricted to the null
    density's estimable support (as in :func:`pi_star_from_profiles`). Zero
    denominators make the sample maximally conservative (w = 1) and are
    counted in the returned diagnostics. The quantile-stabilized ratio
    minimum (one per query, conservative counterpart of ``1 - pi*``) is
    returned alongside.
    """
    n = env_t.point_lo.shape[0]
    w = np.ones(n)
    diagnostics = {"zero_point_denominator": 0, "zero_grid_denominator": 0}

    peak = env_0.grid_lo.max(axis=1, keepdims=True)
    ok_grid = env_0.grid_lo >= np.maximum(support_floor * peak, np.finfo(float).tiny)
    with np.errstate(over="ignore"):
        ratio = np.where(ok_grid, env_t.grid_hi / np.where(ok_grid, env_0.grid_lo, 1.0), np.inf)
    min_term = ratio.min(axis=1)
    dead_grid = ~np.isfinite(min_term)
    diagnostics["zero_grid_denominator"] = int(np.sum(dead_grid))

    ok_point = env_t.point_lo > 0.0
    diagnostics["zero_point_denominator"] = int(np.sum(~ok_point))

    live = ok_point & ~dead_grid
    w[live] = np.clip(env_0.point_hi[live] / env_t.point_lo[live] * min_term[live], 0.0, 1.0)
    return w, diagnostics, min_term


def empirical_control(treated_scores, untreated_scores, alpha_grid, alpha) -> SelectionResult:
    """Step-down selection with an empirical false-discovery estimate.

    For each grid level at or below ``alpha``, selections are made on both
    groups and the untreated-to-treated selection ratio ``e_k`` estimates the
    realized false discovery rate. The largest level whose estimate respects
    it is used; with no qualifying level the selection is empty. Zero treated
    selections give ``e_k = 0`` when no untreated were selected either, and
    ``+inf`` otherwise.
    """
    grid = np.sort(np.asarray(alpha_grid, dtype=float).ravel())
    if grid.size == 0 or grid[0] <= 0.0 or grid[-1] >= 1.0:
        raise ValueError("alpha_grid must be sorted values inside (0, 1)")
    usable = grid[grid <= alpha + 1e-12]
    for level in usable[::-1]:
        sel_t = select_by_average(treated_scores, level)
        sel_u = select_by_average(untreated_scores, level)
        if sel_t.n_selected == 0:
            rate = 0.0 if sel_u.n_selected == 0 else np.inf
        else:
            rate = sel_u.n_selected / sel_t.n_selected
        if rate <= level:
            return sel_t
    return SelectionResult(level=float(alpha))


def care_intervals(mu_t, mu_0, pi_star, pi_floor=1e-3):
    """Per-sample effect intervals between the CATE and the extremal effect.

    The responder mean can be anywhere in ``[mu_t, (mu_t - mu_0)/pi* + mu_0]``
    (endpoints sorted), so the effect interval is ``sorted(CATE, CATE/pi*)``.
    Samples with ``pi* <= pi_floor`` get NaN endpoints and an unbounded flag.
    """
    mu_t = np.asarray(mu_t, dtype=float)
    mu_0 = np.asarray(mu_0, dtype=float)
    pi_star = np.asarray(pi_star, dtype=float)
    cate = mu_t - mu_0
    unbounded = pi_star <= pi_floor
    with np.errstate(divide="ignore", invalid="ignore"):
        extremal = np.where(unbounded, np.nan, cate / np.where(unbounded, 1.0, pi_star))
    lo = np.where(unbounded, np.nan, np.minimum(cate, extremal))
    hi = np.where(unbounded, np.nan, np.maximum(cate, extremal))
    return lo, hi, unbounded


def _report(indices, care_lo, care_hi, pi_star, unbounded, mask=None):
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != indices.shape:
            raise ValueError("subgroup mask must align with the treated samples")
        if not np.any(mask):
            raise ValueError("subgroup mask selects no samples")
    else:
        mask = np.ones(indices.shape, dtype=bool)
    live = mask & ~unbounded
    are_lo = float(np.mean(care_lo[live])) if np.any(live) else float("nan")
    are_hi = float(np.mean(care_hi[live])) if np.any(live) else float("nan")
    return EstimandReport(
        indices=indices[mask],
        care_lo=care_lo[mask],
        care_hi=care_hi[mask],
        are_lo=are_lo,
        are_hi=are_hi,
        erpf=float(np.mean(pi_star[mask])),
        pi_star=pi_star[mask],
        unbounded=unbounded[mask],
    )


class NonparametricC2G(BaseEstimator):
    """Nonparametric causal two-groups estimator with empirical FDR control.

    Parameters
    ----------
    h1_grid, h2_grid, k_grid : sequences or None
        Hyperparameter grids for the two conditional density estimators;
        None uses data-driven defaults.
    n_bootstrap : int
        Bootstrap replicates behind the density envelopes.
    q : float
        Envelope quantile level in (0, 0.5].
    y_grid_size : int
        Resolution of the outcome grid used for the ratio minimization,
        spanning the pooled outcome range plus six outcome bandwidths.
    alpha_grid : sequence
        Nominal levels searched by empirical control.
    pi_floor : float
        Conservative priors at or below this are treated as "no responder
        mass detected" and excluded from interval estimands.
    """

    def __init__(
        self,
        h1_grid=None,
        h2_grid=None,
        k_grid=None,
        share_bandwidths=True,
        n_bootstrap=100,
        q=0.05,
        ratio_quantile=0.1,
        smooth_ratio=True,
        y_grid_size=401,
        alpha_grid=DEFAULT_ALPHA_GRID,
        pi_floor=1e-3,
        support_floor=0.05,
        seed=0,
    ):
        self.h1_grid = h1_grid
        self.h2_grid = h2_grid
        self.k_grid = k_grid
        self.share_bandwidths = share_bandwidths
        self.n_bootstrap = n_bootstrap
        self.q = q
        self.ratio_quantile = ratio_quantile
        self.smooth_ratio = smooth_ratio
        self.y_grid_size = y_grid_size
        self.alpha_grid = alpha_grid
        self.pi_floor = pi_floor
        self.support_floor = support_floor
        self.seed = seed

    def _shared_grids(self, x, y0, y1, m0, m1):
        h1s = self.h1_grid
        if h1s is None:
            med = median_heuristic(x)
            h1s = [med * s for s in DEFAULT_CDE_H1_SCALES]
        h2s = self.h2_grid
        if h2s is None:
            base = min(silverman_bandwidth(y0), silverman_bandwidth(y1))
            h2s = [base * s for s in DEFAULT_CDE_H2_SCALES]
        ks = self.k_grid if self.k_grid is not None else DEFAULT_CDE_K_GRID
        cap = min(m0, m1) - 1
        ks = sorted({min(max(int(k), 1), cap) for k in ks})
        return sorted(h1s), sorted(h2s), ks

    def _tune_densities(self, x, y, treated, untreated):
        """Fit the two conditional density estimators.

        With ``share_bandwidths`` the hyperparameters are selected jointly
        (maximizing the sum of the two groups' leave-one-out objectives over
        one shared grid), keeping the density ratio comparably smoothed;
        otherwise each group tunes independently.
        """
        if not self.share_bandwidths:
            f0 = NearestNeighborCDE(
                h1_grid=self.h1_grid, h2_grid=self.h2_grid, k_grid=self.k_grid
            ).fit(x[untreated], y[untreated])
            ft = NearestNeighborCDE(
                h1_grid=self.h1_grid, h2_grid=self.h2_grid, k_grid=self.k_grid
            ).fit(x[treated], y[treated])
            return f0, ft
        h1s, h2s, ks = self._shared_grids(x, y[untreated], y[treated], untreated.size, treated.size)
        table_0 = loo_objective_table(x[untreated], y[untreated], h1s, h2s, ks)
        table_1 = loo_objective_table(x[treated], y[treated], h1s, h2s, ks)
        joint = {key: table_0[key] + table_1[key] for key in table_0}
        best = select_from_loo_table(joint)
        if best is None:
            raise ValueError("every shared (h1, h2, k) candidate yields -infinity")
        _, k, h1, h2 = best
        f0 = NearestNeighborCDE(h1=h1, h2=h2, k=k).fit(x[untreated], y[untreated])
        ft = NearestNeighborCDE(h1=h1, h2=h2, k=k).fit(x[treated], y[treated])
        return f0, ft

    def fit(self, x, y, t):
        x = as_float_matrix(x, "x")
        y = as_float_vector(y, "y")
        t = as_binary_vector(t, "t")
        treated = np.flatnonzero(t == 1)
        untreated = np.flatnonzero(t == 0)
        if treated.size == 0 or untreated.size == 0:
            raise ValueError("both treatment groups are required")

        self.f0_, self.ft_ = self._tune_densities(x, y, treated, untreated)

        pad = 6.0 * max(self.f0_.h2_, self.ft_.h2_)
        self.y_grid_ = np.linspace(y.min() - pad, y.max() + pad, self.y_grid_size)

        # In-sample queries never see themselves in their own group's
        # reference set (leave-one-out evaluation); this keeps treated and
        # untreated posteriors comparable for empirical control.
        position_in_group = np.full(x.shape[0], -1, dtype=np.intp)
        position_in_group[treated] = np.arange(treated.size)
        exclude_t = position_in_group.copy()
        position_in_group[:] = -1
        position_in_group[untreated] = np.arange(untreated.size)
        exclude_0 = position_in_group

        profile_t = self.ft_.pdf_profile(x[treated], self.y_grid_, exclude_rows=exclude_t[treated])
        profile_0 = self.f0_.pdf_profile(x[treated], self.y_grid_)
        self.pi_star_point_ = pi_star_from_profiles(
            profile_t, profile_0, support_floor=self.support_floor
        )
        mass_t = np.trapezoid(profile_t, self.y_grid_, axis=1)
        mass_0 = np.trapezoid(profile_0, self.y_grid_, axis=1)
        self.mu_t_ = np.trapezoid(profile_t * self.y_grid_, self.y_grid_, axis=1) / mass_t
        self.mu_0_ = np.trapezoid(profile_0 * self.y_grid_, self.y_grid_, axis=1) / mass_0

        seeds = np.random.SeedSequence(self.seed).spawn(2)
        levels = sorted({float(self.q), float(self.ratio_quantile)})
        env_t = bootstrap_quantile_envelopes(
            self.ft_, x, y, self.y_grid_, self.n_bootstrap, q_levels=levels,
            seed=seeds[0], exclude_rows=exclude_t,
        )
        env_0 = bootstrap_quantile_envelopes(
            self.f0_, x, y, self.y_grid_, self.n_bootstrap, q_levels=levels,
            seed=seeds[1], exclude_rows=exclude_0,
        )
        self.envelope_t_ = env_t[float(self.q)]
        self.envelope_0_ = env_0[float(self.q)]

        # Ratio-minimum term at its own quantile level; the raw per-x minimum
        # of a noisy ratio curve is badly downward-biased, and since the
        # conservative prior is a smooth function of x, local averaging over
        # neighboring queries removes most of that noise without moving its
        # level.
        _, diagnostics, min_term = posterior_w_from_envelopes(
            env_t[float(self.ratio_quantile)], env_0[float(self.ratio_quantile)],
            support_floor=self.support_floor,
        )
        if self.smooth_ratio:
            weights = np.exp(-_sq_distances(x) / (2.0 * self.f0_.h1_ ** 2))
            log_term = np.log(np.clip(min_term, 1e-12, None))
            min_term = np.exp((weights @ log_term) / weights.sum(axis=1))

        point_ratio = np.ones(x.shape[0])
        ok_point = self.envelope_t_.point_lo > 0.0
        diagnostics["zero_point_denominator"] = int(np.sum(~ok_point))
        point_ratio[ok_point] = (
            self.envelope_0_.point_hi[ok_point] / self.envelope_t_.point_lo[ok_point]
        )
        w_all = np.where(ok_point, np.clip(point_ratio * min_term, 0.0, 1.0), 1.0)

        self.pi_star_ = np.clip(1.0 - min_term[treated], 0.0, 1.0)
        self.min_term_ = min_term
        self.treated_indices_ = treated
        self.untreated_indices_ = untreated
        self.w_treated_ = w_all[treated]
        self.w_untreated_ = w_all[untreated]
        self.diagnostics_ = diagnostics
        return self

    def posterior_scores(self) -> PosteriorScores:
        return PosteriorScores(self.treated_indices_, self.w_treated_, source="nonparametric")

    def select(self, alpha) -> SelectionResult:
        """Empirically controlled responder selection at the given level."""
        return empirical_control(
            self.posterior_scores(),
            PosteriorScores(self.untreated_indices_, self.w_untreated_, source="nonparametric"),
            self.alpha_grid,
            alpha,
        )

    def care_intervals(self):
        return care_intervals(self.mu_t_, self.mu_0_, self.pi_star_, self.pi_floor)

    def estimands(self, subgroup_mask=None) -> EstimandReport:
        """Interval estimands over the treated samples (or a subgroup of them)."""
        lo, hi, unbounded = self.care_intervals()
        return _report(self.treated_indices_, lo, hi, self.pi_star_, unbounded, subgroup_mask)


class _AnalyticDensities:
    """Per-sample component densities reconstructed from generator truth."""

    def __init__(self, truth: GeneratorTruth):
        self.truth = truth
        if truth.scenario == "canonical":
            self.kind = "uniform"
            self.treated_support = tuple(truth.params["uniform_treated"])
            self.untreated_support = tuple(truth.params["uniform_untreated"])
        elif truth.analytic:
            self.kind = "normal"
        else:
            raise ValueError(f"scenario {truth.scenario!r} has no analytic densities for the oracle")

    def _uniform(self, y, support):
        lo, hi = support
        y = np.asarray(y, dtype=float)
        return np.where((y >= lo) & (y <= hi), 1.0 / (hi - lo), 0.0)

    def f0_at(self, indices, y_values):
        if self.kind == "uniform":
            return self._uniform(y_values, self.untreated_support)
        return normal_pdf(y_values, self.truth.mu0[indices], self.truth.sigma0)

    def f1_at(self, indices, y_values):
        if self.kind == "uniform":
            return self._uniform(y_values, self.treated_support)
        return normal_pdf(y_values, self.truth.mu1[indices], self.truth.sigma1)

    def ft_at(self, indices, y_values):
        pi = self.truth.pi[indices]
        return (1.0 - pi) * self.f0_at(indices, y_values) + pi * self.f1_at(indices, y_values)

    def f0_profile(self, indices, y_grid):
        if self.kind == "uniform":
            row = self._uniform(y_grid, self.untreated_support)
            return np.tile(row, (len(indices), 1))
        return normal_pdf(y_grid[None, :], self.truth.mu0[indices][:, None], self.truth.sigma0)

    def f1_profile(self, indices, y_grid):
        if self.kind == "uniform":
            row = self._uniform(y_grid, self.treated_support)
            return np.tile(row, (len(indices), 1))
        return normal_pdf(y_grid[None, :], self.truth.mu1[indices][:, None], self.truth.sigma1)

    def ft_profile(self, indices, y_grid):
        pi = self.truth.pi[indices][:, None]
        return (1.0 - pi) * self.f0_profile(indices, y_grid) + pi * self.f1_profile(indices, y_grid)

    def spread(self):
        if self.kind == "uniform":
            return 0.5
        return max(self.truth.sigma0, self.truth.sigma1)


class OracleC2G:
    """The nonparametric procedure run with full knowledge of the truth.

    Replaces the estimated conditional densities with the generator's analytic
    ones (point masses under the bootstrap, so quantiles collapse to plain
    values); selection and estimands follow the same code paths as
    :class:`NonparametricC2G`.
    """

    def __init__(self, ds: Dataset, truth: GeneratorTruth, y_grid_size=401,
                 alpha_grid=DEFAULT_ALPHA_GRID, pi_floor=1e-3):
        if ds.h is None:
            raise ValueError("oracle requires a simulated dataset with truth labels")
        self.alpha_grid = alpha_grid
        self.pi_floor = pi_floor
        dens = _AnalyticDensities(truth)
        treated = np.flatnonzero(ds.t == 1)
        untreated = np.flatnonzero(ds.t == 0)
        if treated.size == 0 or untreated.size == 0:
            raise ValueError("both treatment groups are required")
        pad = 6.0 * dens.spread()
        self.y_grid_ = np.linspace(ds.y.min() - pad, ds.y.max() + pad, y_grid_size)

        all_idx = np.arange(ds.n)
        profile_t = dens.ft_profile(all_idx, self.y_grid_)
        profile_0 = dens.f0_profile(all_idx, self.y_grid_)
        pi_star_all = pi_star_from_profiles(profile_t, profile_0)
        ft_at = dens.ft_at(all_idx, ds.y)
        f0_at = dens.f0_at(all_idx, ds.y)
        w_all = np.ones(ds.n)
        ok = ft_at > 0.0
        w_all[ok] = np.clip((1.0 - pi_star_all[ok]) * f0_at[ok] / ft_at[ok], 0.0, 1.0)

        mass_t = np.trapezoid(profile_t, self.y_grid_, axis=1)
        mass_0 = np.trapezoid(profile_0, self.y_grid_, axis=1)
        mu_t = np.trapezoid(profile_t * self.y_grid_, self.y_grid_, axis=1) / mass_t
        mu_0 = np.trapezoid(profile_0 * self.y_grid_, self.y_grid_, axis=1) / mass_0

        self.treated_indices_ = treated
        self.untreated_indices_ = untreated
        self.pi_star_ = pi_star_all[treated]
        self.w_treated_ = w_all[treated]
        self.w_untreated_ = w_all[untreated]
        self.mu_t_ = mu_t[treated]
        self.mu_0_ = mu_0[treated]

    def posterior_scores(self) -> PosteriorScores:
        return PosteriorScores(self.treated_indices_, self.w_treated_, source="oracle")

    def select(self, alpha) -> SelectionResult:
        return empirical_control(
            self.posterior_scores(),
            PosteriorScores(self.untreated_indices_, self.w_untreated_, source="oracle"),
            self.alpha_grid,
            alpha,
        )

    def care_intervals(self):
        return care_intervals(self.mu_t_, self.mu_0_, self.pi_star_, self.pi_floor)

    def estimands(self, subgroup_mask=None) -> EstimandReport:
        lo, hi, unbounded = self.care_intervals()
        return _report(self.treated_indices_, lo, hi, self.pi_star_, unbounded, subgroup_mask)


def np_oracle_posterior(truth: GeneratorTruth, ds: Dataset, index: int,
                        y_grid_size=401) -> float:
    """Oracle null posterior ``(1 - pi*) f0 / ft`` for one treated sample."""
    if ds.h is None:
        raise ValueError("oracle posterior requires simulation truth (real data given)")
    if ds.t[index] != 1:
        raise ValueError(f"sample {index} is untreated")
    dens = _AnalyticDensities(truth)
    pad = 6.0 * dens.spread()
    y_grid = np.linspace(ds.y.min() - pad, ds.y.max() + pad, y_grid_size)
    idx = np.array([index])
    pi_star = pi_star_from_profiles(dens.ft_profile(idx, y_grid), dens.f0_profile(idx, y_grid))[0]
    ft = float(dens.ft_at(idx, ds.y[idx])[0])
    f0 = float(dens.f0_at(idx, ds.y[idx])[0])
    if ft <= 0.0:
        return 1.0
    return float(np.clip((1.0 - pi_star) * f0 / ft, 0.0, 1.0))
