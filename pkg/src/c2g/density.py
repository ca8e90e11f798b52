"""Nonparametric density estimation.

Three tools live here: predictive recursion with PRML bandwidth selection for
the residual noise distribution, a k-nearest-neighbor Rosenblatt kernel
conditional density estimator with leave-one-out tuning, and bootstrap
quantile envelopes over conditional density populations.
"""

import math
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator

from .kernels import sq_distances
from .validation import as_float_matrix, as_float_vector, check_positive

_SQRT_2PI = math.sqrt(2.0 * math.pi)

DEFAULT_PR_BANDWIDTH_SCALES = (0.5, 1.0, 2.0, 4.0)
DEFAULT_CDE_H1_SCALES = (0.5, 1.0, 2.0)
DEFAULT_CDE_H2_SCALES = (0.25, 0.5, 1.0, 2.0)
DEFAULT_CDE_K_GRID = (10, 20, 40)


def normal_pdf(values, centers, scale):
    """Gaussian density ``N(values | centers, scale^2)`` (broadcasting)."""
    z = (np.asarray(values, dtype=float) - centers) / scale
    return np.exp(-0.5 * z * z) / (scale * _SQRT_2PI)


def silverman_bandwidth(values):
    """Silverman's rule-of-thumb bandwidth for one-dimensional data."""
    values = np.asarray(values, dtype=float)
    std = float(np.std(values))
    q75, q25 = np.percentile(values, [75, 25])
    iqr = (q75 - q25) / 1.34
    spread = min(x for x in (std, iqr) if x > 0) if max(std, iqr) > 0 else 0.0
    if spread <= 0:
        return 1.0
    return 0.9 * spread * len(values) ** (-0.2)


def trapezoid_weights(grid):
    w = np.empty_like(grid)
    w[1:-1] = (grid[2:] - grid[:-2]) / 2.0
    w[0] = (grid[1] - grid[0]) / 2.0
    w[-1] = (grid[-1] - grid[-2]) / 2.0
    return w


def _pr_one_ordering(values, grid, weights, bandwidth, weight_exponent, init):
    """One predictive-recursion pass; returns (mixing, log marginal likelihood)."""
    mixing = init.copy()
    log_ml = 0.0
    h2 = 2.0 * bandwidth * bandwidth
    norm = bandwidth * _SQRT_2PI
    for i, value in enumerate(values, start=1):
        kern = np.exp(-((value - grid) ** 2) / h2) / norm
        numer = kern * mixing
        marginal = float(weights @ numer)
        gamma = (i + 1.0) ** (-weight_exponent)
        mixing = (1.0 - gamma) * mixing + gamma * numer / marginal
        log_ml += math.log(marginal)
    return mixing, log_ml


class PredictiveRecursionDensity(BaseEstimator):
    """Mixture density estimate built by predictive recursion.

    The recursion places a normal kernel of width ``bandwidth`` over a mixing
    density supported on a uniform grid spanning the data range plus three
    bandwidths. Updates use weights ``(i + 1)^-weight_exponent`` and the final
    mixing density is averaged over random data orderings. When ``bandwidth``
    is None, it is chosen from ``bandwidth_grid`` (default: Silverman's rule
    scaled by {0.5, 1, 2, 4}) by maximizing the predictive recursion marginal
    likelihood, ties going to the smaller bandwidth.
    """

    def __init__(
        self,
        bandwidth=None,
        bandwidth_grid=None,
        grid_size=512,
        weight_exponent=0.67,
        n_permutations=10,
        seed=0,
    ):
        self.bandwidth = bandwidth
        self.bandwidth_grid = bandwidth_grid
        self.grid_size = grid_size
        self.weight_exponent = weight_exponent
        self.n_permutations = n_permutations
        self.seed = seed

    def _candidates(self, values):
        if self.bandwidth is not None:
            return [check_positive(self.bandwidth, "bandwidth")]
        if self.bandwidth_grid is not None:
            if len(self.bandwidth_grid) == 0:
                raise ValueError("bandwidth_grid must be non-empty")
            return [check_positive(b, "bandwidth") for b in self.bandwidth_grid]
        if np.ptp(values) == 0:
            raise ValueError("all residuals identical; provide an explicit bandwidth")
        base = silverman_bandwidth(values)
        return [base * s for s in DEFAULT_PR_BANDWIDTH_SCALES]

    def _run(self, values, bandwidth):
        lo = float(np.min(values)) - 3.0 * bandwidth
        hi = float(np.max(values)) + 3.0 * bandwidth
        grid = np.linspace(lo, hi, self.grid_size)
        weights = trapezoid_weights(grid)
        init = np.full(self.grid_size, 1.0 / (hi - lo))
        rng = np.random.default_rng(self.seed)
        mix_sum = np.zeros(self.grid_size)
        log_ml_sum = 0.0
        for _ in range(self.n_permutations):
            order = rng.permutation(len(values))
            mixing, log_ml = _pr_one_ordering(
                values[order], grid, weights, bandwidth, self.weight_exponent, init
            )
            mix_sum += mixing
            log_ml_sum += log_ml
        mixing = mix_sum / self.n_permutations
        mixing /= float(weights @ mixing)
        return grid, weights, mixing, log_ml_sum / self.n_permutations

    def fit(self, values):
        values = as_float_vector(values, "residuals")
        if values.size < 2:
            raise ValueError("need at least 2 residuals")
        if not 0.5 < self.weight_exponent <= 1.0:
            raise ValueError("weight_exponent must lie in (0.5, 1]")
        if self.n_permutations < 1:
            raise ValueError("n_permutations must be >= 1")

        best = None
        for bw in self._candidates(values):
            run = self._run(values, bw)
            if best is None or run[3] > best[1][3]:
                best = (bw, run)
        self.bandwidth_ = best[0]
        self.grid_, self.grid_weights_, self.mixing_, self.prml_ = best[1]
        self._build_eval_table()
        return self

    def _build_eval_table(self):
        h = self.bandwidth_
        lo = self.grid_[0] - 6.0 * h
        hi = self.grid_[-1] + 6.0 * h
        n_eval = int(np.clip(math.ceil((hi - lo) / (h / 4.0)), 2048, 16384))
        self.eval_grid_ = np.linspace(lo, hi, n_eval)
        mass = self.mixing_ * self.grid_weights_
        kern = normal_pdf(self.eval_grid_[:, None], self.grid_[None, :], h)
        self.eval_pdf_ = kern @ mass

    def pdf(self, y):
        """Density values, linearly interpolated on the evaluation grid.

        Queries outside the grid decay from the boundary value like the
        normal kernel, keeping the density positive everywhere.
        """
        y = np.asarray(y, dtype=float)
        grid, vals, h = self.eval_grid_, self.eval_pdf_, self.bandwidth_
        out = np.interp(y, grid, vals)
        below = y < grid[0]
        above = y > grid[-1]
        if np.any(below):
            out = np.where(below, vals[0] * np.exp(-((y - grid[0]) ** 2) / (2 * h * h)), out)
        if np.any(above):
            out = np.where(above, vals[-1] * np.exp(-((y - grid[-1]) ** 2) / (2 * h * h)), out)
        return out

    def log_pdf(self, y):
        y = np.asarray(y, dtype=float)
        grid, vals, h = self.eval_grid_, self.eval_pdf_, self.bandwidth_
        inner = np.log(np.maximum(np.interp(y, grid, vals), np.finfo(float).tiny))
        out = inner
        below = y < grid[0]
        above = y > grid[-1]
        if np.any(below):
            out = np.where(below, math.log(vals[0]) - ((y - grid[0]) ** 2) / (2 * h * h), out)
        if np.any(above):
            out = np.where(above, math.log(vals[-1]) - ((y - grid[-1]) ** 2) / (2 * h * h), out)
        return out

    def log_pdf_slope(self, y):
        """Derivative of ``log pdf`` (piecewise from the interpolation table)."""
        y = np.asarray(y, dtype=float)
        grid, vals, h = self.eval_grid_, self.eval_pdf_, self.bandwidth_
        cell = np.clip(np.searchsorted(grid, y, side="right") - 1, 0, len(grid) - 2)
        slope = (vals[cell + 1] - vals[cell]) / (grid[cell + 1] - grid[cell])
        pdf = vals[cell] + slope * (y - grid[cell])
        out = slope / np.maximum(pdf, np.finfo(float).tiny)
        out = np.where(y < grid[0], -(y - grid[0]) / (h * h), out)
        out = np.where(y > grid[-1], -(y - grid[-1]) / (h * h), out)
        return out


def predictive_recursion(
    residuals, bandwidth, grid_size=512, weight_exponent=0.67, n_permutations=10, seed=0
) -> PredictiveRecursionDensity:
    """Fit a predictive-recursion density with a fixed kernel bandwidth."""
    return PredictiveRecursionDensity(
        bandwidth=bandwidth,
        grid_size=grid_size,
        weight_exponent=weight_exponent,
        n_permutations=n_permutations,
        seed=seed,
    ).fit(residuals)


def prml_select_bandwidth(
    residuals, candidate_bandwidths, grid_size=512, weight_exponent=0.67, n_permutations=10, seed=0
):
    """Bandwidth maximizing the predictive recursion marginal likelihood.

    Ties are broken toward the smaller bandwidth.
    """
    candidates = sorted(float(b) for b in candidate_bandwidths)
    if not candidates:
        raise ValueError("candidate_bandwidths must be non-empty")
    best_bw, best_prml = None, -np.inf
    for bw in candidates:
        fit = PredictiveRecursionDensity(
            bandwidth=bw,
            grid_size=grid_size,
            weight_exponent=weight_exponent,
            n_permutations=n_permutations,
            seed=seed,
        ).fit(residuals)
        if fit.prml_ > best_prml:
            best_bw, best_prml = bw, fit.prml_
    return best_bw


class NearestNeighborCDE(BaseEstimator):
    """k-nearest-neighbor Rosenblatt kernel conditional density estimator.

    The conditional density at ``(x, y)`` is a normal-kernel mixture over the
    outcomes of the ``k`` reference points nearest to ``x``:

        f(y | x) = sum_i K_h1(x | x_i) K_h2(y | y_i) / sum_i K_h1(x | x_i)

    with Gaussian kernels, neighbors by Euclidean distance and ties broken by
    row index. When any of ``h1``, ``h2``, ``k`` is None, ``fit`` selects the
    triple maximizing the mean leave-one-out log density over the grids,
    breaking ties toward smaller ``k`` then smaller ``h1`` then smaller ``h2``.
    """

    def __init__(self, h1=None, h2=None, k=None, h1_grid=None, h2_grid=None, k_grid=None):
        self.h1 = h1
        self.h2 = h2
        self.k = k
        self.h1_grid = h1_grid
        self.h2_grid = h2_grid
        self.k_grid = k_grid

    def _grids(self, x, y):
        m = x.shape[0]
        if self.h1 is not None:
            h1s = [check_positive(self.h1, "h1")]
        elif self.h1_grid is not None:
            h1s = sorted(check_positive(v, "h1") for v in self.h1_grid)
        else:
            d2 = sq_distances(x)
            iu = np.triu_indices(m, k=1)
            med = float(np.median(np.sqrt(d2[iu]))) or 1.0
            h1s = [med * s for s in DEFAULT_CDE_H1_SCALES]
        if self.h2 is not None:
            h2s = [check_positive(self.h2, "h2")]
        elif self.h2_grid is not None:
            h2s = sorted(check_positive(v, "h2") for v in self.h2_grid)
        else:
            base = silverman_bandwidth(y)
            h2s = [base * s for s in DEFAULT_CDE_H2_SCALES]
        if self.k is not None:
            ks = [int(self.k)]
        elif self.k_grid is not None:
            ks = sorted(int(v) for v in self.k_grid)
        else:
            ks = list(DEFAULT_CDE_K_GRID)
        ks = sorted({min(max(k, 1), m - 1) for k in ks})
        return h1s, h2s, ks

    def fit(self, x, y):
        x = as_float_matrix(x, "x")
        y = as_float_vector(y, "y")
        if y.shape[0] != x.shape[0]:
            raise ValueError("x and y lengths differ")
        m = x.shape[0]
        needs_tuning = self.h1 is None or self.h2 is None or self.k is None
        if needs_tuning and m < 3:
            raise ValueError("leave-one-out tuning needs a group of size >= 3")
        self.x_ = x
        self.y_ = y
        if not needs_tuning:
            k = int(self.k)
            if not 1 <= k <= m:
                raise ValueError(f"k must lie in [1, {m}], got {k}")
            self.h1_ = check_positive(self.h1, "h1")
            self.h2_ = check_positive(self.h2, "h2")
            self.k_ = k
            self.loo_objective_ = None
            return self
        h1s, h2s, ks = self._grids(x, y)
        table = loo_objective_table(x, y, h1s, h2s, ks)
        best = select_from_loo_table(table)
        if best is None:
            raise ValueError("every (h1, h2, k) candidate yields -infinity leave-one-out log density")
        self.loo_objective_, self.k_, self.h1_, self.h2_ = best
        return self

    def loo_log_density(self, h1=None, h2=None, k=None):
        """Mean leave-one-out log density for one hyperparameter triple."""
        h1 = self.h1_ if h1 is None else h1
        h2 = self.h2_ if h2 is None else h2
        k = self.k_ if k is None else k
        d2 = sq_distances(self.x_)
        np.fill_diagonal(d2, np.inf)
        order = np.argsort(d2, axis=1, kind="stable")[:, :k]
        dd = np.take_along_axis(d2, order, axis=1)
        w = np.exp(-dd / (2.0 * h1 * h1))
        dens = np.einsum("ik,ik->i", w, normal_pdf(self.y_[:, None], self.y_[order], h2)) / w.sum(axis=1)
        with np.errstate(divide="ignore"):
            return float(np.mean(np.log(dens)))

    def _neighbor_weights(self, x_query, x_ref=None, on_underflow="raise", exclude_rows=None,
                          ref_rows=None):
        """Nearest-neighbor indices and kernel weights for each query row.

        ``exclude_rows[i]`` names a reference row never used for query ``i``
        (leave-one-out evaluation of in-sample queries); ``ref_rows`` maps
        reference positions to original row ids under bootstrap resampling.
        """
        x_ref = self.x_ if x_ref is None else x_ref
        d2 = sq_distances(x_query, x_ref)
        if exclude_rows is not None:
            ids = np.arange(x_ref.shape[0]) if ref_rows is None else ref_rows
            d2[ids[None, :] == np.asarray(exclude_rows)[:, None]] = np.inf
        k = min(self.k_, d2.shape[1])
        order = np.argsort(d2, axis=1, kind="stable")[:, :k]
        dd = np.take_along_axis(d2, order, axis=1)
        with np.errstate(over="ignore"):
            w = np.exp(-dd / (2.0 * self.h1_ * self.h1_))
        sw = w.sum(axis=1)
        dead = sw <= 0.0
        if np.any(dead):
            if on_underflow == "raise":
                i = int(np.where(dead)[0][0])
                raise ValueError(
                    f"all covariate kernel weights underflow for query row {i}; "
                    "increase h1 or rescale covariates"
                )
            sw = np.where(dead, 1.0, sw)
            w[dead] = 0.0
        return order, w, sw

    def pdf(self, x, y):
        """Conditional density of scalar outcome ``y`` given one covariate row ``x``."""
        return float(self.pdf_at(np.atleast_2d(np.asarray(x, dtype=float)), np.array([float(y)]))[0])

    def pdf_at(self, x_query, y_query, on_underflow="raise", exclude_rows=None):
        """Conditional densities at paired queries ``(x_query[i], y_query[i])``."""
        x_query = as_float_matrix(x_query, "x_query")
        y_query = np.asarray(y_query, dtype=float).ravel()
        idx, w, sw = self._neighbor_weights(x_query, on_underflow=on_underflow, exclude_rows=exclude_rows)
        kern = normal_pdf(y_query[:, None], self.y_[idx], self.h2_)
        return np.einsum("ik,ik->i", w, kern) / sw

    def pdf_profile(self, x_query, y_grid, on_underflow="raise", exclude_rows=None):
        """Conditional density profiles: rows are queries, columns the y grid."""
        x_query = as_float_matrix(x_query, "x_query")
        y_grid = np.asarray(y_grid, dtype=float).ravel()
        idx, w, sw = self._neighbor_weights(x_query, on_underflow=on_underflow, exclude_rows=exclude_rows)
        kern = normal_pdf(y_grid[None, None, :], self.y_[idx][:, :, None], self.h2_)
        return np.einsum("qk,qkg->qg", w, kern) / sw[:, None]


def loo_objective_table(x, y, h1_grid, h2_grid, k_grid):
    """Mean leave-one-out log density for every hyperparameter triple.

    Returns ``{(k, h1, h2): objective}`` with ``-inf`` for candidates whose
    kernel weights or densities underflow somewhere.
    """
    x = as_float_matrix(x, "x")
    y = as_float_vector(y, "y")
    d2 = sq_distances(x)
    np.fill_diagonal(d2, np.inf)
    order = np.argsort(d2, axis=1, kind="stable")
    d2_sorted = np.take_along_axis(d2, order, axis=1)
    table = {}
    for k in k_grid:
        idx = order[:, :k]
        dd = d2_sorted[:, :k]
        y_nb = y[idx]
        for h1 in h1_grid:
            w = np.exp(-dd / (2.0 * h1 * h1))
            sw = w.sum(axis=1)
            if np.any(sw <= 0.0):
                for h2 in h2_grid:
                    table[(k, h1, h2)] = -np.inf
                continue
            for h2 in h2_grid:
                dens = np.einsum("ik,ik->i", w, normal_pdf(y[:, None], y_nb, h2)) / sw
                if np.any(dens <= 0.0):
                    table[(k, h1, h2)] = -np.inf
                else:
                    table[(k, h1, h2)] = float(np.mean(np.log(dens)))
    return table


def select_from_loo_table(table):
    """Argmax of a LOO table; ties go to smaller k, then smaller h1, then h2."""
    best = None
    for (k, h1, h2) in sorted(table):
        obj = table[(k, h1, h2)]
        if not np.isfinite(obj):
            continue
        if best is None or obj > best[0]:
            best = (obj, k, h1, h2)
    return best


def cde_eval(model: NearestNeighborCDE, x, y):
    """Evaluate a fitted conditional density estimate at ``(x, y)``."""
    return model.pdf(x, y)


def cde_tune(x, y, h1_grid=None, h2_grid=None, k_grid=None) -> NearestNeighborCDE:
    """Leave-one-out tuned conditional density estimator for one group."""
    return NearestNeighborCDE(h1_grid=h1_grid, h2_grid=h2_grid, k_grid=k_grid).fit(x, y)


def empirical_quantile(sorted_values, q):
    """Order statistic at 1-based index ``ceil(q * B)`` along axis 0."""
    b = sorted_values.shape[0]
    idx = max(math.ceil(q * b), 1) - 1
    return sorted_values[idx]


@dataclass(frozen=True)
class DensityEnvelope:
    """Bootstrap quantile envelopes of one conditional density estimator.

    ``point_lo/point_hi`` bracket the density at each query's own outcome;
    ``grid_lo/grid_hi`` bracket the density profile along a shared y grid.
    """

    point_lo: np.ndarray
    point_hi: np.ndarray
    grid_lo: np.ndarray
    grid_hi: np.ndarray
    q: float
    n_replicates: int

    def __post_init__(self):
        if self.n_replicates < 1:
            raise ValueError("need at least one bootstrap replicate")
        if not 0.0 < self.q <= 0.5:
            raise ValueError("q must lie in (0, 0.5]")


def bootstrap_quantile_envelopes(
    model: NearestNeighborCDE,
    x_query,
    y_query,
    y_grid,
    n_replicates=100,
    q_levels=(0.05,),
    seed=0,
    exclude_rows=None,
    max_bytes=512 * 2**20,
) -> dict:
    """Quantile envelopes of the conditional density over bootstrap resamples.

    Reference rows are resampled with replacement within the fitted group,
    hyperparameters held fixed. Replicate randomness comes from seeds split
    off ``seed``, so results do not depend on evaluation order or chunking.
    ``exclude_rows[i]`` (optional) names a reference row whose resampled
    copies are never used for query ``i``, for leave-one-out evaluation of
    in-sample queries; use -1 for no exclusion. Returns one
    :class:`DensityEnvelope` per requested quantile level, all computed from
    the same replicate population.
    """
    x_query = as_float_matrix(x_query, "x_query")
    y_query = np.asarray(y_query, dtype=float).ravel()
    y_grid = np.asarray(y_grid, dtype=float).ravel()
    q_levels = tuple(float(q) for q in q_levels)
    for q in q_levels:
        if not 0.0 < q <= 0.5:
            raise ValueError("every q must lie in (0, 0.5]")
    if n_replicates < 1:
        raise ValueError("n_replicates must be >= 1")
    m = model.x_.shape[0]
    n_q, n_g = x_query.shape[0], y_grid.size
    if exclude_rows is not None:
        exclude_rows = np.asarray(exclude_rows, dtype=np.intp)
    entropy = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    children = entropy.spawn(n_replicates)
    resamples = [np.random.default_rng(s).integers(0, m, size=m) for s in children]

    # Outcome kernel against the shared grid depends only on original rows.
    kern_grid = normal_pdf(y_grid[None, :], model.y_[:, None], model.h2_)

    chunk = max(1, int(max_bytes // (8 * n_replicates * (n_g + 1))))
    out = {
        q: DensityEnvelope(
            point_lo=np.empty(n_q), point_hi=np.empty(n_q),
            grid_lo=np.empty((n_q, n_g)), grid_hi=np.empty((n_q, n_g)),
            q=q, n_replicates=n_replicates,
        )
        for q in q_levels
    }
    h1sq2 = 2.0 * model.h1_ * model.h1_
    for start in range(0, n_q, chunk):
        stop = min(start + chunk, n_q)
        xq = x_query[start:stop]
        yq = y_query[start:stop]
        c = stop - start
        point_vals = np.empty((n_replicates, c))
        grid_vals = np.empty((n_replicates, c, n_g))
        for b, ridx in enumerate(resamples):
            d2 = sq_distances(xq, model.x_[ridx])
            if exclude_rows is not None:
                d2[ridx[None, :] == exclude_rows[start:stop, None]] = np.inf
            order = np.argsort(d2, axis=1, kind="stable")[:, : model.k_]
            with np.errstate(over="ignore"):
                w = np.exp(-np.take_along_axis(d2, order, axis=1) / h1sq2)
            sw = w.sum(axis=1)
            dead = sw <= 0.0
            if np.any(dead):
                sw = np.where(dead, 1.0, sw)
                w[dead] = 0.0
            rows = ridx[order]
            grid_vals[b] = np.einsum("qk,qkg->qg", w, kern_grid[rows]) / sw[:, None]
            point_vals[b] = (
                np.einsum("qk,qk->q", w, normal_pdf(yq[:, None], model.y_[rows], model.h2_)) / sw
            )
        point_vals.sort(axis=0)
        grid_vals.sort(axis=0)
        for q, env in out.items():
            env.point_lo[start:stop] = empirical_quantile(point_vals, q)
            env.point_hi[start:stop] = empirical_quantile(point_vals, 1.0 - q)
            env.grid_lo[start:stop] = empirical_quantile(grid_vals, q)
            env.grid_hi[start:stop] = empirical_quantile(grid_vals, 1.0 - q)
    return out


def bootstrap_envelopes(
    model: NearestNeighborCDE,
    x_query,
    y_query,
    y_grid,
    n_replicates=100,
    q=0.05,
    seed=0,
    exclude_rows=None,
    max_bytes=512 * 2**20,
) -> DensityEnvelope:
    """Bootstrap density envelope at one quantile level.

    See :func:`bootstrap_quantile_envelopes` for the sampling scheme.
    """
    return bootstrap_quantile_envelopes(
        model, x_query, y_query, y_grid,
        n_replicates=n_replicates, q_levels=(q,), seed=seed,
        exclude_rows=exclude_rows, max_bytes=max_bytes,
    )[float(q)]
