"""Semi-parametric additive-noise causal two-groups estimator.

Fitting is stagewise: (1) the non-responder mean surface is kernel ridge
regression on the untreated group, tuned by GCV; (2) the noise density is a
predictive-recursion fit to the untreated leave-one-out residuals, with its
kernel bandwidth chosen by PRML; (3) the responder prior (logistic link) and
responder mean, both linear models on random Fourier features, are fit to the
treated group by EM on the implied two-component residual mixture. The RFF
bandwidth is chosen by k-fold cross validation and each treated sample's
final prior/mean predictions come from the model that never saw its fold.
"""

from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator

from .density import PredictiveRecursionDensity
from .kernels import KernelRidgeGCV, RandomFourierFeatures, median_heuristic
from .nonparametric import EstimandReport, _report
from .selection import PosteriorScores, SelectionResult, select_by_average
from .validation import as_binary_vector, as_float_matrix, as_float_vector

DEFAULT_RFF_BANDWIDTH_SCALES = (1.0, 2.0, 4.0)


@dataclass
class RffLinearModel:
    """A linear head over random Fourier features plus an intercept."""

    feature_map: RandomFourierFeatures
    coef: np.ndarray

    def features(self, x):
        phi = self.feature_map.transform(x)
        return np.hstack([phi, np.ones((phi.shape[0], 1))])

    def linear(self, x):
        return self.features(x) @ self.coef


def _sigmoid(z):
    z = np.asarray(z, dtype=float)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def em_e_step(g_hat, mu0_at_x, mu1_at_x, pi_at_x, y):
    """Posterior probability of each treated outcome being a non-responder draw.

    ``w = (1-pi) g(y-mu0) / [(1-pi) g(y-mu0) + pi g(y-mu1)]`` computed in log
    space. Points where both component densities vanish fall back to the
    conservative ``w = 1``.
    """
    y = np.asarray(y, dtype=float)
    pi = np.clip(np.asarray(pi_at_x, dtype=float), 1e-12, 1.0 - 1e-12)
    log_g0 = g_hat.log_pdf(y - np.asarray(mu0_at_x, dtype=float))
    log_g1 = g_hat.log_pdf(y - np.asarray(mu1_at_x, dtype=float))
    both_dead = np.isneginf(log_g0) & np.isneginf(log_g1)
    z = (np.log1p(-pi) + log_g0) - (np.log(pi) + log_g1)
    w = np.where(both_dead, 1.0, _sigmoid(z))
    return w


def _ascend(value_fn, grad_fn, x0, max_iter=50, tol=1e-6, step0=1.0):
    """Gradient ascent with backtracking line search; never accepts a decrease.

    ``value_fn`` is evaluated on line-search trials; ``grad_fn`` only at
    accepted points.
    """
    x = np.asarray(x0, dtype=float).copy()
    value = value_fn(x)
    grad = grad_fn(x)
    step = step0
    for _ in range(max_iter):
        gnorm = float(np.max(np.abs(grad)))
        if gnorm <= tol:
            break
        slope = float(grad @ grad)
        moved = False
        while step > 1e-14:
            candidate = x + step * grad
            new_value = value_fn(candidate)
            if new_value >= value + 1e-4 * step * slope:
                x, value = candidate, new_value
                grad = grad_fn(x)
                step *= 1.5
                moved = True
                break
            step *= 0.5
        if not moved:
            break
    return x, value, step


def _fit_pi_model(features, features_t, w, coef0, ridge, max_iter, tol):
    """Weighted logistic regression: weight w on log(1-pi), (1-w) on log pi."""
    m = features.shape[0]
    mask = np.ones(features.shape[1])
    mask[-1] = 0.0  # intercept unpenalized
    resp = 1.0 - w

    def value(coef):
        z = features @ coef
        # log sigma(z) = -softplus(-z), log(1 - sigma(z)) = -softplus(z)
        fit = -w @ np.logaddexp(0.0, z) - resp @ np.logaddexp(0.0, -z)
        return float(fit - 0.5 * ridge * np.sum(mask * coef * coef)) / m

    def grad(coef):
        z = features @ coef
        return (features_t @ (resp - _sigmoid(z)) - ridge * mask * coef) / m

    return _ascend(value, grad, coef0, max_iter=max_iter, tol=tol)


def _fit_mu1_model(features, features_t, y, w, coef0, g_hat, ridge, max_iter, tol):
    """Responder-mean update: maximize sum (1-w) log g(y - mu1(x))."""
    m = features.shape[0]
    resp = 1.0 - w
    mask = np.ones(features.shape[1])
    mask[-1] = 0.0

    def value(coef):
        r = y - features @ coef
        fit = resp @ g_hat.log_pdf(r)
        return float(fit - 0.5 * ridge * np.sum(mask * coef * coef)) / m

    def grad(coef):
        r = y - features @ coef
        slope = g_hat.log_pdf_slope(r)
        return (-(features_t @ (resp * slope)) - ridge * mask * coef) / m

    return _ascend(value, grad, coef0, max_iter=max_iter, tol=tol)


def em_m_step(weights, features, y_treated, g_hat, pi_coef=None, mu1_coef=None,
              ridge=1e-3, max_iter=50, tol=1e-6, features_t=None):
    """One M-step: refit the prior and responder-mean models at fixed weights.

    Returns updated coefficient vectors and a flag set when all weights equal
    one (no responder mass), in which case the responder mean is left at its
    previous iterate.
    """
    weights = np.asarray(weights, dtype=float)
    features = np.asarray(features, dtype=float)
    y_treated = np.asarray(y_treated, dtype=float)
    if features_t is None:
        features_t = np.ascontiguousarray(features.T)
    p = features.shape[1]
    if pi_coef is None:
        pi_coef = np.zeros(p)
    if mu1_coef is None:
        mu1_coef = np.zeros(p)
    pi_coef, _, _ = _fit_pi_model(features, features_t, weights, pi_coef, ridge, max_iter, tol)
    no_responder_mass = bool(np.sum(1.0 - weights) <= 1e-12)
    if not no_responder_mass:
        mu1_coef, _, _ = _fit_mu1_model(
            features, features_t, y_treated, weights, mu1_coef, g_hat, ridge, max_iter, tol
        )
    return pi_coef, mu1_coef, no_responder_mass


@dataclass
class _EmResult:
    pi_coef: np.ndarray
    mu1_coef: np.ndarray
    trace: list
    improved_after_first: bool
    no_responder_mass: bool


class AdditiveC2G(BaseEstimator):
    """Additive-noise causal two-groups model fit by a stagewise procedure.

    Parameters cover the three stages: kernel ridge grids for the
    non-responder mean, predictive-recursion settings for the noise density,
    and random-Fourier/EM settings for the treated-group mixture. ``pi_clip``
    bounds the prior away from 0 and 1 before posterior evaluation.

    Attributes
    ----------
    mu0_ : KernelRidgeGCV
        Non-responder mean surface.
    g_ : PredictiveRecursionDensity
        Residual noise density.
    pi_model_, mu1_model_ : RffLinearModel
        Full-data prior (logit scale) and responder-mean models.
    w_ : ndarray
        Null posteriors of the treated samples from held-out predictions.
    em_trace_ : list of float
        Penalized observed-data log-likelihood per EM iteration (full fit).
    """

    def __init__(
        self,
        krr_bandwidth_grid=None,
        krr_ridge_grid=None,
        pr_bandwidth_grid=None,
        pr_grid_size=512,
        pr_weight_exponent=0.67,
        pr_permutations=10,
        rff_dim=256,
        rff_bandwidth_scales=DEFAULT_RFF_BANDWIDTH_SCALES,
        n_folds=5,
        em_max_iter=200,
        em_tol=1e-7,
        m_step_ridge=1e-3,
        m_step_max_iter=50,
        m_step_tol=1e-6,
        pi_clip=1e-4,
        seed=0,
    ):
        self.krr_bandwidth_grid = krr_bandwidth_grid
        self.krr_ridge_grid = krr_ridge_grid
        self.pr_bandwidth_grid = pr_bandwidth_grid
        self.pr_grid_size = pr_grid_size
        self.pr_weight_exponent = pr_weight_exponent
        self.pr_permutations = pr_permutations
        self.rff_dim = rff_dim
        self.rff_bandwidth_scales = rff_bandwidth_scales
        self.n_folds = n_folds
        self.em_max_iter = em_max_iter
        self.em_tol = em_tol
        self.m_step_ridge = m_step_ridge
        self.m_step_max_iter = m_step_max_iter
        self.m_step_tol = m_step_tol
        self.pi_clip = pi_clip
        self.seed = seed

    # -- EM machinery -------------------------------------------------------

    def _clip_pi(self, pi):
        return np.clip(pi, self.pi_clip, 1.0 - self.pi_clip)

    def _mixture_ll(self, pi, log_g0, log_g1):
        return np.logaddexp(np.log1p(-pi) + log_g0, np.log(pi) + log_g1)

    def _penalty(self, coef, m):
        return 0.5 * self.m_step_ridge * float(np.sum(coef[:-1] ** 2)) / m

    def _init_mu1_coef(self, features, target):
        # Ridge least squares puts the responder mean near mu0 + residual std.
        p = features.shape[1]
        gram = features.T @ features + 1e-6 * np.eye(p)
        return np.linalg.solve(gram, features.T @ target)

    def _run_em(self, features, y, mu0_at, g_hat, init_offset):
        m = features.shape[0]
        features_t = np.ascontiguousarray(features.T)
        log_g0 = g_hat.log_pdf(y - mu0_at)
        pi_coef = np.zeros(features.shape[1])
        mu1_coef = self._init_mu1_coef(features, mu0_at + init_offset)
        trace = []
        no_mass = False
        for iteration in range(self.em_max_iter):
            pi = self._clip_pi(_sigmoid(features @ pi_coef))
            log_g1 = g_hat.log_pdf(y - features @ mu1_coef)
            objective = float(np.mean(self._mixture_ll(pi, log_g0, log_g1)))
            objective -= self._penalty(pi_coef, m) + self._penalty(mu1_coef, m)
            trace.append(objective)
            if iteration >= 1:
                delta = trace[-1] - trace[-2]
                if delta < self.em_tol * (abs(trace[-2]) + 1.0):
                    break
            w = em_e_step(g_hat, mu0_at, features @ mu1_coef, pi, y)
            pi_coef, mu1_coef, no_mass = em_m_step(
                w, features, y, g_hat,
                pi_coef=pi_coef, mu1_coef=mu1_coef,
                ridge=self.m_step_ridge, max_iter=self.m_step_max_iter, tol=self.m_step_tol,
                features_t=features_t,
            )
        improved = len(trace) < 2 or trace[1] >= trace[0] - 1e-9
        return _EmResult(pi_coef, mu1_coef, trace, improved, no_mass)

    def _heldout_ll(self, features, y, mu0_at, g_hat, result):
        pi = self._clip_pi(_sigmoid(features @ result.pi_coef))
        log_g0 = g_hat.log_pdf(y - mu0_at)
        log_g1 = g_hat.log_pdf(y - features @ result.mu1_coef)
        return float(np.sum(self._mixture_ll(pi, log_g0, log_g1)))

    # -- fitting ------------------------------------------------------------

    def fit(self, x, y, t):
        x = as_float_matrix(x, "x")
        y = as_float_vector(y, "y")
        t = as_binary_vector(t, "t")
        treated = np.flatnonzero(t == 1)
        untreated = np.flatnonzero(t == 0)
        if treated.size == 0 or untreated.size == 0:
            raise ValueError("both treatment groups are required")

        # Stage 1: non-responder mean on the untreated group.
        self.mu0_ = KernelRidgeGCV(
            bandwidth_grid=self.krr_bandwidth_grid, ridge_grid=self.krr_ridge_grid
        ).fit(x[untreated], y[untreated])
        loo = self.mu0_.loo_predictions()
        residuals = y[untreated] - loo

        # Stage 2: residual noise density with PRML-selected bandwidth.
        self.g_ = PredictiveRecursionDensity(
            bandwidth_grid=self.pr_bandwidth_grid,
            grid_size=self.pr_grid_size,
            weight_exponent=self.pr_weight_exponent,
            n_permutations=self.pr_permutations,
            seed=self.seed,
        ).fit(residuals)

        # Stage 3: EM for the prior and responder mean on the treated group.
        x1, y1 = x[treated], y[treated]
        m = treated.size
        mu0_treated = self.mu0_.predict(x1)
        init_offset = float(np.std(y1 - mu0_treated))
        base_bandwidth = median_heuristic(x1)
        rng = np.random.default_rng(self.seed)
        n_folds = max(1, min(self.n_folds, m // 2))
        fold_of = np.arange(m) % n_folds
        rng.shuffle(fold_of)

        best = None
        for scale in self.rff_bandwidth_scales:
            feature_map = RandomFourierFeatures(
                n_features=self.rff_dim, bandwidth=scale * base_bandwidth, seed=self.seed
            ).fit(x1)
            model = RffLinearModel(feature_map, np.zeros(self.rff_dim + 1))
            features = model.features(x1)
            fold_results = []
            score = 0.0
            for fold in range(n_folds):
                train = fold_of != fold if n_folds > 1 else np.ones(m, dtype=bool)
                result = self._run_em(
                    features[train], y1[train], mu0_treated[train], self.g_, init_offset
                )
                fold_results.append(result)
                hold = ~train if n_folds > 1 else np.ones(m, dtype=bool)
                score += self._heldout_ll(
                    features[hold], y1[hold], mu0_treated[hold], self.g_, result
                )
            if best is None or score > best[0]:
                best = (score, scale, feature_map, features, fold_results)
        _, scale, feature_map, features, fold_results = best

        # Held-out prior and responder-mean predictions for every treated sample.
        pi_treated = np.empty(m)
        mu1_treated = np.empty(m)
        for fold, result in enumerate(fold_results):
            hold = fold_of == fold if n_folds > 1 else np.ones(m, dtype=bool)
            pi_treated[hold] = self._clip_pi(_sigmoid(features[hold] @ result.pi_coef))
            mu1_treated[hold] = features[hold] @ result.mu1_coef

        # Full-data models for prediction and export.
        full = self._run_em(features, y1, mu0_treated, self.g_, init_offset)
        self.pi_model_ = RffLinearModel(feature_map, full.pi_coef)
        self.mu1_model_ = RffLinearModel(feature_map, full.mu1_coef)
        self.em_trace_ = full.trace
        self.rff_bandwidth_ = scale * base_bandwidth

        self.treated_indices_ = treated
        self.untreated_indices_ = untreated
        self.fold_of_ = fold_of
        self.fold_models_ = [
            (RffLinearModel(feature_map, r.pi_coef), RffLinearModel(feature_map, r.mu1_coef))
            for r in fold_results
        ]
        self.mu0_treated_ = mu0_treated
        self.pi_treated_ = pi_treated
        self.mu1_treated_ = mu1_treated
        self.w_ = em_e_step(self.g_, mu0_treated, mu1_treated, pi_treated, y1)
        self.diagnostics_ = {
            "em_improved_after_first": full.improved_after_first,
            "no_responder_mass": full.no_responder_mass,
            "fold_em_improved": [r.improved_after_first for r in fold_results],
            "n_pi_clipped": int(np.sum((pi_treated <= self.pi_clip) | (pi_treated >= 1 - self.pi_clip))),
            "residual_density_bandwidth": self.g_.bandwidth_,
            "krr_bandwidth": self.mu0_.bandwidth_,
            "krr_ridge": self.mu0_.ridge_,
        }
        return self

    # -- inference ----------------------------------------------------------

    def posterior_scores(self) -> PosteriorScores:
        return PosteriorScores(self.treated_indices_, self.w_, source="additive")

    def select(self, alpha) -> SelectionResult:
        return select_by_average(self.posterior_scores(), alpha)

    def predict_effect(self, x):
        """Point estimate of the conditional average response effect at new points."""
        return self.mu1_model_.linear(x) - self.mu0_.predict(x)

    def predict_pi(self, x):
        return self._clip_pi(_sigmoid(self.pi_model_.linear(x)))

    def estimands(self, subgroup_mask=None) -> EstimandReport:
        """Point-estimate effects (degenerate intervals) and the responder fraction."""
        care = self.mu1_treated_ - self.mu0_treated_
        return _report(
            self.treated_indices_,
            care.copy(),
            care.copy(),
            self.pi_treated_,
            np.zeros(care.shape, dtype=bool),
            subgroup_mask,
        )
