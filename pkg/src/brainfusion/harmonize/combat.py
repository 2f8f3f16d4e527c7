"""Parametric empirical-Bayes ComBat.

Model per feature ``g``, subject ``j`` at site ``i``::

    Y_ijg = alpha_g + X_ij beta_g + gamma_ig + delta_ig * eps_ijg

Features are standardised with the pooled residual variance; per-site
location (``gamma``) and scale (``delta``) estimates are shrunk towards
feature-pooled priors (normal on gamma, inverse gamma on delta**2) by
alternating conditional posterior means until the relative change drops
below ``tol``.
"""

import json
import warnings

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from ..numerics.tensorfile import atomic_write_bytes


def _inverse_gamma_prior(delta_hat):
    m = delta_hat.mean()
    s2 = delta_hat.var(ddof=1)
    if not np.isfinite(s2) or s2 <= 0:
        return None
    return (2 * s2 + m**2) / s2, (m * s2 + m**3) / s2


def _rel_change(new, old):
    return np.max(np.abs(new - old) / np.maximum(np.abs(old), 1e-8))


def eb_shrink(s_site, gamma_hat, delta_hat, tol=1e-6, max_iter=500):
    """Posterior location and variance for one site.

    ``s_site`` is the (n_i, F) standardised block. Returns
    ``(gamma_star, delta2_star, n_iter)``.
    """
    n = s_site.shape[0]
    g_bar = gamma_hat.mean()
    t2 = gamma_hat.var(ddof=1)
    prior = _inverse_gamma_prior(delta_hat)
    g_old, d_old = gamma_hat, delta_hat
    for it in range(1, max_iter + 1):
        g_new = (t2 * n * gamma_hat + d_old * g_bar) / (t2 * n + d_old)
        if prior is None:
            d_new = delta_hat
        else:
            a, b = prior
            sum2 = ((s_site - g_new) ** 2).sum(axis=0)
            d_new = (0.5 * sum2 + b) / (n / 2.0 + a - 1.0)
        change = max(_rel_change(g_new, g_old), _rel_change(d_new, d_old))
        g_old, d_old = g_new, d_new
        if change < tol:
            break
    return g_old, d_old, it


class ComBat(TransformerMixin, BaseEstimator):
    """Site harmonisation with parametric empirical-Bayes shrinkage.

    Parameters
    ----------
    empirical_bayes : bool
        Shrink per-site estimates; if False the raw location/scale estimates
        are used.
    tol, max_iter : float, int
        Convergence controls for the shrinkage iteration.

    Attributes
    ----------
    sites_ : ndarray of str
    alpha_ : (F,) overall feature means
    beta_ : (p, F) covariate coefficients (p may be 0)
    var_pooled_ : (F,) pooled residual variance
    gamma_ : (S, F) additive site effects in standardised units
    delta_ : (S, F) multiplicative site effects (scale, not variance)
    """

    def __init__(self, empirical_bayes=True, tol=1e-6, max_iter=500):
        self.empirical_bayes = empirical_bayes
        self.tol = tol
        self.max_iter = max_iter

    def _check_covariates(self, covariates, n):
        if covariates is None:
            return np.zeros((n, 0))
        c = check_array(covariates, dtype=np.float64, ensure_2d=True)
        if c.shape[0] != n:
            raise ValueError("covariates must have one row per subject")
        return c

    def fit(self, X, sites, covariates=None):
        X = check_array(X, dtype=np.float64)
        sites = np.asarray(sites).astype(str)
        n, f = X.shape
        if sites.shape != (n,):
            raise ValueError("sites must have one entry per subject")
        cov = self._check_covariates(covariates, n)
        self.sites_ = np.unique(sites)
        self.n_features_in_ = f
        if len(self.sites_) < 2:
            warnings.warn("single site: ComBat is a no-op", RuntimeWarning, stacklevel=2)
            self.identity_ = True
            self.alpha_ = X.mean(axis=0)
            self.beta_ = np.zeros((cov.shape[1], f))
            self.var_pooled_ = X.var(axis=0)
            self.gamma_ = np.zeros((1, f))
            self.delta_ = np.ones((1, f))
            return self
        self.identity_ = False
        if f < 2:
            raise ValueError("ComBat needs at least 2 features")
        counts = {s: int(np.sum(sites == s)) for s in self.sites_}
        small = [s for s, c in counts.items() if c < 3]
        if small:
            raise ValueError(f"sites with fewer than 3 subjects: {small}")

        onehot = (sites[:, None] == self.sites_[None, :]).astype(np.float64)
        design = np.column_stack([onehot, cov])
        b_hat, *_ = np.linalg.lstsq(design, X, rcond=None)
        n_site = onehot.sum(axis=0)
        s_count = len(self.sites_)
        self.alpha_ = (n_site / n) @ b_hat[:s_count]
        self.beta_ = b_hat[s_count:]
        resid = X - design @ b_hat
        self.var_pooled_ = (resid**2).mean(axis=0)
        scale = np.maximum(np.mean(X**2, axis=0), 1e-300)
        zero = np.flatnonzero((np.ptp(X, axis=0) == 0) | (self.var_pooled_ <= 1e-24 * scale))
        if zero.size:
            raise ValueError(f"zero pooled variance at feature(s) {zero.tolist()}")

        s = self._standardize(X, cov)
        gamma, delta2 = np.empty((s_count, f)), np.empty((s_count, f))
        self.gamma_hat_, self.delta_hat_ = np.empty((s_count, f)), np.empty((s_count, f))
        self.n_iter_ = np.zeros(s_count, dtype=int)
        for k, site in enumerate(self.sites_):
            block = s[sites == site]
            g_hat = block.mean(axis=0)
            d_hat = block.var(axis=0, ddof=1)
            self.gamma_hat_[k], self.delta_hat_[k] = g_hat, d_hat
            if self.empirical_bayes:
                gamma[k], delta2[k], self.n_iter_[k] = eb_shrink(block, g_hat, d_hat, self.tol, self.max_iter)
            else:
                gamma[k], delta2[k] = g_hat, d_hat
        self.gamma_ = gamma
        self.delta_ = np.sqrt(delta2)
        return self

    def _standardize(self, X, cov):
        stand_mean = self.alpha_ + cov @ self.beta_
        return (X - stand_mean) / np.sqrt(self.var_pooled_)

    def transform(self, X, sites, covariates=None):
        check_is_fitted(self, "alpha_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"expected {self.n_features_in_} features, got {X.shape[1]}")
        if self.identity_:
            return X.copy()
        sites = np.asarray(sites).astype(str)
        unknown = sorted(set(sites) - set(self.sites_))
        if unknown:
            raise ValueError(f"unknown site id(s): {unknown}")
        cov = self._check_covariates(covariates, X.shape[0])
        s = self._standardize(X, cov)
        idx = np.searchsorted(self.sites_, sites)
        adj = (s - self.gamma_[idx]) / self.delta_[idx]
        return adj * np.sqrt(self.var_pooled_) + self.alpha_ + cov @ self.beta_

    def fit_transform(self, X, sites, covariates=None):
        return self.fit(X, sites, covariates).transform(X, sites, covariates)

    # -- serialisation -------------------------------------------------------

    def to_dict(self):
        check_is_fitted(self, "alpha_")
        return {
            "alpha": self.alpha_.tolist(),
            "beta": self.beta_.tolist(),
            "pooled_var": self.var_pooled_.tolist(),
            "sites": [{"id": str(s), "gamma": self.gamma_[k].tolist(), "delta": self.delta_[k].tolist()}
                      for k, s in enumerate(self.sites_)],
        }

    @classmethod
    def from_dict(cls, d):
        model = cls()
        model.alpha_ = np.array(d["alpha"], dtype=np.float64)
        f = model.alpha_.shape[0]
        model.beta_ = np.array(d["beta"], dtype=np.float64).reshape(-1, f)
        model.var_pooled_ = np.array(d["pooled_var"], dtype=np.float64)
        model.sites_ = np.array([s["id"] for s in d["sites"]])
        model.gamma_ = np.array([s["gamma"] for s in d["sites"]], dtype=np.float64)
        model.delta_ = np.array([s["delta"] for s in d["sites"]], dtype=np.float64)
        model.n_features_in_ = f
        model.identity_ = len(model.sites_) < 2
        order = np.argsort(model.sites_)
        model.sites_, model.gamma_, model.delta_ = model.sites_[order], model.gamma_[order], model.delta_[order]
        return model

    def save(self, path):
        atomic_write_bytes(path, json.dumps(self.to_dict()).encode())

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))
