"""Residualize-then-ComBat harmonisers for feature matrices and ROI time series."""

import warnings

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .combat import ComBat
from .residualize import CovariateResidualizer


class FeatureHarmonizer(TransformerMixin, BaseEstimator):
    """Covariate residualization followed by ComBat on a subjects x features matrix.

    ``covariates`` (e.g. age and sex) are regressed out first; ComBat then
    removes site location/scale effects. With a single site the ComBat step
    is skipped with a warning.
    """

    def __init__(self, residualize=True, empirical_bayes=True):
        self.residualize = residualize
        self.empirical_bayes = empirical_bayes

    def fit(self, X, sites, covariates=None):
        X = np.asarray(X, dtype=np.float64)
        self.residualizer_ = None
        if self.residualize and covariates is not None:
            self.residualizer_ = CovariateResidualizer().fit(X, covariates)
            X = self.residualizer_.transform(X, covariates)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            self.combat_ = ComBat(empirical_bayes=self.empirical_bayes).fit(X, sites)
        if self.combat_.identity_:
            warnings.warn("single site: harmonization skipped", RuntimeWarning, stacklevel=2)
        return self

    def transform(self, X, sites, covariates=None):
        check_is_fitted(self, "combat_")
        X = np.asarray(X, dtype=np.float64)
        if self.residualizer_ is not None:
            X = self.residualizer_.transform(X, covariates)
        return self.combat_.transform(X, sites)

    def fit_transform(self, X, sites, covariates=None):
        return self.fit(X, sites, covariates).transform(X, sites, covariates)


def _summaries(series):
    means = np.array([ts.mean(axis=0) for ts in series], dtype=np.float64)
    log_sd = np.array([np.log(ts.std(axis=0)) for ts in series], dtype=np.float64)
    return means, log_sd


class TimeSeriesHarmonizer(TransformerMixin, BaseEstimator):
    """Harmonise ROI time series through per-(subject, ROI) mean and scale.

    The per-ROI mean and log standard deviation are harmonised as two
    feature matrices; each subject's series is then re-centred and re-scaled
    by the resulting affine map, which leaves within-subject temporal
    structure (and hence all correlations) untouched.
    """

    def __init__(self, residualize=True, empirical_bayes=True):
        self.residualize = residualize
        self.empirical_bayes = empirical_bayes

    def fit(self, series, sites, covariates=None):
        means, log_sd = _summaries(series)
        self.n_rois_ = means.shape[1]
        self.single_site_ = len(np.unique(np.asarray(sites).astype(str))) < 2
        if self.single_site_:
            warnings.warn("single site: time-series harmonization skipped", RuntimeWarning, stacklevel=2)
            return self
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            self.mean_model_ = FeatureHarmonizer(self.residualize, self.empirical_bayes).fit(means, sites, covariates)
            self.scale_model_ = FeatureHarmonizer(self.residualize, self.empirical_bayes).fit(log_sd, sites, covariates)
        return self

    def transform(self, series, sites, covariates=None):
        check_is_fitted(self, "n_rois_")
        if self.single_site_:
            return [np.array(ts, copy=True) for ts in series]
        means, log_sd = _summaries(series)
        new_means = self.mean_model_.transform(means, sites, covariates)
        new_sd = np.exp(self.scale_model_.transform(log_sd, sites, covariates))
        out = []
        for ts, m, sd, nm, nsd in zip(series, means, np.exp(log_sd), new_means, new_sd):
            z = (np.asarray(ts, dtype=np.float64) - m) / sd
            out.append((z * nsd + nm).astype(np.asarray(ts).dtype))
        return out

    def fit_transform(self, series, sites, covariates=None):
        return self.fit(series, sites, covariates).transform(series, sites, covariates)


def harmonize_timeseries(series, records):
    """Fit and apply :class:`TimeSeriesHarmonizer` using ``records`` for site/age/sex."""
    sites = [r.site for r in records]
    cov = np.array([[r.age, r.sex] for r in records], dtype=np.float64)
    return TimeSeriesHarmonizer().fit_transform(series, sites, cov)
