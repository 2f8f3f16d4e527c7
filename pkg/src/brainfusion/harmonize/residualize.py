import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted


class RankDeficientDesignError(ValueError):
    pass


def _design(covariates, n):
    c = check_array(covariates, ensure_2d=True, dtype=np.float64)
    if c.shape[0] != n:
        raise ValueError(f"covariates have {c.shape[0]} rows, features have {n}")
    return np.column_stack([np.ones(n), c])


class CovariateResidualizer(TransformerMixin, BaseEstimator):
    """Remove linear covariate effects (e.g. age, sex) from every feature.

    Fits ``X ~ 1 + covariates`` by least squares per feature and returns the
    residuals with the fitted intercept added back, so features keep their
    original location.
    """

    def fit(self, X, covariates):
        X = check_array(X, dtype=np.float64)
        if X.shape[0] < 3:
            raise ValueError("need at least 3 subjects to residualize")
        design = _design(covariates, X.shape[0])
        if np.linalg.matrix_rank(design) < design.shape[1]:
            raise RankDeficientDesignError(
                "covariate design [1, covariates] is rank deficient (constant or collinear covariates)")
        self.coef_, *_ = np.linalg.lstsq(design, X, rcond=None)
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X, covariates):
        check_is_fitted(self, "coef_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"expected {self.n_features_in_} features, got {X.shape[1]}")
        design = _design(covariates, X.shape[0])
        return X - design[:, 1:] @ self.coef_[1:]

    def fit_transform(self, X, covariates):
        return self.fit(X, covariates).transform(X, covariates)


def residualize_covariates(X, covariates):
    """One-shot fit and transform on the same subjects."""
    return CovariateResidualizer().fit_transform(X, covariates)
