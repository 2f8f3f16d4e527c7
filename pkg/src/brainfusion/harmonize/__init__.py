from .combat import ComBat, eb_shrink
from .pipeline import FeatureHarmonizer, TimeSeriesHarmonizer, harmonize_timeseries
from .residualize import CovariateResidualizer, RankDeficientDesignError, residualize_covariates


def combat_fit(X, sites, covariates=None):
    return ComBat().fit(X, sites, covariates)


def combat_apply(X, model, sites, covariates=None):
    return model.transform(X, sites, covariates)


__all__ = [
    "ComBat", "CovariateResidualizer", "FeatureHarmonizer", "RankDeficientDesignError",
    "TimeSeriesHarmonizer", "combat_apply", "combat_fit", "eb_shrink", "harmonize_timeseries",
    "residualize_covariates",
]
