"""Logistic regression on oracle features of a synthetic cohort.

The oracle knows where the generator planted signal: it reads each ROI's
mean intensity and the Fisher-z correlation of every designated ROI pair.
Its cross-validated accuracy is the ceiling against which the learned
models are calibrated.
"""

import numpy as np
from sklearn.linear_model import LogisticRegression
from sklearn.pipeline import make_pipeline
from sklearn.preprocessing import StandardScaler

from ..graphs import fisher_z, pearson_fcn
from ..harmonize import FeatureHarmonizer
from .metrics import ConfusionMatrix


def oracle_features(cohort, pairs=None):
    """(structural ROI means, planted-pair Fisher z) per subject.

    ``pairs`` defaults to the ``functional_pairs`` recorded by the generator.
    """
    if pairs is None:
        pairs = cohort.effects["functional_pairs"]
    means = np.array([[vol[tuple(slice(l, h) for l, h in zip(lo, hi))].mean()
                       for lo, hi in cohort.atlas.boxes] for vol in cohort.volumes])
    zs = []
    for ts in cohort.timeseries:
        z = fisher_z(pearson_fcn(ts)).values
        zs.append([z[a, b] for a, b in pairs])
    return means, np.array(zs)


def oracle_baseline(cohort, plan, harmonize=True, C=1.0):
    """Per-fold :class:`ConfusionMatrix` of the oracle logistic regression.

    Harmonization of the ROI means is fitted on each training split.
    Pearson correlations are invariant to per-ROI affine site effects, so
    the pair features are used as they are.
    """
    means, zs = oracle_features(cohort)
    y, sites, cov = cohort.labels, cohort.sites, cohort.covariates()
    out = []
    for train_ids, test_ids in zip(plan.train, plan.test):
        tr, te = cohort.index_of(train_ids), cohort.index_of(test_ids)
        m_tr, m_te = means[tr], means[te]
        if harmonize:
            h = FeatureHarmonizer().fit(m_tr, sites[tr], cov[tr])
            m_tr, m_te = h.transform(m_tr, sites[tr], cov[tr]), h.transform(m_te, sites[te], cov[te])
        clf = make_pipeline(StandardScaler(), LogisticRegression(C=C, max_iter=1000))
        clf.fit(np.hstack([m_tr, zs[tr]]), y[tr])
        out.append(ConfusionMatrix.from_predictions(y[te], clf.predict(np.hstack([m_te, zs[te]]))))
    return out
