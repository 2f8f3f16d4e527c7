"""Synthetic multi-site cohorts with planted class, covariate and site effects.

Each ROI value follows the location/scale form ``alpha + X beta + gamma_site
+ delta_site * eps``:

* structural: every voxel of ROI ``r`` gets a subject-level ROI effect plus
  voxel noise (the ``eps`` term, scaled by the site's ``delta``); class-1
  subjects get ``structural_effect * roi_sd`` added to the designated ROIs.
* functional: ROI signals come from a low-rank Gaussian factor model. A
  global factor with loading ``global_loading`` is shared by every ROI; each
  designated pair additionally shares a private factor whose variance share
  is ``baseline_pair_corr`` (+ ``functional_effect`` for class 1), so the
  population correlation of a pair is
  ``global_loading**2 + baseline_pair_corr + label * functional_effect``.

With ``split_signal`` each class-1 subject expresses its effect in exactly one
modality, chosen at random.
"""

import string
from dataclasses import asdict, dataclass

import numpy as np

from .atlas import synthetic_atlas
from .cohort import Cohort, SubjectRecord, save_cohort


@dataclass
class GeneratorConfig:
    n_subjects: int = 200
    n_sites: int = 4
    n_rois: int = 16
    volume_side: int = 48
    patch_side: int = 8
    T: int = 64
    structural_effect: float = 0.5
    functional_effect: float = 0.4
    structural_rois: tuple = (0, 1, 2, 3)
    functional_pairs: tuple = ((4, 5), (6, 7), (8, 9), (10, 11))
    baseline_pair_corr: float = 0.2
    global_loading: float = 0.3
    roi_sd: float = 1.0
    voxel_sd: float = 1.0
    age_effect: float = 0.2
    sex_effect: float = 0.2
    site_gamma: tuple = None
    site_delta: tuple = None
    site_gamma_sd: float = 1.0
    site_delta_sd: float = 0.25
    site_jitter: float = 0.1
    split_signal: bool = False
    seed: int = 0

    def __post_init__(self):
        self.structural_rois = tuple(int(r) for r in self.structural_rois)
        self.functional_pairs = tuple((int(a), int(b)) for a, b in self.functional_pairs)
        if self.site_gamma is not None:
            self.site_gamma = tuple(float(g) for g in self.site_gamma)
        if self.site_delta is not None:
            self.site_delta = tuple(float(d) for d in self.site_delta)

    @classmethod
    def from_dict(cls, d):
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown generator options: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self):
        d = asdict(self)
        d["structural_rois"] = list(self.structural_rois)
        d["functional_pairs"] = [list(p) for p in self.functional_pairs]
        for key in ("site_gamma", "site_delta"):
            if d[key] is not None:
                d[key] = list(d[key])
        return d

    def validate(self):
        if self.n_sites < 1:
            raise ValueError("n_sites must be >= 1")
        if self.n_subjects < 4 * self.n_sites:
            raise ValueError("n_subjects must be >= 4 * n_sites for stratification")
        if self.T < 8:
            raise ValueError("T must be >= 8")
        if self.structural_effect < 0 or self.functional_effect < 0:
            raise ValueError("effect sizes must be >= 0")
        rois = set(self.structural_rois) | {r for p in self.functional_pairs for r in p}
        if any(not 0 <= r < self.n_rois for r in rois):
            raise ValueError("designated ROI index outside the atlas")
        paired = [r for p in self.functional_pairs for r in p]
        if len(paired) != len(set(paired)) or any(a == b for a, b in self.functional_pairs):
            raise ValueError("functional pairs must be disjoint")
        lam2 = self.global_loading**2
        if lam2 + self.baseline_pair_corr + self.functional_effect >= 1.0:
            raise ValueError("pair correlation budget exceeds 1")
        for key, n in (("site_gamma", self.n_sites), ("site_delta", self.n_sites)):
            val = getattr(self, key)
            if val is not None and len(val) != n:
                raise ValueError(f"{key} needs one value per site")
        if self.site_delta is not None and min(self.site_delta) <= 0:
            raise ValueError("site_delta must be positive")


def site_names(n):
    letters = string.ascii_uppercase
    return [f"site-{letters[i % 26]}{i // 26 or ''}" for i in range(n)]


def _assign_sites_and_labels(cfg, rng):
    per_site = np.full(cfg.n_sites, cfg.n_subjects // cfg.n_sites)
    per_site[: cfg.n_subjects % cfg.n_sites] += 1
    sites, labels = [], []
    for s, n in enumerate(per_site):
        lab = np.arange(n) % 2
        rng.shuffle(lab)
        sites.extend([s] * n)
        labels.extend(lab.tolist())
    return np.array(sites), np.array(labels)


def _pair_correlated_signals(cfg, label_on, rng):
    """T x N unit-variance signals from the factor model."""
    n, t = cfg.n_rois, cfg.T
    lam = cfg.global_loading
    g = rng.standard_normal(t)
    x = np.empty((t, n))
    share = np.zeros(n)
    private = {}
    for k, (a, b) in enumerate(cfg.functional_pairs):
        c = cfg.baseline_pair_corr + (cfg.functional_effect if label_on else 0.0)
        share[a] = share[b] = c
        private[a] = private[b] = k
    factors = rng.standard_normal((len(cfg.functional_pairs), t))
    noise = rng.standard_normal((t, n))
    for r in range(n):
        own = np.sqrt(max(1.0 - lam**2 - share[r], 0.0))
        x[:, r] = lam * g + own * noise[:, r]
        if r in private:
            x[:, r] += np.sqrt(share[r]) * factors[private[r]]
    return x


def simulate_cohort(cfg):
    """Draw a :class:`Cohort` in memory; identical ``cfg`` gives identical arrays."""
    cfg.validate()
    atlas = synthetic_atlas(cfg.n_rois, (cfg.volume_side,) * 3, box_side=cfg.patch_side,
                            spacing=max(cfg.patch_side + 4, 12))
    root = np.random.SeedSequence(cfg.seed)
    cohort_ss, *subject_ss = root.spawn(cfg.n_subjects + 1)
    crng = np.random.default_rng(cohort_ss)

    sites, labels = _assign_sites_and_labels(cfg, crng)
    ages = crng.uniform(20, 60, cfg.n_subjects)
    sexes = crng.integers(0, 2, cfg.n_subjects)
    gamma = np.array(cfg.site_gamma) if cfg.site_gamma is not None else crng.normal(0, cfg.site_gamma_sd, cfg.n_sites)
    delta = np.array(cfg.site_delta) if cfg.site_delta is not None else np.exp(crng.normal(0, cfg.site_delta_sd, cfg.n_sites))
    # per-(site, ROI) jitter around the site-level location/scale
    gamma_s = gamma[:, None] + crng.normal(0, cfg.site_jitter, (cfg.n_sites, cfg.n_rois))
    delta_s = delta[:, None] * np.exp(crng.normal(0, cfg.site_jitter, (cfg.n_sites, cfg.n_rois)))
    gamma_f = gamma[:, None] + crng.normal(0, cfg.site_jitter, (cfg.n_sites, cfg.n_rois))
    delta_f = delta[:, None] * np.exp(crng.normal(0, cfg.site_jitter, (cfg.n_sites, cfg.n_rois)))
    age_load = crng.uniform(0.5, 1.5, cfg.n_rois)
    sex_load = crng.uniform(0.5, 1.5, cfg.n_rois)
    base_s = 5.0 + 0.25 * np.arange(cfg.n_rois)
    base_f = 100.0 + np.arange(cfg.n_rois)
    split = crng.integers(0, 2, cfg.n_subjects) if cfg.split_signal else None

    names = site_names(cfg.n_sites)
    width = max(4, len(str(cfg.n_subjects)))
    records, volumes, series = [], [], []
    side = cfg.volume_side
    for j in range(cfg.n_subjects):
        rng = np.random.default_rng(subject_ss[j])
        s, y = sites[j], int(labels[j])
        struct_on = y == 1 and (split is None or split[j] == 0)
        func_on = y == 1 and (split is None or split[j] == 1)
        trend = (cfg.age_effect * (ages[j] - 40.0) / 10.0 * age_load
                 + cfg.sex_effect * (sexes[j] - 0.5) * sex_load)

        vol = gamma[s] + delta[s] * cfg.voxel_sd * rng.standard_normal((side,) * 3)
        roi_eff = cfg.roi_sd * rng.standard_normal(cfg.n_rois)
        for r, (lo, hi) in enumerate(atlas.boxes):
            box = tuple(slice(l, h) for l, h in zip(lo, hi))
            shape = tuple(h - l for l, h in zip(lo, hi))
            mean = base_s[r] + trend[r] + gamma_s[s, r]
            if struct_on and r in cfg.structural_rois:
                mean += cfg.structural_effect * cfg.roi_sd
            eps = roi_eff[r] + cfg.voxel_sd * rng.standard_normal(shape)
            vol[box] = mean + delta_s[s, r] * eps

        while True:
            x = _pair_correlated_signals(cfg, func_on, rng)
            ts = base_f + trend + gamma_f[s] + delta_f[s] * x
            if np.all(np.ptp(ts.astype(np.float32), axis=0) > 0):
                break

        records.append(SubjectRecord(f"sub-{j + 1:0{width}d}", names[s], round(float(ages[j]), 6),
                                     int(sexes[j]), y))
        volumes.append(vol.astype(np.float32))
        series.append(ts.astype(np.float32))

    effects = cfg.to_dict()
    effects["planted_site_gamma"] = gamma.tolist()
    effects["planted_site_delta"] = delta.tolist()
    return Cohort(atlas, records, volumes, series, cfg.seed, effects)


def generate_cohort(cfg, out_dir):
    """Simulate a cohort and write it to ``out_dir``; returns the manifest path."""
    return save_cohort(simulate_cohort(cfg), out_dir)
