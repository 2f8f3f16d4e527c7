"""Subject records, in-memory cohorts and the JSON cohort manifest."""

import json
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from ..numerics.tensorfile import atomic_write_bytes, load_tensor, save_tensor
from .atlas import AtlasSpec

SCHEMA_VERSION = 1


class ManifestError(ValueError):
    pass


@dataclass(frozen=True)
class SubjectRecord:
    id: str
    site: str
    age: float
    sex: int
    label: int


@dataclass
class Cohort:
    """A cohort held in memory: one volume and one T x N time series per subject."""

    atlas: AtlasSpec
    records: list
    volumes: list
    timeseries: list
    seed: int = None
    effects: dict = field(default_factory=dict)

    def __post_init__(self):
        ids = [r.id for r in self.records]
        if len(set(ids)) != len(ids):
            raise ValueError("subject ids must be unique")
        if not (len(self.records) == len(self.volumes) == len(self.timeseries)):
            raise ValueError("records, volumes and timeseries must align")

    def __len__(self):
        return len(self.records)

    @property
    def labels(self):
        return np.array([r.label for r in self.records], dtype=np.int64)

    @property
    def sites(self):
        return np.array([r.site for r in self.records])

    def covariates(self):
        """(n, 2) array of [age, sex]."""
        return np.array([[r.age, r.sex] for r in self.records], dtype=np.float64)

    def index_of(self, ids):
        pos = {r.id: i for i, r in enumerate(self.records)}
        return np.array([pos[i] for i in ids], dtype=np.intp)

    def subset(self, ids):
        idx = self.index_of(ids)
        return Cohort(self.atlas, [self.records[i] for i in idx], [self.volumes[i] for i in idx],
                      [self.timeseries[i] for i in idx], self.seed, dict(self.effects))


def atomic_write_json(path, obj):
    atomic_write_bytes(path, (json.dumps(obj, indent=1, sort_keys=True) + "\n").encode())


def _read_json(path):
    try:
        with open(path) as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{path}: invalid JSON ({exc})") from exc


def save_cohort(cohort, out_dir):
    """Write volumes/time series as NGT1 files plus ``manifest.json``; returns the manifest path."""
    out_dir = os.fspath(out_dir)
    subjects = []
    for rec, vol, ts in zip(cohort.records, cohort.volumes, cohort.timeseries):
        vpath = os.path.join("volumes", f"{rec.id}.ngt")
        tpath = os.path.join("timeseries", f"{rec.id}.ngt")
        save_tensor(os.path.join(out_dir, vpath), vol)
        save_tensor(os.path.join(out_dir, tpath), ts)
        subjects.append({**asdict(rec), "volume_path": vpath, "timeseries_path": tpath})
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "atlas": cohort.atlas.to_dict(),
        "seed": cohort.seed,
        "effects": cohort.effects,
        "subjects": subjects,
    }
    path = os.path.join(out_dir, "manifest.json")
    atomic_write_json(path, manifest)
    return path


def load_manifest(path):
    """Parse and validate a manifest; returns the raw dict with absolute paths resolved."""
    path = os.fspath(path)
    data = _read_json(path)
    if data.get("schema_version") != SCHEMA_VERSION:
        raise ManifestError(
            f"{path}: schema_version {data.get('schema_version')!r} != {SCHEMA_VERSION}")
    for key in ("atlas", "subjects"):
        if key not in data:
            raise ManifestError(f"{path}: missing field {key!r}")
    root = os.path.dirname(os.path.abspath(path))
    for subj in data["subjects"]:
        for key in ("volume_path", "timeseries_path"):
            full = os.path.join(root, subj[key])
            if not os.path.isfile(full):
                raise ManifestError(f"{path}: subject {subj['id']} references missing file {full}")
            subj[key] = full
    return data


def load_cohort(path):
    """Load a manifest and every file it references into a :class:`Cohort`."""
    data = load_manifest(path)
    atlas = AtlasSpec.from_dict(data["atlas"])
    records, volumes, series = [], [], []
    for s in data["subjects"]:
        records.append(SubjectRecord(str(s["id"]), str(s["site"]), float(s["age"]),
                                     int(s["sex"]), int(s["label"])))
        vol = load_tensor(s["volume_path"])
        if vol.shape != atlas.volume_shape:
            raise ManifestError(f"{s['volume_path']}: shape {vol.shape} != atlas {atlas.volume_shape}")
        ts = load_tensor(s["timeseries_path"])
        if ts.ndim != 2 or ts.shape[1] != atlas.n_rois:
            raise ManifestError(f"{s['timeseries_path']}: expected T x {atlas.n_rois}, got {ts.shape}")
        volumes.append(vol)
        series.append(ts)
    return Cohort(atlas, records, volumes, series, data.get("seed"), data.get("effects") or {})
