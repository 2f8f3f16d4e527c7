"""Stratified k-fold assignment."""

from dataclasses import dataclass

import numpy as np


@dataclass
class FoldPlan:
    """``test[f]`` and ``train[f]`` hold subject ids for fold ``f``."""

    k: int
    seed: int
    train: list
    test: list

    def __len__(self):
        return self.k

    def to_dict(self):
        return {"k": self.k, "seed": self.seed, "train": self.train, "test": self.test}


def stratified_kfold(ids, labels, k=10, seed=0, sites=None):
    """Shuffle each class with ``seed``, then deal its members round-robin over folds.

    The dealing continues across classes (the next class starts at the fold
    after the last one used), which keeps fold sizes within one of each other.
    With ``sites`` the (class, site) cells of each class are dealt in turn:
    class counts stay within one per fold and site counts within two.
    """
    ids = [str(i) for i in ids]
    labels = np.asarray(labels)
    if len(ids) != len(labels):
        raise ValueError("ids and labels differ in length")
    if len(set(ids)) != len(ids):
        raise ValueError("subject ids must be unique")
    if k < 2:
        raise ValueError("need at least 2 folds")
    rng = np.random.default_rng(seed)
    assign = np.empty(len(ids), dtype=np.intp)
    cursor = 0
    for cls in np.unique(labels):
        n_cls = int(np.sum(labels == cls))
        if n_cls < k:
            raise ValueError(f"class {cls!r} has {n_cls} subjects, fewer than k={k}")
    if sites is None:
        cells = [labels == cls for cls in np.unique(labels)]
    else:
        sites = np.asarray(sites).astype(str)
        if len(sites) != len(ids):
            raise ValueError("sites and ids differ in length")
        cells = [(labels == cls) & (sites == s) for cls in np.unique(labels) for s in np.unique(sites)]
    for cell in cells:
        members = np.flatnonzero(cell)
        members = members[rng.permutation(len(members))]
        assign[members] = (cursor + np.arange(len(members))) % k
        cursor = (cursor + len(members)) % k
    test = [[ids[i] for i in np.flatnonzero(assign == f)] for f in range(k)]
    train = [[ids[i] for i in np.flatnonzero(assign != f)] for f in range(k)]
    return FoldPlan(k, seed, train, test)
