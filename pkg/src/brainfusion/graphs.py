"""Subject-level brain graphs from ROI embeddings and ROI time series.

Structural graphs use cosine similarity between ViT ROI embeddings;
functional graphs use Fisher-z transformed Pearson connectivity. Both keep,
for every node, its ``K`` most similar other nodes and take the union of
those selections as an undirected weighted edge set.
"""

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .numerics.tensorfile import atomic_write_bytes

FISHER_CLAMP = 1e-7


class GraphFormatError(ValueError):
    pass


@dataclass
class SimilarityMatrix:
    values: np.ndarray
    kind: str  # "cosine" | "correlation" | "fisher_z"


@dataclass
class BrainGraph:
    """Undirected weighted graph with one feature row per node.

    ``edges`` is an (E, 2) int array with ``i < j``; ``weights`` has length E.
    """

    node_features: np.ndarray
    edges: np.ndarray
    weights: np.ndarray
    modality: str = ""
    meta: dict = field(default_factory=dict)

    @property
    def n_nodes(self):
        return self.node_features.shape[0]

    def adjacency(self, self_loops=True):
        """Dense boolean adjacency, optionally with the diagonal set."""
        n = self.n_nodes
        adj = np.zeros((n, n), dtype=bool)
        if len(self.edges):
            adj[self.edges[:, 0], self.edges[:, 1]] = True
            adj[self.edges[:, 1], self.edges[:, 0]] = True
        if self_loops:
            np.fill_diagonal(adj, True)
        return adj

    def degrees(self):
        return self.adjacency(self_loops=False).sum(axis=1)

    def edge_set(self):
        return {(int(i), int(j)) for i, j in self.edges}

    def permuted(self, perm):
        """Relabel nodes so that new node ``k`` is old node ``perm[k]``."""
        perm = np.asarray(perm)
        inv = np.empty_like(perm)
        inv[perm] = np.arange(len(perm))
        e = inv[self.edges] if len(self.edges) else self.edges
        e = np.sort(e, axis=1)
        order = np.lexsort((e[:, 1], e[:, 0])) if len(e) else np.arange(0)
        return BrainGraph(self.node_features[perm], e[order], self.weights[order],
                          self.modality, dict(self.meta))


# -- similarity --------------------------------------------------------------

def cosine_similarity_matrix(embeddings):
    z = np.asarray(embeddings, dtype=np.float64)
    norms = np.linalg.norm(z, axis=1)
    if np.any(norms == 0):
        raise ValueError(f"zero-norm embedding rows: {np.flatnonzero(norms == 0).tolist()}")
    u = z / norms[:, None]
    cos = np.clip(u @ u.T, -1.0, 1.0)
    cos = 0.5 * (cos + cos.T)
    np.fill_diagonal(cos, 1.0)
    return SimilarityMatrix(cos, "cosine")


def pearson_fcn(ts):
    """Pearson correlation between the columns of a T x N time-series matrix."""
    y = np.asarray(ts, dtype=np.float64)
    yc = y - y.mean(axis=0)
    ss = np.sqrt((yc * yc).sum(axis=0))
    flat = np.flatnonzero(ss == 0)
    if flat.size:
        raise ValueError(f"constant time series at ROI(s) {flat.tolist()}")
    u = yc / ss
    r = np.clip(u.T @ u, -1.0, 1.0)
    r = 0.5 * (r + r.T)
    np.fill_diagonal(r, 1.0)
    return SimilarityMatrix(r, "correlation")


def fisher_z(sim):
    if sim.kind != "correlation":
        raise ValueError(f"fisher_z expects a correlation matrix, got {sim.kind!r}")
    r = np.clip(sim.values, -1.0 + FISHER_CLAMP, 1.0 - FISHER_CLAMP)
    z = np.arctanh(r)
    np.fill_diagonal(z, 0.0)
    return SimilarityMatrix(z, "fisher_z")


# -- KNN ---------------------------------------------------------------------

def knn_neighbors(values, k):
    """Row-wise top-``k`` off-diagonal indices; ties go to the lower index."""
    s = np.asarray(values, dtype=np.float64)
    n = s.shape[0]
    if not 1 <= k < n:
        raise ValueError(f"K must satisfy 1 <= K < N (K={k}, N={n})")
    masked = s.copy()
    np.fill_diagonal(masked, -np.inf)
    # stable sort on the negated values keeps ascending index order within ties
    order = np.argsort(-masked, axis=1, kind="stable")
    return order[:, :k]


def knn_graph(sim, k, node_features, modality=""):
    values = sim.values if isinstance(sim, SimilarityMatrix) else np.asarray(sim)
    nbrs = knn_neighbors(values, k)
    n = values.shape[0]
    pairs = set()
    for i in range(n):
        for h in nbrs[i]:
            pairs.add((min(i, int(h)), max(i, int(h))))
    edges = np.array(sorted(pairs), dtype=np.int64).reshape(-1, 2)
    weights = values[edges[:, 0], edges[:, 1]].astype(np.float64)
    feats = np.asarray(node_features)
    if feats.shape[0] != n:
        raise ValueError("node feature rows must equal the similarity matrix size")
    return BrainGraph(feats, edges, weights, modality)


def build_structural_graph(embeddings, k=10):
    return knn_graph(cosine_similarity_matrix(embeddings), k, np.asarray(embeddings), "structural")


def build_functional_graph(ts, k=10):
    """Pearson -> Fisher z -> KNN; node ``i`` carries row ``i`` of the z matrix."""
    z = fisher_z(pearson_fcn(ts))
    return knn_graph(z, k, z.values.copy(), "functional")


# -- JSON --------------------------------------------------------------------

def graph_to_dict(g):
    return {
        "n_nodes": int(g.n_nodes),
        "directed": False,
        "modality": g.modality,
        "node_features": np.asarray(g.node_features, dtype=np.float64).tolist(),
        "edges": [{"i": int(i), "j": int(j), "w": float(w)} for (i, j), w in zip(g.edges, g.weights)],
    }


def graph_from_dict(d, source="<graph>"):
    try:
        n = int(d["n_nodes"])
        feats = np.array(d["node_features"], dtype=np.float64)
        edges = np.array([[e["i"], e["j"]] for e in d["edges"]], dtype=np.int64).reshape(-1, 2)
        weights = np.array([e["w"] for e in d["edges"]], dtype=np.float64)
    except (KeyError, TypeError, ValueError) as exc:
        raise GraphFormatError(f"{source}: malformed graph ({exc})") from exc
    if d.get("directed", False):
        raise GraphFormatError(f"{source}: only undirected graphs are supported")
    if feats.ndim != 2 or feats.shape[0] != n:
        raise GraphFormatError(f"{source}: node_features must have n_nodes rows")
    if len(edges) and (np.any(edges[:, 0] >= edges[:, 1]) or edges.max() >= n or edges.min() < 0):
        raise GraphFormatError(f"{source}: edges must satisfy 0 <= i < j < n_nodes")
    return BrainGraph(feats, edges, weights, d.get("modality", ""))


def save_graph(path, g):
    atomic_write_bytes(path, json.dumps(graph_to_dict(g)).encode())


def load_graph(path):
    path = os.fspath(path)
    try:
        with open(path) as fh:
            d = json.load(fh)
    except json.JSONDecodeError as exc:
        raise GraphFormatError(f"{path}: invalid JSON ({exc})") from exc
    return graph_from_dict(d, path)
