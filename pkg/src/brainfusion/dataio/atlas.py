"""Box atlases and ROI patch extraction."""

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class AtlasSpec:
    """Parcellation of a volume into ``n_rois`` integer cuboids.

    ``boxes[r]`` is ``(lo, hi)`` with ``hi`` exclusive on every axis.
    """

    name: str
    volume_shape: tuple
    boxes: tuple

    def __post_init__(self):
        object.__setattr__(self, "volume_shape", tuple(int(v) for v in self.volume_shape))
        object.__setattr__(self, "boxes", tuple(
            (tuple(int(v) for v in lo), tuple(int(v) for v in hi)) for lo, hi in self.boxes))
        self.validate()

    @property
    def n_rois(self):
        return len(self.boxes)

    def validate(self, require_disjoint=False):
        if self.n_rois < 2:
            raise ValueError("atlas needs at least 2 ROIs")
        for r, (lo, hi) in enumerate(self.boxes):
            if len(lo) != 3 or len(hi) != 3:
                raise ValueError(f"ROI {r}: boxes must be 3-D")
            for a in range(3):
                if not 0 <= lo[a] < hi[a] <= self.volume_shape[a]:
                    raise ValueError(f"ROI {r}: box {lo}-{hi} outside volume {self.volume_shape}")
        if require_disjoint:
            for r in range(self.n_rois):
                for q in range(r + 1, self.n_rois):
                    if _overlap(self.boxes[r], self.boxes[q]):
                        raise ValueError(f"ROIs {r} and {q} overlap")
        return self

    def centroids(self):
        return np.array([[(lo[a] + hi[a]) // 2 for a in range(3)] for lo, hi in self.boxes])

    def shifted(self, offset):
        offset = tuple(int(o) for o in offset)
        boxes = [(tuple(l + o for l, o in zip(lo, offset)), tuple(h + o for h, o in zip(hi, offset)))
                 for lo, hi in self.boxes]
        return AtlasSpec(self.name, self.volume_shape, boxes)

    def to_dict(self):
        return {"name": self.name, "volume_shape": list(self.volume_shape),
                "boxes": [[list(lo), list(hi)] for lo, hi in self.boxes]}

    @classmethod
    def from_dict(cls, d):
        return cls(d["name"], d["volume_shape"], [(lo, hi) for lo, hi in d["boxes"]])


def _overlap(a, b):
    return all(a[0][k] < b[1][k] and b[0][k] < a[1][k] for k in range(3))


def synthetic_atlas(n_rois=16, volume_shape=(48, 48, 48), box_side=8, spacing=12):
    """Disjoint cubes on a regular grid, filled in row-major order."""
    per_axis = [s // spacing for s in volume_shape]
    if int(np.prod(per_axis)) < n_rois:
        raise ValueError(f"volume {volume_shape} cannot host {n_rois} cells of spacing {spacing}")
    if box_side > spacing:
        raise ValueError("box_side must not exceed spacing")
    margin = (spacing - box_side) // 2
    boxes = []
    for idx in np.ndindex(*per_axis):
        if len(boxes) == n_rois:
            break
        lo = tuple(i * spacing + margin for i in idx)
        boxes.append((lo, tuple(v + box_side for v in lo)))
    atlas = AtlasSpec(f"synthetic-{n_rois}", volume_shape, boxes)
    return atlas.validate(require_disjoint=True)


def extract_roi_patches(volume, atlas, p):
    """Crop a ``p``-sided cube centred on each ROI centroid.

    Voxels falling outside the volume are zero. Output shape is
    ``(n_rois, p, p, p)`` in atlas order.
    """
    volume = np.asarray(volume)
    if volume.shape != atlas.volume_shape:
        raise ValueError(f"volume shape {volume.shape} != atlas shape {atlas.volume_shape}")
    if p < 1 or any(p > s for s in volume.shape):
        raise ValueError(f"patch side {p} exceeds volume extent {volume.shape}")
    out = np.zeros((atlas.n_rois, p, p, p), dtype=volume.dtype)
    for r, c in enumerate(atlas.centroids()):
        start = c - p // 2
        src, dst = [], []
        for a in range(3):
            s0, s1 = max(start[a], 0), min(start[a] + p, volume.shape[a])
            src.append(slice(s0, s1))
            dst.append(slice(s0 - start[a], s1 - start[a]))
        out[(r, *dst)] = volume[tuple(src)]
    return out


def insert_roi_patches(volume, atlas, patches):
    """Inverse of :func:`extract_roi_patches`: write patches back in place.

    Returns a copy of ``volume``; voxels outside every patch are untouched.
    """
    out = np.array(volume, copy=True)
    patches = np.asarray(patches)
    p = patches.shape[-1]
    for r, c in enumerate(atlas.centroids()):
        start = c - p // 2
        src, dst = [], []
        for a in range(3):
            s0, s1 = max(start[a], 0), min(start[a] + p, out.shape[a])
            dst.append(slice(s0, s1))
            src.append(slice(s0 - start[a], s1 - start[a]))
        out[tuple(dst)] = patches[(r, *src)]
    return out
