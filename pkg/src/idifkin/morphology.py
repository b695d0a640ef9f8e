"""Mask post-processing: nearest connected component and renal-pelvis surrogate.

Coordinates are millimetres at voxel centers (see :mod:`idifkin.volume`).
Connectivity is fixed: 26-neighbourhood in 3-D, 8-neighbourhood within an
axial slice.
"""

import logging

import numpy as np
from scipy import ndimage

from .volume import LabelVolume

logger = logging.getLogger(__name__)

DEFAULT_RADII_MM = (40.0, 40.0, 40.0)
_CONNECT_3D = np.ones((3, 3, 3), dtype=bool)
_CONNECT_2D = np.ones((3, 3), dtype=bool)


class EmptySurrogateError(ValueError):
    """The renal-pelvis surrogate came out empty."""


def center_of_mass(mask, label=None):
    """Spacing-weighted centroid (mm) of the voxels carrying ``label``.

    ``label=None`` uses every nonzero voxel.
    """
    index = np.argwhere(mask.select(label))
    if index.size == 0:
        raise ValueError("label not present in mask" if label is not None else "mask is empty")
    return tuple(float(c) for c in mask.voxel_centers(index).mean(axis=0))


def _centers_grid(template):
    axes = [
        template.origin[i] + (np.arange(template.dims[i]) + 0.5) * template.spacing[i]
        for i in range(3)
    ]
    return np.meshgrid(*axes, indexing="ij")


def ellipsoid_mask(center, radii, template):
    """Voxels of ``template``'s grid whose centers lie inside the ellipsoid."""
    radii = np.asarray(radii, dtype=np.float64)
    if radii.shape != (3,) or np.any(radii <= 0):
        raise ValueError("radii must be three positive values")
    x, y, z = _centers_grid(template)
    inside = (
        ((x - center[0]) / radii[0]) ** 2
        + ((y - center[1]) / radii[1]) ** 2
        + ((z - center[2]) / radii[2]) ** 2
    ) <= 1.0
    return LabelVolume(inside.astype(np.int32), template.spacing, template.origin)


def _components(binary, structure):
    labels, n = ndimage.label(binary, structure=structure)
    return labels, n


def _component_stats(labels, n, volume_like, centers_mm=None):
    """Sizes and mm centroids of components 1..n."""
    index = np.argwhere(labels > 0)
    ids = labels[labels > 0]
    sizes = np.bincount(ids, minlength=n + 1)[1:]
    points = volume_like.voxel_centers(index) if centers_mm is None else centers_mm
    sums = np.stack([np.bincount(ids, weights=points[:, k], minlength=n + 1)[1:] for k in range(3)], axis=1)
    return sizes, sums / sizes[:, None]


def nearest_component(mask, reference, label=None):
    """Keep the 26-connected component whose centroid is nearest ``reference`` (mm).

    Ties go to the larger component, then to the lower component index.
    """
    binary = mask.select(label)
    if not np.any(binary):
        raise ValueError("mask is empty")
    labels, n = _components(binary, _CONNECT_3D)
    sizes, centroids = _component_stats(labels, n, mask)
    distance = np.linalg.norm(centroids - np.asarray(reference, dtype=np.float64), axis=1)
    order = np.lexsort((np.arange(n), -sizes, distance))
    keep = labels == order[0] + 1
    return mask.with_data(np.where(keep, mask.data, 0))


def _split_kidneys(kidney_mask):
    """Boolean mask per kidney: distinct labels, or 3-D components of a single label."""
    present = kidney_mask.labels()
    if not present:
        raise ValueError("kidney mask is empty")
    if len(present) > 1:
        return [(lab, kidney_mask.data == lab) for lab in present]
    labels, n = _components(kidney_mask.data != 0, _CONNECT_3D)
    return [(i + 1, labels == i + 1) for i in range(n)]


def _best_slice_component(candidates_2d, slice_centers, kidney_center):
    """Largest 8-connected component of one slice; ties by centroid distance, then index."""
    labels, n = _components(candidates_2d, _CONNECT_2D)
    if n == 0:
        return None
    ids = labels[labels > 0]
    sizes = np.bincount(ids, minlength=n + 1)[1:]
    pts = slice_centers[labels > 0]
    centroids = np.stack(
        [np.bincount(ids, weights=pts[:, k], minlength=n + 1)[1:] for k in range(3)], axis=1
    ) / sizes[:, None]
    distance = np.linalg.norm(centroids - kidney_center, axis=1)
    order = np.lexsort((np.arange(n), distance, -sizes))
    return labels == order[0] + 1


def renal_pelvis_surrogate(kidney_mask, radii=DEFAULT_RADII_MM, report=None):
    """Renal-pelvis surrogate from a kidney segmentation.

    For each kidney: ellipsoid of ``radii`` (mm) around its centroid, minus
    all kidney voxels; on every axial slice keep the largest 8-connected
    component (closest centroid to the kidney centroid on size ties). The
    result carries the kidney's label (1, 2, ... for a split single-label
    mask) and never overlaps the kidney mask.

    Parameters
    ----------
    report : dict, optional
        Filled with per-kidney centroids and voxel counts.

    Raises
    ------
    EmptySurrogateError
        Nothing remains (radii too small, or the kidney fills the ellipsoid).
    """
    kidney_all = kidney_mask.data != 0
    x, y, z = _centers_grid(kidney_mask)
    centers = np.stack([x, y, z], axis=-1)
    out = np.zeros(kidney_mask.dims, dtype=np.int32)
    entries = []
    for lab, kidney in _split_kidneys(kidney_mask):
        center = np.asarray(kidney_mask.voxel_centers(np.argwhere(kidney)).mean(axis=0))
        ellipsoid = ellipsoid_mask(center, radii, kidney_mask).data.astype(bool)
        candidates = ellipsoid & ~kidney_all
        surrogate = np.zeros_like(candidates)
        for k in range(kidney_mask.dims[2]):
            if not candidates[:, :, k].any():
                continue
            best = _best_slice_component(candidates[:, :, k], centers[:, :, k], center)
            surrogate[:, :, k] = best
        # where two kidneys' surrogates meet, the first kidney keeps the voxel
        out[surrogate & (out == 0)] = lab
        entries.append(
            {
                "label": int(lab),
                "kidney_voxels": int(np.count_nonzero(kidney)),
                "kidney_centroid_mm": [float(c) for c in center],
                "surrogate_voxels": int(np.count_nonzero(surrogate)),
            }
        )
    if not np.any(out):
        raise EmptySurrogateError(
            "renal-pelvis surrogate is empty: radii too small or the kidney fills the ellipsoid"
        )
    if report is not None:
        report["radii_mm"] = [float(r) for r in radii]
        report["kidneys"] = entries
        report["surrogate_voxels"] = int(np.count_nonzero(out))
    return LabelVolume(out, kidney_mask.spacing, kidney_mask.origin)
