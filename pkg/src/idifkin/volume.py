"""3-D voxel grids shared by morphology, IDIF extraction and map export.

Arrays are indexed ``data[x, y, z]``; ``z`` is the axial (slice) axis.
Voxel ``(i, j, k)`` has its center at ``origin + (index + 0.5) * spacing``.
"""

from dataclasses import dataclass, field

import numpy as np


def _check_geometry(dims, spacing, origin):
    if len(dims) != 3 or any(int(d) <= 0 for d in dims):
        raise ValueError(f"dims must be three positive integers, got {dims}")
    if len(spacing) != 3 or any(not (float(s) > 0) for s in spacing):
        raise ValueError(f"spacing must be three positive values, got {spacing}")
    if len(origin) != 3 or not all(np.isfinite(origin)):
        raise ValueError(f"origin must be three finite values, got {origin}")


@dataclass(frozen=True, eq=False)
class _Volume:
    data: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)
    origin: tuple = (0.0, 0.0, 0.0)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3:
            raise ValueError(f"volume data must be 3-D, got shape {data.shape}")
        spacing = tuple(float(s) for s in self.spacing)
        origin = tuple(float(o) for o in self.origin)
        _check_geometry(data.shape, spacing, origin)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", origin)

    @property
    def dims(self):
        return tuple(int(d) for d in self.data.shape)

    def voxel_centers(self, indices):
        """Physical (mm) centers of an ``(n, 3)`` array of voxel indices."""
        indices = np.asarray(indices, dtype=np.float64)
        return np.asarray(self.origin) + (indices + 0.5) * np.asarray(self.spacing)

    def with_data(self, data, **kwargs):
        return type(self)(data, self.spacing, self.origin, dict(self.meta), **kwargs)


@dataclass(frozen=True, eq=False)
class ScalarVolume(_Volume):
    """Scalar voxel values (kBq/ml for PET, HU for CT, fitted parameters for maps)."""

    kind: str = "pet"

    def __post_init__(self):
        super().__post_init__()
        object.__setattr__(self, "data", np.asarray(self.data, dtype=np.float64))

    def with_data(self, data, **kwargs):
        kwargs.setdefault("kind", self.kind)
        return super().with_data(data, **kwargs)


@dataclass(frozen=True, eq=False)
class LabelVolume(_Volume):
    """Integer label grid; 0 is background."""

    def __post_init__(self):
        super().__post_init__()
        data = np.asarray(self.data)
        if data.dtype.kind == "f":
            if not np.all(np.isfinite(data)) or np.any(data != np.round(data)):
                raise ValueError("label volumes must hold integer values")
        if data.dtype.kind == "b":
            data = data.astype(np.int32)
        object.__setattr__(self, "data", data.astype(np.int32, copy=False))

    @property
    def kind(self):
        return "label"

    def labels(self):
        """Sorted nonzero labels present."""
        values = np.unique(self.data)
        return [int(v) for v in values if v != 0]

    def select(self, label=None):
        """Boolean mask of ``label`` (any nonzero label if ``None``)."""
        if label is None:
            return self.data != 0
        return self.data == int(label)

    def count(self, label=None):
        return int(np.count_nonzero(self.select(label)))
