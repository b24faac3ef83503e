import numpy as np

from .med3derrors import NonFiniteVoxel, NonPositiveSpacing, ShapeMismatch

MODALITIES = ('CT', 'MR', 'UNKNOWN')


def _as_triple(values, name):

    # Spacing and origin are held at float32 precision so they survive a NIfTI round trip exactly

    arr = np.asarray(values, dtype=np.float32).reshape(-1)
    if arr.shape[0] != 3:
        raise ValueError('{} must have three components, got {}'.format(name, arr.shape[0]))

    return tuple(float(v) for v in arr)


class Volume(object):

    """3D scalar grid indexed (x, y, z) with per-axis spacing in mm.

    The voxel array is float32 and read-only; derived volumes are new objects.
    """

    def __init__(self, voxels, spacing=(1., 1., 1.), origin_offset=(0., 0., 0.), modality='UNKNOWN'):

        voxels = np.array(voxels, dtype=np.float32)

        if voxels.ndim != 3:
            raise ShapeMismatch('volume grid must be 3D, got shape {}'.format(voxels.shape))
        if min(voxels.shape) < 1:
            raise ShapeMismatch('volume extents must be >= 1, got {}'.format(voxels.shape))
        if not np.all(np.isfinite(voxels)):
            raise NonFiniteVoxel('volume contains NaN or Inf values')

        spacing = _as_triple(spacing, 'spacing')
        if not all(np.isfinite(s) and s > 0 for s in spacing):
            raise NonPositiveSpacing('spacing must be positive and finite, got {}'.format(spacing))

        if modality not in MODALITIES:
            raise ValueError('unknown modality {!r}'.format(modality))

        voxels.setflags(write=False)

        self.voxels = voxels
        self.spacing = spacing
        self.origin_offset = _as_triple(origin_offset, 'origin_offset')
        self.modality = modality
        self.shape = voxels.shape

    def replace(self, voxels=None, spacing=None):

        return Volume(self.voxels if voxels is None else voxels,
                      spacing=self.spacing if spacing is None else spacing,
                      origin_offset=self.origin_offset, modality=self.modality)

    def __eq__(self, other):

        if not isinstance(other, Volume):
            return NotImplemented

        return (self.shape == other.shape and self.spacing == other.spacing
                and self.modality == other.modality and self.origin_offset == other.origin_offset
                and self.voxels.tobytes() == other.voxels.tobytes())

    def __repr__(self):

        return 'Volume(shape={}, spacing={}, modality={})'.format(self.shape, self.spacing, self.modality)


class LabelGrid(object):

    def __init__(self, labels, class_count):

        labels = np.array(labels)

        if labels.ndim != 3:
            raise ShapeMismatch('label grid must be 3D, got shape {}'.format(labels.shape))
        if class_count < 1:
            raise ValueError('class_count must be positive')

        if labels.dtype.kind == 'f':
            if not np.all(np.isfinite(labels)) or np.any(labels != np.round(labels)):
                raise ValueError('label grid holds non-integer values')

        labels = labels.astype(np.uint8 if class_count <= 255 else np.int32)

        if labels.size and (labels.min() < 0 or labels.max() >= class_count):
            raise ValueError('labels must lie in [0, {})'.format(class_count))

        labels.setflags(write=False)

        self.labels = labels
        self.class_count = int(class_count)
        self.shape = labels.shape

    def foreground(self):

        return self.labels > 0

    def replace(self, labels):

        return LabelGrid(labels, self.class_count)

    def __eq__(self, other):

        if not isinstance(other, LabelGrid):
            return NotImplemented

        return (self.class_count == other.class_count and self.shape == other.shape
                and np.array_equal(self.labels, other.labels))

    def __repr__(self):

        return 'LabelGrid(shape={}, class_count={})'.format(self.shape, self.class_count)


def as_label_grid(vol, class_count):

    # A loaded grid qualifies as labels when every value is a non-negative integer below class_count

    values = vol.voxels
    if np.any(values < 0) or np.any(values != np.round(values)) or np.any(values >= class_count):
        return None

    return LabelGrid(values, class_count)


def check_aligned(vol, labels):

    if vol.shape != labels.shape:
        raise ShapeMismatch('volume {} and labels {} are not aligned'.format(vol.shape, labels.shape))


class DomainSpec(object):

    def __init__(self, domain_id, name, class_count, cases, modality='UNKNOWN', median_spacing=None):

        if not 0 <= int(domain_id) <= 7:
            raise ValueError('domain_id must lie in [0, 7], got {}'.format(domain_id))

        self.domain_id = int(domain_id)
        self.name = name
        self.class_count = int(class_count)
        self.modality = modality
        self.cases = sorted(cases)
        self.median_spacing = median_spacing

    @property
    def case_count(self):

        return len(self.cases)

    def __repr__(self):

        return 'DomainSpec(id={}, name={!r}, classes={}, cases={})'.format(
            self.domain_id, self.name, self.class_count, len(self.cases))
