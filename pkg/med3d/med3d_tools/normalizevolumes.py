import logging
import math

import numpy as np
from scipy import ndimage
from skimage.measure import regionprops

from . import interpolate
from .med3derrors import EmptyList, NoForeground, NonPositiveTarget, RatingOutOfRange
from .volumeobj import LabelGrid, Volume, check_aligned

logger = logging.getLogger(__name__)

ZSCORE_EPS = 1e-8


class IntensityStats(object):

    def __init__(self, mean=None, stddev=None, clip_low=None, clip_high=None):

        if stddev is not None and stddev < 0:
            raise ValueError('stddev must be >= 0')
        if clip_low is not None and clip_high is not None and clip_low > clip_high:
            raise ValueError('clip_low must not exceed clip_high')

        self.mean = mean
        self.stddev = stddev
        self.clip_low = clip_low
        self.clip_high = clip_high

    def merged(self, other):

        return IntensityStats(mean=other.mean if other.mean is not None else self.mean,
                              stddev=other.stddev if other.stddev is not None else self.stddev,
                              clip_low=other.clip_low if other.clip_low is not None else self.clip_low,
                              clip_high=other.clip_high if other.clip_high is not None else self.clip_high)

    def as_dict(self):

        return {'mean': self.mean, 'stddev': self.stddev, 'clip_low': self.clip_low, 'clip_high': self.clip_high}


class AugmentParams(object):

    def __init__(self, max_translate_frac=0.10, rotate_deg=(-5., 5.), scale=(0.8, 1.2), seed=0):

        if not 0 <= max_translate_frac <= 1:
            raise ValueError('max_translate_frac must lie in [0, 1]')
        if rotate_deg[0] > rotate_deg[1]:
            raise ValueError('rotate_deg interval is reversed')
        if scale[0] <= 0 or scale[0] > scale[1]:
            raise ValueError('scale interval must be positive and ordered')

        self.max_translate_frac = float(max_translate_frac)
        self.rotate_deg = (float(rotate_deg[0]), float(rotate_deg[1]))
        self.scale = (float(scale[0]), float(scale[1]))
        self.seed = int(seed)

    def with_seed(self, seed):

        return AugmentParams(self.max_translate_frac, self.rotate_deg, self.scale, seed)


# Spatial normalisation

def median_spacing(domain, spacings):

    """Per-axis median of the case spacings; even counts average the two middle values."""

    if len(spacings) == 0:
        raise EmptyList('no spacings to take the median of')

    arr = np.asarray(spacings, dtype=np.float64).reshape(-1, 3)
    if np.any(arr <= 0):
        raise ValueError('spacings must be positive')

    med = tuple(float(v) for v in np.median(arr, axis=0))

    if domain is not None:
        domain.median_spacing = med

    return med


def mean_spacing(domain, spacings):

    if len(spacings) == 0:
        raise EmptyList('no spacings to average')

    mean = tuple(float(v) for v in np.mean(np.asarray(spacings, dtype=np.float64).reshape(-1, 3), axis=0))

    if domain is not None:
        domain.median_spacing = mean

    return mean


def resampled_extent(extent, spacing, target):

    # round half up, never below one voxel

    return max(1, int(math.floor(extent * spacing / target + 0.5)))


def _target_geometry(shape, spacing, target):

    target = tuple(float(t) for t in target)
    if len(target) != 3 or not all(np.isfinite(t) and t > 0 for t in target):
        raise NonPositiveTarget('target spacing must be positive, got {}'.format(target))

    out_shape = tuple(resampled_extent(shape[a], spacing[a], target[a]) for a in range(3))
    scales = [target[a] / spacing[a] for a in range(3)]

    return out_shape, scales, target


def resample_to_spacing(vol, target, mode='trilinear'):

    out_shape, scales, target = _target_geometry(vol.shape, vol.spacing, target)

    if mode not in ('trilinear', 'nearest'):
        raise ValueError('mode must be trilinear or nearest')

    if mode == 'nearest':
        voxels = interpolate.resample_grid(vol.voxels, out_shape, scales, mode='nearest')
    else:
        voxels = interpolate.resample_grid(vol.voxels.astype(np.float64), out_shape, scales)

    return vol.replace(voxels=voxels, spacing=target)


def resample_labels(labels, spacing, target):

    out_shape, scales, _ = _target_geometry(labels.shape, spacing, target)

    return labels.replace(interpolate.resample_grid(labels.labels, out_shape, scales, mode='nearest'))


def resize_to_shape(vol, labels, shape):

    """Resample a (volume, labels) pair onto a fixed grid, e.g. the training patch."""

    shape = tuple(int(s) for s in shape)
    spacing = tuple(vol.spacing[a] * vol.shape[a] / shape[a] for a in range(3))

    if vol.shape == shape:
        return vol, labels

    voxels = interpolate.resample_grid(vol.voxels.astype(np.float64), shape)
    new_vol = vol.replace(voxels=voxels, spacing=spacing)

    new_labels = None
    if labels is not None:
        new_labels = labels.replace(interpolate.resample_grid(labels.labels, shape, mode='nearest'))

    return new_vol, new_labels


# Intensity normalisation

def nearest_rank(sorted_values, pct):

    n = sorted_values.shape[0]
    # rounded first, so 0.07 % of 10000 stays rank 7
    rank = int(math.ceil(round(pct * n / 100., 9)))

    return sorted_values[min(max(rank, 1), n) - 1]


def clip_percentiles(vol, lo_pct=0.5, hi_pct=99.5):

    if not 0 <= lo_pct < hi_pct <= 100:
        raise ValueError('percentiles must satisfy 0 <= lo < hi <= 100')

    values = np.sort(vol.voxels, axis=None)
    low = float(nearest_rank(values, lo_pct))
    high = float(nearest_rank(values, hi_pct))

    clipped = np.clip(vol.voxels, low, high)

    return vol.replace(voxels=clipped), IntensityStats(clip_low=low, clip_high=high)


def zscore(vol):

    values = vol.voxels.astype(np.float64)
    mean = float(values.mean())
    std = float(values.std())

    out = (values - mean) / max(std, ZSCORE_EPS)

    return vol.replace(voxels=out), IntensityStats(mean=mean, stddev=std)


def hounsfield_window(vol, lo=-200., hi=250.):

    if not lo < hi:
        raise ValueError('window needs lo < hi')

    return vol.replace(voxels=np.clip(vol.voxels, lo, hi))


def normalize_case(vol, labels, target_spacing, lo_pct=0.5, hi_pct=99.5, window=None):

    """Resample to the domain spacing, then clip and z-score one case."""

    vol_r = resample_to_spacing(vol, target_spacing)
    labels_r = resample_labels(labels, vol.spacing, target_spacing) if labels is not None else None

    if window is not None:
        vol_r = hounsfield_window(vol_r, *window)

    vol_c, clip_stats = clip_percentiles(vol_r, lo_pct, hi_pct)
    vol_z, z_stats = zscore(vol_c)

    return vol_z, labels_r, clip_stats.merged(z_stats)


# Crop sampling and augmentation

def _rng(seed):

    if isinstance(seed, np.random.Generator):
        return seed

    return np.random.default_rng(seed)


def foreground_bbox(labels):

    """(start, stop) per axis of the foreground, or None when there is none."""

    fg = labels.foreground()
    if not fg.any():
        return None

    bbox = regionprops(fg.astype(np.uint8))[0].bbox

    return tuple(bbox[:3]), tuple(bbox[3:])


def sample_training_crop(vol, labels, seed):

    check_aligned(vol, labels)

    bbox = foreground_bbox(labels)
    if bbox is None:
        raise NoForeground('label grid has no foreground voxels')

    rng = _rng(seed)
    starts = []
    stops = []

    for a in range(3):

        full = vol.shape[a]
        b_lo, b_hi = bbox[0][a], bbox[1][a]
        low = min(2 * (b_hi - b_lo), full)
        extent = int(rng.integers(low, full + 1))

        first = max(0, b_hi - extent)
        last = min(b_lo, full - extent)
        start = int(rng.integers(first, last + 1))

        starts.append(start)
        stops.append(start + extent)

    window = tuple(slice(starts[a], stops[a]) for a in range(3))

    return vol.replace(voxels=vol.voxels[window]), labels.replace(labels.labels[window])


def augment(vol, labels, p, rotate_axes=(0, 1), use_scale=True):

    """Random translation, in-plane rotation and isotropic scaling about the volume centre.

    Intensities are resampled trilinearly, labels by nearest neighbour; the draw depends
    on p.seed only.
    """

    if labels is not None:
        check_aligned(vol, labels)
    rng = np.random.default_rng(p.seed)

    bbox = foreground_bbox(labels) if labels is not None else None
    if bbox is None:
        extent = np.asarray(vol.shape, dtype=np.float64)
    else:
        extent = np.asarray(bbox[1], dtype=np.float64) - np.asarray(bbox[0], dtype=np.float64)

    limit = p.max_translate_frac * extent
    shift = rng.uniform(-limit, limit)
    angle = rng.uniform(p.rotate_deg[0], p.rotate_deg[1])
    factor = rng.uniform(p.scale[0], p.scale[1]) if use_scale else 1.

    if not np.any(shift) and angle == 0 and factor == 1:
        return vol, labels

    spacing = np.asarray(vol.spacing, dtype=np.float64)
    centre = (np.asarray(vol.shape, dtype=np.float64) - 1) / 2 * spacing

    theta = np.deg2rad(angle)
    rot = np.eye(3)
    i, j = rotate_axes
    rot[i, i] = np.cos(theta)
    rot[i, j] = -np.sin(theta)
    rot[j, i] = np.sin(theta)
    rot[j, j] = np.cos(theta)

    # output point q comes from p = c + R^T (q - c - t) / s, all in mm

    grid = np.indices(vol.shape, dtype=np.float64).reshape(3, -1) * spacing[:, None]
    src = centre[:, None] + rot.T.dot(grid - centre[:, None] - (shift * spacing)[:, None]) / factor
    coords = src / spacing[:, None]

    voxels = ndimage.map_coordinates(vol.voxels.astype(np.float64), coords, order=1, mode='nearest')
    new_vol = vol.replace(voxels=voxels.reshape(vol.shape))
    if labels is None:
        return new_vol, None

    label_vals = ndimage.map_coordinates(labels.labels, coords, order=0, mode='nearest')

    return new_vol, labels.replace(label_vals.reshape(labels.shape))


# Nodule ratings

def merge_malignancy(scores):

    """Merge radiologist ratings 1..5: median <= 3 benign, >= 4 malignant, .5 medians excluded."""

    if len(scores) == 0:
        raise ValueError('at least one rating is required')

    for s in scores:
        if int(s) != s or not 1 <= s <= 5:
            raise RatingOutOfRange('rating {} is outside 1..5'.format(s))

    med = float(np.median(scores))

    if med != int(med):
        return 'excluded'
    if med <= 3:
        return 'benign'

    return 'malignant'
