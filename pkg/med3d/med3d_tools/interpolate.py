import numpy as np

# Voxel i covers [i, i + 1) and is sampled at its centre (align-corners = false).
# Output voxel j of spacing scale * input maps to source coordinate (j + 0.5) * scale - 0.5,
# clamped into [0, n_in - 1] so border samples repeat the edge voxel.


def source_coords(n_in, n_out, scale=None):

    if scale is None:
        scale = n_in / n_out

    coords = (np.arange(n_out, dtype=np.float64) + 0.5) * scale - 0.5

    return np.clip(coords, 0., n_in - 1.)


def linear_weights(n_in, n_out, scale=None):

    """Dense (n_out, n_in) matrix of 1D linear interpolation weights.

    Trilinear resampling is the three 1D passes applied along x, y and z in turn.
    """

    coords = source_coords(n_in, n_out, scale)
    lo = np.floor(coords).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = coords - lo

    w = np.zeros((n_out, n_in), dtype=np.float64)
    rows = np.arange(n_out)
    np.add.at(w, (rows, lo), 1. - frac)
    np.add.at(w, (rows, hi), frac)

    return w


def nearest_index(n_in, n_out, scale=None):

    if scale is None:
        scale = n_in / n_out

    idx = np.floor((np.arange(n_out, dtype=np.float64) + 0.5) * scale).astype(int)

    return np.clip(idx, 0, n_in - 1)


def apply_axis(arr, weights, axis):

    out = np.tensordot(weights, arr, axes=([1], [axis]))

    return np.moveaxis(out, 0, axis)


def resample_grid(arr, out_shape, scales=None, mode='trilinear'):

    """Resample the last three axes of arr to out_shape."""

    lead = arr.ndim - 3

    if scales is None:
        scales = [None, None, None]

    if mode == 'nearest':
        index = [nearest_index(arr.shape[lead + a], out_shape[a], scales[a]) for a in range(3)]
        return arr[(Ellipsis,) + np.ix_(*index)]

    out = arr
    for a in range(3):
        if out.shape[lead + a] == out_shape[a] and (scales[a] is None or scales[a] == 1):
            continue
        w = linear_weights(arr.shape[lead + a], out_shape[a], scales[a]).astype(arr.dtype, copy=False)
        out = apply_axis(out, w, lead + a)

    return out
