import logging
import os
from collections import OrderedDict

import numpy as np
from scipy import ndimage
from sklearn.metrics import accuracy_score

from .med3derrors import EmptyInput, EmptyMask, IoFailure, ShapeMismatch

logger = logging.getLogger(__name__)

EVAL_HEADER = 'case_id,class,dice,assd_mm,accuracy'


def _mask(m):

    arr = m.labels if hasattr(m, 'labels') else np.asarray(m)

    return arr > 0


def _pair(pred, truth):

    p, t = _mask(pred), _mask(truth)
    if p.shape != t.shape:
        raise ShapeMismatch('prediction {} and truth {} differ in extent'.format(p.shape, t.shape))

    return p, t


def dice(pred, truth):

    """2|P n T| / (|P| + |T|) on the foreground; two empty masks score 1."""

    p, t = _pair(pred, truth)
    total = int(p.sum()) + int(t.sum())
    if total == 0:
        return 1.0

    return 2. * int(np.logical_and(p, t).sum()) / total


def dice_per_class(pred, truth, class_count):

    """Dice of every foreground class (1 .. class_count - 1); background is excluded."""

    p = pred.labels if hasattr(pred, 'labels') else np.asarray(pred)
    t = truth.labels if hasattr(truth, 'labels') else np.asarray(truth)
    if p.shape != t.shape:
        raise ShapeMismatch('prediction {} and truth {} differ in extent'.format(p.shape, t.shape))

    return OrderedDict((c, dice(p == c, t == c)) for c in range(1, class_count))


def surface(mask):

    """Foreground voxels with a background face neighbour; the grid border counts as background."""

    mask = _mask(mask)
    structure = ndimage.generate_binary_structure(3, 1)
    interior = ndimage.binary_erosion(mask, structure=structure, border_value=0)

    return mask & ~interior


def _surface_distances(from_surface, to_surface, spacing):

    # distance of every voxel to the nearest voxel of to_surface
    dist = ndimage.distance_transform_edt(~to_surface, sampling=spacing)

    return dist[from_surface]


def assd(pred, truth, spacing):

    """Average symmetric surface distance in mm, voxel-centre convention."""

    p, t = _pair(pred, truth)
    if not p.any() or not t.any():
        raise EmptyMask('surface distance needs two non-empty masks')

    spacing = tuple(float(s) for s in spacing)
    sp, st = surface(p), surface(t)

    d_pt = _surface_distances(sp, st, spacing)
    d_tp = _surface_distances(st, sp, spacing)

    return float((d_pt.sum() + d_tp.sum()) / (d_pt.size + d_tp.size))


def accuracy(pred, truth):

    pred = np.asarray(pred).reshape(-1)
    truth = np.asarray(truth).reshape(-1)

    if pred.shape != truth.shape:
        raise ShapeMismatch('{} predictions for {} labels'.format(pred.size, truth.size))
    if pred.size == 0:
        raise EmptyInput('accuracy of an empty label list')

    return float(accuracy_score(truth, pred))


# Convergence

def steps_to_threshold(log, threshold):

    """First step whose metric reaches threshold, or None when it never does.

    log is a step-sorted sequence of (step, metric) pairs; None metrics are skipped.
    """

    for step, value in log:
        if value is not None and value >= threshold:
            return step

    return None


def convergence_summary(runs, threshold):

    return OrderedDict((name, steps_to_threshold(log, threshold)) for name, log in runs.items())


def speedup(baseline_steps, candidate_steps):

    """How many times fewer steps the candidate needed; None unless both runs got there."""

    if baseline_steps is None or candidate_steps is None:
        return None
    if candidate_steps == 0:
        return float('inf') if baseline_steps > 0 else 1.0

    return baseline_steps / candidate_steps


# Per-case evaluation

def evaluate_case(case_id, pred, truth, spacing, class_count):

    """One row per foreground class: (case_id, class, dice, assd or None, voxel accuracy)."""

    scores = dice_per_class(pred, truth, class_count)
    p = pred.labels if hasattr(pred, 'labels') else np.asarray(pred)
    t = truth.labels if hasattr(truth, 'labels') else np.asarray(truth)
    acc = accuracy(p, t)

    rows = []
    for c, d in scores.items():
        pc, tc = p == c, t == c
        dist = assd(pc, tc, spacing) if pc.any() and tc.any() else None
        rows.append((case_id, c, d, dist, acc))

    return rows


def aggregate_rows(rows):

    """Mean row per class; a class with no usable ASSD gets an empty cell."""

    out = []
    for c in sorted(set(r[1] for r in rows)):
        sel = [r for r in rows if r[1] == c]
        dists = [r[3] for r in sel if r[3] is not None]
        out.append(('mean', c, float(np.mean([r[2] for r in sel])),
                    float(np.mean(dists)) if dists else None,
                    float(np.mean([r[4] for r in sel]))))

    return out


def format_cell(v):

    if v is None:
        return ''
    if isinstance(v, float):
        return '{:.6f}'.format(v)

    return str(v)


def write_evaluation(rows, path, with_mean=True):

    lines = [EVAL_HEADER] + [','.join(format_cell(v) for v in r) for r in rows]
    if with_mean and rows:
        lines += [','.join(format_cell(v) for v in r) for r in aggregate_rows(rows)]

    tmp = path + '.partial'
    try:
        with open(tmp, 'w', encoding='utf8') as f:
            f.write('\n'.join(lines) + '\n')
        os.replace(tmp, path)
    except OSError as err:
        raise IoFailure('cannot write evaluation {}: {}'.format(path, err)) from err

    logger.info('Wrote %d evaluation rows to %s', len(rows), path)
