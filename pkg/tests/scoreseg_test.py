import numpy as np
import pytest

from med3d.med3d_tools import scoreseg
from med3d.med3d_tools.med3derrors import EmptyInput, EmptyMask, ShapeMismatch
from med3d.med3d_tools.volumeobj import LabelGrid


def _brute_surface(mask):

    out = np.zeros_like(mask)
    for idx in zip(*np.nonzero(mask)):
        for axis in range(3):
            for step in (-1, 1):
                n = list(idx)
                n[axis] += step
                if not 0 <= n[axis] < mask.shape[axis] or not mask[tuple(n)]:
                    out[idx] = True
    return out


def _brute_assd(p, t, spacing):

    sp = np.argwhere(_brute_surface(p)) * np.asarray(spacing)
    st = np.argwhere(_brute_surface(t)) * np.asarray(spacing)
    d = np.sqrt(((sp[:, None, :] - st[None, :, :]) ** 2).sum(axis=2))

    return (d.min(axis=1).sum() + d.min(axis=0).sum()) / (len(sp) + len(st))


def _random_mask(rng, shape=(9, 8, 7)):

    mask = rng.random(shape) < rng.uniform(0.1, 0.5)
    mask.flat[rng.integers(mask.size)] = True

    return mask


def test_dice_closed_forms():

    p = np.zeros((4, 4, 4), dtype=bool)
    t = np.zeros((4, 4, 4), dtype=bool)
    p[0, 0, :4] = True
    t[0, 0, 2:4] = True

    assert scoreseg.dice(p, t) == pytest.approx(2 * 2 / 6)
    assert scoreseg.dice(t, p) == scoreseg.dice(p, t)
    assert scoreseg.dice(p, p) == 1.
    assert scoreseg.dice(np.zeros_like(p), np.zeros_like(p)) == 1.
    assert scoreseg.dice(p, np.zeros_like(p)) == 0.

    with pytest.raises(ShapeMismatch):
        scoreseg.dice(p, np.zeros((4, 4, 3), dtype=bool))


def test_dice_per_class_skips_background():

    truth = LabelGrid(np.array([0, 1, 1, 2, 2, 2, 0, 0]).reshape(2, 2, 2), 3)
    pred = LabelGrid(np.array([0, 1, 2, 2, 2, 0, 0, 0]).reshape(2, 2, 2), 3)

    scores = scoreseg.dice_per_class(pred, truth, 3)

    assert list(scores) == [1, 2]
    assert scores[1] == pytest.approx(2 * 1 / 3)
    assert scores[2] == pytest.approx(2 * 2 / 6)


def test_assd_of_two_points():

    p = np.zeros((12, 5, 5), dtype=bool)
    t = np.zeros((12, 5, 5), dtype=bool)
    p[2, 2, 2] = True
    t[8, 2, 2] = True

    assert scoreseg.assd(p, t, (1., 1., 1.)) == pytest.approx(6.)
    assert scoreseg.assd(p, t, (2., 1., 1.)) == pytest.approx(12.)
    assert scoreseg.assd(p, p, (1., 1., 1.)) == 0.


def test_surface_is_six_connected_boundary():

    mask = np.zeros((5, 5, 5), dtype=bool)
    mask[1:4, 1:4, 1:4] = True

    surface = scoreseg.surface(mask)

    assert surface.sum() == 26
    assert not surface[2, 2, 2]
    assert scoreseg.surface(np.ones((3, 3, 3), dtype=bool)).sum() == 26


def test_assd_matches_all_pairs_oracle():

    rng = np.random.default_rng(0)

    for _ in range(100):
        p, t = _random_mask(rng), _random_mask(rng)
        spacing = tuple(rng.uniform(0.5, 3., size=3))
        assert abs(scoreseg.assd(p, t, spacing) - _brute_assd(p, t, spacing)) < 1e-6


def test_assd_symmetry_scaling_and_translation():

    rng = np.random.default_rng(1)
    p, t = _random_mask(rng, (6, 6, 6)), _random_mask(rng, (6, 6, 6))
    spacing = (0.8, 1.1, 2.)

    base = scoreseg.assd(p, t, spacing)
    assert scoreseg.assd(t, p, spacing) == pytest.approx(base, rel=1e-12)
    assert scoreseg.assd(p, t, tuple(3 * s for s in spacing)) == pytest.approx(3 * base, rel=1e-12)

    # shift both masks inside a padded grid
    big_p = np.zeros((12, 12, 12), dtype=bool)
    big_t = np.zeros((12, 12, 12), dtype=bool)
    big_p[3:9, 2:8, 4:10] = p
    big_t[3:9, 2:8, 4:10] = t
    padded_p = np.pad(p, 3)
    padded_t = np.pad(t, 3)
    assert scoreseg.assd(big_p, big_t, spacing) == pytest.approx(scoreseg.assd(padded_p, padded_t, spacing),
                                                                  rel=1e-12)


def test_assd_needs_both_masks():

    p = np.zeros((3, 3, 3), dtype=bool)
    p[1, 1, 1] = True

    with pytest.raises(EmptyMask):
        scoreseg.assd(p, np.zeros_like(p), (1., 1., 1.))


def test_accuracy():

    assert scoreseg.accuracy([0, 1, 1, 0], [0, 1, 0, 0]) == 0.75
    with pytest.raises(EmptyInput):
        scoreseg.accuracy([], [])
    with pytest.raises(ShapeMismatch):
        scoreseg.accuracy([1, 0], [1])


def test_convergence_and_speedup():

    pretrained = [(10, 0.5), (40, 0.81), (50, 0.9)]
    scratch = [(10, 0.2), (50, None), (100, 0.8)]

    summary = scoreseg.convergence_summary({'med3d': pretrained, 'scratch': scratch}, 0.8)

    assert summary == {'med3d': 40, 'scratch': 100}
    assert scoreseg.speedup(summary['scratch'], summary['med3d']) == 2.5
    assert scoreseg.steps_to_threshold(scratch, 0.95) is None
    assert scoreseg.speedup(None, 40) is None


def test_evaluate_and_write(tmp_path):

    truth = np.zeros((6, 6, 6), dtype=np.uint8)
    truth[1:4, 1:4, 1:4] = 1
    pred = truth.copy()
    pred[4, 1:4, 1:4] = 1

    same = scoreseg.evaluate_case('a', LabelGrid(truth, 3), LabelGrid(truth, 3), (1., 1., 1.), 3)
    assert same == [('a', 1, 1., 0., 1.), ('a', 2, 1., None, 1.)]

    off = scoreseg.evaluate_case('b', LabelGrid(pred, 2), LabelGrid(truth, 2), (1., 1., 1.), 2)
    assert off[0][2] == pytest.approx(2 * 27 / (27 + 36))
    assert off[0][4] == pytest.approx(1 - 9 / 216.)

    path = str(tmp_path / 'evaluation.csv')
    scoreseg.write_evaluation(same, path)
    with open(path) as f:
        lines = f.read().splitlines()

    assert lines[0] == 'case_id,class,dice,assd_mm,accuracy'
    assert lines[1] == 'a,1,1.000000,0.000000,1.000000'
    assert lines[2] == 'a,2,1.000000,,1.000000'
    assert lines[3:] == ['mean,1,1.000000,0.000000,1.000000', 'mean,2,1.000000,,1.000000']
