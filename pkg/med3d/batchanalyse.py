import configparser
import logging
import multiprocessing
import os
from functools import partial
from multiprocessing import Pool

import numpy as np

from .med3d_tools import buildmodel
from .med3d_tools import interpolate
from .med3d_tools import loadvolumes
from .med3d_tools import normalizevolumes
from .med3d_tools import savemodel
from .med3d_tools import scoreseg
from .med3d_tools import trainmodel
from .med3d_tools.med3derrors import IoFailure, Med3DError, ShapeMismatch
from .med3d_tools.tensorops import Tensor
from .med3d_tools.volumeobj import DomainSpec, LabelGrid

logger = logging.getLogger(__name__)


def _case_spacing(case):

    vol, _ = loadvolumes.read_nifti(case[0])
    return vol.spacing


def normalize_one(target, outdir, class_count, window, index_case):

    """Resample, clip and z-score one case and write the pair; returns ((vol path, label path), stats dict)."""

    index, (vol_path, lab_path) = index_case

    vol, _ = loadvolumes.read_nifti(vol_path)
    _, labels = loadvolumes.read_nifti(lab_path, class_count=class_count)
    if labels is None:
        raise ShapeMismatch('{} is not a label grid with {} classes'.format(lab_path, class_count))

    vol, labels, stats = normalizevolumes.normalize_case(vol, labels, target, window=window)

    out_vol = os.path.join(outdir, 'case{:03d}_vol.nii.gz'.format(index))
    out_lab = os.path.join(outdir, 'case{:03d}_seg.nii.gz'.format(index))
    loadvolumes.write_nifti(vol, out_vol)
    loadvolumes.write_labels(labels, vol.spacing, out_lab, vol.origin_offset)

    return (out_vol, out_lab), stats.as_dict()


def batch_normalize(manifest, outdir, workers=0, spacing_mode='median', window=None):

    """Normalise every domain of a manifest into outdir.

    Each domain is resampled to its median (or mean) spacing, then clipped and z-scored per
    case. Writes outdir/manifest.txt and outdir/normalize_stats; returns the new DomainSpecs.
    """

    if spacing_mode not in ('median', 'mean'):
        raise ValueError('spacing_mode must be median or mean')

    domains = loadvolumes.load_manifest(manifest)
    stats = configparser.ConfigParser()
    normalized = []

    for d in domains:

        logger.info('Normalising domain %d (%s)', d.domain_id, d.name)
        spacings = [_case_spacing(c) for c in d.cases]
        if spacing_mode == 'median':
            target = normalizevolumes.median_spacing(d, spacings)
        else:
            target = normalizevolumes.mean_spacing(d, spacings)

        dir_name = os.path.join(outdir, 'domain{}_{}'.format(d.domain_id, d.name))
        os.makedirs(dir_name, exist_ok=True)

        job = partial(normalize_one, target, dir_name, d.class_count, window)
        items = list(enumerate(d.cases))

        if workers:
            pool = Pool(min(workers, multiprocessing.cpu_count()))
            results = pool.map(job, items)
            pool.close()
            pool.join()
        else:
            results = [job(item) for item in items]

        section = 'domain {}'.format(d.domain_id)
        stats[section] = {'name': d.name, 'target_spacing': ', '.join(repr(s) for s in target)}
        for k, (_, case_stats) in enumerate(results):
            stats[section]['case{:03d}'.format(k)] = ', '.join(
                '{}={!r}'.format(key, case_stats[key]) for key in ('mean', 'stddev', 'clip_low', 'clip_high'))

        normalized.append(DomainSpec(d.domain_id, d.name, d.class_count, [r[0] for r in results],
                                     modality=d.modality, median_spacing=target))

    out_manifest = os.path.join(outdir, 'manifest.txt')
    loadvolumes.write_manifest(normalized, out_manifest)

    try:
        with open(os.path.join(outdir, 'normalize_stats'), 'w', encoding='utf8') as f:
            stats.write(f)
    except OSError as err:
        raise IoFailure('cannot write normalisation stats: {}'.format(err)) from err

    logger.info('Normalised %d domains into %s', len(normalized), outdir)

    return normalized, out_manifest


# Evaluation

def _label_files(dir_name):

    return sorted(f for f in os.listdir(dir_name) if f.endswith('.nii') or f.endswith('.nii.gz'))


def evaluate_dirs(pred_dir, truth_dir, class_count, out_csv):

    """Score every prediction against the truth file of the same name.

    Cases whose extents disagree are logged and skipped. Returns (rows, skipped names).
    """

    rows = []
    skipped = []

    for name in _label_files(truth_dir):

        pred_path = os.path.join(pred_dir, name)
        if not os.path.exists(pred_path):
            logger.warning('No prediction for %s', name)
            skipped.append(name)
            continue

        truth_vol, truth = loadvolumes.read_nifti(os.path.join(truth_dir, name), class_count=class_count)
        _, pred = loadvolumes.read_nifti(pred_path, class_count=class_count)
        if truth is None or pred is None:
            logger.warning('%s does not hold %d-class labels', name, class_count)
            skipped.append(name)
            continue

        try:
            rows += scoreseg.evaluate_case(name.split('.')[0], pred, truth, truth_vol.spacing, class_count)
        except ShapeMismatch as err:
            logger.error('%s skipped: %s', name, err)
            skipped.append(name)

    if rows:
        scoreseg.write_evaluation(rows, out_csv)

    return rows, skipped


def predict_volume(model, vol, patch_shape, domain_id=None):

    """Arg-max labels of vol at its own extents, predicted at the patch size."""

    x, _ = trainmodel.as_batch(vol, None, patch_shape)
    model.eval()
    if domain_id is None:
        logits = model(Tensor(x))
    else:
        logits = buildmodel.forward_pretrain(model, Tensor(x), domain_id)
    pred = buildmodel.predict_labels(logits)[0]

    return interpolate.resample_grid(pred.astype(np.uint8), vol.shape, mode='nearest')


def evaluate_model(ckpt_path, manifest, domain_id, patch_size, out_csv):

    """Predict every case of one manifest domain with a saved model and score it."""

    model = savemodel.model_from_checkpoint(savemodel.load_checkpoint(ckpt_path))
    domain = [d for d in loadvolumes.load_manifest(manifest) if d.domain_id == domain_id]
    if not domain:
        raise Med3DError('domain {} is not in {}'.format(domain_id, manifest))
    domain = domain[0]

    routed = domain_id if isinstance(model, buildmodel.Med3DNet) else None
    rows = []
    for k in range(domain.case_count):
        vol, labels = loadvolumes.load_case(domain, k)
        pred = predict_volume(model, vol, (patch_size,) * 3, routed)
        rows += scoreseg.evaluate_case('case{:03d}'.format(k), pred, labels, vol.spacing, domain.class_count)

    scoreseg.write_evaluation(rows, out_csv)

    return rows, []


# Experiments

def run_experiment(kind, manifest, outdir, plan, cfg, sizes=(1, 2, 4, 8), fractions=(0.1, 0.2, 0.4, 0.8, 1.0),
                   aug=None):

    domains = loadvolumes.load_manifest(manifest)
    if plan.domain_subset is not None:
        domains = [d for d in domains if d.domain_id in plan.domain_subset]
        plan = plan.replace(domain_subset=None)

    if kind == 'variety':
        table = trainmodel.variety_experiment(domains, sizes, plan, cfg, aug)
        path = os.path.join(outdir, 'variety.csv')
        trainmodel.write_variety_table(table, sizes, path, {d.domain_id: d.name for d in domains})
    elif kind == 'fraction':
        curve = trainmodel.fraction_experiment(domains, fractions, plan, cfg, aug)
        path = os.path.join(outdir, 'fraction.csv')
        trainmodel.write_fraction_table(curve, path)
    else:
        raise ValueError('experiment kind must be variety or fraction')

    logger.info('Experiment table written to %s', path)

    return path


# Coarse-to-fine segmentation

def extract_rois(coarse, domain, outdir, patch_shape, expand=(0., 0.3), seed=0):

    """Crop every case of domain around the coarse model's prediction and write the crops."""

    os.makedirs(outdir, exist_ok=True)
    rng = np.random.default_rng(seed)
    cases = []

    for k in range(domain.case_count):
        vol, labels = loadvolumes.load_case(domain, k)
        mask = predict_volume(coarse, vol, patch_shape)
        crop, crop_labels = buildmodel.coarse_roi_extract(mask, vol, labels, expand, seed=int(rng.integers(2 ** 31)))

        vol_path = os.path.join(outdir, 'roi{:03d}_vol.nii.gz'.format(k))
        lab_path = os.path.join(outdir, 'roi{:03d}_seg.nii.gz'.format(k))
        loadvolumes.write_nifti(crop, vol_path)
        loadvolumes.write_labels(crop_labels, crop.spacing, lab_path)
        cases.append((vol_path, lab_path))

    return DomainSpec(domain.domain_id, domain.name + '_roi', domain.class_count, cases, modality=domain.modality)


def two_stage_liver(domain, cfg, plan, outdir, ckpt=None, expand=(0., 0.3), decoder_width=256):

    """Coarse localisation at output stride 32, then fine segmentation of the extracted ROI.

    Both stages train with the plan's optimizer on the domain's cases (the coarse stage on whole
    volumes, in patches of at least two final-map voxels per axis); the fine network starts from
    ckpt when given. Returns the evaluation rows of the held-out ROIs.
    """

    if domain.class_count != 2:
        raise ValueError('the coarse stage separates one target from background')

    os.makedirs(outdir, exist_ok=True)
    whole = trainmodel.TaskData.from_domain(domain)

    logger.info('Training coarse localisation model')
    coarse = buildmodel.build_coarse_model(cfg)
    init = 'med3d_ckpt' if ckpt is not None else 'scratch'
    # the stride 32 encoder needs at least a 2 voxel final map for batch statistics
    coarse_plan = plan.replace(patch_size=max(plan.patch_size, 2 * coarse.encoder.output_stride),
                               freeze_encoder=False)
    coarse_log, _ = trainmodel.transfer_train(coarse, whole, coarse_plan, init=init, ckpt=ckpt, crop=False)
    coarse_log.write(os.path.join(outdir, 'coarse_metrics.csv'))

    logger.info('Extracting regions of interest')
    roi = extract_rois(coarse, domain, os.path.join(outdir, 'roi'), coarse_plan.patch_shape, expand, plan.seed)

    logger.info('Training fine segmentation model')
    fine = buildmodel.build_transfer_model(cfg, 'seg', domain.class_count, decoder_width)
    fine_data = trainmodel.TaskData.from_domain(roi)
    fine_log, _ = trainmodel.transfer_train(fine, fine_data, plan, init=init, ckpt=ckpt)
    fine_log.write(os.path.join(outdir, 'fine_metrics.csv'))

    _, test_idx = trainmodel.split_cases(roi.case_count, plan.holdout_frac, plan.seed)
    rows = []
    for k in test_idx or range(roi.case_count):
        vol, labels = loadvolumes.load_case(roi, k)
        pred = LabelGrid(predict_volume(fine, vol, plan.patch_shape), domain.class_count)
        rows += scoreseg.evaluate_case('roi{:03d}'.format(k), pred, labels, vol.spacing, domain.class_count)

    scoreseg.write_evaluation(rows, os.path.join(outdir, 'evaluation.csv'))
    savemodel.save_checkpoint(savemodel.checkpoint_from_model(fine), os.path.join(outdir, 'fine.m3dc'))

    return rows
