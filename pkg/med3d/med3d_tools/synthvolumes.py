"""
Seeded synthetic multi-domain datasets: analytic solids in noise, written as NIfTI pairs
plus a manifest, so the rest of the package reads them like any other dataset.
"""

import logging
import os

import numpy as np

from . import loadvolumes
from .volumeobj import DomainSpec, LabelGrid, Volume

logger = logging.getLogger(__name__)

SHAPE_KINDS = ('sphere', 'cuboid', 'ellipsoid', 'shell')


class SyntheticDomainSpec(object):

    def __init__(self, name, shape_kind='sphere', fg=(1.5, 0.3), bg=(0., 0.3), ramp=0., outlier_frac=0.,
                 spacing=(1., 1., 1.), extent_range=(20, 28), case_count=6, class_count=2, modality='MR',
                 seed=0, core=None):

        if shape_kind not in SHAPE_KINDS:
            raise ValueError('shape_kind must be one of {}'.format(', '.join(SHAPE_KINDS)))
        if abs(fg[0] - bg[0]) < 0.5 * (fg[1] + bg[1]):
            raise ValueError('foreground and background intensities are not separable')
        if case_count < 2:
            raise ValueError('a domain needs at least two cases')
        if class_count not in (2, 3):
            raise ValueError('class_count must be 2 or 3')
        if extent_range[0] < 8 or extent_range[0] > extent_range[1]:
            raise ValueError('extent_range must be ordered and at least 8 voxels')
        if min(spacing) <= 0:
            raise ValueError('spacing must be positive')

        self.name = name
        self.shape_kind = shape_kind
        self.fg = (float(fg[0]), float(fg[1]))
        self.bg = (float(bg[0]), float(bg[1]))
        # the lesion core sits beyond the organ, away from the background
        self.core = core or (fg[0] + 0.75 * (fg[0] - bg[0]), fg[1])
        self.ramp = float(ramp)
        self.outlier_frac = float(outlier_frac)
        self.spacing = tuple(float(s) for s in spacing)
        self.extent_range = (int(extent_range[0]), int(extent_range[1]))
        self.case_count = int(case_count)
        self.class_count = int(class_count)
        self.modality = modality
        self.seed = int(seed)


def rasterize(kind, shape, spacing, centre, radii):

    """Label grid of one solid: 1 inside, 2 in the inner core of a shell.

    centre is in voxels, radii in mm; a voxel belongs to the solid when its centre does.
    """

    spacing = np.asarray(spacing, dtype=np.float64)
    grid = np.indices(shape, dtype=np.float64)
    d = [(grid[a] - centre[a]) * spacing[a] / radii[a] for a in range(3)]

    labels = np.zeros(shape, dtype=np.uint8)
    if kind == 'cuboid':
        labels[np.maximum(np.maximum(np.abs(d[0]), np.abs(d[1])), np.abs(d[2])) <= 1] = 1
        return labels

    rho = d[0] ** 2 + d[1] ** 2 + d[2] ** 2
    labels[rho <= 1] = 1
    if kind == 'shell':
        labels[rho < 0.25] = 2

    return labels


def _draw_case(spec, rng):

    shape = tuple(int(rng.integers(spec.extent_range[0], spec.extent_range[1] + 1)) for _ in range(3))
    phys = np.asarray(shape) * np.asarray(spec.spacing)

    base = rng.uniform(0.18, 0.3) * phys.min()
    if spec.shape_kind == 'ellipsoid':
        radii = base * rng.uniform(0.6, 1.4, size=3)
        radii = np.minimum(radii, 0.35 * phys)
    else:
        radii = np.full(3, base)
    # at least one voxel per axis, so every case has foreground
    radii = np.maximum(radii, np.asarray(spec.spacing))

    half = radii / np.asarray(spec.spacing)
    centre = [rng.uniform(half[a] + 1, shape[a] - 2 - half[a]) for a in range(3)]

    labels = rasterize(spec.shape_kind, shape, spec.spacing, centre, radii)

    if spec.class_count == 3 and spec.shape_kind != 'shell':
        core = rasterize('sphere', shape, spec.spacing, centre, radii * 0.5)
        labels[core > 0] = 2
    if spec.class_count == 2:
        labels[labels == 2] = 0 if spec.shape_kind == 'shell' else 1

    voxels = rng.normal(spec.bg[0], spec.bg[1], size=shape)
    fg = labels == 1
    voxels[fg] = rng.normal(spec.fg[0], spec.fg[1], size=int(fg.sum()))
    core = labels == 2
    voxels[core] = rng.normal(spec.core[0], spec.core[1], size=int(core.sum()))

    if spec.ramp:
        voxels += spec.ramp * np.linspace(-1., 1., shape[0])[:, None, None]

    if spec.outlier_frac:
        hit = rng.random(shape) < spec.outlier_frac
        span = abs(spec.fg[0] - spec.bg[0]) + spec.fg[1] + spec.bg[1]
        voxels[hit] = np.where(rng.random(int(hit.sum())) < 0.5, spec.bg[0] - 20 * span, spec.fg[0] + 20 * span)

    vol = Volume(voxels.astype(np.float32), spacing=spec.spacing, modality=spec.modality)

    return vol, LabelGrid(labels, spec.class_count)


def generate_domain(spec, domain_id=0, outdir=None):

    """Draw every case of one domain; with outdir, also write the NIfTI pairs.

    Returns (list of (Volume, LabelGrid), DomainSpec). Case files are named
    case<k>_vol.nii.gz / case<k>_seg.nii.gz.
    """

    rng = np.random.default_rng(spec.seed)
    cases = [_draw_case(spec, rng) for _ in range(spec.case_count)]

    paths = []
    if outdir is not None:
        os.makedirs(outdir, exist_ok=True)
        for k, (vol, labels) in enumerate(cases):
            vol_path = os.path.join(outdir, 'case{:03d}_vol.nii.gz'.format(k))
            lab_path = os.path.join(outdir, 'case{:03d}_seg.nii.gz'.format(k))
            loadvolumes.write_nifti(vol, vol_path)
            loadvolumes.write_labels(labels, vol.spacing, lab_path)
            paths.append((vol_path, lab_path))

    domain = DomainSpec(domain_id, spec.name, spec.class_count, paths, modality=spec.modality)

    return cases, domain


# Intensity regimes

CT_LIKE = dict(fg=(60., 20.), bg=(-100., 40.), outlier_frac=0.01, modality='CT')
MR_LIKE = dict(fg=(1.5, 0.3), bg=(0., 0.3), modality='MR')

# name, shape kind, spacing, class count, case count, regime, ramp
SUITE_LAYOUT = [
    ('liver', 'ellipsoid', (0.8, 0.8, 2.5), 2, 8, CT_LIKE, 0.),
    ('spleen', 'sphere', (0.8, 0.8, 2.5), 2, 4, CT_LIKE, 0.),
    ('kidney', 'shell', (1., 1., 3.), 3, 6, CT_LIKE, 0.),
    ('hippocampus', 'ellipsoid', (1., 1., 1.), 3, 5, MR_LIKE, 0.2),
    ('prostate', 'sphere', (0.6, 0.6, 3.6), 3, 4, MR_LIKE, 0.),
    ('vessel', 'cuboid', (0.7, 0.7, 1.5), 2, 6, CT_LIKE, 0.),
    ('pancreas', 'shell', (1., 1., 1.5), 3, 5, CT_LIKE, 0.),
    ('heart', 'cuboid', (1.25, 1.25, 1.37), 2, 4, MR_LIKE, 0.3),
]


def generate_suite(seed=0, domains=8, extent_range=(20, 28)):

    """Eight domain specs varying shape, spacing, intensity regime and class count."""

    if not 1 <= domains <= len(SUITE_LAYOUT):
        raise ValueError('a suite holds 1 to {} domains'.format(len(SUITE_LAYOUT)))

    specs = []
    for i, (name, kind, spacing, classes, count, regime, ramp) in enumerate(SUITE_LAYOUT[:domains]):
        specs.append(SyntheticDomainSpec(name, kind, spacing=spacing, class_count=classes, case_count=count,
                                         extent_range=extent_range, ramp=ramp, seed=seed * 16 + i, **regime))

    return specs


def write_suite(specs, outdir):

    """Write every domain under outdir/domain<i>_<name> plus outdir/manifest.txt."""

    domains = []
    for i, spec in enumerate(specs):
        logger.info('Generating domain %d (%s, %d cases)', i, spec.name, spec.case_count)
        _, domain = generate_domain(spec, i, os.path.join(outdir, 'domain{}_{}'.format(i, spec.name)))
        domains.append(domain)

    manifest = os.path.join(outdir, 'manifest.txt')
    loadvolumes.write_manifest(domains, manifest)

    return domains, manifest


# Nodule classification set

def generate_nodules(outdir, case_count=24, seed=0, extent=24, raters=4):

    """Small CT-like volumes with one nodule each and `raters` malignancy ratings per case.

    Malignant nodules are larger and brighter; ratings scatter around the latent score.
    Writes outdir/nodule<k>.nii.gz and outdir/ratings.csv, returns the ratings path.
    """

    rng = np.random.default_rng(seed)
    os.makedirs(outdir, exist_ok=True)
    spacing = (1., 1., 1.)
    rows = []

    for k in range(case_count):

        malignant = k % 2 == 1
        latent = rng.uniform(4, 5) if malignant else rng.uniform(1, 3)
        ratings = [int(np.clip(np.rint(latent + rng.normal(0, 0.4)), 1, 5)) for _ in range(raters)]

        radius = rng.uniform(5, 7) if malignant else rng.uniform(2, 3.5)
        centre = [rng.uniform(extent / 2 - 2, extent / 2 + 2) for _ in range(3)]
        mask = rasterize('sphere', (extent,) * 3, spacing, centre, (radius,) * 3) > 0

        voxels = rng.normal(-100., 40., size=(extent,) * 3)
        voxels[mask] = rng.normal(120. if malignant else 40., 20., size=int(mask.sum()))

        path = os.path.join(outdir, 'nodule{:03d}.nii.gz'.format(k))
        loadvolumes.write_nifti(Volume(voxels.astype(np.float32), spacing=spacing, modality='CT'), path)
        rows.append((path, ratings))

    table = os.path.join(outdir, 'ratings.csv')
    loadvolumes.write_ratings(rows, table)

    return table
