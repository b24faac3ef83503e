import logging
import math
import os
from collections import OrderedDict, namedtuple
from functools import lru_cache
from multiprocessing.pool import ThreadPool

import numpy as np
from sklearn.model_selection import train_test_split

from . import buildmodel, loadvolumes, normalizevolumes, optimisers, savemodel, scoreseg
from . import tensorops as ops
from .med3derrors import EmptyAfterFraction, IoFailure, UnknownDomain
from .normalizevolumes import AugmentParams
from .tensorops import Tensor

logger = logging.getLogger(__name__)

MODES = ('pretrain', 'transfer_seg', 'transfer_cls', 'scratch_seg', 'scratch_cls')
LOG_HEADER = 'step,epoch,domain_id,loss,dice,accuracy'
# normalised cases held in memory per store
CASE_CACHE_SIZE = 64

# optimiser regime per mode when the plan does not name one
DEFAULT_OPTIMIZER = {
    'pretrain': {'kind': 'sgd', 'lr': 0.1, 'momentum': 0.9, 'weight_decay': 0.001},
    'transfer_seg': {'kind': 'adam', 'lr': 0.001},
    'transfer_cls': {'kind': 'adam', 'lr': 0.001},
    'scratch_seg': {'kind': 'adam', 'lr': 0.01},
    'scratch_cls': {'kind': 'adam', 'lr': 0.01},
}


class TrainPlan(object):

    def __init__(self, mode='pretrain', epochs=1, batch_size=1, optimizer=None, data_fraction=1.0,
                 domain_subset=None, seed=0, eval_every=10, patch_size=32, workers=0,
                 freeze_encoder=False, holdout_frac=0.1):

        if mode not in MODES:
            raise ValueError('mode must be one of {}'.format(', '.join(MODES)))
        if not 0 < data_fraction <= 1:
            raise ValueError('data_fraction must lie in (0, 1]')
        if mode == 'pretrain' and domain_subset is not None and len(domain_subset) == 0:
            raise ValueError('pretraining needs at least one domain')
        if epochs < 0 or batch_size < 1 or eval_every < 1 or patch_size < 1 or workers < 0:
            raise ValueError('epochs, batch_size, eval_every, patch_size and workers must be positive')
        if not 0 <= holdout_frac < 1:
            raise ValueError('holdout_frac must lie in [0, 1)')

        self.mode = mode
        self.epochs = int(epochs)
        self.batch_size = int(batch_size)
        self.optimizer = dict(optimizer or DEFAULT_OPTIMIZER[mode])
        self.data_fraction = float(data_fraction)
        self.domain_subset = None if domain_subset is None else [int(d) for d in domain_subset]
        self.seed = int(seed)
        self.eval_every = int(eval_every)
        self.patch_size = int(patch_size)
        self.workers = int(workers)
        self.freeze_encoder = bool(freeze_encoder)
        self.holdout_frac = float(holdout_frac)

    def replace(self, **changes):

        fields = dict(mode=self.mode, epochs=self.epochs, batch_size=self.batch_size, optimizer=self.optimizer,
                      data_fraction=self.data_fraction, domain_subset=self.domain_subset, seed=self.seed,
                      eval_every=self.eval_every, patch_size=self.patch_size, workers=self.workers,
                      freeze_encoder=self.freeze_encoder, holdout_frac=self.holdout_frac)
        fields.update(changes)

        return TrainPlan(**fields)

    @property
    def patch_shape(self):

        return (self.patch_size,) * 3


def make_optimizer(spec):

    spec = dict(spec)
    kind = spec.pop('kind', 'sgd')
    if kind == 'sgd':
        return optimisers.sgd_state(**spec)
    if kind == 'adam':
        return optimisers.adam_state(**spec)

    raise ValueError('unknown optimizer {}'.format(kind))


# Schedules

ScheduleItem = namedtuple('ScheduleItem', ['domain_id', 'case_index', 'aug_seed', 'is_dup'])


class EpochSchedule(object):

    def __init__(self, items, epoch=0):

        self.items = list(items)
        self.epoch = epoch

    def __len__(self):

        return len(self.items)

    def __iter__(self):

        return iter(self.items)

    def counts(self):

        out = OrderedDict()
        for item in self.items:
            out[item.domain_id] = out.get(item.domain_id, 0) + 1
        return out


def fraction_count(n, fraction):

    # ceil, with float noise such as 0.2 * 5 = 1.0000000000000002 rounded away
    return int(math.ceil(round(fraction * n, 9)))


def subsample_cases(domain_id, pool, fraction, seed):

    """Seeded subset of ceil(fraction * N) cases, fixed for the whole run."""

    pool = sorted(pool)
    keep = fraction_count(len(pool), fraction)
    if keep == 0:
        raise EmptyAfterFraction('domain {} has no cases left at fraction {}'.format(domain_id, fraction))

    rng = np.random.default_rng([seed, domain_id])
    chosen = rng.choice(len(pool), size=keep, replace=False)

    return [pool[i] for i in sorted(chosen)]


def _select_domains(domains, subset):

    by_id = OrderedDict((d.domain_id, d) for d in domains)
    if subset is None:
        return list(by_id.values())

    missing = [d for d in subset if d not in by_id]
    if missing:
        raise UnknownDomain('domains {} are not in the dataset'.format(missing))

    return [by_id[d] for d in sorted(set(subset))]


def balanced_schedule(domains, fraction=1.0, subset=None, seed=0, epoch=0, case_pool=None):

    """One epoch in which every domain contributes as many items as the largest one.

    Smaller domains are padded with augmented duplicates cycling a seeded permutation of their
    cases; every item carries a fresh augmentation seed, and the whole epoch is shuffled.
    case_pool maps domain_id to the usable case indices (default: all cases).
    """

    active = _select_domains(domains, subset)
    chosen = OrderedDict()
    for d in active:
        pool = case_pool[d.domain_id] if case_pool is not None else range(d.case_count)
        chosen[d.domain_id] = subsample_cases(d.domain_id, pool, fraction, seed)

    target = max(len(c) for c in chosen.values())
    rng = np.random.default_rng([seed, epoch, 7])

    items = []
    for domain_id, cases in chosen.items():
        for idx in cases:
            items.append(ScheduleItem(domain_id, idx, int(rng.integers(2 ** 31)), False))
        order = rng.permutation(len(cases))
        for k in range(target - len(cases)):
            idx = cases[order[k % len(cases)]]
            items.append(ScheduleItem(domain_id, idx, int(rng.integers(2 ** 31)), True))

    shuffled = [items[i] for i in rng.permutation(len(items))]

    return EpochSchedule(shuffled, epoch)


def split_cases(n_cases, holdout_frac, seed):

    """Seeded (train, held-out) case indices; domains under two cases keep everything for training."""

    indices = list(range(n_cases))
    n_test = int(round(holdout_frac * n_cases))
    if holdout_frac == 0 or n_cases < 2:
        return indices, []

    train, test = train_test_split(indices, test_size=min(max(1, n_test), n_cases - 1), random_state=seed)

    return sorted(train), sorted(test)


# Metric log

class MetricLog(object):

    def __init__(self):

        self.rows = []

    def add(self, step, epoch, domain_id=None, loss=None, dice=None, accuracy=None):

        self.rows.append((step, epoch, domain_id, loss, dice, accuracy))

    def series(self, column, domain_id=None):

        """(step, value) pairs of one metric column, optionally for one domain."""

        col = LOG_HEADER.split(',').index(column)
        return [(r[0], r[col]) for r in self.rows
                if r[col] is not None and (domain_id is None or r[2] == domain_id)]

    def last(self, column, domain_id=None):

        values = self.series(column, domain_id)
        return values[-1][1] if values else None

    def to_text(self):

        cell = scoreseg.format_cell
        return '\n'.join([LOG_HEADER] + [','.join(cell(v) for v in r) for r in self.rows]) + '\n'

    def write(self, path):

        tmp = path + '.partial'
        try:
            with open(tmp, 'w', encoding='utf8') as f:
                f.write(self.to_text())
            os.replace(tmp, path)
        except OSError as err:
            raise IoFailure('cannot write metric log {}: {}'.format(path, err)) from err


# Case preparation

class CaseStore(object):

    """Loads normalised cases through a bounded LRU cache and hands out training or evaluation arrays.

    Original schedule items are cropped only; augmented duplicates are cropped and then
    translated, rotated and scaled with their own seed.
    """

    def __init__(self, domains, plan, aug=None, cache_size=CASE_CACHE_SIZE):

        self.domains = OrderedDict((d.domain_id, d) for d in domains)
        self.plan = plan
        self.aug = aug or AugmentParams()
        self.case = lru_cache(maxsize=cache_size)(self._load_case)

    def _load_case(self, domain_id, index):

        return loadvolumes.load_case(self.domains[domain_id], index)

    def training_item(self, item, use_scale=True):

        vol, labels = self.case(item.domain_id, item.case_index)
        if normalizevolumes.foreground_bbox(labels) is not None:
            vol, labels = normalizevolumes.sample_training_crop(vol, labels, seed=[item.aug_seed, 0])
        if item.is_dup:
            vol, labels = normalizevolumes.augment(vol, labels, self.aug.with_seed(item.aug_seed),
                                                   use_scale=use_scale)

        return as_batch(vol, labels, self.plan.patch_shape)

    def eval_item(self, domain_id, index):

        vol, labels = self.case(domain_id, index)

        return as_batch(vol, labels, self.plan.patch_shape)


def as_batch(vol, labels, patch_shape):

    """1 x 1 x P x P x P input and 1 x P x P x P targets at the patch size."""

    vol, labels = normalizevolumes.resize_to_shape(vol, labels, patch_shape)
    x = vol.voxels.astype(np.float32)[None, None]
    y = labels.labels.astype(np.int64)[None] if labels is not None else None

    return x, y


def prepared(fn, items, workers):

    """fn(item) for every item, in order; worker threads run ahead in bounded windows."""

    if workers == 0:
        for item in items:
            yield item, fn(item)
        return

    items = list(items)
    window = 4 * workers
    with ThreadPool(workers) as pool:
        for start in range(0, len(items), window):
            chunk = items[start:start + window]
            for item, out in zip(chunk, pool.imap(fn, chunk)):
                yield item, out


def _batches(iterable, size):

    batch = []
    for entry in iterable:
        batch.append(entry)
        if len(batch) == size:
            yield batch
            batch = []
    if batch:
        yield batch


def _step(touched, state):

    params = list(touched.items())
    optimisers.optimizer_step(params, state)
    optimisers.zero_grad(params)


# Pre-training

def evaluate_domain(model, store, domain_id, cases):

    """Mean foreground Dice of one decoder branch over the given cases, in eval mode."""

    if not cases:
        return None

    model.eval()
    class_count = store.domains[domain_id].class_count
    scores = []
    for index in cases:
        x, y = store.eval_item(domain_id, index)
        pred = buildmodel.predict_labels(buildmodel.forward_pretrain(model, Tensor(x), domain_id))
        scores.append(np.mean(list(scoreseg.dice_per_class(pred[0], y[0], class_count).values())))
    model.train()

    return float(np.mean(scores))


def pretrain(model, domains, plan, aug=None):

    """Train the shared encoder and the branch of each item's domain with SGD.

    Returns (Checkpoint, MetricLog). Only the encoder and the active branch take part in
    each step, so branches of unscheduled domains are never written.
    """

    active = _select_domains(domains, plan.domain_subset)
    for d in active:
        if d.domain_id not in model.decoder.branches:
            raise UnknownDomain('model has no branch for domain {}'.format(d.domain_id))

    store = CaseStore(active, plan, aug)
    splits = OrderedDict((d.domain_id, split_cases(d.case_count, plan.holdout_frac, plan.seed)) for d in active)
    pool = OrderedDict((k, v[0]) for k, v in splits.items())

    state = make_optimizer(plan.optimizer)
    log = MetricLog()
    step = 0
    model.train()

    for epoch in range(plan.epochs):

        schedule = balanced_schedule(active, plan.data_fraction, None, plan.seed, epoch, case_pool=pool)
        logger.info('Epoch %d: %d items over %d domains', epoch, len(schedule), len(active))

        for batch in _batches(prepared(store.training_item, schedule.items, plan.workers), plan.batch_size):

            touched = OrderedDict()
            losses = []
            for item, (x, y) in batch:
                logits = buildmodel.forward_pretrain(model, Tensor(x), item.domain_id)
                loss = ops.softmax_cross_entropy(logits, y)
                params = model.routed_parameters(item.domain_id)
                ops.backward(ops.mul(loss, 1. / len(batch)), params)
                touched.update(params)
                losses.append((item.domain_id, float(loss.data)))

            _step(touched, state)
            step += 1
            for domain_id, value in losses:
                log.add(step, epoch, domain_id, loss=value)
            logger.debug('step %d loss %s', step, losses)

        for d in active:
            score = evaluate_domain(model, store, d.domain_id, splits[d.domain_id][1])
            if score is not None:
                log.add(step, epoch, d.domain_id, dice=score)
                logger.info('Epoch %d domain %d held-out Dice %.4f', epoch, d.domain_id, score)

    ckpt = savemodel.checkpoint_from_model(model, {'seed': plan.seed, 'epochs': plan.epochs})

    return ckpt, log


def final_dice(log, domain_ids):

    return OrderedDict((d, log.last('dice', d)) for d in domain_ids)


# Transfer training

class TaskData(object):

    """Cases of a target task: (volume path, label path) for seg, (volume path, class) for cls."""

    def __init__(self, task, cases, class_count, name='task', cache_size=CASE_CACHE_SIZE):

        if task not in ('seg', 'cls'):
            raise ValueError('task must be seg or cls')
        if len(cases) < 1:
            raise ValueError('a task needs at least one case')

        self.task = task
        self.cases = list(cases)
        self.class_count = int(class_count)
        self.name = name
        self.load = lru_cache(maxsize=cache_size)(self._load)

    @classmethod
    def from_domain(cls, domain):

        return cls('seg', domain.cases, domain.class_count, domain.name)

    @classmethod
    def from_ratings(cls, path):

        """Benign (0) / malignant (1) cases from a ratings table; ambiguous cases are dropped."""

        cases = []
        for vol_path, ratings in loadvolumes.load_ratings(path):
            verdict = normalizevolumes.merge_malignancy(ratings)
            if verdict != 'excluded':
                cases.append((vol_path, int(verdict == 'malignant')))
        logger.info('%d rated cases kept from %s', len(cases), path)

        return cls('cls', cases, 2, os.path.basename(os.path.dirname(os.path.abspath(path))))

    def _load(self, index):

        vol_path, target = self.cases[index]
        vol, _ = loadvolumes.read_nifti(vol_path)
        if self.task == 'seg':
            _, labels = loadvolumes.read_nifti(target, class_count=self.class_count)
            if labels is None:
                raise ValueError('{} is not a valid label grid for {} classes'.format(target, self.class_count))
            target = labels

        return vol, target


def _cls_batch(vol, patch_shape):

    vol, _ = normalizevolumes.resize_to_shape(vol, None, patch_shape)

    return vol.voxels.astype(np.float32)[None, None]


def evaluate_task(model, data, cases, patch_shape):

    """Mean foreground Dice (seg) or accuracy (cls) over the given cases."""

    if not cases:
        return None

    model.eval()
    if data.task == 'seg':
        scores = []
        for index in cases:
            vol, labels = data.load(index)
            x, y = as_batch(vol, labels, patch_shape)
            pred = buildmodel.predict_labels(model(Tensor(x)))
            scores.append(np.mean(list(scoreseg.dice_per_class(pred[0], y[0], data.class_count).values())))
        result = float(np.mean(scores))
    else:
        preds = [int(buildmodel.predict_labels(model(Tensor(_cls_batch(data.load(i)[0], patch_shape))))[0])
                 for i in cases]
        result = scoreseg.accuracy(preds, [data.load(i)[1] for i in cases])
    model.train()

    return result


def freeze_encoder(model):

    """Keep encoder values fixed: no gradients, running statistics not updated."""

    for _, p in model.encoder_parameters():
        p.requires_grad = False
    model.frozen = True
    model.train(model.training)


def transfer_train(model, data, plan, init='scratch', ckpt=None, aug=None, crop=True):

    """Train an encoder + head network on a target task with Adam.

    init is 'med3d_ckpt' (encoder copied from ckpt) or 'scratch'. Returns (MetricLog, report);
    report is the transfer_weights report, or None for scratch. crop=False trains segmentation
    on whole volumes, as the coarse localisation stage does.
    """

    if init not in ('med3d_ckpt', 'scratch'):
        raise ValueError('init must be med3d_ckpt or scratch')
    if ('seg' if model.task == 'coarse' else model.task) != data.task:
        raise ValueError('{} head cannot train a {} task'.format(model.task, data.task))
    if model.num_classes != data.class_count:
        raise ValueError('head has {} classes, the task {}'.format(model.num_classes, data.class_count))

    report = None
    if init == 'med3d_ckpt':
        if ckpt is None:
            raise ValueError('med3d_ckpt initialisation needs a checkpoint')
        report = savemodel.transfer_weights(ckpt, model, strict_encoder=True)

    model.train()
    if plan.freeze_encoder:
        freeze_encoder(model)
        params = model.head_parameters()
    else:
        params = model.encoder_parameters() + model.head_parameters()

    aug = aug or AugmentParams()
    train_idx, test_idx = split_cases(len(data.cases), plan.holdout_frac, plan.seed)
    eval_idx = test_idx or train_idx

    def prepare(item):
        index, seed = item
        vol, target = data.load(index)
        if data.task == 'seg':
            if crop and normalizevolumes.foreground_bbox(target) is not None:
                vol, target = normalizevolumes.sample_training_crop(vol, target, seed=[seed, 0])
            vol, target = normalizevolumes.augment(vol, target, aug.with_seed(seed), use_scale=False)
            return as_batch(vol, target, plan.patch_shape)
        vol, _ = normalizevolumes.augment(vol, None, aug.with_seed(seed), use_scale=False)
        return _cls_batch(vol, plan.patch_shape), np.asarray([target], dtype=np.int64)

    state = make_optimizer(plan.optimizer)
    log = MetricLog()
    metric = 'dice' if data.task == 'seg' else 'accuracy'
    step = 0

    for epoch in range(plan.epochs):

        rng = np.random.default_rng([plan.seed, epoch, 11])
        order = [(train_idx[i], int(rng.integers(2 ** 31))) for i in rng.permutation(len(train_idx))]

        for batch in _batches(prepared(prepare, order, plan.workers), plan.batch_size):

            losses = []
            for _, (x, y) in batch:
                loss = ops.softmax_cross_entropy(model(Tensor(x)), y)
                ops.backward(ops.mul(loss, 1. / len(batch)), params)
                losses.append(float(loss.data))

            _step(OrderedDict(params), state)
            step += 1
            log.add(step, epoch, loss=float(np.mean(losses)))

            if step % plan.eval_every == 0:
                score = evaluate_task(model, data, eval_idx, plan.patch_shape)
                log.add(step, epoch, **{metric: score})
                logger.info('step %d held-out %s %.4f', step, metric, score)

    return log, report


# Experiments

def domain_groups(domain_ids, size):

    """Consecutive groups of size domains; a short final group is kept."""

    ids = sorted(domain_ids)
    return [ids[i:i + size] for i in range(0, len(ids), size)]


def _pretrain_group(domains, group, plan, cfg, aug):

    selected = [d for d in domains if d.domain_id in group]
    model_cfg = buildmodel.ModelConfig(depth=cfg.depth, seed=cfg.seed, base_width=cfg.base_width,
                                       dilation_rate=cfg.dilation_rate, branch_specs=[(d.domain_id, d.class_count) for d in selected])
    model = buildmodel.build_med3d(model_cfg)
    _, log = pretrain(model, selected, plan.replace(domain_subset=list(group)), aug)

    return final_dice(log, group)


def variety_experiment(domains, sizes, plan, cfg, aug=None):

    """Held-out Dice of every domain when co-trained in groups of each size.

    Returns {domain_id: {size: dice}}; every run shares plan, seed and budget.
    """

    ids = [d.domain_id for d in domains]
    table = OrderedDict((d, OrderedDict()) for d in sorted(ids))

    for size in sizes:
        if size < 1:
            raise ValueError('group size must be positive')
        for group in domain_groups(ids, size):
            logger.info('Co-training domains %s', group)
            for domain_id, score in _pretrain_group(domains, group, plan, cfg, aug).items():
                table[domain_id][size] = score

    return table


def fraction_experiment(domains, fractions, plan, cfg, aug=None):

    """Held-out Dice per domain for one pre-training run per data fraction."""

    ids = sorted(d.domain_id for d in domains)
    curve = OrderedDict()

    for fraction in fractions:
        if not 0 < fraction <= 1:
            raise ValueError('fractions must lie in (0, 1]')
        logger.info('Pre-training on %.0f%% of the data', 100 * fraction)
        curve[fraction] = _pretrain_group(domains, ids, plan.replace(data_fraction=fraction), cfg, aug)

    return curve


def write_table(header, rows, path):

    cell = scoreseg.format_cell
    tmp = path + '.partial'
    try:
        with open(tmp, 'w', encoding='utf8') as f:
            f.write(','.join(header) + '\n')
            for r in rows:
                f.write(','.join(cell(v) for v in r) + '\n')
        os.replace(tmp, path)
    except OSError as err:
        raise IoFailure('cannot write table {}: {}'.format(path, err)) from err


def write_variety_table(table, sizes, path, names=None):

    names = names or {}
    header = ['domain_id', 'name'] + ['domains_{}'.format(s) for s in sizes]
    rows = [[d, names.get(d, '')] + [scores.get(s) for s in sizes] for d, scores in table.items()]
    write_table(header, rows, path)


def write_fraction_table(curve, path):

    rows = [[fraction, d, score] for fraction, scores in curve.items() for d, score in scores.items()]
    write_table(['fraction', 'domain_id', 'dice'], rows, path)
