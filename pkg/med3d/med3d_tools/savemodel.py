"""
Checkpoint files: named float32 arrays plus architecture metadata.

Layout (all integers little-endian u32):

    b'M3DC' | format_version | metadata length | metadata (UTF-8 key=value lines)
    then per array: name length | name (UTF-8) | rank | extents... | raw <f4 values (C order)

Arrays are written in model construction order, so save -> load -> save is byte-identical.
"""

import logging
import os
from collections import OrderedDict

import numpy as np

from . import buildmodel
from .med3derrors import ArchMismatch, BadCheckpoint, IoFailure, ShapeMismatch

logger = logging.getLogger(__name__)

MAGIC = b'M3DC'
FORMAT_VERSION = 1
ARCH_KEYS = ('depth', 'block', 'in_channels')


class Checkpoint(object):

    def __init__(self, metadata=None, arrays=None, format_version=FORMAT_VERSION):

        self.format_version = int(format_version)
        self.metadata = OrderedDict(metadata or ())
        self.arrays = OrderedDict()

        for name, arr in (arrays or OrderedDict()).items():
            self.add(name, arr)

    def add(self, name, arr):

        if name in self.arrays:
            raise BadCheckpoint('duplicate array name {}'.format(name))
        self.arrays[name] = np.array(arr, dtype=np.float32)

    def names(self):

        return list(self.arrays.keys())

    def to_bytes(self):

        meta = ''.join('{}={}\n'.format(k, v) for k, v in self.metadata.items()).encode('utf-8')

        chunks = [MAGIC, _u32(self.format_version, len(meta)), meta]
        for name, arr in self.arrays.items():
            encoded = name.encode('utf-8')
            chunks.append(_u32(len(encoded)))
            chunks.append(encoded)
            chunks.append(_u32(arr.ndim, *arr.shape))
            chunks.append(np.ascontiguousarray(arr, dtype='<f4').tobytes())

        return b''.join(chunks)

    def __eq__(self, other):

        return isinstance(other, Checkpoint) and self.to_bytes() == other.to_bytes()


def _u32(*values):

    return np.asarray(values, dtype='<u4').tobytes()


class _Reader(object):

    def __init__(self, raw):

        self.raw = raw
        self.pos = 0

    def take(self, n):

        if self.pos + n > len(self.raw):
            raise BadCheckpoint('checkpoint is truncated at byte {}'.format(self.pos))
        chunk = self.raw[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def u32(self, count=1):

        return [int(v) for v in np.frombuffer(self.take(4 * count), dtype='<u4')]

    @property
    def done(self):

        return self.pos == len(self.raw)


def checkpoint_from_bytes(raw):

    reader = _Reader(raw)

    if reader.take(4) != MAGIC:
        raise BadCheckpoint('not a med3d checkpoint')

    version, meta_len = reader.u32(2)
    if version != FORMAT_VERSION:
        raise BadCheckpoint('unsupported checkpoint version {}'.format(version))

    try:
        meta_text = reader.take(meta_len).decode('utf-8')
    except UnicodeDecodeError as err:
        raise BadCheckpoint('metadata is not UTF-8') from err

    metadata = OrderedDict()
    for line in meta_text.splitlines():
        if '=' not in line:
            raise BadCheckpoint('malformed metadata line {!r}'.format(line))
        key, value = line.split('=', 1)
        metadata[key] = value

    ckpt = Checkpoint(metadata, format_version=version)

    while not reader.done:
        name_len = reader.u32()[0]
        try:
            name = reader.take(name_len).decode('utf-8')
        except UnicodeDecodeError as err:
            raise BadCheckpoint('array name is not UTF-8') from err
        rank = reader.u32()[0]
        if rank > 8:
            raise BadCheckpoint('array {} has implausible rank {}'.format(name, rank))
        shape = tuple(reader.u32(rank)) if rank else ()
        count = int(np.prod(shape)) if shape else 1
        values = np.frombuffer(reader.take(4 * count), dtype='<f4').reshape(shape)
        ckpt.add(name, values)

    return ckpt


def save_checkpoint(ckpt, path):

    tmp = path + '.partial'
    try:
        with open(tmp, 'wb') as f:
            f.write(ckpt.to_bytes())
        os.replace(tmp, path)
    except OSError as err:
        raise IoFailure('could not write checkpoint {}: {}'.format(path, err)) from err

    logger.info('Saved checkpoint with %d arrays to %s', len(ckpt.arrays), path)


def load_checkpoint(path):

    try:
        with open(path, 'rb') as f:
            raw = f.read()
    except OSError as err:
        raise IoFailure('could not read checkpoint {}: {}'.format(path, err)) from err

    return checkpoint_from_bytes(raw)


# Model <-> checkpoint

def model_metadata(model):

    meta = model.cfg.metadata()

    if isinstance(model, buildmodel.Med3DNet):
        meta['kind'] = 'pretrain'
        meta['branches'] = ','.join('{}:{}'.format(d, b.classes) for d, b in model.decoder.branches.items())
    else:
        meta['kind'] = model.task
        if model.task in ('seg', 'cls'):
            meta['num_classes'] = str(model.num_classes)
        if model.task == 'seg':
            meta['decoder_width'] = str(model.decoder_width)

    return meta


def checkpoint_from_model(model, extra=None):

    ckpt = Checkpoint(model_metadata(model))
    for key, value in (extra or {}).items():
        ckpt.metadata[key] = str(value)

    for name, target in _target_arrays(model).items():
        ckpt.add(name, _values(target))

    return ckpt


def _target_arrays(model):

    return OrderedDict((name, value) for name, _, value in model.named_state())


def _values(target):

    # parameters are Tensors, running statistics plain arrays
    return target if isinstance(target, np.ndarray) else target.data


def _assign(target, values):

    _values(target)[...] = values


def _shape_of(target):

    return _values(target).shape


def restore_model(ckpt, model):

    """Copy every array of ckpt into the identically built model."""

    targets = _target_arrays(model)

    missing = [n for n in targets if n not in ckpt.arrays]
    extra = [n for n in ckpt.arrays if n not in targets]
    if missing or extra:
        raise ArchMismatch('checkpoint and model disagree: missing {}, unexpected {}'.format(missing[:3], extra[:3]))

    for name, target in targets.items():
        if _shape_of(target) != ckpt.arrays[name].shape:
            raise ShapeMismatch('{} has shape {} in the checkpoint, {} in the model'.format(
                name, ckpt.arrays[name].shape, _shape_of(target)))
        _assign(target, ckpt.arrays[name])

    return model


def model_from_checkpoint(ckpt):

    """Rebuild the network a checkpoint was saved from and load its arrays."""

    meta = ckpt.metadata
    try:
        cfg_args = dict(depth=int(meta['depth']), base_width=int(meta['base_width']),
                        dilated=meta.get('dilated', '1') == '1',
                        dilation_rate=int(meta.get('dilation_rate', 2)))
        kind = meta['kind']
    except (KeyError, ValueError) as err:
        raise BadCheckpoint('checkpoint metadata is incomplete: {}'.format(err)) from err

    if kind == 'pretrain':
        specs = [tuple(int(v) for v in item.split(':')) for item in meta['branches'].split(',')]
        model = buildmodel.build_med3d(buildmodel.ModelConfig(branch_specs=specs, **cfg_args))
    elif kind == 'coarse':
        model = buildmodel.build_coarse_model(buildmodel.ModelConfig(**cfg_args))
    else:
        model = buildmodel.build_transfer_model(buildmodel.ModelConfig(**cfg_args), kind,
                                                int(meta['num_classes']), int(meta.get('decoder_width', 256)))

    return restore_model(ckpt, model)


def transfer_weights(ckpt, model, strict_encoder=True):

    """Copy the encoder arrays of ckpt into model by name.

    Returns {'copied': [...], 'initialized': [...], 'skipped': [...]}: copied encoder arrays,
    model arrays left at their fresh initialisation, and checkpoint arrays not used.
    """

    mismatched = [k for k in ARCH_KEYS if ckpt.metadata.get(k) != str(getattr(model.cfg, k))]
    if mismatched and strict_encoder:
        raise ArchMismatch('checkpoint {} differs from the model: {}'.format(
            ', '.join('{}={}'.format(k, ckpt.metadata.get(k)) for k in mismatched),
            ', '.join('{}={}'.format(k, getattr(model.cfg, k)) for k in mismatched)))

    targets = _target_arrays(model)
    report = {'copied': [], 'initialized': [], 'skipped': []}

    for name, target in targets.items():
        source = ckpt.arrays.get(name)
        if not name.startswith('encoder.') or source is None:
            report['initialized'].append(name)
            continue
        if source.shape != _shape_of(target):
            if strict_encoder:
                raise ShapeMismatch('{} has shape {} in the checkpoint, {} in the model'.format(
                    name, source.shape, _shape_of(target)))
            report['initialized'].append(name)
            continue
        _assign(target, source)
        report['copied'].append(name)

    used = set(report['copied'])
    report['skipped'] = [name for name in ckpt.arrays if name not in used]

    logger.info('Transferred %d encoder arrays, %d initialised, %d skipped',
                len(report['copied']), len(report['initialized']), len(report['skipped']))

    return report
