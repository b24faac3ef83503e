import gzip
import logging
import os
import zlib

import numpy as np

from .med3derrors import (BadHeader, BadMagic, DuplicateDomainId, EmptyDomain, IoFailure, NonFiniteVoxel,
                          NonPositiveSpacing, ParseError, TruncatedFile, UnsupportedDtype)
from .volumeobj import MODALITIES, DomainSpec, Volume, as_label_grid

logger = logging.getLogger(__name__)

HEADER_SIZE = 348
VOX_OFFSET = 352
SINGLE_MAGIC = b'n+1\x00'
PAIR_MAGIC = b'ni1\x00'

# NIfTI-1 header, byte offsets in the comments

header_dtd = [
    ('sizeof_hdr', 'i4'),      # 0; must be 348
    ('data_type', 'S10'),      # 4
    ('db_name', 'S18'),        # 14
    ('extents', 'i4'),         # 32
    ('session_error', 'i2'),   # 36
    ('regular', 'S1'),         # 38
    ('dim_info', 'u1'),        # 39
    ('dim', 'i2', (8,)),       # 40
    ('intent_p1', 'f4'),       # 56
    ('intent_p2', 'f4'),       # 60
    ('intent_p3', 'f4'),       # 64
    ('intent_code', 'i2'),     # 68
    ('datatype', 'i2'),        # 70
    ('bitpix', 'i2'),          # 72
    ('slice_start', 'i2'),     # 74
    ('pixdim', 'f4', (8,)),    # 76
    ('vox_offset', 'f4'),      # 108
    ('scl_slope', 'f4'),       # 112
    ('scl_inter', 'f4'),       # 116
    ('slice_end', 'i2'),       # 120
    ('slice_code', 'u1'),      # 122
    ('xyzt_units', 'u1'),      # 123
    ('cal_max', 'f4'),         # 124
    ('cal_min', 'f4'),         # 128
    ('slice_duration', 'f4'),  # 132
    ('toffset', 'f4'),         # 136
    ('glmax', 'i4'),           # 140
    ('glmin', 'i4'),           # 144
    ('descrip', 'S80'),        # 148
    ('aux_file', 'S24'),       # 228
    ('qform_code', 'i2'),      # 252
    ('sform_code', 'i2'),      # 254
    ('quatern_b', 'f4'),       # 256
    ('quatern_c', 'f4'),       # 260
    ('quatern_d', 'f4'),       # 264
    ('qoffset_x', 'f4'),       # 268
    ('qoffset_y', 'f4'),       # 272
    ('qoffset_z', 'f4'),       # 276
    ('srow_x', 'f4', (4,)),    # 280
    ('srow_y', 'f4', (4,)),    # 296
    ('srow_z', 'f4', (4,)),    # 312
    ('intent_name', 'S16'),    # 328
    ('magic', 'S4'),           # 344
]

header_dtype = np.dtype(header_dtd)

# datatype code -> numpy type, the on-disk types this reader accepts

_dtdefs = {
    2: np.uint8,
    4: np.int16,
    8: np.int32,
    16: np.float32,
    64: np.float64,
}


def _read_bytes(path):

    try:
        with open(path, 'rb') as f:
            raw = f.read()
    except OSError as err:
        raise IoFailure('cannot read {}: {}'.format(path, err)) from err

    # gzip members are recognised by content, so a .nii.gz renamed to .nii still loads

    if raw[:2] == b'\x1f\x8b':
        try:
            raw = gzip.decompress(raw)
        except (OSError, EOFError, zlib.error) as err:
            raise TruncatedFile('corrupt gzip stream in {}: {}'.format(path, err)) from err

    return raw


def guessed_endian(raw):

    # sizeof_hdr is 348 in the file's own byte order; 0x5C010000 means the file is big-endian

    if np.frombuffer(raw, dtype='<i4', count=1)[0] == HEADER_SIZE:
        return '<'
    if np.frombuffer(raw, dtype='>i4', count=1)[0] == HEADER_SIZE:
        return '>'

    return None


def parse_header(raw):

    if len(raw) < HEADER_SIZE:
        raise TruncatedFile('file holds {} bytes, a NIfTI-1 header needs {}'.format(len(raw), HEADER_SIZE))

    endian = guessed_endian(raw)
    if endian is None:
        raise BadMagic('sizeof_hdr is not 348 in either byte order')

    magic = raw[344:348]
    if magic == PAIR_MAGIC:
        raise BadMagic('paired .hdr/.img NIfTI is not supported')
    if magic != SINGLE_MAGIC:
        raise BadMagic('magic {!r} is not n+1'.format(magic))

    hdr = np.frombuffer(raw[:HEADER_SIZE], dtype=header_dtype.newbyteorder(endian))[0]

    return hdr, endian


def _grid_extents(hdr):

    dim = [int(d) for d in hdr['dim']]
    ndim = dim[0]

    if not 1 <= ndim <= 7:
        raise BadHeader('dim[0] = {} is outside 1..7'.format(ndim))
    if any(d < 1 for d in dim[1:ndim + 1]):
        raise BadHeader('non-positive extent in dim {}'.format(dim[1:ndim + 1]))
    if any(d != 1 for d in dim[4:ndim + 1]):
        raise BadHeader('only 3D volumes are supported, dim = {}'.format(dim[1:ndim + 1]))

    extents = dim[1:min(ndim, 3) + 1]
    while len(extents) < 3:
        extents.append(1)

    return tuple(extents)


def _modality_from_descrip(descrip):

    text = descrip.decode('ascii', errors='ignore')
    for token in text.split():
        if token.startswith('modality='):
            value = token.split('=', 1)[1]
            if value in MODALITIES:
                return value

    return 'UNKNOWN'


def read_nifti(path, class_count=None):

    """Load a single-file NIfTI-1 volume.

    Returns (Volume, LabelGrid or None). The label interpretation is only attempted when
    class_count is given and succeeds when every voxel is an integer in [0, class_count).
    """

    raw = _read_bytes(path)
    hdr, endian = parse_header(raw)
    extents = _grid_extents(hdr)

    code = int(hdr['datatype'])
    if code not in _dtdefs:
        raise UnsupportedDtype('datatype code {} is not supported'.format(code))

    np_dtype = np.dtype(_dtdefs[code]).newbyteorder(endian)
    if not np.isfinite(hdr['vox_offset']):
        raise BadHeader('vox_offset is not finite')
    offset = int(hdr['vox_offset'])
    if offset < HEADER_SIZE:
        raise BadHeader('vox_offset {} lies inside the header'.format(offset))

    count = extents[0] * extents[1] * extents[2]
    needed = offset + count * np_dtype.itemsize
    if len(raw) < needed:
        raise TruncatedFile('{} holds {} bytes, {} expected'.format(path, len(raw), needed))

    # x varies fastest on disk, hence Fortran order for an (x, y, z) grid

    data = np.frombuffer(raw, dtype=np_dtype, count=count, offset=offset).reshape(extents, order='F')

    slope = float(hdr['scl_slope'])
    inter = float(hdr['scl_inter'])

    if np.isfinite(slope) and slope != 0 and not (slope == 1 and inter == 0):
        voxels = (data.astype(np.float64) * slope + inter).astype(np.float32)
    else:
        voxels = data.astype(np.float32)

    if not np.all(np.isfinite(voxels)):
        raise NonFiniteVoxel('{} contains NaN or Inf voxels'.format(path))

    spacing = tuple(float(s) for s in hdr['pixdim'][1:4])
    if not all(np.isfinite(s) and s > 0 for s in spacing):
        raise NonPositiveSpacing('{} has spacing {}'.format(path, spacing))

    origin = (float(hdr['qoffset_x']), float(hdr['qoffset_y']), float(hdr['qoffset_z']))
    if not all(np.isfinite(o) for o in origin):
        origin = (0., 0., 0.)

    vol = Volume(voxels, spacing=spacing, origin_offset=origin, modality=_modality_from_descrip(hdr['descrip']))

    labels = None
    if class_count is not None:
        labels = as_label_grid(vol, class_count)

    logger.debug('Read %s shape=%s spacing=%s dtype=%d', path, vol.shape, vol.spacing, code)

    return vol, labels


def build_header(vol):

    hdr = np.zeros((), dtype=header_dtype.newbyteorder('<'))

    hdr['sizeof_hdr'] = HEADER_SIZE
    hdr['dim'] = [3, vol.shape[0], vol.shape[1], vol.shape[2], 1, 1, 1, 1]
    hdr['datatype'] = 16
    hdr['bitpix'] = 32
    hdr['pixdim'] = [1., vol.spacing[0], vol.spacing[1], vol.spacing[2], 1., 1., 1., 1.]
    hdr['vox_offset'] = VOX_OFFSET
    hdr['scl_slope'] = 0.
    hdr['scl_inter'] = 0.
    hdr['xyzt_units'] = 2
    hdr['descrip'] = 'med3d modality={}'.format(vol.modality).encode('ascii')
    hdr['qform_code'] = 1
    hdr['qoffset_x'], hdr['qoffset_y'], hdr['qoffset_z'] = vol.origin_offset
    hdr['magic'] = SINGLE_MAGIC

    return hdr


def write_nifti(vol, path):

    """Write vol as a little-endian float32 single-file NIfTI-1 (gzip when path ends in .gz)."""

    hdr = build_header(vol)
    payload = hdr.tobytes() + b'\x00' * (VOX_OFFSET - HEADER_SIZE)
    payload += vol.voxels.astype('<f4').tobytes(order='F')

    try:
        if path.endswith('.gz'):
            # mtime pinned so identical volumes give identical files
            with open(path, 'wb') as raw_f:
                with gzip.GzipFile(filename='', mode='wb', fileobj=raw_f, mtime=0) as f:
                    f.write(payload)
        else:
            with open(path, 'wb') as f:
                f.write(payload)
    except OSError as err:
        raise IoFailure('cannot write {}: {}'.format(path, err)) from err


def write_labels(labels, spacing, path, origin_offset=(0., 0., 0.)):

    write_nifti(Volume(labels.labels, spacing=spacing, origin_offset=origin_offset), path)


# Manifest files, grammar documented in docs/index.rst

def _parse_case(value, dir_name, line_no):

    parts = [p.strip() for p in value.split(',')]
    if len(parts) != 2 or not all(parts):
        raise ParseError('case needs "<volume path>, <label path>"', line_no)

    return tuple(os.path.normpath(os.path.join(dir_name, p)) for p in parts)


def load_manifest(path):

    dir_name = os.path.dirname(os.path.abspath(path))
    domains = []
    current = None

    try:
        with open(path, encoding='utf8') as f:
            lines = f.readlines()
    except OSError as err:
        raise IoFailure('cannot read manifest {}: {}'.format(path, err)) from err

    for line_no, line in enumerate(lines, start=1):

        line = line.strip()
        if not line or line.startswith('#'):
            continue

        if line.startswith('['):
            if not line.endswith(']'):
                raise ParseError('unterminated section header', line_no)

            fields = line[1:-1].split()
            if len(fields) != 2 or fields[0] != 'domain':
                raise ParseError('section must read [domain <id>]', line_no)
            try:
                domain_id = int(fields[1])
            except ValueError:
                raise ParseError('domain id {!r} is not an integer'.format(fields[1]), line_no)
            if not 0 <= domain_id <= 7:
                raise ParseError('domain id {} outside 0..7'.format(domain_id), line_no)

            current = {'domain_id': domain_id, 'line': line_no, 'cases': []}
            domains.append(current)
            continue

        if '=' not in line:
            raise ParseError('expected key = value', line_no)
        if current is None:
            raise ParseError('entry before the first [domain] section', line_no)

        key, value = [s.strip() for s in line.split('=', 1)]

        if key == 'case':
            current['cases'].append(_parse_case(value, dir_name, line_no))
        elif key == 'name':
            current['name'] = value
        elif key == 'classes':
            try:
                current['class_count'] = int(value)
            except ValueError:
                raise ParseError('classes must be an integer', line_no)
            if current['class_count'] < 1:
                raise ParseError('classes must be positive', line_no)
        elif key == 'modality':
            if value not in MODALITIES:
                raise ParseError('modality must be one of {}'.format(', '.join(MODALITIES)), line_no)
            current['modality'] = value
        else:
            raise ParseError('unknown key {!r}'.format(key), line_no)

    specs = []
    seen = set()

    for d in domains:

        if d['domain_id'] in seen:
            raise DuplicateDomainId('domain id {} declared twice (line {})'.format(d['domain_id'], d['line']))
        seen.add(d['domain_id'])

        if 'class_count' not in d:
            raise ParseError('domain {} has no classes entry'.format(d['domain_id']), d['line'])
        if not d['cases']:
            raise EmptyDomain('domain {} lists no cases'.format(d['domain_id']))

        specs.append(DomainSpec(d['domain_id'], d.get('name', 'domain{}'.format(d['domain_id'])),
                                d['class_count'], d['cases'], modality=d.get('modality', 'UNKNOWN')))

    logger.info('Loaded manifest %s with %d domains', path, len(specs))

    return specs


def write_manifest(domains, path):

    dir_name = os.path.dirname(os.path.abspath(path))
    lines = ['# med3d dataset manifest']

    for d in domains:
        lines.append('')
        lines.append('[domain {}]'.format(d.domain_id))
        lines.append('name = {}'.format(d.name))
        lines.append('classes = {}'.format(d.class_count))
        lines.append('modality = {}'.format(d.modality))
        for vol_path, lab_path in d.cases:
            lines.append('case = {}, {}'.format(os.path.relpath(vol_path, dir_name).replace(os.sep, '/'),
                                                os.path.relpath(lab_path, dir_name).replace(os.sep, '/')))

    try:
        with open(path, 'w', encoding='utf8') as f:
            f.write('\n'.join(lines) + '\n')
    except OSError as err:
        raise IoFailure('cannot write manifest {}: {}'.format(path, err)) from err


def load_case(domain, index):

    vol_path, lab_path = domain.cases[index]
    vol, _ = read_nifti(vol_path)
    _, labels = read_nifti(lab_path, class_count=domain.class_count)

    if labels is None:
        raise ValueError('{} is not a valid label grid for {} classes'.format(lab_path, domain.class_count))
    if domain.modality != 'UNKNOWN' and vol.modality == 'UNKNOWN':
        vol = Volume(vol.voxels, vol.spacing, vol.origin_offset, domain.modality)

    return vol, labels


# Nodule rating tables: one "volume,ratings" row per case, ratings space separated

def write_ratings(rows, path):

    dir_name = os.path.dirname(os.path.abspath(path))
    try:
        with open(path, 'w', encoding='utf8') as f:
            f.write('volume,ratings\n')
            for vol_path, ratings in rows:
                f.write('{},{}\n'.format(os.path.relpath(vol_path, dir_name).replace(os.sep, '/'),
                                         ' '.join(str(int(r)) for r in ratings)))
    except OSError as err:
        raise IoFailure('cannot write ratings table {}: {}'.format(path, err)) from err


def load_ratings(path):

    """(volume path, [ratings]) per row of a ratings table."""

    dir_name = os.path.dirname(os.path.abspath(path))
    try:
        with open(path, encoding='utf8') as f:
            lines = f.read().splitlines()
    except OSError as err:
        raise IoFailure('cannot read ratings table {}: {}'.format(path, err)) from err

    if not lines or lines[0].strip() != 'volume,ratings':
        raise ParseError('ratings table must start with "volume,ratings"', 1)

    rows = []
    for line_no, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split(',')
        if len(parts) != 2:
            raise ParseError('expected "<volume>,<ratings>"', line_no)
        try:
            ratings = [int(r) for r in parts[1].split()]
        except ValueError:
            raise ParseError('ratings must be integers', line_no)
        rows.append((os.path.normpath(os.path.join(dir_name, parts[0].strip())), ratings))

    return rows
