import gzip
import os
import struct

import numpy as np
import pytest

from med3d.med3d_tools import loadvolumes
from med3d.med3d_tools.med3derrors import (BadHeader, BadMagic, DuplicateDomainId, EmptyDomain, Med3DError,
                                           NonFiniteVoxel, NonPositiveSpacing, ParseError, TruncatedFile,
                                           UnsupportedDtype)
from med3d.med3d_tools.volumeobj import LabelGrid, Volume


def _raw_file(path, data, spacing=(1., 1., 1.), datatype=16, endian='<', slope=0., inter=0., magic=b'n+1\x00',
              dim=None):

    hdr = np.zeros((), dtype=loadvolumes.header_dtype.newbyteorder(endian))
    hdr['sizeof_hdr'] = 348
    hdr['dim'] = dim if dim is not None else [3] + list(data.shape) + [1, 1, 1, 1]
    hdr['datatype'] = datatype
    hdr['pixdim'] = [1.] + list(spacing) + [1., 1., 1., 1.]
    hdr['vox_offset'] = 352
    hdr['scl_slope'] = slope
    hdr['scl_inter'] = inter
    hdr['magic'] = magic
    payload = hdr.tobytes() + b'\x00' * 4 + data.astype(data.dtype.newbyteorder(endian)).tobytes(order='F')
    with open(path, 'wb') as f:
        f.write(payload)
    return path


def test_write_read_is_bit_exact(tmp_path):

    rng = np.random.default_rng(1)
    for k in range(200):
        shape = tuple(rng.integers(1, 17, size=3))
        vol = Volume(rng.normal(size=shape) * 1000, spacing=rng.uniform(0.5, 5., size=3),
                     origin_offset=rng.normal(size=3), modality=['CT', 'MR', 'UNKNOWN'][k % 3])
        path = str(tmp_path / ('v{}.nii{}'.format(k, '.gz' if k % 2 else '')))
        loadvolumes.write_nifti(vol, path)
        back, labels = loadvolumes.read_nifti(path)
        assert back == vol
        assert labels is None


def test_header_fields_match_byte_offsets(tmp_path):

    vol = Volume(np.arange(24, dtype=np.float32).reshape(2, 3, 4), spacing=(0.5, 1.5, 3.))
    path = str(tmp_path / 'v.nii')
    loadvolumes.write_nifti(vol, path)

    with open(path, 'rb') as f:
        raw = f.read()

    assert struct.unpack_from('<i', raw, 0)[0] == 348
    assert struct.unpack_from('<8h', raw, 40) == (3, 2, 3, 4, 1, 1, 1, 1)
    assert struct.unpack_from('<h', raw, 70)[0] == 16
    assert struct.unpack_from('<h', raw, 72)[0] == 32
    assert struct.unpack_from('<3f', raw, 80) == (0.5, 1.5, 3.)
    assert struct.unpack_from('<f', raw, 108)[0] == 352.
    assert raw[344:348] == b'n+1\x00'
    assert len(raw) == 352 + 24 * 4
    # x varies fastest
    assert struct.unpack_from('<3f', raw, 352) == (0., 12., 4.)


def test_gzip_output_is_deterministic(tmp_path):

    vol = Volume(np.ones((3, 3, 3)))
    a, b = str(tmp_path / 'a.nii.gz'), str(tmp_path / 'b.nii.gz')
    loadvolumes.write_nifti(vol, a)
    loadvolumes.write_nifti(vol, b)

    with open(a, 'rb') as fa, open(b, 'rb') as fb:
        assert fa.read() == fb.read()


def test_big_endian_int16(tmp_path):

    data = np.arange(-12, 12, dtype=np.int16).reshape(2, 3, 4)
    path = _raw_file(str(tmp_path / 'be.nii'), data, spacing=(2., 1., 1.), datatype=4, endian='>')

    vol, _ = loadvolumes.read_nifti(path)
    assert np.array_equal(vol.voxels, data.astype(np.float32))
    assert vol.spacing == (2., 1., 1.)


def test_scaling_applied(tmp_path):

    data = np.arange(8, dtype=np.int16).reshape(2, 2, 2)
    path = _raw_file(str(tmp_path / 's.nii'), data, datatype=4, slope=2., inter=-1024.)

    vol, _ = loadvolumes.read_nifti(path)
    assert np.array_equal(vol.voxels, data * 2. - 1024.)


def test_labels_recognised(tmp_path):

    labels = LabelGrid(np.array([0, 1, 2, 1, 0, 0, 2, 2]).reshape(2, 2, 2), 3)
    path = str(tmp_path / 'l.nii.gz')
    loadvolumes.write_labels(labels, (1., 1., 1.), path)

    _, back = loadvolumes.read_nifti(path, class_count=3)
    assert back == labels
    _, too_few = loadvolumes.read_nifti(path, class_count=2)
    assert too_few is None


@pytest.mark.parametrize('kwargs, error', [
    (dict(magic=b'ni1\x00'), BadMagic),
    (dict(magic=b'abcd'), BadMagic),
    (dict(datatype=512), UnsupportedDtype),
    (dict(spacing=(1., 0., 1.)), NonPositiveSpacing),
    (dict(dim=[0, 2, 2, 2, 1, 1, 1, 1]), BadHeader),
    (dict(dim=[4, 2, 2, 2, 2, 1, 1, 1]), BadHeader),
])
def test_header_errors(tmp_path, kwargs, error):

    path = _raw_file(str(tmp_path / 'bad.nii'), np.zeros((2, 2, 2), dtype=np.float32), **kwargs)
    with pytest.raises(error):
        loadvolumes.read_nifti(path)


def test_truncation_and_nan(tmp_path):

    short = str(tmp_path / 'short.nii')
    with open(short, 'wb') as f:
        f.write(b'\x00' * 100)
    with pytest.raises(TruncatedFile):
        loadvolumes.read_nifti(short)

    path = _raw_file(str(tmp_path / 'cut.nii'), np.zeros((4, 4, 4), dtype=np.float32))
    with open(path, 'rb') as f:
        raw = f.read()
    with open(path, 'wb') as f:
        f.write(raw[:-10])
    with pytest.raises(TruncatedFile):
        loadvolumes.read_nifti(path)

    data = np.zeros((2, 2, 2), dtype=np.float32)
    data[1, 0, 1] = np.nan
    with pytest.raises(NonFiniteVoxel):
        loadvolumes.read_nifti(_raw_file(str(tmp_path / 'nan.nii'), data))


def test_gzip_recognised_by_content(tmp_path):

    data = np.arange(8, dtype=np.float32).reshape(2, 2, 2)
    plain = _raw_file(str(tmp_path / 'p.nii'), data)
    with open(plain, 'rb') as f:
        raw = f.read()
    renamed = str(tmp_path / 'zipped.nii')
    with open(renamed, 'wb') as f:
        f.write(gzip.compress(raw))

    vol, _ = loadvolumes.read_nifti(renamed)
    assert np.array_equal(vol.voxels, data)


def test_header_fuzz_only_raises_domain_errors(tmp_path):

    path = _raw_file(str(tmp_path / 'seed.nii'), np.ones((3, 3, 3), dtype=np.float32))
    with open(path, 'rb') as f:
        raw = bytearray(f.read())

    rng = np.random.default_rng(7)
    target = str(tmp_path / 'fuzz.nii')

    for _ in range(300):
        mutated = bytearray(raw)
        for pos in rng.integers(0, 352, size=rng.integers(1, 5)):
            mutated[pos] = int(rng.integers(0, 256))
        with open(target, 'wb') as f:
            f.write(bytes(mutated))
        try:
            loadvolumes.read_nifti(target)
        except Med3DError:
            pass


def _random_header_file(rng, path):

    # each field is valid or, three times in ten, drawn from values a reader must reject or survive

    def pick(valid, odd):
        return valid if rng.random() < 0.7 else odd[int(rng.integers(len(odd)))]

    endian = '<' if rng.integers(2) else '>'
    extents = [int(v) for v in rng.integers(1, 6, size=3)]
    hdr = np.zeros((), dtype=loadvolumes.header_dtype.newbyteorder(endian))
    hdr['sizeof_hdr'] = pick(348, [0, -348, 349, int(rng.integers(-2 ** 31, 2 ** 31))])
    hdr['dim'] = pick([3] + extents + [1, 1, 1, 1],
                      [[0] * 8, [8, 2, 2, 2, 2, 2, 2, 2], [4] + extents + [2, 1, 1, 1], [3, -1, 2, 2, 1, 1, 1, 1],
                       [3, 30000, 30000, 30000, 1, 1, 1, 1], [2] + extents + [1, 1, 1, 1]])
    hdr['datatype'] = pick(int(rng.choice([2, 4, 8, 16, 64])), [0, 1, 128, 256, 512, 32767])
    hdr['pixdim'] = [1.] + [pick(float(s), [np.nan, np.inf, -1., 0.]) for s in rng.uniform(0.5, 5., size=3)] + [1.] * 4
    hdr['vox_offset'] = pick(352., [np.nan, -np.inf, -4., 0., 100., 1e12])
    hdr['scl_slope'] = pick(0., [np.nan, 1., -2., 1e38])
    hdr['scl_inter'] = pick(0., [np.nan, 5., 1e38])
    hdr['descrip'] = bytes(rng.integers(32, 127, size=80, dtype=np.uint8))
    hdr['magic'] = pick(b'n+1\x00', [b'ni1\x00', b'n+2\x00', b'\x00\x00\x00\x00'])

    payload = bytes(rng.integers(0, 256, size=int(rng.integers(0, 1100)), dtype=np.uint8))
    raw = bytearray(hdr.tobytes() + b'\x00' * 4 + payload)
    for pos in rng.integers(0, len(raw), size=int(rng.integers(0, 3))):
        raw[pos] = int(rng.integers(0, 256))
    if rng.random() < 0.05:
        raw = raw[:int(rng.integers(0, len(raw)))]

    with open(path, 'wb') as f:
        f.write(bytes(raw))


def test_random_headers_only_raise_domain_errors(tmp_path):

    rng = np.random.default_rng(8)
    target = str(tmp_path / 'random.nii')
    loaded = 0

    for _ in range(10000):
        _random_header_file(rng, target)
        try:
            vol, _ = loadvolumes.read_nifti(target)
        except Med3DError:
            continue
        loaded += 1
        assert min(vol.spacing) > 0 and np.all(np.isfinite(vol.voxels))

    assert loaded > 0


MANIFEST = """# two domains
[domain 1]
name = spleen
classes = 2
modality = CT
case = b_vol.nii, b_seg.nii
case = a_vol.nii, a_seg.nii

[domain 4]
classes = 3
case = c_vol.nii, c_seg.nii
"""


def _write(tmp_path, text, name='manifest.txt'):

    path = str(tmp_path / name)
    with open(path, 'w') as f:
        f.write(text)
    return path


def test_manifest_parses_and_round_trips(tmp_path):

    domains = loadvolumes.load_manifest(_write(tmp_path, MANIFEST))

    assert [d.domain_id for d in domains] == [1, 4]
    assert domains[0].name == 'spleen' and domains[0].modality == 'CT' and domains[0].class_count == 2
    assert domains[1].name == 'domain4' and domains[1].modality == 'UNKNOWN'
    # cases are kept sorted
    assert os.path.basename(domains[0].cases[0][0]) == 'a_vol.nii'
    assert os.path.dirname(domains[0].cases[0][0]) == str(tmp_path)

    out = str(tmp_path / 'again.txt')
    loadvolumes.write_manifest(domains, out)
    again = loadvolumes.load_manifest(out)
    assert [(d.domain_id, d.name, d.class_count, d.cases) for d in again] == \
        [(d.domain_id, d.name, d.class_count, d.cases) for d in domains]


@pytest.mark.parametrize('text, error, line', [
    ('[domain 1]\nclasses = 2\ncase = a, b\n[domain 1]\nclasses = 2\ncase = c, d\n', DuplicateDomainId, None),
    ('[domain 2]\nclasses = 2\n', EmptyDomain, None),
    ('[domain 2]\nclasses = 2\ncase = onlyone\n', ParseError, 3),
    ('[domain 9]\nclasses = 2\n', ParseError, 1),
    ('case = a, b\n', ParseError, 1),
    ('[domain 0]\nclasses = two\n', ParseError, 2),
    ('[domain 0]\ncolour = red\n', ParseError, 2),
    ('[domain 0]\ncase = a, b\n', ParseError, 1),
])
def test_manifest_errors(tmp_path, text, error, line):

    with pytest.raises(error) as info:
        loadvolumes.load_manifest(_write(tmp_path, text))
    if line is not None:
        assert info.value.line == line


def test_ratings_table(tmp_path):

    path = str(tmp_path / 'ratings.csv')
    loadvolumes.write_ratings([(str(tmp_path / 'n0.nii.gz'), [1, 2, 2, 3]), (str(tmp_path / 'n1.nii.gz'), [5, 4])],
                              path)

    rows = loadvolumes.load_ratings(path)
    assert rows == [(str(tmp_path / 'n0.nii.gz'), [1, 2, 2, 3]), (str(tmp_path / 'n1.nii.gz'), [5, 4])]
