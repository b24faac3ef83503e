"""
Run configuration: built-in defaults, overridden by an INI config file, then by the
MED3D_SEED environment variable (seed only), then by command line flags.

Config file grammar (configparser): sections [run] [model] [plan] [augment], one
`key = value` per line, `#` or `;` comments. Keys are the field names below.
"""

import configparser
import logging
import os
from collections import OrderedDict

from ..med3d_tools import buildmodel, normalizevolumes, trainmodel
from ..med3d_tools.med3derrors import IoFailure, ParseError

logger = logging.getLogger(__name__)

SEED_ENV = 'MED3D_SEED'


def _int_list(text):

    return [int(v) for v in text.replace(' ', '').split(',') if v]


def _float_pair(text):

    values = [float(v) for v in text.replace(' ', '').split(',')]
    if len(values) != 2:
        raise ValueError('expected two comma separated numbers, got {!r}'.format(text))
    return tuple(values)


def _bool(text):

    if isinstance(text, bool):
        return text
    lowered = str(text).strip().lower()
    if lowered in ('1', 'true', 'yes', 'on'):
        return True
    if lowered in ('0', 'false', 'no', 'off'):
        return False
    raise ValueError('expected a boolean, got {!r}'.format(text))


def _optional_float(text):

    return None if text in ('', None) else float(text)


# section -> field -> (default, parser); the argparse dest of every field is its name

FIELDS = OrderedDict([
    ('run', OrderedDict([
        ('outdir', ('med3d_out', str)),
        ('seed', (0, int)),
        ('workers', (0, int)),
    ])),
    ('model', OrderedDict([
        ('depth', (10, int)),
        ('base_width', (64, int)),
        ('decoder_width', (256, int)),
        ('dilation_rate', (2, int)),
    ])),
    ('plan', OrderedDict([
        ('epochs', (1, int)),
        ('batch_size', (1, int)),
        ('fraction', (1.0, float)),
        ('domains', ('', str)),
        ('eval_every', (10, int)),
        ('patch_size', (32, int)),
        ('holdout_frac', (0.1, float)),
        ('lr', ('', str)),
        ('freeze_encoder', (False, _bool)),
    ])),
    ('augment', OrderedDict([
        ('max_translate', (0.1, float)),
        ('rotate', ('-5,5', str)),
        ('scale', ('0.8,1.2', str)),
    ])),
])


class RunConfig(object):

    """Merged view of every tunable value; `sources` records where each came from."""

    def __init__(self):

        self.values = OrderedDict()
        self.sources = OrderedDict()
        for section, fields in FIELDS.items():
            for name, (default, _) in fields.items():
                self.values[name] = default
                self.sources[name] = 'default'

    def _set(self, name, raw, source):

        section = [s for s, fields in FIELDS.items() if name in fields][0]
        parser = FIELDS[section][name][1]
        try:
            self.values[name] = parser(raw)
        except ValueError as err:
            raise ParseError('{} ({}): {}'.format(name, source, err)) from err
        self.sources[name] = source

    def load_file(self, path):

        parser = configparser.ConfigParser(interpolation=None)
        try:
            with open(path, encoding='utf8') as f:
                parser.read_file(f)
        except configparser.Error as err:
            raise ParseError(str(err), getattr(err, 'lineno', None)) from err
        except OSError as err:
            raise IoFailure('cannot read config {}: {}'.format(path, err)) from err

        for section in parser.sections():
            if section not in FIELDS:
                raise ParseError('unknown section [{}] in {}'.format(section, path))
            for key, raw in parser[section].items():
                if key not in FIELDS[section]:
                    raise ParseError('unknown key {!r} in [{}] of {}'.format(key, section, path))
                self._set(key, raw, 'file')

    def load_env(self, environ=None):

        environ = os.environ if environ is None else environ
        if environ.get(SEED_ENV):
            self._set('seed', environ[SEED_ENV], 'env')

    def load_args(self, args):

        for name in self.values:
            value = getattr(args, name, None)
            if value is not None:
                self._set(name, value, 'flag')

    def __getitem__(self, name):

        return self.values[name]

    # Typed views

    def domain_subset(self):

        return _int_list(self['domains']) or None

    def model_config(self, branch_specs=()):

        return buildmodel.ModelConfig(depth=self['depth'], branch_specs=branch_specs, seed=self['seed'],
                                      base_width=self['base_width'], dilation_rate=self['dilation_rate'])

    def train_plan(self, mode):

        optimizer = None
        if self['lr']:
            optimizer = dict(trainmodel.DEFAULT_OPTIMIZER[mode], lr=float(self['lr']))

        return trainmodel.TrainPlan(mode=mode, epochs=self['epochs'], batch_size=self['batch_size'],
                                    optimizer=optimizer, data_fraction=self['fraction'],
                                    domain_subset=self.domain_subset(), seed=self['seed'],
                                    eval_every=self['eval_every'], patch_size=self['patch_size'],
                                    workers=self['workers'], freeze_encoder=self['freeze_encoder'],
                                    holdout_frac=self['holdout_frac'])

    def augment_params(self):

        return normalizevolumes.AugmentParams(max_translate_frac=self['max_translate'],
                                              rotate_deg=_float_pair(self['rotate']),
                                              scale=_float_pair(self['scale']), seed=self['seed'])

    def to_text(self):

        lines = []
        for section, fields in FIELDS.items():
            lines.append('[{}]'.format(section))
            for name in fields:
                value = self.values[name]
                if isinstance(value, bool):
                    value = 'true' if value else 'false'
                lines.append('{} = {}'.format(name, value))
            lines.append('')

        return '\n'.join(lines)

    def write(self, outdir):

        os.makedirs(outdir, exist_ok=True)
        path = os.path.join(outdir, 'resolved_config')
        try:
            with open(path, 'w', encoding='utf8') as f:
                f.write(self.to_text())
        except OSError as err:
            raise IoFailure('cannot write {}: {}'.format(path, err)) from err

        logger.info('Resolved configuration written to %s', path)

        return path


def resolve(args, environ=None):

    cfg = RunConfig()
    if getattr(args, 'config', None):
        cfg.load_file(args.config)
    cfg.load_env(environ)
    cfg.load_args(args)

    overridden = [n for n, s in cfg.sources.items() if s != 'default']
    logger.debug('Configuration overrides: %s', ', '.join('{}={}'.format(n, cfg.sources[n]) for n in overridden))

    return cfg
