import argparse
import logging
import os
import sys

from .. import batchanalyse
from ..med3d_tools import buildmodel, loadvolumes, savemodel, synthvolumes, trainmodel
from ..med3d_tools.med3derrors import Med3DError
from . import runconfig

logger = logging.getLogger(__name__)

LOG_FORMAT = '%(asctime)s %(levelname)s %(name)s: %(message)s'


def configure_logging(verbose):

    level = [logging.WARNING, logging.INFO, logging.DEBUG][min(verbose, 2)]
    root = logging.getLogger()
    for handler in list(root.handlers):
        root.removeHandler(handler)
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter(LOG_FORMAT))
    root.addHandler(handler)
    root.setLevel(level)


def _add_run_flags(p):

    g = p.add_argument_group('run')
    g.add_argument('--config', help='INI file with [run] [model] [plan] [augment] sections')
    g.add_argument('--outdir', help='output directory (default med3d_out)')
    g.add_argument('--seed', type=int, help='random seed (default 0, or $MED3D_SEED)')
    g.add_argument('--workers', type=int, help='prefetch / preprocessing workers; 0 is sequential (default 0)')


def _add_model_flags(p):

    g = p.add_argument_group('model')
    g.add_argument('--depth', type=int, help='ResNet depth: 10, 18, 34, 50, 101, 152 or 200 (default 10)')
    g.add_argument('--base-width', type=int, help='channels of the stem and first stage (default 64)')
    g.add_argument('--decoder-width', type=int, help='channels of the first segmentation head group (default 256)')
    g.add_argument('--dilation-rate', type=int, help='dilation of stages 3 and 4 (default 2)')


def _add_plan_flags(p):

    g = p.add_argument_group('plan')
    g.add_argument('--epochs', type=int, help='training epochs (default 1)')
    g.add_argument('--batch-size', type=int, help='volumes per optimizer step (default 1)')
    g.add_argument('--fraction', type=float, help='fraction of training cases used, in (0, 1] (default 1.0)')
    g.add_argument('--domains', help='comma separated domain ids to train on (default all)')
    g.add_argument('--eval-every', type=int, help='steps between transfer evaluations (default 10)')
    g.add_argument('--patch-size', type=int, help='edge of the cubic training patch (default 32)')
    g.add_argument('--holdout-frac', type=float, help='held-out share of each domain (default 0.1)')
    g.add_argument('--lr', help='learning rate (default: 0.1 SGD pretrain, 0.001 transfer, 0.01 scratch)')
    g.add_argument('--freeze-encoder', action='store_const', const=True, help='keep encoder weights fixed')

    g = p.add_argument_group('augment')
    g.add_argument('--max-translate', type=float, help='translation limit as a fraction of the target (default 0.1)')
    g.add_argument('--rotate', help='rotation range in degrees, lo,hi (default -5,5)')
    g.add_argument('--scale', help='scaling range, lo,hi (default 0.8,1.2)')


def _float_pair(text):

    try:
        values = [float(v) for v in text.split(',')]
    except ValueError:
        raise argparse.ArgumentTypeError('expected two comma separated numbers')
    if len(values) != 2:
        raise argparse.ArgumentTypeError('expected two comma separated numbers')
    return tuple(values)


def _number_list(cast):

    def parse(text):
        try:
            return [cast(v) for v in text.split(',') if v]
        except ValueError:
            raise argparse.ArgumentTypeError('expected a comma separated list')
    return parse


def build_parser():

    parser = argparse.ArgumentParser(prog='med3d', description='Multi-domain 3D medical segmentation pre-training.')
    parser.add_argument('-v', '--verbose', action='count', default=0, help='-v for progress, -vv for debug output')
    sub = parser.add_subparsers(dest='command', metavar='command')
    sub.required = True

    p = sub.add_parser('gen-synthetic', help='write a seeded synthetic multi-domain dataset')
    _add_run_flags(p)
    p.add_argument('--domains', dest='domain_count', type=int, default=8, help='number of domains, 1-8 (default 8)')
    p.add_argument('--extent', type=_number_list(int), default=[20, 28], help='volume extent range lo,hi (default 20,28)')
    p.add_argument('--nodules', type=int, default=0, help='also write a rated nodule set with this many cases')
    p.set_defaults(func=cmd_gen_synthetic)

    p = sub.add_parser('normalize', help='resample, clip and z-score every case of a manifest')
    _add_run_flags(p)
    p.add_argument('--manifest', required=True, help='dataset manifest')
    p.add_argument('--spacing-mode', choices=('median', 'mean'), default='median',
                   help='per-domain target spacing (default median)')
    p.add_argument('--window', type=_float_pair, help='intensity window lo,hi applied before clipping')
    p.set_defaults(func=cmd_normalize)

    p = sub.add_parser('pretrain', help='train the shared encoder with one decoder branch per domain')
    _add_run_flags(p)
    _add_model_flags(p)
    _add_plan_flags(p)
    p.add_argument('--manifest', required=True, help='normalised dataset manifest')
    p.set_defaults(func=cmd_pretrain)

    for task in ('seg', 'cls'):
        p = sub.add_parser('transfer-' + task, help='train a {} network from a checkpoint or scratch'.format(
            'segmentation' if task == 'seg' else 'classification'))
        _add_run_flags(p)
        _add_model_flags(p)
        _add_plan_flags(p)
        p.add_argument('--init', required=True, help='med3d:<checkpoint> or scratch')
        if task == 'seg':
            p.add_argument('--manifest', required=True, help='manifest holding the target task')
            p.add_argument('--domain', type=int, default=0, help='domain id of the target task (default 0)')
        else:
            p.add_argument('--ratings', required=True, help='volume,ratings table of the nodule set')
        p.set_defaults(func=cmd_transfer, task=task)

    p = sub.add_parser('eval', help='score predictions (or a saved model) against ground truth')
    _add_run_flags(p)
    p.add_argument('--pred', help='directory of predicted label files')
    p.add_argument('--truth', help='directory of ground-truth label files with the same names')
    p.add_argument('--classes', type=int, default=2, help='class count of the label files (default 2)')
    p.add_argument('--model', help='checkpoint to predict with instead of --pred')
    p.add_argument('--manifest', help='manifest of the cases to predict with --model')
    p.add_argument('--domain', type=int, default=0, help='domain id to evaluate with --model (default 0)')
    p.add_argument('--patch-size', type=int, help='prediction patch edge (default 32)')
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser('experiment', help='domain-variety or data-fraction study')
    _add_run_flags(p)
    _add_model_flags(p)
    _add_plan_flags(p)
    p.add_argument('--manifest', required=True, help='normalised dataset manifest')
    p.add_argument('--kind', choices=('fraction', 'variety'), required=True, help='which study to run')
    p.add_argument('--sizes', type=_number_list(int), default=[1, 2, 4, 8], help='co-training group sizes')
    p.add_argument('--fractions', type=_number_list(float), default=[0.1, 0.2, 0.4, 0.8, 1.0],
                   help='data fractions')
    p.set_defaults(func=cmd_experiment)

    p = sub.add_parser('two-stage', help='coarse localisation then fine segmentation of one domain')
    _add_run_flags(p)
    _add_model_flags(p)
    _add_plan_flags(p)
    p.add_argument('--manifest', required=True, help='normalised dataset manifest')
    p.add_argument('--domain', type=int, default=0, help='two-class domain to segment (default 0)')
    p.add_argument('--init', default='scratch', help='med3d:<checkpoint> or scratch (default scratch)')
    p.add_argument('--expand', type=_float_pair, default=(0., 0.3), help='ROI expansion fraction range lo,hi')
    p.set_defaults(func=cmd_two_stage)

    return parser


def _parse_init(text):

    if text == 'scratch':
        return 'scratch', None
    if text.startswith('med3d:') and len(text) > len('med3d:'):
        return 'med3d_ckpt', savemodel.load_checkpoint(text[len('med3d:'):])

    raise ValueError('--init must be med3d:<checkpoint> or scratch')


def _select_domain(manifest, domain_id):

    for d in loadvolumes.load_manifest(manifest):
        if d.domain_id == domain_id:
            return d

    raise ValueError('domain {} is not in {}'.format(domain_id, manifest))


# Subcommands

def cmd_gen_synthetic(args, cfg):

    specs = synthvolumes.generate_suite(cfg['seed'], args.domain_count, tuple(args.extent))
    _, manifest = synthvolumes.write_suite(specs, cfg['outdir'])
    logger.info('Synthetic suite manifest: %s', manifest)

    if args.nodules:
        synthvolumes.generate_nodules(os.path.join(cfg['outdir'], 'nodules'), args.nodules, cfg['seed'])


def cmd_normalize(args, cfg):

    batchanalyse.batch_normalize(args.manifest, cfg['outdir'], cfg['workers'], args.spacing_mode, args.window)


def cmd_pretrain(args, cfg):

    domains = loadvolumes.load_manifest(args.manifest)
    model = buildmodel.build_med3d(cfg.model_config([(d.domain_id, d.class_count) for d in domains]))
    plan = cfg.train_plan('pretrain')

    ckpt, log = trainmodel.pretrain(model, domains, plan, cfg.augment_params())

    log.write(os.path.join(cfg['outdir'], 'pretrain_metrics.csv'))
    savemodel.save_checkpoint(ckpt, os.path.join(cfg['outdir'], 'pretrain.m3dc'))


def cmd_transfer(args, cfg):

    init, ckpt = _parse_init(args.init)

    if args.task == 'seg':
        data = trainmodel.TaskData.from_domain(_select_domain(args.manifest, args.domain))
    else:
        data = trainmodel.TaskData.from_ratings(args.ratings)

    mode = ('transfer_' if init == 'med3d_ckpt' else 'scratch_') + args.task
    model = buildmodel.build_transfer_model(cfg.model_config(), args.task, data.class_count, cfg['decoder_width'])
    plan = cfg.train_plan(mode)

    log, _ = trainmodel.transfer_train(model, data, plan, init, ckpt, cfg.augment_params())

    name = 'transfer_{}_{}'.format(args.task, 'med3d' if init == 'med3d_ckpt' else 'scratch')
    log.write(os.path.join(cfg['outdir'], name + '.csv'))
    savemodel.save_checkpoint(savemodel.checkpoint_from_model(model), os.path.join(cfg['outdir'], name + '.m3dc'))


def cmd_eval(args, cfg):

    out_csv = os.path.join(cfg['outdir'], 'evaluation.csv')

    if args.model:
        if not args.manifest:
            raise ValueError('--model needs --manifest')
        rows, skipped = batchanalyse.evaluate_model(args.model, args.manifest, args.domain, cfg['patch_size'], out_csv)
    else:
        if not (args.pred and args.truth):
            raise ValueError('give --pred and --truth, or --model and --manifest')
        rows, skipped = batchanalyse.evaluate_dirs(args.pred, args.truth, args.classes, out_csv)

    if skipped:
        logger.warning('%d cases skipped', len(skipped))
    if not rows:
        logger.error('No case could be evaluated')
        return 1

    return 0


def cmd_experiment(args, cfg):

    batchanalyse.run_experiment(args.kind, args.manifest, cfg['outdir'], cfg.train_plan('pretrain'),
                                cfg.model_config(), args.sizes, args.fractions, cfg.augment_params())


def cmd_two_stage(args, cfg):

    init, ckpt = _parse_init(args.init)
    domain = _select_domain(args.manifest, args.domain)
    plan = cfg.train_plan('transfer_seg' if init == 'med3d_ckpt' else 'scratch_seg')
    batchanalyse.two_stage_liver(domain, cfg.model_config(), plan, cfg['outdir'],
                                 ckpt if init == 'med3d_ckpt' else None, args.expand, cfg['decoder_width'])


def main(argv=None):

    parser = build_parser()
    args = parser.parse_args(argv)
    configure_logging(args.verbose)

    try:
        cfg = runconfig.resolve(args)
        cfg.write(cfg['outdir'])
        status = args.func(args, cfg)
    except KeyboardInterrupt:
        logger.error('Interrupted; unfinished outputs are left as *.partial')
        return 130
    except (Med3DError, OSError, ValueError) as err:
        logger.error('%s: %s', type(err).__name__, err)
        return 1

    return status or 0


def run():

    sys.exit(main())
