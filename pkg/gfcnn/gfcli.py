""" Command-line interface: gfcnn {convert,train,eval,params,synth}. """

import argparse
import logging
import sys

import numpy as np

from gfcnn import gfarch
from gfcnn import gfdata
from gfcnn import gfeval
from gfcnn import gftrain


logger = logging.getLogger(__name__)


def _arch_text(args):
    if args.arch is not None and args.model is not None:
        raise ValueError('give either an architecture string or --model.')
    if args.model is not None:
        if args.model not in gfarch.REFERENCE_MODELS:
            raise ValueError('--model must be one of %s'
                             % sorted(gfarch.REFERENCE_MODELS))
        return gfarch.REFERENCE_MODELS[args.model][1 if args.use_global
                                                   else 0]
    if args.arch is None:
        raise ValueError('an architecture string or --model is required.')
    return args.arch


def cmd_convert(args):
    schema = gfdata.CsvSchema(label=args.label_column, run=args.run_column,
                              variables=args.variables, drop=args.drop)
    series = gfdata.load_csv(args.csv, schema)
    if args.classes is not None:
        series = gfdata.SeriesSet(series.runs, n_classes=args.classes)
    if args.stats is not None:
        stats = gfdata.load_stats(args.stats)
    else:
        stats = gfdata.compute_norm_stats(series)
        stats_out = args.stats_out or args.out + '.stats.csv'
        gfdata.save_stats(stats, stats_out)
        logger.info('wrote normalization statistics to %s', stats_out)
    dataset = gfdata.make_images(gfdata.normalize(series, stats), args.window,
                                 jobs=args.jobs)
    gfdata.save_images(dataset, args.out)
    print('%d images (%d x %d, %d classes) written to %s'
          % (len(dataset), dataset.n, dataset.w, dataset.n_classes, args.out))
    return 0


def _hyperparams(args):
    hp = gftrain.HyperParams(batch_size=args.batch_size, epochs=args.epochs,
                             learning_rate=args.lr,
                             dropout_rate=args.dropout,
                             optimizer=args.optimizer, seed=args.seed)
    gftrain.check_hyperparams(hp)
    return hp


def _train_manifest(hp, digests):
    extra = [('train.%s' % key, value)
             for key, value in zip(hp._fields, hp)]
    extra.append(('train.images_sha256', digests[0]))
    if digests[1] is not None:
        extra.append(('train.eval_images_sha256', digests[1]))
    extra.append(('train.inputs', 'pixels/255'))
    return extra


def cmd_train(args):
    text = _arch_text(args)
    # syntax errors surface before any data is read
    gfarch.parse_arch(text)
    hp = _hyperparams(args)
    if args.repeat < 1:
        raise ValueError('--repeat must be >= 1.')
    train_set = gfdata.load_images(args.images)
    eval_set = None
    digests = [gfdata.images_digest(args.images), None]
    if args.eval is not None:
        eval_set = gfdata.load_images(args.eval)
        digests[1] = gfdata.images_digest(args.eval)
    spec = gfarch.parse_arch(text, (train_set.n, train_set.w),
                             train_set.n_classes)
    dtype = np.dtype(args.precision)
    seeds = list(range(args.seed, args.seed + args.repeat))
    results = gftrain.repeat_train(spec, train_set, hp, seeds, eval_set,
                                   dtype=dtype)
    for seed, result in zip(seeds, results):
        suffix = '' if args.repeat == 1 else '.seed%d' % seed
        run_hp = hp._replace(seed=seed)
        model_path = args.out + suffix
        result.model.dump(model_path, _train_manifest(run_hp, digests))
        logger.info('wrote model to %s', model_path)
        if args.history is not None:
            result.history.write(args.history + suffix)
            logger.info('wrote history to %s', args.history + suffix)
        line = 'seed %d: final loss %.6f' % (seed, result.history.losses[-1])
        if result.report is not None:
            line += ', macro FDR %.4f' % result.report.macro_fdr
        print(line)
    if eval_set is not None and args.repeat > 1:
        summary = gfeval.summarize_runs([r.report for r in results])
        print('macro FDR over %d runs: mean %.4f, min %.4f, max %.4f'
              % (args.repeat, summary.mean, summary.min, summary.max))
    return 0


def cmd_eval(args):
    model = gfarch.load_model(args.model_path)
    dataset = gfdata.load_images(args.images)
    if dataset.n_classes != model.spec.n_classes:
        raise ValueError('image set has %d classes, model has %d'
                         % (dataset.n_classes, model.spec.n_classes))
    report = gftrain.evaluate(model, dataset, args.batch_size, args.jobs,
                              metadata={'model': args.model_path,
                                        'arch': model.spec.text,
                                        'images': args.images})
    if args.report is not None:
        report.write(args.report)
        logger.info('wrote report to %s', args.report)
    print('macro FDR %.4f' % report.macro_fdr)
    return 0


def _format_shape(shape):
    return '(%s)' % ', '.join(str(s) for s in shape)


def cmd_params(args):
    text = _arch_text(args)
    spec = gfarch.parse_arch(text, tuple(args.input_shape), args.classes)
    for step in gfarch.trace_shapes(spec):
        name = step.layer if isinstance(step.layer, str) \
            else gfarch.format_layer(step.layer)
        print('%-10s %s' % (name, _format_shape(step.shape)))
    count = gfarch.spec_params(spec)
    print('parameters %s (conv %s, mlp %s, fc %s)'
          % tuple('{:,}'.format(c) for c in count))
    if spec.global_feature is not None:
        base = gfarch.spec_params(spec.without_global())
        overhead, rest = gfarch.complexity(spec)
        print('CNN counterpart %s: %s parameters, global feature adds +%s'
              % (spec.without_global().text, '{:,}'.format(base.total),
                 '{:,}'.format(count.total - base.total)))
        print('n_mlp + n_fc2 = %s %s n_conv + n_fc1 = %s'
              % ('{:,}'.format(overhead), '<' if overhead < rest else '>=',
                 '{:,}'.format(rest)))
    return 0


def cmd_synth(args):
    cfg = gfdata.SynthConfig(n=args.n, w=args.w, classes=args.classes,
                             runs=args.runs, samples=args.samples,
                             gamma=args.gamma, sigma=args.sigma, phi=args.phi,
                             shift=args.shift, shifted=args.shifted,
                             pairs=args.pairs)
    series = gfdata.gen_synthetic(cfg, args.seed, args.structure_seed)
    gfdata.write_csv(series, args.out)
    print('%d runs of %d x %d written to %s (%d windows of width %d per run)'
          % (len(series), cfg.samples, cfg.n, args.out, cfg.samples // cfg.w,
             cfg.w))
    return 0


def _add_arch_arguments(parser):
    parser.add_argument('arch', nargs='?', default=None,
                        help="architecture, e.g. 'C(16)-P(2)-G(10)-F(100)*'")
    parser.add_argument('--model', type=int, default=None,
                        help='reference model number 1-6 instead of a string')
    parser.add_argument('--global', dest='use_global', action='store_true',
                        help='with --model: the GF-CNN variant')


def build_parser():
    defaults = gftrain.HyperParams()
    synth = gfdata.SynthConfig()
    parser = argparse.ArgumentParser(prog='gfcnn')
    parser.add_argument('-v', '--verbose', action='store_true')
    commands = parser.add_subparsers(dest='command')
    commands.required = True

    p = commands.add_parser('convert', help='CSV series to a GFIM image set')
    p.add_argument('csv')
    p.add_argument('out')
    p.add_argument('--window', type=int, default=20)
    p.add_argument('--stats', default=None,
                   help='normalize with these statistics (test data)')
    p.add_argument('--stats-out', default=None,
                   help='where computed statistics go (default out.stats.csv)')
    p.add_argument('--label-column', default='fault')
    p.add_argument('--run-column', default='run')
    p.add_argument('--variables', nargs='+', default=None)
    p.add_argument('--drop', nargs='+', default=())
    p.add_argument('--classes', type=int, default=None)
    p.add_argument('--jobs', type=int, default=1)
    p.set_defaults(func=cmd_convert)

    p = commands.add_parser('train', help='train a model on an image set')
    p.add_argument('images')
    _add_arch_arguments(p)
    p.add_argument('--out', required=True)
    p.add_argument('--history', default=None)
    p.add_argument('--eval', default=None)
    p.add_argument('--batch-size', type=int, default=defaults.batch_size)
    p.add_argument('--epochs', type=int, default=defaults.epochs)
    p.add_argument('--lr', type=float, default=defaults.learning_rate)
    p.add_argument('--dropout', type=float, default=defaults.dropout_rate)
    p.add_argument('--optimizer', choices=('adam', 'sgd'),
                   default=defaults.optimizer)
    p.add_argument('--seed', type=int, default=defaults.seed)
    p.add_argument('--precision', choices=('float32', 'float64'),
                   default='float32')
    p.add_argument('--repeat', type=int, default=1)
    p.set_defaults(func=cmd_train)

    p = commands.add_parser('eval', help='evaluate a model on an image set')
    p.add_argument('model_path')
    p.add_argument('images')
    p.add_argument('--report', default=None)
    p.add_argument('--batch-size', type=int, default=defaults.batch_size)
    p.add_argument('--jobs', type=int, default=1)
    p.set_defaults(func=cmd_eval)

    p = commands.add_parser('params', help='parameter and shape audit')
    _add_arch_arguments(p)
    p.add_argument('--input-shape', type=int, nargs=2,
                   default=list(gfarch.DEFAULT_INPUT))
    p.add_argument('--classes', type=int, default=gfarch.DEFAULT_CLASSES)
    p.set_defaults(func=cmd_params)

    p = commands.add_parser('synth', help='write a synthetic data set as CSV')
    p.add_argument('out')
    for name in synth._fields:
        value = getattr(synth, name)
        p.add_argument('--%s' % name, type=type(value), default=value)
    p.add_argument('--seed', type=int, default=0)
    p.add_argument('--structure-seed', type=int, default=None,
                   help='class structure seed, shared by train and test sets')
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose
                        else logging.WARNING,
                        format='%(name)s: %(message)s')
    try:
        return args.func(args)
    except (ValueError, TypeError, OSError) as e:
        print('gfcnn %s: error: %s' % (args.command, e), file=sys.stderr)
        return 1


if __name__ == '__main__':
    sys.exit(main())
