"""Command-line entry point.

    hierarchy build   build the mesh hierarchy bundle from the synthetic template
    spiral dump       print one level's spiral table as JSON
    data gen          render a synthetic dataset to .npz (plus PNG previews)
    train             train from a run config
    eval              score a checkpoint; writes a JSON report
    ablate            train and compare model variants
    export-obj        write a checkpoint's predictions as OBJ meshes
    gradcheck         finite-difference check of the toy model

Failures print ``{"error": ..., "message": ...}`` on stderr and exit with 1.
"""
import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from src.harness.ablation import VARIANTS, ablation_run, render_table
from src.harness.evaluation import evaluate, export_predictions, load_model, predict
from src.harness.synthetic import generate_dataset, load_dataset, save_dataset, save_preview
from src.harness.template import generate_template
from src.harness.trainer import RunConfig, end_to_end_gradcheck, train
from src.mesh.mesh_hierarchy import build_hierarchy, load_hierarchy, save_hierarchy
from src.model.config import ModelConfig
from src.utils.errors import ConfigError, GradientError, StmrError, StorageError, UsageError
from src.utils.logging_utils import setup_logging
from src.utils.rng import RngStreams

logger = logging.getLogger(__name__)

DEFAULT_RUN_CONFIG = 'config/run_config.json'
DEFAULT_TOY_CONFIG = 'config/toy_model_config.json'
GRADCHECK_TOLERANCE = 1e-3


def _print_json(data):
    print(json.dumps(data, indent=2, sort_keys=True))


def _run_config(args):
    cfg = RunConfig.load(args.config or DEFAULT_RUN_CONFIG)
    changes = {}
    if args.seed is not None:
        changes['seed'] = args.seed
    if args.out is not None:
        changes['output_dir'] = args.out
    if args.device_threads is not None:
        changes['device_threads'] = args.device_threads
    return cfg.with_overrides(**changes) if changes else cfg


def cmd_hierarchy_build(args):
    template = generate_template(args.template_seed)
    hierarchy = build_hierarchy(template.mesh, num_levels=args.levels, K=args.spiral_length)
    out = Path(args.out or 'hierarchy')
    save_hierarchy(hierarchy, out)
    _print_json({'directory': str(out), 'vertex_counts': hierarchy.vertex_counts,
                 'diagnostics': hierarchy.diagnostics})


def cmd_spiral_dump(args):
    hierarchy = load_hierarchy(args.hierarchy)
    if not 0 <= args.level < len(hierarchy.spiral_tables):
        raise ConfigError(f"level {args.level} outside 0..{len(hierarchy.spiral_tables) - 1}")
    text = hierarchy.spiral_tables[args.level].to_json()
    if args.out:
        Path(args.out).write_text(text + '\n')
    else:
        print(text)


def cmd_data_gen(args):
    template = generate_template(args.template_seed)
    train_seed, _ = RngStreams(0 if args.seed is None else args.seed).dataset_seeds()
    samples = generate_dataset(template, args.count, args.paired, train_seed,
                               (args.image_size, args.image_size), args.device_threads or 1)
    out = Path(args.out or 'dataset.npz')
    save_dataset(samples, out)
    if args.previews:
        preview_dir = Path(args.previews)
        preview_dir.mkdir(parents=True, exist_ok=True)
        for index, sample in enumerate(samples[:args.preview_count]):
            save_preview(sample, preview_dir / f"sample_{index:04d}.png")
    _print_json({'file': str(out), 'count': len(samples), 'paired': args.paired})


def cmd_train(args):
    cfg = _run_config(args)
    if args.variant:
        cfg = cfg.with_overrides(model_overrides={**cfg.model_overrides, **VARIANTS[args.variant]})
    result = train(cfg, resume_from=args.resume)
    _print_json({'checkpoint': str(result.checkpoint_path), 'final': result.history[-1]})


def _eval_samples(args, loaded):
    if args.data:
        return load_dataset(args.data)
    cfg = loaded.run_config
    _, val_seed = RngStreams(cfg.seed if args.seed is None else args.seed).dataset_seeds()
    size = (loaded.model_config.image_height, loaded.model_config.image_width)
    return generate_dataset(loaded.template, max(cfg.val_size, 1), False, val_seed, size,
                            args.device_threads or 1)


def cmd_eval(args):
    loaded = load_model(args.checkpoint)
    samples = _eval_samples(args, loaded)
    report = evaluate(loaded, samples, threads=args.device_threads or 1, export_dir=args.export_dir)
    if args.out:
        report.save(args.out)
    _print_json(report.to_dict())


def cmd_ablate(args):
    cfg = _run_config(args)
    variants = args.variant or ['modules', 'decoders']
    rows = ablation_run(cfg, variants)
    print(render_table(rows), end='')


def cmd_export_obj(args):
    loaded = load_model(args.checkpoint)
    samples = _eval_samples(args, loaded)
    images = np.stack([s.image for s in samples]).transpose(0, 3, 1, 2)
    _, vertices = predict(loaded.model, images, threads=args.device_threads or 1)
    export_predictions(vertices, loaded.template.mesh.faces, args.out or 'predictions')


def cmd_gradcheck(args):
    model_cfg = ModelConfig.load(args.config or DEFAULT_TOY_CONFIG)
    errors = end_to_end_gradcheck(model_cfg, seed=0 if args.seed is None else args.seed)
    _print_json(errors)
    worst = max(errors.values())
    if worst >= GRADCHECK_TOLERANCE:
        raise GradientError(f"relative gradient error {worst:.2e} exceeds {GRADCHECK_TOLERANCE}",
                            worst=worst)


def _common(parser):
    parser.add_argument('--config', type=str, default=None, help='JSON config file')
    parser.add_argument('--seed', type=int, default=None, help='override the config seed')
    parser.add_argument('--out', type=str, default=None, help='output file or directory')
    parser.add_argument('--device-threads', type=int, default=None, help='worker threads')
    parser.add_argument('--log-file', type=str, default=None, help='also write logs here')
    parser.add_argument('--verbose', action='store_true', help='debug logging')


class _Parser(argparse.ArgumentParser):
    """Argument errors surface as UsageError so they share the JSON error record."""

    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def build_parser():
    parser = _Parser(prog='stmr', description='Spiral transformer hand-mesh reconstruction')
    commands = parser.add_subparsers(dest='command', required=True)

    hierarchy = commands.add_parser('hierarchy').add_subparsers(dest='action', required=True)
    build = hierarchy.add_parser('build', help='build the hierarchy bundle')
    _common(build)
    build.add_argument('--template-seed', type=int, default=0)
    build.add_argument('--levels', type=int, default=4)
    build.add_argument('--spiral-length', type=int, default=9)
    build.set_defaults(handler=cmd_hierarchy_build)

    spiral = commands.add_parser('spiral').add_subparsers(dest='action', required=True)
    dump = spiral.add_parser('dump', help='print a spiral table')
    _common(dump)
    dump.add_argument('--hierarchy', type=str, required=True)
    dump.add_argument('--level', type=int, default=0)
    dump.set_defaults(handler=cmd_spiral_dump)

    data = commands.add_parser('data').add_subparsers(dest='action', required=True)
    gen = data.add_parser('gen', help='render a synthetic dataset')
    _common(gen)
    gen.add_argument('--count', type=int, default=16)
    gen.add_argument('--paired', action='store_true')
    gen.add_argument('--image-size', type=int, default=128)
    gen.add_argument('--template-seed', type=int, default=0)
    gen.add_argument('--previews', type=str, default=None, help='directory for PNG previews')
    gen.add_argument('--preview-count', type=int, default=8)
    gen.set_defaults(handler=cmd_data_gen)

    train_parser = commands.add_parser('train', help='train from a run config')
    _common(train_parser)
    train_parser.add_argument('--variant', type=str, choices=sorted(VARIANTS), default=None)
    train_parser.add_argument('--resume', type=str, default=None, help='checkpoint directory')
    train_parser.set_defaults(handler=cmd_train)

    for name, handler in (('eval', cmd_eval), ('export-obj', cmd_export_obj)):
        sub = commands.add_parser(name)
        _common(sub)
        sub.add_argument('--checkpoint', type=str, required=True)
        sub.add_argument('--data', type=str, default=None, help='.npz dataset (default: regenerate validation set)')
        if name == 'eval':
            sub.add_argument('--export-dir', type=str, default=None)
        sub.set_defaults(handler=handler)

    ablate = commands.add_parser('ablate', help='train and compare variants')
    _common(ablate)
    ablate.add_argument('--variant', action='append', default=None,
                        help="variant name, 'modules' or 'decoders'; repeatable")
    ablate.set_defaults(handler=cmd_ablate)

    gradcheck = commands.add_parser('gradcheck', help='finite-difference check of the toy model')
    _common(gradcheck)
    gradcheck.set_defaults(handler=cmd_gradcheck)
    return parser


def _report(error):
    logger.error("%s", error)
    print(json.dumps(error.to_dict(), sort_keys=True, default=str), file=sys.stderr)
    return 1


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
    except UsageError as e:
        return _report(e)
    setup_logging(args.log_file, logging.DEBUG if args.verbose else logging.INFO)
    try:
        args.handler(args)
    except StmrError as e:
        return _report(e)
    except OSError as e:
        return _report(StorageError(str(e), path=e.filename))
    return 0


if __name__ == '__main__':
    sys.exit(main())
