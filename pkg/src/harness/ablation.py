"""Ablation runs: the MSPFE/PPVL grid and the decoder sweep.

Every variant trains from the same seed on the same data; only the model
overrides differ.
"""
import dataclasses
import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from src.harness.evaluation import evaluate_predictions, predict
from src.harness.trainer import prepare_run, resolve_model_config, train
from src.utils.config_utils import save_json
from src.utils.errors import ConfigError, UnknownVariantError

logger = logging.getLogger(__name__)

VARIANTS = {
    'full': {},
    'no_mspfe': {'use_mspfe': False},
    'no_ppvl': {'use_ppvl': False},
    'no_mspfe_no_ppvl': {'use_mspfe': False, 'use_ppvl': False},
    'sw_msa': {'decoder': 'sw_msa'},
    'global_msa': {'decoder': 'global_msa'},
    'spiral_conv': {'decoder': 'spiral_conv'},
    'depthwise_conv': {'decoder': 'depthwise_conv'},
}
MODULE_GRID = ('no_mspfe_no_ppvl', 'no_mspfe', 'no_ppvl', 'full')
DECODER_SWEEP = ('global_msa', 'spiral_conv', 'depthwise_conv', 'sw_msa')
SINGLE_REMOVALS = ('no_mspfe', 'no_ppvl', 'global_msa', 'spiral_conv', 'depthwise_conv')
DECODER_LABELS = {'sw_msa': 'Spiral window MSA', 'global_msa': 'Global MSA',
                  'spiral_conv': 'Spiral conv', 'depthwise_conv': 'Depthwise spiral conv'}


@dataclass
class AblationRow:
    variant: str
    use_mspfe: bool
    use_ppvl: bool
    decoder: str
    auc_3d: float
    pa_mpjpe: float
    pa_mpvpe: float
    val_loss: float
    pck_curve: list

    def to_dict(self):
        return {'variant': self.variant, 'use_mspfe': self.use_mspfe, 'use_ppvl': self.use_ppvl,
                'decoder': self.decoder, 'auc_3d': self.auc_3d, 'pa_mpjpe': self.pa_mpjpe,
                'pa_mpvpe': self.pa_mpvpe, 'val_loss': self.val_loss}


def variant_overrides(name, base_overrides=None):
    if name not in VARIANTS:
        raise UnknownVariantError(f"unknown variant '{name}'; expected one of {', '.join(VARIANTS)}",
                                  variant=name)
    return {**(base_overrides or {}), **VARIANTS[name]}


def expand_variants(names):
    """Expand the ``modules`` and ``decoders`` shorthands."""
    expanded = []
    for name in names:
        group = {'modules': MODULE_GRID, 'decoders': DECODER_SWEEP}.get(name, (name,))
        expanded.extend(v for v in group if v not in expanded)
    for name in expanded:
        variant_overrides(name)
    return expanded


def _variant_config(run_cfg, name):
    return run_cfg.with_overrides(output_dir=str(Path(run_cfg.output_dir) / name),
                                  model_overrides=variant_overrides(name, run_cfg.model_overrides))


def run_variant(run_cfg, name, context):
    variant_cfg = _variant_config(run_cfg, name)
    model_cfg = resolve_model_config(variant_cfg)
    result = train(variant_cfg, context=dataclasses.replace(context, model_config=model_cfg))
    final = result.history[-1]
    _, pred_vertices = predict(result.model, _images(context.val_set), threads=run_cfg.device_threads)
    report = evaluate_predictions(pred_vertices, np.stack([s.gt_mesh for s in context.val_set]),
                                  context.template.regress_joints(pred_vertices),
                                  np.stack([s.gt_joints for s in context.val_set]))
    row = AblationRow(name, model_cfg.use_mspfe, model_cfg.use_ppvl, model_cfg.decoder,
                      report.metrics['auc_3d'], report.metrics['pa_mpjpe'], report.metrics['pa_mpvpe'],
                      final['val_loss'], report.pck_curve)
    logger.info("Variant %s: AUC %.3f, PJ %.2f, PV %.2f", name, row.auc_3d, row.pa_mpjpe, row.pa_mpvpe)
    return row


def _images(samples):
    return np.stack([s.image for s in samples]).transpose(0, 3, 1, 2)


def ablation_run(run_cfg, variants):
    """Train each variant under one seed; writes ``ablation.json``, ``ablation.txt`` and ``pck_curves.json``."""
    names = expand_variants(variants)
    if run_cfg.val_size < 1:
        raise ConfigError("ablation needs a validation set to compare variants")
    context = prepare_run(run_cfg)
    rows, trained = [], {}
    for name in names:
        # "full" and "sw_msa" resolve to the same network; train it once
        key = json.dumps(resolve_model_config(_variant_config(run_cfg, name)).to_dict(), sort_keys=True)
        if key in trained:
            logger.info("Variant %s matches %s; reusing its results", name, trained[key].variant)
            rows.append(dataclasses.replace(trained[key], variant=name))
            continue
        trained[key] = run_variant(run_cfg, name, context)
        rows.append(trained[key])
    output = Path(run_cfg.output_dir)
    output.mkdir(parents=True, exist_ok=True)
    save_json({'rows': [row.to_dict() for row in rows], 'full_not_worse': full_not_worse(rows)},
              output / 'ablation.json')
    save_json({row.variant: row.pck_curve for row in rows}, output / 'pck_curves.json')
    with open(output / 'ablation.txt', 'w', encoding='utf-8') as f:
        f.write(render_table(rows))
    return rows


def full_not_worse(rows):
    """For each single-removal variant present: is the full model's validation loss no higher?"""
    full = next((r for r in rows if r.variant in ('full', 'sw_msa')), None)
    if full is None:
        return {}
    return {r.variant: bool(full.val_loss <= r.val_loss) for r in rows if r.variant in SINGLE_REMOVALS}


def _check(flag):
    return '✓' if flag else ''


def render_table(rows):
    """Text tables in the layout of the module and decoder comparisons."""
    lines = []
    module_rows = [r for r in rows if r.variant in MODULE_GRID]
    decoder_rows = [r for r in rows if r.variant in DECODER_SWEEP]
    if module_rows:
        lines.append(f"{'MSPFE':^7}{'PPVL':^7}{'AUC':>8}{'PJ':>8}{'PV':>8}")
        for r in module_rows:
            lines.append(f"{_check(r.use_mspfe):^7}{_check(r.use_ppvl):^7}"
                         f"{r.auc_3d:>8.3f}{r.pa_mpjpe:>8.2f}{r.pa_mpvpe:>8.2f}")
    if decoder_rows:
        if lines:
            lines.append('')
        lines.append(f"{'Regressor':<24}{'AUC':>8}{'PJ':>8}{'PV':>8}")
        for r in decoder_rows:
            lines.append(f"{DECODER_LABELS[r.decoder]:<24}{r.auc_3d:>8.3f}{r.pa_mpjpe:>8.2f}{r.pa_mpvpe:>8.2f}")
    comparison = full_not_worse(rows)
    if comparison:
        lines.append('')
        lines.append('Full model validation loss <= variant')
        for variant, holds in comparison.items():
            lines.append(f"  {variant:<22}{'yes' if holds else 'no':>6}")
    return '\n'.join(lines) + '\n'
