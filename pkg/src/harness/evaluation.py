"""Scoring a trained checkpoint on a set of synthetic samples."""
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from src.engine.checkpoint import load_checkpoint
from src.engine.tensor import Tensor, no_grad
from src.harness.template import generate_template, skinning_assets
from src.harness.trainer import RunConfig, build_model, compute_loss_terms, make_batch
from src.losses.metrics import AUC_THRESHOLDS_MM, compute_metrics, pck_curve
from src.mesh.mesh_core import Mesh, save_obj
from src.mesh.mesh_hierarchy import load_hierarchy
from src.model.config import ModelConfig
from src.utils.config_utils import save_json
from src.utils.errors import ConfigMismatchError

logger = logging.getLogger(__name__)

EVAL_BATCH_SIZE = 16


@dataclass
class EvaluationReport:
    metrics: dict
    pck_curve: list
    sample_count: int
    losses: dict = field(default_factory=dict)

    def to_dict(self):
        return {'metrics': self.metrics, 'losses': self.losses, 'sample_count': self.sample_count,
                'pck_thresholds_mm': AUC_THRESHOLDS_MM.tolist(), 'pck_curve': self.pck_curve}

    def save(self, path):
        save_json(self.to_dict(), path)


@dataclass
class LoadedModel:
    model: object
    model_config: ModelConfig
    run_config: RunConfig
    template: object
    checkpoint_meta: dict


def evaluate_predictions(pred_vertices, gt_vertices, pred_joints, gt_joints):
    """Metric report for precomputed predictions."""
    gt_vertices = np.asarray(gt_vertices)
    metrics = compute_metrics(pred_vertices, gt_vertices, pred_joints, gt_joints)
    curve = pck_curve(pred_joints, gt_joints)
    count = 1 if gt_vertices.ndim == 2 else int(np.prod(gt_vertices.shape[:-2]))
    return EvaluationReport(metrics=metrics, pck_curve=[float(v) for v in curve], sample_count=count)


def load_model(checkpoint_dir):
    """Rebuild the network recorded in a training checkpoint."""
    checkpoint = load_checkpoint(checkpoint_dir)
    meta = checkpoint.meta
    run_cfg = RunConfig.from_dict(meta['run_config'])
    model_cfg = ModelConfig.from_dict(meta['model_config'])
    template = generate_template(run_cfg.template_seed)
    hierarchy = load_hierarchy(meta['hierarchy_path'])
    model = build_model(model_cfg, hierarchy, skinning_assets(template, hierarchy), run_cfg.seed)
    model.load_state_dict(checkpoint.params)
    return LoadedModel(model, model_cfg, run_cfg, template, meta)


def check_dataset(model_cfg, samples):
    expected_image = (model_cfg.image_height, model_cfg.image_width)
    for index, sample in enumerate(samples):
        if sample.image.shape[:2] != expected_image:
            raise ConfigMismatchError(f"sample {index} is {sample.image.shape[:2]}, model expects {expected_image}")
        if len(sample.gt_mesh) != model_cfg.fine_vertex_count:
            raise ConfigMismatchError(f"sample {index} has {len(sample.gt_mesh)} vertices, "
                                      f"model predicts {model_cfg.fine_vertex_count}")


def predict(model, images, batch_size=EVAL_BATCH_SIZE, threads=1):
    """[N, 3, H, W] images -> ([N, 21, 2] poses, [N, V, 3] meshes), in input order."""
    chunks = [images[start:start + batch_size] for start in range(0, len(images), batch_size)]

    def run(chunk):
        pose, vertices = model(Tensor(chunk))
        return pose.data.astype(np.float64), vertices.data.astype(np.float64)

    # no_grad is process-wide; workers must not toggle it
    with no_grad():
        if threads > 1:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                outputs = list(pool.map(run, chunks))
        else:
            outputs = [run(chunk) for chunk in chunks]
    return np.concatenate([o[0] for o in outputs]), np.concatenate([o[1] for o in outputs])


def _mean_losses(model, samples, faces):
    sums = {}
    with no_grad():
        for start in range(0, len(samples), EVAL_BATCH_SIZE):
            chunk = samples[start:start + EVAL_BATCH_SIZE]
            terms, _ = compute_loss_terms(model, make_batch(chunk, paired=False), faces)
            for name, value in terms.values().items():
                if name.startswith('consistency'):
                    continue
                sums[name] = sums.get(name, 0.0) + value * len(chunk)
    return {name: total / len(samples) for name, total in sums.items()}


def export_predictions(vertices, faces, directory):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for index, mesh_vertices in enumerate(vertices):
        save_obj(Mesh(mesh_vertices, faces), directory / f"prediction_{index:04d}.obj")
    logger.info("Exported %d predicted meshes to %s", len(vertices), directory)


def evaluate(model, samples, threads=1, export_dir=None):
    """Full metric and loss report for ``samples``.

    ``model`` is a checkpoint directory or an already loaded model.
    """
    loaded = model if isinstance(model, LoadedModel) else load_model(model)
    check_dataset(loaded.model_config, samples)
    images = np.stack([s.image for s in samples]).transpose(0, 3, 1, 2)
    _, pred_vertices = predict(loaded.model, images, threads=threads)
    gt_vertices = np.stack([s.gt_mesh for s in samples])
    report = evaluate_predictions(pred_vertices, gt_vertices, loaded.template.regress_joints(pred_vertices),
                                  np.stack([s.gt_joints for s in samples]))
    report.losses = _mean_losses(loaded.model, samples, loaded.template.mesh.faces)
    if export_dir is not None:
        export_predictions(pred_vertices, loaded.template.mesh.faces, export_dir)
    logger.info("Evaluated %d samples: PA-MPJPE %.2f mm, PA-MPVPE %.2f mm, AUC %.3f", len(samples),
                report.metrics['pa_mpjpe'], report.metrics['pa_mpvpe'], report.metrics['auc_3d'])
    return report
