"""End-to-end training on synthetic hands.

A run regenerates its template, hierarchy and datasets from the seeds in
``RunConfig``; nothing random is read from disk. Each epoch appends one row
to ``train_log.csv`` and writes a checkpoint that ``train(..., resume_from=)``
continues from.
"""
import csv
import dataclasses
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from src.engine.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from src.engine.gradcheck import check_gradients
from src.engine.optim import Adam, StepDecay
from src.engine.tensor import Tensor, no_grad, precision
from src.harness.synthetic import generate_dataset, stack_samples
from src.harness.template import generate_template, random_skinning_assets, skinning_assets
from src.losses.losses import (LossTerms, ViewPair, consistency_losses, edge_loss, loss_weights_from_dict,
                               mesh_and_pose_loss, normal_loss, total_loss)
from src.losses.metrics import compute_metrics
from src.mesh.mesh_core import face_normals_array, icosahedron
from src.mesh.mesh_hierarchy import build_hierarchy, load_hierarchy, save_hierarchy
from src.model.config import ModelConfig
from src.model.stmr import STMR
from src.utils.config_utils import dataclass_from_dict, load_json_config, save_json
from src.utils.errors import ConfigError, TrainingDivergedError
from src.utils.rng import RngStreams

logger = logging.getLogger(__name__)

LOG_FILE = 'train_log.csv'
CHECKPOINT_DIR = 'checkpoints'
HIERARCHY_DIR = 'hierarchy'
VALIDATION_KEYS = ('pa_mpjpe', 'pa_mpvpe', 'auc_3d')


@dataclass
class RunConfig:
    epochs: int = 20
    batch_size: int = 32
    learning_rate: float = 1e-3
    decay_epoch: int = 16
    decay_factor: float = 10.0
    loss_weights: dict = field(default_factory=dict)
    dataset_size: int = 256
    val_size: int = 32
    paired: bool = True
    seed: int = 0
    template_seed: int = 0
    hierarchy_path: str = None
    model_config_path: str = 'config/model_config.json'
    model_overrides: dict = field(default_factory=dict)
    output_dir: str = 'runs/default'
    weight_decay: float = 0.0
    grad_clip: float = None
    device_threads: int = 1

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be positive")
        if self.dataset_size < 1 or self.val_size < 0:
            raise ConfigError("dataset_size must be positive and val_size non-negative")
        if self.learning_rate <= 0 or self.decay_factor <= 0:
            raise ConfigError("learning_rate and decay_factor must be positive")
        if self.device_threads < 1:
            raise ConfigError("device_threads must be at least 1")
        loss_weights_from_dict(self.loss_weights)

    @classmethod
    def long_schedule(cls, **changes):
        """48 epochs at 1e-3, divided by 10 from epoch 38, batch 32."""
        return cls(**{'epochs': 48, 'decay_epoch': 38, 'batch_size': 32, 'learning_rate': 1e-3, **changes})

    def with_overrides(self, **changes):
        return dataclasses.replace(self, **changes)

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data):
        return dataclass_from_dict(cls, data)

    @classmethod
    def load(cls, path):
        return cls.from_dict(load_json_config(path))


@dataclass
class RunContext:
    """Everything a run derives from its config before the first step."""
    template: object
    hierarchy: object
    hierarchy_path: str
    model_config: ModelConfig
    assets: object
    train_set: list
    val_set: list


@dataclass
class TrainResult:
    model: STMR
    checkpoint_path: Path
    history: list
    context: RunContext


def resolve_model_config(run_cfg):
    base = ModelConfig.load(run_cfg.model_config_path).to_dict()
    return ModelConfig.from_dict({**base, **run_cfg.model_overrides})


def prepare_run(run_cfg):
    model_cfg = resolve_model_config(run_cfg)
    template = generate_template(run_cfg.template_seed)
    output = Path(run_cfg.output_dir)
    if run_cfg.hierarchy_path:
        hierarchy_path = Path(run_cfg.hierarchy_path)
        hierarchy = load_hierarchy(hierarchy_path)
    else:
        hierarchy_path = output / HIERARCHY_DIR
        hierarchy = build_hierarchy(template.mesh, num_levels=len(model_cfg.vertex_counts) - 1,
                                    K=model_cfg.spiral_length)
        save_hierarchy(hierarchy, hierarchy_path)
    assets = skinning_assets(template, hierarchy)
    train_seed, val_seed = RngStreams(run_cfg.seed).dataset_seeds()
    image_size = (model_cfg.image_height, model_cfg.image_width)
    train_set = generate_dataset(template, run_cfg.dataset_size, run_cfg.paired, train_seed,
                                 image_size, run_cfg.device_threads)
    val_set = generate_dataset(template, run_cfg.val_size, False, val_seed, image_size, run_cfg.device_threads)
    return RunContext(template, hierarchy, str(hierarchy_path), model_cfg, assets, train_set, val_set)


def build_model(model_cfg, hierarchy, assets, seed):
    return STMR(model_cfg, hierarchy, assets, RngStreams(seed).init)


def build_toy_model(model_cfg, seed=0):
    """Two-level icosahedron model with random skinning, for gradient checks."""
    streams = RngStreams(seed)
    hierarchy = build_hierarchy(icosahedron(), num_levels=len(model_cfg.vertex_counts) - 1,
                                K=model_cfg.spiral_length)
    assets = random_skinning_assets(hierarchy, streams.assets)
    return STMR(model_cfg, hierarchy, assets, streams.init), hierarchy


@dataclass
class Batch:
    images: np.ndarray
    meshes: np.ndarray
    poses: np.ndarray
    pair: ViewPair = None

    @property
    def size(self):
        """First-view count; paired batches hold twice as many images."""
        return len(self.images) // (2 if self.pair is not None else 1)


def make_batch(samples, paired):
    first = stack_samples(samples)
    if not paired:
        return Batch(first['images'], first['meshes'], first['poses'])
    second = stack_samples([s.paired for s in samples])
    pair = ViewPair(np.stack([s.rotation for s in samples]), np.stack([s.affine for s in samples]))
    return Batch(np.concatenate([first['images'], second['images']]),
                 np.concatenate([first['meshes'], second['meshes']]),
                 np.concatenate([first['poses'], second['poses']]), pair)


def compute_loss_terms(model, batch, faces, diagnostics=None):
    """Forward both views in one pass and collect every loss term."""
    pose, vertices = model(Tensor(batch.images))
    mesh, pose2d = mesh_and_pose_loss(vertices, batch.meshes, pose, batch.poses)
    terms = LossTerms(mesh=mesh, pose2d=pose2d, diagnostics={} if diagnostics is None else diagnostics)
    terms.normal = normal_loss(vertices, faces, face_normals_array(batch.meshes, faces), terms.diagnostics)
    terms.edge = edge_loss(vertices, batch.meshes, faces)
    if batch.pair is not None:
        b = batch.size
        terms.consistency3d, terms.consistency2d = consistency_losses(
            batch.pair, vertices[:b], vertices[b:], pose[:b], pose[b:])
    return terms, vertices


def _check_finite(terms, step):
    for name, value in terms.values().items():
        if not np.isfinite(value):
            raise TrainingDivergedError(name, step)


def validation_pass(model, samples, faces, weights, template, batch_size):
    """Mean validation loss and headline metrics; empty dict when there is no validation set."""
    if not samples:
        return {}
    losses, predictions = [], []
    with no_grad():
        for start in range(0, len(samples), batch_size):
            chunk = samples[start:start + batch_size]
            terms, vertices = compute_loss_terms(model, make_batch(chunk, paired=False), faces)
            losses.append(float(total_loss(terms, weights).data) * len(chunk))
            predictions.append(vertices.data.astype(np.float64))
    pred_vertices = np.concatenate(predictions)
    gt_vertices = np.stack([s.gt_mesh for s in samples])
    metrics = compute_metrics(pred_vertices, gt_vertices, template.regress_joints(pred_vertices),
                              np.stack([s.gt_joints for s in samples]))
    summary = {'val_loss': sum(losses) / len(samples)}
    summary.update({key: metrics[key] for key in VALIDATION_KEYS})
    return summary


def _log_columns():
    return (['epoch', 'step', 'lr', 'loss'] + [f"loss_{n}" for n in LossTerms().names()]
            + ['val_loss'] + list(VALIDATION_KEYS))


def _write_log_row(path, columns, row, fresh):
    with open(path, 'w' if fresh else 'a', newline='') as f:
        writer = csv.DictWriter(f, fieldnames=columns)
        if fresh:
            writer.writeheader()
        writer.writerow({key: row.get(key, '') for key in columns})


def _restore(model, optimizer, shuffle_rng, path):
    checkpoint = load_checkpoint(path)
    model.load_state_dict(checkpoint.params)
    optimizer.state.first_moments = dict(checkpoint.first_moments)
    optimizer.state.second_moments = dict(checkpoint.second_moments)
    optimizer.state.step = int(checkpoint.meta['step'])
    optimizer.state.lr = float(checkpoint.meta['lr'])
    shuffle_rng.bit_generator.state = checkpoint.meta['shuffle_state']
    logger.info("Resumed from %s after epoch %d", path, checkpoint.meta['epoch'])
    return int(checkpoint.meta['epoch']), list(checkpoint.meta.get('history', []))


def train(run_cfg, resume_from=None, context=None):
    """Train an STMR model; returns the model, the last checkpoint and the per-epoch history."""
    context = context or prepare_run(run_cfg)
    model_cfg = context.model_config
    output = Path(run_cfg.output_dir)
    output.mkdir(parents=True, exist_ok=True)
    weights = loss_weights_from_dict(run_cfg.loss_weights)
    faces = context.template.mesh.faces
    streams = RngStreams(run_cfg.seed)
    model = build_model(model_cfg, context.hierarchy, context.assets, run_cfg.seed)
    optimizer = Adam(model.parameters(), lr=run_cfg.learning_rate,
                     weight_decay=run_cfg.weight_decay, grad_clip=run_cfg.grad_clip)
    schedule = StepDecay(run_cfg.learning_rate, run_cfg.decay_epoch, run_cfg.decay_factor)

    start_epoch, history = 0, []
    if resume_from is not None:
        start_epoch, history = _restore(model, optimizer, streams.shuffle, resume_from)
    log_path = output / LOG_FILE
    columns = _log_columns()
    checkpoint_path = Path(resume_from) if resume_from is not None else None
    diagnostics = {}

    for epoch in range(start_epoch, run_cfg.epochs):
        optimizer.set_lr(schedule.lr_at(epoch))
        order = streams.shuffle.permutation(len(context.train_set))
        sums = dict.fromkeys(LossTerms().names(), 0.0)
        total_sum, seen = 0.0, 0
        for start in range(0, len(order), run_cfg.batch_size):
            chunk = [context.train_set[i] for i in order[start:start + run_cfg.batch_size]]
            batch = make_batch(chunk, run_cfg.paired)
            terms, _ = compute_loss_terms(model, batch, faces, diagnostics)
            _check_finite(terms, optimizer.state.step)
            loss = total_loss(terms, weights)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            for name, value in terms.values().items():
                sums[name] += value * len(chunk)
            total_sum += float(loss.data) * len(chunk)
            seen += len(chunk)
            logger.debug("step %d loss %.6f", optimizer.state.step, float(loss.data))

        row = {'epoch': epoch, 'step': optimizer.state.step, 'lr': repr(optimizer.state.lr),
               'loss': repr(total_sum / seen)}
        row.update({f"loss_{name}": repr(value / seen) for name, value in sums.items()})
        validation = validation_pass(model, context.val_set, faces, weights, context.template,
                                     run_cfg.batch_size)
        row.update({key: repr(value) for key, value in validation.items()})
        _write_log_row(log_path, columns, row, fresh=(epoch == 0 or not log_path.exists()))
        history.append({'epoch': epoch, 'loss': total_sum / seen, **validation})
        logger.info("Epoch %d/%d: loss %.4f%s", epoch + 1, run_cfg.epochs, total_sum / seen,
                    f", val PA-MPVPE {validation['pa_mpvpe']:.2f} mm" if validation else '')

        checkpoint_path = output / CHECKPOINT_DIR / f"epoch_{epoch:03d}"
        meta = {'epoch': epoch + 1, 'step': optimizer.state.step, 'lr': optimizer.state.lr,
                'shuffle_state': streams.shuffle.bit_generator.state,
                'run_config': run_cfg.to_dict(), 'model_config': model_cfg.to_dict(),
                'hierarchy_path': context.hierarchy_path, 'history': history}
        save_checkpoint(Checkpoint(model.state_dict(), optimizer.state.first_moments,
                                   optimizer.state.second_moments, meta), checkpoint_path)

    if diagnostics.get('zero_length_edges'):
        logger.warning("%d zero-length predicted edges were skipped over the run",
                       diagnostics['zero_length_edges'])
    save_json({'history': history}, output / 'history.json')
    return TrainResult(model, checkpoint_path, history, context)


def end_to_end_gradcheck(model_cfg, seed=0, max_entries=4):
    """Finite-difference check of every toy-model parameter against backprop, in float64."""
    with precision(np.float64):
        model, _ = build_toy_model(model_cfg, seed)
        rng = np.random.default_rng(seed)
        image = Tensor(rng.uniform(0.0, 1.0, size=(1, 3, model_cfg.image_height, model_cfg.image_width)))
        pose_weights = rng.normal(size=(1, model_cfg.num_joints, 2))
        mesh_weights = rng.normal(size=(1, model_cfg.fine_vertex_count, 3))

        def objective():
            pose, vertices = model(image)
            return (pose * pose_weights).sum() + (vertices * mesh_weights).sum() * (1.0 / model_cfg.vertex_scale_mm)

        errors = check_gradients(objective, model.parameters(), max_entries=max_entries,
                                 rng=np.random.default_rng(seed))
    worst = max(errors, key=errors.get)
    logger.info("Gradient check over %d tensors: worst %s (%.2e)", len(errors), worst, errors[worst])
    return errors
