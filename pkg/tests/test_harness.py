import contextlib
import io
import json
import os
import tempfile
import time
import unittest
from unittest import mock

import numpy as np

from src.harness.ablation import (DECODER_SWEEP, MODULE_GRID, AblationRow, ablation_run, expand_variants,
                                  full_not_worse, render_table, variant_overrides)
from src.harness.cli import main
from src.harness.evaluation import check_dataset, evaluate, evaluate_predictions, load_model, predict
from src.harness.synthetic import generate_dataset, load_dataset, save_dataset
from src.harness.template import NUM_JOINTS, NUM_NODES, generate_template
from src.harness.trainer import (CHECKPOINT_DIR, LOG_FILE, RunConfig, _check_finite, resolve_model_config,
                                 train)
from src.losses.losses import LossTerms
from src.losses.metrics import METRIC_KEYS, mpjpe_mpvpe
from src.mesh.mesh_core import bounding_box_diagonal, euler_characteristic, validate_manifold
from src.mesh.mesh_hierarchy import build_hierarchy, save_hierarchy
from src.utils.errors import ConfigError, ConfigMismatchError, TrainingDivergedError, UnknownVariantError
from src.utils.rng import RngStreams
from tests.fixtures import SLOW_TESTS, config_path

HIERARCHY_BUILD_SECONDS = 30.0

_shared = {}


def setUpModule():
    _shared['tmp'] = tempfile.TemporaryDirectory()
    _shared['template'] = generate_template(0)
    hierarchy_dir = os.path.join(_shared['tmp'].name, 'hierarchy')
    started = time.perf_counter()
    hierarchy = build_hierarchy(_shared['template'].mesh)
    _shared['build_seconds'] = time.perf_counter() - started
    _shared['vertex_counts'] = hierarchy.vertex_counts
    save_hierarchy(hierarchy, hierarchy_dir)
    _shared['hierarchy'] = hierarchy_dir


def tearDownModule():
    _shared['tmp'].cleanup()


def small_run(output_dir, **changes):
    settings = {'epochs': 1, 'batch_size': 2, 'dataset_size': 4, 'val_size': 2, 'paired': True,
                'model_config_path': config_path('small_model_config.json'),
                'hierarchy_path': _shared['hierarchy'], 'output_dir': output_dir}
    settings.update(changes)
    return RunConfig(**settings)


class TempDirTestCase(unittest.TestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.addCleanup(self.tmp.cleanup)

    def path(self, *parts):
        return os.path.join(self.tmp.name, *parts)


class TestTemplate(unittest.TestCase):
    def test_hierarchy_builds_quickly(self):
        self.assertEqual(_shared['vertex_counts'], [778, 389, 195, 98, 49])
        self.assertLess(_shared['build_seconds'], HIERARCHY_BUILD_SECONDS)

    def test_shape(self):
        template = _shared['template']
        self.assertEqual(template.mesh.vertex_count, 778)
        self.assertTrue(validate_manifold(template.mesh).ok)
        self.assertEqual(euler_characteristic(template.mesh), 2)
        self.assertEqual(template.skin_weights.shape, (778, NUM_NODES))
        np.testing.assert_allclose(template.skin_weights.sum(axis=1), 1.0, atol=1e-9)
        self.assertEqual(template.joint_regressor.shape, (NUM_JOINTS, 778))
        np.testing.assert_allclose(template.joint_regressor.sum(axis=1), 1.0, atol=1e-9)

    def test_deterministic(self):
        again = generate_template(0)
        np.testing.assert_array_equal(again.mesh.vertices, _shared['template'].mesh.vertices)
        np.testing.assert_array_equal(again.mesh.faces, _shared['template'].mesh.faces)


class TestSyntheticData(TempDirTestCase):
    @classmethod
    def setUpClass(cls):
        cls.samples = generate_dataset(_shared['template'], 3, paired=True, seed=7, image_size=(64, 64))

    def test_images(self):
        for sample in self.samples:
            self.assertEqual(sample.image.shape, (64, 64, 3))
            self.assertGreaterEqual(sample.image.min(), 0.0)
            self.assertLessEqual(sample.image.max(), 1.0)
            self.assertGreater((sample.image.sum(axis=-1) > 0).mean(), 0.05)

    def test_labels_are_consistent(self):
        template = _shared['template']
        for sample in self.samples:
            np.testing.assert_allclose(sample.gt_joints[0], 0.0, atol=1e-9)
            np.testing.assert_allclose(template.regress_joints(sample.gt_mesh), sample.gt_joints, atol=1e-9)
            self.assertTrue(np.all(np.abs(sample.gt_pose2d) < 1.0))

    def test_paired_views_are_exact(self):
        for sample in self.samples:
            second = sample.paired
            np.testing.assert_array_equal(second.gt_mesh, sample.gt_mesh @ sample.rotation.T)
            np.testing.assert_allclose(sample.rotation @ sample.rotation.T, np.eye(3), atol=1e-12)
            moved = sample.gt_pose2d @ sample.affine[:, :2].T + sample.affine[:, 2]
            np.testing.assert_allclose(moved, second.gt_pose2d, atol=1e-9)

    def test_independent_of_threads(self):
        threaded = generate_dataset(_shared['template'], 3, paired=True, seed=7, image_size=(64, 64), threads=3)
        for a, b in zip(self.samples, threaded):
            np.testing.assert_array_equal(a.image, b.image)
            np.testing.assert_array_equal(a.paired.gt_mesh, b.paired.gt_mesh)

    def test_save_and_load(self):
        save_dataset(self.samples, self.path('data.npz'))
        loaded = load_dataset(self.path('data.npz'))
        self.assertEqual(len(loaded), 3)
        np.testing.assert_array_equal(loaded[1].paired.image, self.samples[1].paired.image)
        np.testing.assert_array_equal(loaded[2].affine, self.samples[2].affine)

    def test_errors(self):
        with self.assertRaises(ConfigError):
            generate_dataset(_shared['template'], -1)
        with self.assertRaises(ConfigError):
            load_dataset(self.path('missing.npz'))


class TestRunConfig(unittest.TestCase):
    def test_validation(self):
        for changes in ({'epochs': 0}, {'learning_rate': 0.0}, {'device_threads': 0},
                        {'loss_weights': {'smooth': 1.0}}):
            with self.subTest(**changes):
                with self.assertRaises(ConfigError):
                    RunConfig(**changes)
        with self.assertRaises(ConfigError):
            RunConfig.from_dict({'epoch': 3})

    def test_long_schedule(self):
        cfg = RunConfig.long_schedule(dataset_size=64)
        self.assertEqual((cfg.epochs, cfg.decay_epoch, cfg.batch_size), (48, 38, 32))
        self.assertEqual(cfg.dataset_size, 64)

    def test_model_overrides(self):
        cfg = RunConfig(model_config_path=config_path('small_model_config.json'),
                        model_overrides={'decoder': 'spiral_conv'})
        self.assertEqual(resolve_model_config(cfg).decoder, 'spiral_conv')

    def test_divergence(self):
        with self.assertRaises(TrainingDivergedError):
            _check_finite(LossTerms(edge=float('nan')), step=3)


class TestTraining(TempDirTestCase):
    def test_smoke_run(self):
        result = train(small_run(self.path('run')))
        with open(self.path('run', LOG_FILE)) as f:
            lines = f.read().splitlines()
        self.assertEqual(len(lines), 2)
        self.assertTrue(lines[0].startswith('epoch,step,lr,loss'))
        self.assertEqual(len(result.history), 1)
        final = result.history[0]
        self.assertTrue(np.isfinite(final['loss']))
        self.assertEqual(set(final), {'epoch', 'loss', 'val_loss', 'pa_mpjpe', 'pa_mpvpe', 'auc_3d'})
        self.assertTrue(os.path.isdir(self.path('run', CHECKPOINT_DIR, 'epoch_000')))

    def test_resume_reproduces_an_uninterrupted_run(self):
        straight = train(small_run(self.path('straight'), epochs=2))
        train(small_run(self.path('resumed'), epochs=1))
        resumed = train(small_run(self.path('resumed'), epochs=2),
                        resume_from=self.path('resumed', CHECKPOINT_DIR, 'epoch_000'))
        for name, value in straight.model.state_dict().items():
            np.testing.assert_array_equal(resumed.model.state_dict()[name], value, err_msg=name)
        with open(self.path('straight', LOG_FILE), 'rb') as a, open(self.path('resumed', LOG_FILE), 'rb') as b:
            self.assertEqual(a.read(), b.read())

    def test_evaluate_checkpoint(self):
        result = train(small_run(self.path('run')))
        loaded = load_model(result.checkpoint_path)
        samples = result.context.val_set
        report = evaluate(result.checkpoint_path, samples, export_dir=self.path('objs'))
        self.assertEqual(set(report.metrics), set(METRIC_KEYS))
        self.assertEqual(report.sample_count, len(samples))
        self.assertNotIn('consistency3d', report.losses)
        self.assertEqual(len(report.pck_curve), 101)
        self.assertEqual(len(os.listdir(self.path('objs'))), len(samples))
        _, vertices = predict(loaded.model, np.stack([s.image for s in samples]).transpose(0, 3, 1, 2))
        self.assertEqual(vertices.shape, (len(samples), 778, 3))
        self.assertEqual(evaluate(loaded, samples).metrics, report.metrics)

    def test_cli_eval_loads_the_checkpoint_once(self):
        result = train(small_run(self.path('run')))
        counted = mock.Mock(wraps=load_model)
        stdout = io.StringIO()
        with mock.patch('src.harness.cli.load_model', counted), \
                mock.patch('src.harness.evaluation.load_model', counted), contextlib.redirect_stdout(stdout):
            code = main(['eval', '--checkpoint', str(result.checkpoint_path), '--out', self.path('report.json')])
        self.assertEqual(code, 0)
        self.assertEqual(counted.call_count, 1)
        self.assertEqual(set(json.loads(stdout.getvalue())['metrics']), set(METRIC_KEYS))

    def test_dataset_must_match_the_model(self):
        model_cfg = resolve_model_config(small_run(self.path('run')))
        wrong_size = generate_dataset(_shared['template'], 1, image_size=(32, 32))
        with self.assertRaises(ConfigMismatchError):
            check_dataset(model_cfg, wrong_size)


class TestEvaluationOracle(unittest.TestCase):
    def test_ground_truth_scores_perfectly(self):
        samples = generate_dataset(_shared['template'], 2, seed=1, image_size=(32, 32))
        vertices = np.stack([s.gt_mesh for s in samples])
        joints = np.stack([s.gt_joints for s in samples])
        report = evaluate_predictions(vertices, vertices, joints, joints)
        for key in ('mpjpe', 'mpvpe', 'pa_mpjpe', 'pa_mpvpe'):
            self.assertAlmostEqual(report.metrics[key], 0.0, places=6)
        for key in ('auc_3d', 'f5', 'f15'):
            self.assertAlmostEqual(report.metrics[key], 1.0)
        self.assertEqual(report.sample_count, 2)


class TestCli(TempDirTestCase):
    def run_cli(self, *argv):
        stdout, stderr = io.StringIO(), io.StringIO()
        with contextlib.redirect_stdout(stdout), contextlib.redirect_stderr(stderr):
            code = main(list(argv))
        return code, stdout.getvalue(), stderr.getvalue()

    def test_errors_are_json(self):
        code, _, stderr = self.run_cli('spiral', 'dump', '--hierarchy', self.path('nowhere'))
        self.assertEqual(code, 1)
        record = json.loads(stderr.strip().splitlines()[-1])
        self.assertEqual(record['error'], 'MeshError')

    def test_spiral_dump(self):
        code, stdout, _ = self.run_cli('spiral', 'dump', '--hierarchy', _shared['hierarchy'], '--level', '4')
        self.assertEqual(code, 0)
        self.assertEqual(len(json.loads(stdout)['indices']), 49)
        code, _, stderr = self.run_cli('spiral', 'dump', '--hierarchy', _shared['hierarchy'], '--level', '9')
        self.assertEqual(code, 1)
        self.assertEqual(json.loads(stderr.strip().splitlines()[-1])['error'], 'ConfigError')

    def test_data_gen(self):
        out = self.path('data.npz')
        code, stdout, _ = self.run_cli('data', 'gen', '--count', '2', '--paired', '--image-size', '32',
                                       '--out', out, '--previews', self.path('png'))
        self.assertEqual(code, 0)
        self.assertEqual(json.loads(stdout)['count'], 2)
        self.assertIsNotNone(load_dataset(out)[0].paired)
        self.assertEqual(sorted(os.listdir(self.path('png'))), ['sample_0000.png', 'sample_0001.png'])

    def last_error(self, stderr):
        return json.loads(stderr.strip().splitlines()[-1])

    def test_unknown_variant(self):
        code, _, stderr = self.run_cli('train', '--variant', 'bogus')
        self.assertEqual(code, 1)
        record = self.last_error(stderr)
        self.assertEqual(record['error'], 'UsageError')
        self.assertIn('bogus', record['message'])

    def test_missing_command(self):
        code, _, stderr = self.run_cli()
        self.assertEqual(code, 1)
        self.assertEqual(self.last_error(stderr)['error'], 'UsageError')

    def test_unwritable_output(self):
        out = os.path.join(self.path('missing_dir'), 'data.npz')
        code, _, stderr = self.run_cli('data', 'gen', '--count', '1', '--image-size', '32', '--out', out)
        self.assertEqual(code, 1)
        record = self.last_error(stderr)
        self.assertEqual(record['error'], 'StorageError')
        self.assertIn('missing_dir', record['path'])

    def test_corrupt_dataset(self):
        bogus = self.path('bogus.npz')
        with open(bogus, 'w') as f:
            f.write('not an archive')
        with self.assertRaises(ConfigError):
            load_dataset(bogus)


class TestAblationTables(unittest.TestCase):
    def rows(self, names):
        rows = []
        for index, name in enumerate(names):
            overrides = variant_overrides(name)
            rows.append(AblationRow(name, overrides.get('use_mspfe', True), overrides.get('use_ppvl', True),
                                    overrides.get('decoder', 'sw_msa'), 0.5 + 0.01 * index, 10.0 - index,
                                    11.0 - index, 1.0, [0.0] * 101))
        return rows

    def test_expand_shorthands(self):
        self.assertEqual(expand_variants(['modules']), list(MODULE_GRID))
        self.assertEqual(expand_variants(['full', 'decoders'])[:2], ['full', 'global_msa'])
        with self.assertRaises(UnknownVariantError):
            expand_variants(['no_encoder'])

    def test_table_layout(self):
        text = render_table(self.rows(MODULE_GRID + DECODER_SWEEP))
        sections = text.rstrip('\n').split('\n\n')
        self.assertEqual(len(sections), 3)
        module_lines = sections[0].splitlines()
        self.assertEqual(len(module_lines), 1 + len(MODULE_GRID))
        self.assertIn('MSPFE', module_lines[0])
        self.assertEqual(module_lines[1].count('✓'), 0)
        self.assertEqual(module_lines[-1].count('✓'), 2)
        decoder_lines = sections[1].splitlines()
        self.assertTrue(decoder_lines[0].startswith('Regressor'))
        self.assertTrue(decoder_lines[-1].startswith('Spiral window MSA'))
        comparison_lines = sections[2].splitlines()
        self.assertEqual(len(comparison_lines), 1 + 5)

    def test_full_model_comparison(self):
        rows = self.rows(MODULE_GRID + DECODER_SWEEP)
        losses = {'no_mspfe_no_ppvl': 3.0, 'no_mspfe': 2.0, 'no_ppvl': 0.5, 'full': 1.0,
                  'global_msa': 1.0, 'spiral_conv': 1.5, 'depthwise_conv': 0.9, 'sw_msa': 1.0}
        for row in rows:
            row.val_loss = losses[row.variant]
        self.assertEqual(full_not_worse(rows), {'no_mspfe': True, 'no_ppvl': False, 'global_msa': True,
                                                'spiral_conv': True, 'depthwise_conv': False})
        self.assertIn('no_ppvl', render_table(rows))

    def test_comparison_needs_full_model(self):
        self.assertEqual(full_not_worse(self.rows(['no_mspfe', 'no_ppvl'])), {})
        text = render_table(self.rows(['no_mspfe', 'no_ppvl']))
        self.assertNotIn('Full model', text)

    def test_overrides_keep_base_settings(self):
        self.assertEqual(variant_overrides('no_ppvl', {'num_heads': 2}), {'num_heads': 2, 'use_ppvl': False})


@unittest.skipUnless(SLOW_TESTS, "trains for several minutes")
class TestLongRuns(TempDirTestCase):
    def test_overfit(self):
        cfg = RunConfig.load(config_path('overfit_run_config.json')).with_overrides(
            output_dir=self.path('overfit'), model_config_path=config_path('small_model_config.json'))
        result = train(cfg)
        train_set = result.context.train_set
        _, vertices = predict(result.model, np.stack([s.image for s in train_set]).transpose(0, 3, 1, 2))
        error = mpjpe_mpvpe(vertices, np.stack([s.gt_mesh for s in train_set]), aligned=True)
        diagonal = bounding_box_diagonal(result.context.template.mesh.vertices)
        self.assertLess(error, 0.05 * diagonal)
        self.assertLess(result.history[-1]['loss'], 0.2 * result.history[0]['loss'])

    def test_ablation_grid(self):
        cfg = small_run(self.path('ablation'), epochs=2, dataset_size=8, val_size=4)
        rows = ablation_run(cfg, ['modules', 'decoders'])
        self.assertEqual([r.variant for r in rows], list(MODULE_GRID + DECODER_SWEEP))
        full, sw_msa = rows[MODULE_GRID.index('full')], rows[-1]
        self.assertEqual(full.pa_mpvpe, sw_msa.pa_mpvpe)
        self.assertFalse(os.path.exists(self.path('ablation', 'sw_msa')))
        for name in ('ablation.json', 'ablation.txt', 'pck_curves.json'):
            self.assertTrue(os.path.exists(self.path('ablation', name)))
        with open(self.path('ablation', 'ablation.json')) as f:
            summary = json.load(f)
        self.assertEqual(set(summary['full_not_worse']), {'no_mspfe', 'no_ppvl', 'global_msa', 'spiral_conv',
                                                            'depthwise_conv'})


if __name__ == '__main__':
    unittest.main()
