"""Shared meshes and model builders for the test modules."""
import os

import numpy as np

from src.mesh.mesh_core import Mesh, icosahedron, icosphere
from src.model.config import ModelConfig

SLOW_TESTS = os.environ.get('STMR_SLOW_TESTS') == '1'
ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))


def config_path(name):
    return os.path.join(ROOT, 'config', name)


def tetrahedron():
    vertices = [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]
    faces = [[0, 2, 1], [0, 1, 3], [1, 2, 3], [0, 3, 2]]
    return Mesh(vertices, faces)


def single_triangle():
    return Mesh([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]], [[0, 1, 2]])


def relabel(mesh, permutation):
    """Mesh with vertex ``v`` renamed to ``permutation[v]``."""
    permutation = np.asarray(permutation)
    vertices = np.empty_like(mesh.vertices)
    vertices[permutation] = mesh.vertices
    return Mesh(vertices, permutation[mesh.faces])


def random_manifold_meshes(count, seed=0):
    """Jittered, relabelled icospheres of random size."""
    rng = np.random.default_rng(seed)
    meshes = []
    for _ in range(count):
        base = icosphere(int(rng.integers(0, 3)), radius=float(rng.uniform(5.0, 50.0)))
        jitter = rng.normal(0.0, 0.01 * np.abs(base.vertices).max(), size=base.vertices.shape)
        jittered = Mesh(base.vertices + jitter, base.faces)
        meshes.append(relabel(jittered, rng.permutation(base.vertex_count)))
    return meshes


def sample_meshes():
    return [icosahedron()] + [icosphere(k) for k in (1, 2, 3)] + random_manifold_meshes(20)


def toy_config(**changes):
    return ModelConfig.load(config_path('toy_model_config.json')).with_overrides(**changes)


def small_config(**changes):
    return ModelConfig.load(config_path('small_model_config.json')).with_overrides(**changes)
