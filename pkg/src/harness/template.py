"""Synthetic 778-vertex hand template with a 16-node skeleton.

The surface is a "pillow": a flat hand-shaped grid region (palm, four
fingers, thumb) whose interior vertices are pushed out to a front and a
back sheet while the outline is shared. This gives a closed genus-0
manifold. Skinning weights fall off with distance to each bone; the
joint regressor averages the vertices around each joint.
"""
import logging
from collections import deque
from dataclasses import dataclass

import numpy as np

from src.mesh.mesh_core import Mesh
from src.model.ppvl import SkinningAssets

logger = logging.getLogger(__name__)

CELL_MM = 5.5
PALM_CELLS = (16, 13)
FINGER_WIDTH = 3
# name, first cell column, length in cells
FINGERS = (('index', 0, 13), ('middle', 4, 14), ('ring', 9, 13), ('pinky', 13, 10))
THUMB_FIRST_ROW = 2
THUMB_LENGTH = 10
MAX_THICKNESS_MM = 9.0
THICKNESS_RAMP = 3
SKIN_SIGMA_MM = 1.5 * CELL_MM
WRIST_SIGMA_MM = 4.0 * CELL_MM
REGRESSOR_SUPPORT = 8
TEMPLATE_JITTER_MM = 0.05

NODE_NAMES = ('wrist', 'thumb1', 'thumb2', 'thumb3', 'index1', 'index2', 'index3',
              'middle1', 'middle2', 'middle3', 'ring1', 'ring2', 'ring3',
              'pinky1', 'pinky2', 'pinky3')
TIP_NAMES = ('thumb_tip', 'index_tip', 'middle_tip', 'ring_tip', 'pinky_tip')
JOINT_NAMES = NODE_NAMES + TIP_NAMES
NODE_PARENTS = (-1, 0, 1, 2, 0, 4, 5, 0, 7, 8, 0, 10, 11, 0, 13, 14)
NUM_NODES = len(NODE_NAMES)
NUM_JOINTS = len(JOINT_NAMES)


@dataclass
class HandTemplate:
    mesh: Mesh
    skin_weights: np.ndarray
    joint_regressor: np.ndarray
    rest_joints: np.ndarray
    fingertip_vertices: np.ndarray

    @property
    def parents(self):
        return NODE_PARENTS

    def regress_joints(self, vertices):
        """[..., V, 3] -> [..., 21, 3]."""
        return np.einsum('jv,...vc->...jc', self.joint_regressor, vertices)


def _hand_cells():
    width, height = PALM_CELLS
    cells = {(x, y) for x in range(width) for y in range(height)}
    for _, first, length in FINGERS:
        cells.update((first + dx, y) for dx in range(FINGER_WIDTH) for y in range(height, height + length))
    cells.update((x, THUMB_FIRST_ROW + dy) for x in range(-THUMB_LENGTH, 0) for dy in range(FINGER_WIDTH))
    return cells


def _grid_vertices(cells):
    corners = set()
    for x, y in cells:
        corners.update({(x, y), (x + 1, y), (x + 1, y + 1), (x, y + 1)})
    interior = set()
    for x, y in corners:
        if {(x - 1, y - 1), (x, y - 1), (x - 1, y), (x, y)} <= cells:
            interior.add((x, y))
    return sorted(corners, key=lambda p: (p[1], p[0])), interior


def _boundary_distance(points, interior):
    """Grid hops from each point to the outline."""
    distance = {p: 0 for p in points if p not in interior}
    queue = deque(distance)
    while queue:
        x, y = queue.popleft()
        for n in ((x + 1, y), (x - 1, y), (x, y + 1), (x, y - 1)):
            if n in interior and n not in distance:
                distance[n] = distance[(x, y)] + 1
                queue.append(n)
    return distance


def _pillow_mesh(rng):
    cells = _hand_cells()
    points, interior = _grid_vertices(cells)
    distance = _boundary_distance(points, interior)
    front = {p: i for i, p in enumerate(points)}
    inner = [p for p in points if p in interior]
    back = {p: len(points) + i for i, p in enumerate(inner)}
    back_of = lambda p: back.get(p, front[p])  # noqa: E731

    vertices = np.zeros((len(points) + len(inner), 3))
    for p, i in front.items():
        thickness = MAX_THICKNESS_MM * np.sqrt(min(distance[p], THICKNESS_RAMP) / THICKNESS_RAMP)
        vertices[i] = (p[0] * CELL_MM, p[1] * CELL_MM, thickness)
        if p in back:
            vertices[back[p]] = (p[0] * CELL_MM, p[1] * CELL_MM, -thickness)

    faces = []
    for x, y in sorted(cells, key=lambda c: (c[1], c[0])):
        a, b, c, d = (x, y), (x + 1, y), (x + 1, y + 1), (x, y + 1)
        # never put a diagonal between two outline vertices: front and back would share it
        if a in interior or c in interior:
            triangles = ((a, b, c), (a, c, d))
        else:
            triangles = ((a, b, d), (b, c, d))
        for p, q, r in triangles:
            faces.append((front[p], front[q], front[r]))
            faces.append((back_of(p), back_of(r), back_of(q)))

    jitter = rng.normal(0.0, TEMPLATE_JITTER_MM, size=vertices.shape)
    jitter[np.array([i for p, i in front.items() if p not in interior])] = 0.0
    return vertices + jitter, np.array(faces, dtype=np.int64)


def _skeleton():
    """Rest positions (grid units) of the 16 nodes and the 5 tips."""
    width, height = PALM_CELLS
    nodes = [(width / 2.0, 0.0)]
    thumb_y = THUMB_FIRST_ROW + FINGER_WIDTH / 2.0
    nodes += [(1.0, thumb_y), (-0.35 * THUMB_LENGTH, thumb_y), (-0.7 * THUMB_LENGTH, thumb_y)]
    tips = [(-float(THUMB_LENGTH), thumb_y)]
    for _, first, length in FINGERS:
        cx = first + FINGER_WIDTH / 2.0
        nodes += [(cx, height - 1.0), (cx, height + 0.35 * length), (cx, height + 0.65 * length)]
        tips.append((cx, float(height + length)))
    to_mm = lambda pts: np.array([(x * CELL_MM, y * CELL_MM, 0.0) for x, y in pts])  # noqa: E731
    return to_mm(nodes), to_mm(tips)


def _segment_distance(points, start, end):
    direction = end - start
    t = np.clip(((points - start) @ direction) / max(direction @ direction, 1e-12), 0.0, 1.0)
    return np.linalg.norm(points - (start + t[:, None] * direction), axis=1)


def _skin_weights(vertices, nodes, tips):
    """Gaussian falloff from each node's bone (node to its child or tip)."""
    children = {}
    for child, parent in enumerate(NODE_PARENTS):
        if parent > 0:
            children.setdefault(parent, child)
    distal_tip = {3: 0, 6: 1, 9: 2, 12: 3, 15: 4}
    logits = np.zeros((len(vertices), NUM_NODES))
    palm_top = nodes[0] + np.array([0.0, (PALM_CELLS[1] - 3) * CELL_MM, 0.0])
    for j in range(NUM_NODES):
        if j == 0:
            start, end, sigma = nodes[0], palm_top, WRIST_SIGMA_MM
        elif j in distal_tip:
            start, end, sigma = nodes[j], tips[distal_tip[j]], SKIN_SIGMA_MM
        else:
            start, end, sigma = nodes[j], nodes[children[j]], SKIN_SIGMA_MM
        d = _segment_distance(vertices, start, end)
        logits[:, j] = -0.5 * (d / sigma) ** 2
    weights = np.exp(logits - logits.max(axis=1, keepdims=True))
    return weights / weights.sum(axis=1, keepdims=True)


def _joint_regressor(vertices, joints):
    regressor = np.zeros((len(joints), len(vertices)))
    for j, joint in enumerate(joints):
        d = np.linalg.norm(vertices - joint, axis=1)
        nearest = np.argsort(d, kind='stable')[:REGRESSOR_SUPPORT]
        w = np.exp(-0.5 * (d[nearest] / CELL_MM) ** 2)
        regressor[j, nearest] = w / w.sum()
    return regressor


def generate_template(seed=0):
    """Deterministic hand template; ``seed`` only drives sub-millimetre jitter."""
    rng = np.random.default_rng(seed)
    vertices, faces = _pillow_mesh(rng)
    nodes, tips = _skeleton()
    # wrist at the origin
    offset = nodes[0].copy()
    vertices, nodes, tips = vertices - offset, nodes - offset, tips - offset
    mesh = Mesh(vertices, faces)
    rest_joints = np.concatenate([nodes, tips])
    fingertip_vertices = np.array([int(np.argmin(np.linalg.norm(vertices - t, axis=1))) for t in tips])
    template = HandTemplate(mesh=mesh,
                            skin_weights=_skin_weights(vertices, nodes, tips),
                            joint_regressor=_joint_regressor(vertices, rest_joints),
                            rest_joints=rest_joints,
                            fingertip_vertices=fingertip_vertices)
    logger.info("Generated hand template: %d vertices, %d faces", mesh.vertex_count, mesh.face_count)
    return template


def skinning_assets(template, hierarchy, neighbors_per_tip=3):
    """Lift-matrix inputs for ``template`` on the coarsest hierarchy level."""
    coarse = hierarchy.levels[-1]
    tips = template.rest_joints[NUM_NODES:]
    neighbors = []
    for tip in tips:
        d = np.linalg.norm(coarse.vertices - tip, axis=1)
        neighbors.append(np.argsort(d, kind='stable')[:neighbors_per_tip].tolist())
    return SkinningAssets(weights=template.skin_weights,
                          coarse_index_map=hierarchy.coarse_index_map(),
                          fingertip_neighbors=neighbors)


def random_skinning_assets(hierarchy, rng, num_nodes=NUM_NODES):
    """Random normalized weights for meshes without a skeleton (toy models, tests)."""
    fine_count = hierarchy.levels[0].vertex_count
    coarse_count = hierarchy.levels[-1].vertex_count
    weights = rng.dirichlet(np.full(num_nodes, 0.3), size=fine_count)
    neighbors = [[tip % coarse_count] for tip in range(len(TIP_NAMES))]
    return SkinningAssets(weights=weights, coarse_index_map=hierarchy.coarse_index_map(),
                          fingertip_neighbors=neighbors)
