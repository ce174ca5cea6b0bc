"""Coarse-to-fine mesh level stack built by quadric-error edge collapse.

Levels are ordered fine to coarse. ``up_transforms[l]`` maps features on
level ``l + 1`` to level ``l``; every row is a convex combination.
"""
import heapq
import json
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import sparse

from src.mesh.mesh_core import (Mesh, build_adjacency, load_obj, mean_edge_length,
                                save_obj, validate_manifold)
from src.mesh.spiral_topology import SpiralTable, build_spiral_table
from src.utils.config_utils import save_json
from src.utils.errors import MeshError, NonManifoldError, SimplificationError

logger = logging.getLogger(__name__)

SINGULAR_CONDITION = 1e8
# added to the quadric cost of collapses that would fold a face over
FLIP_PENALTY = 1e8
TRANSFORM_MAGIC = b'SPUT'
_TRANSFORM_HEADER = struct.Struct('<4sIII')
_TRIPLET = np.dtype([('row', '<i4'), ('col', '<i4'), ('value', '<f8')])
BUNDLE_FORMAT_VERSION = 1


@dataclass(frozen=True)
class DownMap:
    """``assignment[fine] = coarse``; ``kept[coarse]`` is the surviving fine vertex."""
    assignment: np.ndarray
    kept: np.ndarray


@dataclass
class SimplifyStats:
    collapse_costs: list = field(default_factory=list)
    link_rejections: int = 0
    flip_penalties: int = 0
    midpoint_fallbacks: int = 0


def _face_quadrics(vertices, faces):
    quadrics = np.zeros((len(vertices), 4, 4))
    tri = vertices[faces]
    normals = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    lengths = np.linalg.norm(normals, axis=1)
    valid = lengths > 0
    normals[valid] /= lengths[valid, None]
    planes = np.concatenate([normals, -(normals * tri[:, 0]).sum(1, keepdims=True)], axis=1)
    planes[~valid] = 0.0
    kp = planes[:, :, None] * planes[:, None, :]
    for corner in range(3):
        np.add.at(quadrics, faces[:, corner], kp)
    return quadrics


class _EdgeCollapser:
    """Mutable collapse state for one simplification run."""

    def __init__(self, mesh, stats):
        adj = build_adjacency(mesh)
        self.stats = stats
        self.positions = mesh.vertices.copy()
        self.faces = mesh.faces.copy()
        self.face_alive = np.ones(len(self.faces), dtype=bool)
        self.vertex_faces = [set(f) for f in adj.incident_faces]
        self.neighbors = [set(n) for n in adj.neighbors]
        self.alive = np.ones(len(self.positions), dtype=bool)
        self.alive_count = len(self.positions)
        self.parent = np.arange(len(self.positions))
        self.quadrics = _face_quadrics(self.positions, self.faces)
        self.heap = []
        # edge -> (stamp, cost, penalty, target, fallback) of its freshest heap entry
        self.pending = {}
        self.counter = 0

    def _is_boundary(self, u):
        return any(len(self.vertex_faces[u] & self.vertex_faces[n]) == 1 for n in self.neighbors[u])

    def link_ok(self, i, j):
        if self.alive_count <= 4:
            return False
        shared = self.vertex_faces[i] & self.vertex_faces[j]
        opposite = set()
        for f in shared:
            opposite.update(self.faces[f].tolist())
        opposite -= {i, j}
        if (self.neighbors[i] & self.neighbors[j]) != opposite:
            return False
        if len(shared) == 2 and self._is_boundary(i) and self._is_boundary(j):
            return False
        return True

    def _placement(self, i, j, quadric):
        A = quadric[:3, :3]
        # symmetric PSD: the condition number is the eigenvalue ratio
        eigenvalues = np.linalg.eigvalsh(A)
        if eigenvalues[0] * SINGULAR_CONDITION > eigenvalues[-1]:
            return np.linalg.solve(A, -quadric[:3, 3]), False
        return 0.5 * (self.positions[i] + self.positions[j]), True

    def _flips(self, i, j, target):
        """Would moving i and j to ``target`` turn any surviving face over?"""
        faces = sorted(self.vertex_faces[i] ^ self.vertex_faces[j])
        if not faces:
            return False
        corners = self.faces[faces]
        tri = self.positions[corners]
        moved = tri.copy()
        moved[(corners == i) | (corners == j)] = target
        before = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
        after = np.cross(moved[:, 1] - moved[:, 0], moved[:, 2] - moved[:, 0])
        return bool(np.any((before * after).sum(axis=1) <= 0.0))

    def evaluate(self, i, j):
        quadric = self.quadrics[i] + self.quadrics[j]
        target, fallback = self._placement(i, j, quadric)
        homogeneous = np.append(target, 1.0)
        cost = max(float(homogeneous @ quadric @ homogeneous), 0.0)
        penalty = FLIP_PENALTY if self._flips(i, j, target) else 0.0
        return cost, penalty, target, fallback

    def push(self, i, j):
        a, b = min(i, j), max(i, j)
        if not self.link_ok(a, b):
            self.pending.pop((a, b), None)
            return
        cost, penalty, target, fallback = self.evaluate(a, b)
        self.counter += 1
        self.pending[(a, b)] = (self.counter, cost, penalty, target, fallback)
        heapq.heappush(self.heap, (cost + penalty, a, b, self.counter))

    def collapse(self, keep, drop, target, quadric):
        self.positions[keep] = target
        self.quadrics[keep] = quadric
        for f in list(self.vertex_faces[drop]):
            face = self.faces[f]
            if keep in face:
                self.face_alive[f] = False
                for u in face.tolist():
                    self.vertex_faces[u].discard(f)
            else:
                face[face == drop] = keep
                self.vertex_faces[keep].add(f)
        self.vertex_faces[drop] = set()
        for n in self.neighbors[drop]:
            self.neighbors[n].discard(drop)
            if n != keep:
                self.neighbors[n].add(keep)
                self.neighbors[keep].add(n)
        self.neighbors[keep].discard(drop)
        self.neighbors[drop] = set()
        self.alive[drop] = False
        self.alive_count -= 1
        self.parent[drop] = keep

    def run(self, target_count):
        for a in range(len(self.positions)):
            for b in self.neighbors[a]:
                if a < b:
                    self.push(a, b)

        while self.alive_count > target_count:
            if not self.heap:
                raise SimplificationError(
                    f"no collapsible edge left at {self.alive_count} vertices (target {target_count})",
                    achieved=self.alive_count)
            total, a, b, stamp = heapq.heappop(self.heap)
            entry = self.pending.get((a, b))
            if entry is None or entry[0] != stamp or not (self.alive[a] and self.alive[b]):
                continue
            del self.pending[(a, b)]
            if not self.link_ok(a, b):
                self.stats.link_rejections += 1
                continue
            _, cost, penalty, target, fallback = entry
            self.stats.collapse_costs.append(cost)
            self.stats.flip_penalties += penalty > 0
            self.stats.midpoint_fallbacks += fallback
            self.collapse(a, b, target, self.quadrics[a] + self.quadrics[b])

            edges = {(min(u, n), max(u, n)) for u in {a} | self.neighbors[a] for n in self.neighbors[u]}
            for u, n in sorted(edges):
                self.push(u, n)

    def result(self):
        kept = np.flatnonzero(self.alive)
        new_index = -np.ones(len(self.positions), dtype=np.int64)
        new_index[kept] = np.arange(len(kept))
        roots = np.arange(len(self.positions))
        while True:
            nxt = self.parent[roots]
            if np.array_equal(nxt, roots):
                break
            roots = nxt
        faces = new_index[self.faces[self.face_alive]]
        coarse = Mesh(self.positions[kept], faces)
        return coarse, DownMap(assignment=new_index[roots], kept=kept)


def simplify_qem(mesh, target_count, stats=None):
    """Collapse edges by minimal quadric error until ``target_count`` vertices remain.

    Ties on equal cost go to the lexicographically smallest (min, max) vertex
    pair; the smaller index survives each collapse.
    """
    if not 0 < target_count < mesh.vertex_count:
        raise SimplificationError(
            f"target {target_count} must be in 1..{mesh.vertex_count - 1}", achieved=mesh.vertex_count)
    report = validate_manifold(mesh)
    if not report.ok:
        raise NonManifoldError("simplification needs a manifold mesh", report)
    stats = stats if stats is not None else SimplifyStats()
    collapser = _EdgeCollapser(mesh, stats)
    collapser.run(target_count)
    coarse, down_map = collapser.result()
    logger.debug("Simplified %d -> %d vertices (%d link rejections, %d midpoint placements)",
                 mesh.vertex_count, coarse.vertex_count, stats.link_rejections, stats.midpoint_fallbacks)
    return coarse, down_map


def _closest_point_barycentric(p, A, B, C):
    """Barycentric coordinates of the closest point to ``p`` on each triangle."""
    ab, ac = B - A, C - A
    ap, bp, cp = p - A, p - B, p - C
    d1, d2 = (ab * ap).sum(1), (ac * ap).sum(1)
    d3, d4 = (ab * bp).sum(1), (ac * bp).sum(1)
    d5, d6 = (ab * cp).sum(1), (ac * cp).sum(1)
    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2
    ones, zeros = np.ones_like(d1), np.zeros_like(d1)

    with np.errstate(divide='ignore', invalid='ignore'):
        denom = va + vb + vc
        v = vb / denom
        w = vc / denom
        bary = np.stack([1 - v - w, v, w], axis=1)

        # Voronoi regions, lowest priority first so earlier rules overwrite later ones
        t = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        region = (va <= 0) & ((d4 - d3) >= 0) & ((d5 - d6) >= 0)
        bary = np.where(region[:, None], np.stack([zeros, 1 - t, t], 1), bary)
        t = d2 / (d2 - d6)
        region = (vb <= 0) & (d2 >= 0) & (d6 <= 0)
        bary = np.where(region[:, None], np.stack([1 - t, zeros, t], 1), bary)
        region = (d6 >= 0) & (d5 <= d6)
        bary = np.where(region[:, None], np.stack([zeros, zeros, ones], 1), bary)
        t = d1 / (d1 - d3)
        region = (vc <= 0) & (d1 >= 0) & (d3 <= 0)
        bary = np.where(region[:, None], np.stack([1 - t, t, zeros], 1), bary)
        region = (d3 >= 0) & (d4 <= d3)
        bary = np.where(region[:, None], np.stack([zeros, ones, zeros], 1), bary)
        region = (d1 <= 0) & (d2 <= 0)
        bary = np.where(region[:, None], np.stack([ones, zeros, zeros], 1), bary)

    closest = bary[:, :1] * A + bary[:, 1:2] * B + bary[:, 2:] * C
    distance = np.linalg.norm(p - closest, axis=1)
    distance[~np.isfinite(distance)] = np.inf
    return bary, distance


def upsample_matrix(fine, coarse, down_map, diagnostics=None):
    """Sparse (fine x coarse) matrix of barycentric projection weights.

    Surviving vertices get a unit row; every other fine vertex is projected
    onto its nearest coarse face. When that face is farther than the coarse
    mean edge length the vertex falls back to its nearest coarse vertex.
    """
    tolerance = mean_edge_length(coarse)
    A, B, C = (coarse.vertices[coarse.faces[:, k]] for k in range(3))
    rows, cols, values = [], [], []
    fallbacks = 0
    for f in range(fine.vertex_count):
        c = int(down_map.assignment[f])
        if down_map.kept[c] == f:
            rows.append(f)
            cols.append(c)
            values.append(1.0)
            continue
        p = fine.vertices[f]
        bary, distance = _closest_point_barycentric(p, A, B, C)
        best = int(np.argmin(distance))
        weights = np.clip(bary[best], 0.0, None)
        if not np.isfinite(distance[best]) or distance[best] > tolerance or weights.sum() <= 0:
            fallbacks += 1
            nearest = int(np.argmin(np.linalg.norm(coarse.vertices - p, axis=1)))
            rows.append(f)
            cols.append(nearest)
            values.append(1.0)
            continue
        weights /= weights.sum()
        for corner in range(3):
            if weights[corner] > 0:
                rows.append(f)
                cols.append(int(coarse.faces[best, corner]))
                values.append(float(weights[corner]))
    if fallbacks:
        logger.warning("%d fine vertices fell back to nearest-vertex upsampling", fallbacks)
    if diagnostics is not None:
        diagnostics['projection_fallbacks'] = diagnostics.get('projection_fallbacks', 0) + fallbacks
    matrix = sparse.csr_matrix((values, (rows, cols)), shape=(fine.vertex_count, coarse.vertex_count))
    matrix.sort_indices()
    return matrix


@dataclass
class MeshHierarchy:
    levels: list
    down_maps: list
    up_transforms: list
    spiral_tables: list
    diagnostics: dict = field(default_factory=dict)

    @property
    def vertex_counts(self):
        return [level.vertex_count for level in self.levels]

    @property
    def spiral_length(self):
        return self.spiral_tables[0].K

    def coarse_index_map(self):
        """Level-0 vertex index of every vertex on the coarsest level."""
        index = np.arange(self.levels[-1].vertex_count)
        for down_map in reversed(self.down_maps):
            index = down_map.kept[index]
        return index


def build_hierarchy(template, num_levels=4, factor=2, K=9):
    report = validate_manifold(template)
    if not report.ok:
        raise NonManifoldError("template mesh is not manifold", report)
    levels = [template]
    down_maps = []
    up_transforms = []
    diagnostics = {'projection_fallbacks': 0, 'link_rejections': 0,
                   'flip_penalties': 0, 'midpoint_fallbacks': 0}
    for _ in range(num_levels):
        fine = levels[-1]
        target = math.ceil(fine.vertex_count / factor)
        stats = SimplifyStats()
        coarse, down_map = simplify_qem(fine, target, stats)
        level_report = validate_manifold(coarse)
        if not level_report.ok:
            raise NonManifoldError(f"level with {coarse.vertex_count} vertices is not manifold", level_report)
        up_transforms.append(upsample_matrix(fine, coarse, down_map, diagnostics))
        diagnostics['link_rejections'] += stats.link_rejections
        diagnostics['flip_penalties'] += stats.flip_penalties
        diagnostics['midpoint_fallbacks'] += stats.midpoint_fallbacks
        levels.append(coarse)
        down_maps.append(down_map)
        logger.info("Hierarchy level %d: %d vertices, %d faces",
                    len(levels) - 1, coarse.vertex_count, coarse.face_count)
    spiral_tables = [build_spiral_table(level, K) for level in levels]
    return MeshHierarchy(levels, down_maps, up_transforms, spiral_tables, diagnostics)


def _transform_to_bytes(matrix):
    coo = matrix.tocsr()
    coo.sort_indices()
    coo = coo.tocoo()
    records = np.empty(coo.nnz, dtype=_TRIPLET)
    records['row'] = coo.row
    records['col'] = coo.col
    records['value'] = coo.data
    header = _TRANSFORM_HEADER.pack(TRANSFORM_MAGIC, matrix.shape[0], matrix.shape[1], coo.nnz)
    return header + records.tobytes()


def _transform_from_bytes(blob):
    magic, rows, cols, nnz = _TRANSFORM_HEADER.unpack_from(blob)
    if magic != TRANSFORM_MAGIC:
        raise MeshError(f"bad transform magic {magic!r}")
    records = np.frombuffer(blob, dtype=_TRIPLET, count=nnz, offset=_TRANSFORM_HEADER.size)
    matrix = sparse.csr_matrix((records['value'].astype(np.float64),
                                (records['row'].astype(np.int64), records['col'].astype(np.int64))),
                               shape=(rows, cols))
    matrix.sort_indices()
    return matrix


def save_hierarchy(hierarchy, directory):
    """Write the hierarchy bundle: OBJ levels, spiral tables, transforms, manifest."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = {
        'format_version': BUNDLE_FORMAT_VERSION,
        'spiral_length': hierarchy.spiral_length,
        'levels': [],
        'transforms': [],
        'down_maps': [],
        'diagnostics': hierarchy.diagnostics,
    }
    for index, (level, table) in enumerate(zip(hierarchy.levels, hierarchy.spiral_tables)):
        mesh_name, spiral_name = f"level_{index}.obj", f"spiral_{index}.bin"
        save_obj(level, directory / mesh_name)
        table.save(directory / spiral_name)
        manifest['levels'].append({'vertex_count': level.vertex_count, 'face_count': level.face_count,
                                   'mesh': mesh_name, 'spiral': spiral_name})
    for index, (matrix, down_map) in enumerate(zip(hierarchy.up_transforms, hierarchy.down_maps)):
        name = f"up_{index}.bin"
        with open(directory / name, 'wb') as f:
            f.write(_transform_to_bytes(matrix))
        manifest['transforms'].append({'file': name, 'shape': list(matrix.shape), 'nnz': int(matrix.nnz)})
        manifest['down_maps'].append({'assignment': down_map.assignment.tolist(),
                                      'kept': down_map.kept.tolist()})
    save_json(manifest, directory / 'manifest.json')
    logger.info("Saved hierarchy bundle to %s", directory)


def load_hierarchy(directory):
    directory = Path(directory)
    try:
        with open(directory / 'manifest.json', 'r') as f:
            manifest = json.load(f)
    except FileNotFoundError:
        raise MeshError(f"no hierarchy manifest in {directory}")
    if manifest.get('format_version') != BUNDLE_FORMAT_VERSION:
        raise MeshError(f"unsupported hierarchy format {manifest.get('format_version')}")
    levels = [load_obj(directory / entry['mesh']) for entry in manifest['levels']]
    tables = [SpiralTable.load(directory / entry['spiral']) for entry in manifest['levels']]
    transforms = []
    for entry in manifest['transforms']:
        with open(directory / entry['file'], 'rb') as f:
            transforms.append(_transform_from_bytes(f.read()))
    down_maps = [DownMap(np.array(d['assignment'], dtype=np.int64), np.array(d['kept'], dtype=np.int64))
                 for d in manifest['down_maps']]
    return MeshHierarchy(levels, down_maps, transforms, tables, manifest.get('diagnostics', {}))
