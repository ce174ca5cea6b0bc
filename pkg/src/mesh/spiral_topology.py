"""Ring algebra and spiral serialization of vertex neighbourhoods.

A spiral is ``[v] + ring 1 + ring 2 + ...`` truncated to a fixed length.
Inside every ring the order is counterclockwise about the outward normal:

* ring 1 starts at the smallest-index neighbour of ``v`` (or an explicit
  ``start``);
* each vertex ``u`` of ring h contributes its not-yet-emitted ring h+1
  neighbours, walking counterclockwise around ``u`` from its earliest emitted
  neighbour in ring h-1.

Rings are processed in spiral order, so ring h+1 starts at the first ring h+1
vertex met when turning around the start of ring h.
"""
import json
import logging
import struct

import numpy as np

from src.mesh.mesh_core import build_adjacency, validate_manifold
from src.utils.errors import NonManifoldError, SpiralError

logger = logging.getLogger(__name__)

PAD = -1
SPIRAL_MAGIC = b'SPRL'
_HEADER = struct.Struct('<4sIIi')


class SpiralTable:
    """V x K vertex indices; PAD marks entries past an exhausted component."""

    def __init__(self, indices, pad_sentinel=PAD):
        indices = np.array(indices, dtype=np.int64)
        if indices.ndim != 2 or indices.shape[1] < 1:
            raise SpiralError(f"spiral table must be V x K, got shape {indices.shape}")
        indices.flags.writeable = False
        self.indices = indices
        self.pad_sentinel = int(pad_sentinel)

    @property
    def K(self):
        return self.indices.shape[1]

    @property
    def vertex_count(self):
        return self.indices.shape[0]

    @property
    def mask(self):
        """True where an entry is a real vertex."""
        return self.indices != self.pad_sentinel

    def __eq__(self, other):
        return (isinstance(other, SpiralTable) and self.pad_sentinel == other.pad_sentinel
                and np.array_equal(self.indices, other.indices))

    def __repr__(self):
        return f"SpiralTable(V={self.vertex_count}, K={self.K})"

    def to_bytes(self):
        header = _HEADER.pack(SPIRAL_MAGIC, self.vertex_count, self.K, self.pad_sentinel)
        return header + self.indices.astype('<i4').tobytes()

    @classmethod
    def from_bytes(cls, blob):
        if len(blob) < _HEADER.size:
            raise SpiralError("spiral table file is truncated")
        magic, V, K, sentinel = _HEADER.unpack_from(blob)
        if magic != SPIRAL_MAGIC:
            raise SpiralError(f"bad spiral table magic {magic!r}")
        body = np.frombuffer(blob, dtype='<i4', offset=_HEADER.size)
        if body.size != V * K:
            raise SpiralError(f"spiral table body has {body.size} entries, expected {V * K}")
        return cls(body.reshape(V, K).astype(np.int64), sentinel)

    def save(self, path):
        with open(path, 'wb') as f:
            f.write(self.to_bytes())

    @classmethod
    def load(cls, path):
        with open(path, 'rb') as f:
            return cls.from_bytes(f.read())

    def to_json(self):
        return json.dumps({
            'V': self.vertex_count,
            'K': self.K,
            'pad_sentinel': self.pad_sentinel,
            'indices': self.indices.tolist(),
        }, indent=2)


def global_table(vertex_count):
    """Every row lists all vertices, self first. Used by the global attention variant."""
    rows = []
    for v in range(vertex_count):
        rows.append([v] + [u for u in range(vertex_count) if u != v])
    return SpiralTable(rows)


def _check_vertex(adj, v):
    if not 0 <= v < adj.vertex_count:
        raise SpiralError(f"invalid vertex index {v} (mesh has {adj.vertex_count} vertices)")


def ring(adj, v, h):
    """Vertices exactly ``h`` hops from ``v``."""
    _check_vertex(adj, v)
    if h < 0:
        raise SpiralError(f"ring order must be non-negative, got {h}")
    disk = {v}
    current = {v}
    for _ in range(h):
        nxt = set()
        for u in current:
            nxt.update(adj.neighbors[u])
        nxt -= disk
        disk |= nxt
        current = nxt
    return frozenset(current)


def _rotation_successors(mesh, adj, u):
    """Counterclockwise successor map among the neighbours of ``u``."""
    successor = {}
    for face_index in adj.incident_faces[u]:
        a, b, c = mesh.faces[face_index].tolist()
        # rotate the face so u comes first; then the next two are CCW around u
        if a == u:
            successor[b] = c
        elif b == u:
            successor[c] = a
        else:
            successor[a] = b
    return successor


def _rotational_order(mesh, adj, u, start):
    """Neighbours of ``u`` counterclockwise, beginning at ``start``.

    On a boundary the fan is open; when the walk runs off the end it resumes
    at the smallest unvisited neighbour.
    """
    successor = _rotation_successors(mesh, adj, u)
    remaining = set(adj.neighbors[u])
    order = []
    current = start
    while remaining:
        if current not in remaining:
            current = min(remaining)
        order.append(current)
        remaining.discard(current)
        current = successor.get(current)
    return order


def spiral_sequence(mesh, adj, v, K, start=None):
    """Spiral of length ``K`` around ``v``; padded with PAD when exhausted."""
    _check_vertex(adj, v)
    if K < 1:
        raise SpiralError(f"spiral length must be positive, got {K}")
    sequence = [v]
    position = {v: 0}
    if K == 1 or not adj.neighbors[v]:
        return sequence + [PAD] * (K - 1)

    if start is None:
        start = adj.neighbors[v][0]
    elif start not in adj.neighbors[v]:
        raise SpiralError(f"start vertex {start} is not adjacent to {v}")

    current_ring = _rotational_order(mesh, adj, v, start)
    ring_sets = [{v}]
    while current_ring and len(sequence) < K:
        for u in current_ring:
            position[u] = len(sequence)
            sequence.append(u)
        ring_sets.append(set(current_ring))
        if len(sequence) >= K:
            break
        seen = set(position)
        inner = ring_sets[-2]
        next_ring = []
        for u in current_ring:
            # anchor at the earliest emitted neighbour one ring inwards
            anchor = min((n for n in adj.neighbors[u] if n in inner), key=position.__getitem__)
            for n in _rotational_order(mesh, adj, u, anchor):
                if n not in seen:
                    seen.add(n)
                    next_ring.append(n)
        current_ring = next_ring

    sequence = sequence[:K]
    return sequence + [PAD] * (K - len(sequence))


def build_spiral_table(mesh, K, starts=None, adjacency=None, check_manifold=True):
    """Spiral of every vertex as a SpiralTable.

    ``starts`` optionally fixes the ring-1 start vertex per row.
    """
    if check_manifold:
        report = validate_manifold(mesh)
        if not report.ok:
            raise NonManifoldError("spiral tables need a manifold mesh", report)
    adj = adjacency if adjacency is not None else build_adjacency(mesh)
    rows = []
    for v in range(mesh.vertex_count):
        start = None if starts is None else starts[v]
        rows.append(spiral_sequence(mesh, adj, v, K, start=start))
    table = SpiralTable(rows)
    logger.debug("Built %s", table)
    return table
