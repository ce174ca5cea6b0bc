"""Triangle meshes, adjacency, face normals and OBJ persistence.

Coordinates are millimetres in model space. Faces are counterclockwise when
seen from outside the surface.
"""
import logging
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np

from src.utils.errors import DegenerateFaceError, MeshError, ObjParseError

logger = logging.getLogger(__name__)

# faces below this area (mm^2) have no usable normal
DEGENERATE_AREA = 1e-12


class Mesh:
    """Immutable vertex positions plus triangle faces."""

    def __init__(self, vertices, faces):
        vertices = np.array(vertices, dtype=np.float64).reshape(-1, 3)
        faces = np.array(faces, dtype=np.int64).reshape(-1, 3)
        if faces.size and (faces.min() < 0 or faces.max() >= len(vertices)):
            bad = int(np.argmax((faces < 0).any(1) | (faces >= len(vertices)).any(1)))
            raise MeshError(f"face {bad} references a vertex outside 0..{len(vertices) - 1}",
                            face_index=bad)
        repeated = (faces[:, 0] == faces[:, 1]) | (faces[:, 1] == faces[:, 2]) | (faces[:, 0] == faces[:, 2])
        if repeated.any():
            bad = int(np.argmax(repeated))
            raise MeshError(f"face {bad} repeats a vertex index", face_index=bad)
        vertices.flags.writeable = False
        faces.flags.writeable = False
        self.vertices = vertices
        self.faces = faces

    @property
    def vertex_count(self):
        return len(self.vertices)

    @property
    def face_count(self):
        return len(self.faces)

    def with_vertices(self, vertices):
        """Same topology, new positions."""
        return Mesh(vertices, self.faces)

    def edges(self):
        """Unique undirected edges as a sorted (E, 2) array with i < j."""
        pairs = np.concatenate([self.faces[:, [0, 1]], self.faces[:, [1, 2]], self.faces[:, [2, 0]]])
        pairs = np.sort(pairs, axis=1)
        return np.unique(pairs, axis=0)

    def __repr__(self):
        return f"Mesh(vertices={self.vertex_count}, faces={self.face_count})"


@dataclass(frozen=True)
class AdjacencyTable:
    neighbors: tuple
    incident_faces: tuple

    @property
    def vertex_count(self):
        return len(self.neighbors)

    def degree(self, v):
        return len(self.neighbors[v])


@dataclass
class ValidationReport:
    non_manifold_edges: list = field(default_factory=list)
    isolated_vertices: list = field(default_factory=list)
    duplicate_faces: list = field(default_factory=list)
    inconsistent_winding_edges: list = field(default_factory=list)

    @property
    def ok(self):
        # winding problems are warnings only
        return not (self.non_manifold_edges or self.isolated_vertices or self.duplicate_faces)

    def to_dict(self):
        return {
            'ok': self.ok,
            'non_manifold_edges': [list(e) for e in self.non_manifold_edges],
            'isolated_vertices': list(self.isolated_vertices),
            'duplicate_faces': [list(p) for p in self.duplicate_faces],
            'inconsistent_winding_edges': [list(e) for e in self.inconsistent_winding_edges],
        }


def load_obj(path):
    """Read an ASCII OBJ with ``v`` and ``f`` records into a Mesh."""
    vertices = []
    faces = []
    face_lines = []
    with open(path, 'r') as f:
        for line_no, raw in enumerate(f, start=1):
            line = raw.split('#', 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            tag = parts[0]
            if tag == 'v':
                if len(parts) < 4:
                    raise ObjParseError("vertex record needs 3 coordinates", line_no)
                try:
                    vertices.append([float(x) for x in parts[1:4]])
                except ValueError:
                    raise ObjParseError(f"bad vertex coordinate in '{line}'", line_no)
            elif tag == 'f':
                if len(parts) != 4:
                    raise ObjParseError("non-triangular face", line_no)
                indices = []
                for token in parts[1:]:
                    try:
                        index = int(token.split('/')[0])
                    except ValueError:
                        raise ObjParseError(f"bad face index '{token}'", line_no)
                    # negative indices are relative to the vertices read so far
                    index = len(vertices) + index if index < 0 else index - 1
                    indices.append(index)
                faces.append(indices)
                face_lines.append(line_no)
            # vt/vn/usemtl and friends are ignored
    for indices, line_no in zip(faces, face_lines):
        for index in indices:
            if index < 0 or index >= len(vertices):
                raise ObjParseError(f"face index {index + 1} out of range (have {len(vertices)} vertices)",
                                    line_no)
    mesh = Mesh(np.array(vertices, dtype=np.float64).reshape(-1, 3), np.array(faces, dtype=np.int64).reshape(-1, 3))
    logger.debug("Loaded %s from %s", mesh, path)
    return mesh


def save_obj(mesh, path):
    """Write ``mesh`` as ASCII OBJ; identical meshes give identical bytes."""
    lines = []
    for x, y, z in mesh.vertices:
        lines.append(f"v {x:.9f} {y:.9f} {z:.9f}\n")
    for a, b, c in mesh.faces:
        lines.append(f"f {a + 1} {b + 1} {c + 1}\n")
    try:
        with open(path, 'w', newline='\n') as f:
            f.writelines(lines)
    except OSError as e:
        raise MeshError(f"could not write {path}: {e}", path=str(path))


def build_adjacency(mesh):
    neighbors = [set() for _ in range(mesh.vertex_count)]
    incident = [[] for _ in range(mesh.vertex_count)]
    for face_index, (a, b, c) in enumerate(mesh.faces.tolist()):
        for u, v in ((a, b), (b, c), (c, a)):
            neighbors[u].add(v)
            neighbors[v].add(u)
        incident[a].append(face_index)
        incident[b].append(face_index)
        incident[c].append(face_index)
    return AdjacencyTable(
        neighbors=tuple(tuple(sorted(n)) for n in neighbors),
        incident_faces=tuple(tuple(f) for f in incident),
    )


def face_areas(mesh):
    tri = mesh.vertices[mesh.faces]
    cross = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    return 0.5 * np.linalg.norm(cross, axis=1)


def face_unit_normals(mesh):
    """Unit normal per face, oriented by the face winding."""
    return face_normals_array(mesh.vertices, mesh.faces)


def face_normals_array(vertices, faces):
    """Unit face normals for [..., V, 3] vertex arrays sharing one face list."""
    vertices = np.asarray(vertices, dtype=np.float64)
    tri = vertices[..., faces, :]
    cross = np.cross(tri[..., 1, :] - tri[..., 0, :], tri[..., 2, :] - tri[..., 0, :])
    norms = np.linalg.norm(cross, axis=-1)
    areas = 0.5 * norms
    degenerate = np.flatnonzero((areas < DEGENERATE_AREA).reshape(-1, len(faces)).any(axis=0))
    if len(degenerate):
        face = degenerate[0]
        raise DegenerateFaceError(face, float(areas.reshape(-1, len(faces))[:, face].min()))
    return cross / norms[..., None]


def validate_manifold(mesh):
    """Report non-manifold edges, isolated vertices and duplicate faces."""
    report = ValidationReport()
    edge_faces = defaultdict(list)
    directed = defaultdict(int)
    for face_index, (a, b, c) in enumerate(mesh.faces.tolist()):
        for u, v in ((a, b), (b, c), (c, a)):
            edge_faces[(min(u, v), max(u, v))].append(face_index)
            directed[(u, v)] += 1

    for edge in sorted(edge_faces):
        if len(edge_faces[edge]) > 2:
            report.non_manifold_edges.append(edge)
        elif len(edge_faces[edge]) == 2:
            u, v = edge
            # a consistently wound edge is traversed once in each direction
            if directed[(u, v)] != 1 or directed[(v, u)] != 1:
                report.inconsistent_winding_edges.append(edge)

    used = np.zeros(mesh.vertex_count, dtype=bool)
    used[mesh.faces.ravel()] = True
    report.isolated_vertices = np.flatnonzero(~used).tolist()

    seen = {}
    for face_index, face in enumerate(mesh.faces.tolist()):
        key = tuple(sorted(face))
        if key in seen:
            report.duplicate_faces.append((seen[key], face_index))
        else:
            seen[key] = face_index

    if report.inconsistent_winding_edges:
        logger.warning("%d edges have inconsistent winding", len(report.inconsistent_winding_edges))
    return report


def euler_characteristic(mesh):
    return mesh.vertex_count - len(mesh.edges()) + mesh.face_count


def mean_edge_length(mesh):
    edges = mesh.edges()
    return float(np.linalg.norm(mesh.vertices[edges[:, 0]] - mesh.vertices[edges[:, 1]], axis=1).mean())


def bounding_box_diagonal(vertices):
    vertices = np.asarray(vertices)
    return float(np.linalg.norm(vertices.max(axis=0) - vertices.min(axis=0)))


def icosahedron(radius=1.0):
    t = (1.0 + 5.0 ** 0.5) / 2.0
    vertices = np.array([
        [-1, t, 0], [1, t, 0], [-1, -t, 0], [1, -t, 0],
        [0, -1, t], [0, 1, t], [0, -1, -t], [0, 1, -t],
        [t, 0, -1], [t, 0, 1], [-t, 0, -1], [-t, 0, 1],
    ], dtype=np.float64)
    vertices *= radius / np.linalg.norm(vertices[0])
    faces = np.array([
        [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
        [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
        [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
        [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
    ], dtype=np.int64)
    return Mesh(vertices, faces)


def icosphere(subdivisions, radius=1.0):
    """Loop-style subdivided icosahedron projected onto the sphere."""
    base = icosahedron()
    vertices = [tuple(v) for v in base.vertices]
    faces = base.faces.tolist()
    for _ in range(subdivisions):
        midpoint_cache = {}

        def midpoint(a, b):
            key = (min(a, b), max(a, b))
            if key not in midpoint_cache:
                m = (np.array(vertices[a]) + np.array(vertices[b])) / 2.0
                vertices.append(tuple(m / np.linalg.norm(m)))
                midpoint_cache[key] = len(vertices) - 1
            return midpoint_cache[key]

        refined = []
        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            refined.extend([[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]])
        faces = refined
    return Mesh(np.array(vertices) * radius, np.array(faces))
