"""Posed, rendered samples of the synthetic hand.

Poses come from random finger flexion applied by linear blend skinning,
followed by a random global rotation. Meshes are root-relative camera
coordinates in mm. The camera looks down +z; a point projects to
normalized image coordinates ``f * (x, y) / z`` in [-1, 1], with -1 and +1
at the centres of the border pixels.

Paired samples re-render the same mesh after a roll about the optical
axis, so the 3D rotation and 2D affine between the views are exact.
"""
import logging
import zipfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.spatial.transform import Rotation

from src.harness.template import NODE_PARENTS, NUM_NODES
from src.mesh.mesh_core import face_normals_array
from src.utils.errors import ConfigError

logger = logging.getLogger(__name__)

FOCAL_NORMALIZED = 2.5
CAMERA_DEPTH_MM = 400.0
# per-chain limits in degrees for the three joints of each finger
FLEXION_LIMITS_DEG = ((0.0, 70.0), (0.0, 90.0), (0.0, 60.0))
ABDUCTION_LIMIT_DEG = 10.0
GLOBAL_TILT_DEG = 25.0
GLOBAL_ROLL_DEG = 45.0
PAIR_ROLL_DEG = 30.0
AMBIENT = 0.25
DIFFUSE = 0.75
BACKGROUND = 0.0
DATASET_FORMAT_VERSION = 1


@dataclass
class SyntheticSample:
    image: np.ndarray        # H x W x 3 in [0, 1]
    gt_mesh: np.ndarray      # V x 3, root-relative mm
    gt_pose2d: np.ndarray    # 21 x 2, normalized
    gt_joints: np.ndarray    # 21 x 3, root-relative mm
    paired: object = None
    rotation: np.ndarray = None  # maps this view's mesh onto the paired view's
    affine: np.ndarray = None    # maps this view's 2D pose onto the paired view's


def project(points):
    """[..., 3] camera-space points -> [..., 2] normalized image coordinates."""
    return FOCAL_NORMALIZED * points[..., :2] / points[..., 2:3]


def to_pixels(uv, height, width):
    """Align-corners mapping of normalized coordinates to pixel (column, row)."""
    return np.stack([(uv[..., 0] + 1.0) * 0.5 * (width - 1),
                     (uv[..., 1] + 1.0) * 0.5 * (height - 1)], axis=-1)


def _axis_rotation(axis, degrees):
    return Rotation.from_rotvec(np.radians(degrees) * np.asarray(axis, dtype=np.float64)).as_matrix()


def random_articulation(rng):
    """Local rotation matrix per skeletal node (wrist fixed)."""
    rotations = np.tile(np.eye(3), (NUM_NODES, 1, 1))
    curl = rng.uniform(0.0, 1.0)
    for chain in range(5):
        first = 1 + 3 * chain
        # the thumb points along -x and bends about y; the fingers point along +y and bend about x
        flex_axis = (0.0, 1.0, 0.0) if chain == 0 else (1.0, 0.0, 0.0)
        for k, (low, high) in enumerate(FLEXION_LIMITS_DEG):
            angle = curl * rng.uniform(low, high)
            rotations[first + k] = _axis_rotation(flex_axis, angle)
        spread = rng.uniform(-ABDUCTION_LIMIT_DEG, ABDUCTION_LIMIT_DEG)
        rotations[first] = _axis_rotation((0.0, 0.0, 1.0), spread) @ rotations[first]
    return rotations


def forward_kinematics(rest_nodes, rotations):
    """World 4x4 transform of every node; each rotates about its rest position."""
    transforms = np.zeros((NUM_NODES, 4, 4))
    for j, parent in enumerate(NODE_PARENTS):
        local = np.eye(4)
        local[:3, :3] = rotations[j]
        local[:3, 3] = rest_nodes[j] - rotations[j] @ rest_nodes[j]
        transforms[j] = local if parent < 0 else transforms[parent] @ local
    return transforms


def skin(vertices, weights, transforms):
    """Linear blend skinning of [V, 3] rest vertices."""
    blended = np.einsum('vj,jab->vab', weights, transforms)
    homogeneous = np.concatenate([vertices, np.ones((len(vertices), 1))], axis=1)
    return np.einsum('vab,vb->va', blended, homogeneous)[:, :3]


def _face_colors(template):
    part = template.skin_weights[template.mesh.faces].sum(axis=1).argmax(axis=1)
    hue = np.linspace(0.0, 1.0, NUM_NODES, endpoint=False)
    palette = np.stack([0.75 + 0.25 * np.cos(2 * np.pi * hue),
                        0.55 + 0.25 * np.cos(2 * np.pi * (hue + 1 / 3)),
                        0.45 + 0.25 * np.cos(2 * np.pi * (hue + 2 / 3))], axis=1)
    return np.clip(palette[part], 0.0, 1.0)


def render(camera_vertices, faces, face_colors, height, width):
    """Flat-shaded z-buffer rasterization; returns an H x W x 3 image in [0, 1]."""
    pixels = to_pixels(project(camera_vertices), height, width)
    depth = camera_vertices[:, 2]
    normals = face_normals_array(camera_vertices, faces)
    shade = AMBIENT + DIFFUSE * np.abs(normals[:, 2])
    zbuffer = np.full((height, width), np.inf)
    image = np.full((height, width, 3), BACKGROUND)
    for f, (i, j, k) in enumerate(faces):
        xs, ys = pixels[[i, j, k], 0], pixels[[i, j, k], 1]
        x0, x1 = max(int(np.ceil(xs.min())), 0), min(int(np.floor(xs.max())), width - 1)
        y0, y1 = max(int(np.ceil(ys.min())), 0), min(int(np.floor(ys.max())), height - 1)
        if x0 > x1 or y0 > y1:
            continue
        area = (xs[1] - xs[0]) * (ys[2] - ys[0]) - (xs[2] - xs[0]) * (ys[1] - ys[0])
        if abs(area) < 1e-12:
            continue
        gx, gy = np.meshgrid(np.arange(x0, x1 + 1), np.arange(y0, y1 + 1))
        w0 = ((xs[1] - gx) * (ys[2] - gy) - (xs[2] - gx) * (ys[1] - gy)) / area
        w1 = ((xs[2] - gx) * (ys[0] - gy) - (xs[0] - gx) * (ys[2] - gy)) / area
        w2 = 1.0 - w0 - w1
        inside = (w0 >= 0) & (w1 >= 0) & (w2 >= 0)
        z = w0 * depth[i] + w1 * depth[j] + w2 * depth[k]
        visible = inside & (z < zbuffer[gy, gx])
        zbuffer[gy[visible], gx[visible]] = z[visible]
        image[gy[visible], gx[visible]] = face_colors[f] * shade[f]
    return np.clip(image, 0.0, 1.0)


class SampleGenerator:
    """Shared per-template state for rendering samples."""

    def __init__(self, template, image_size):
        self.template = template
        self.height, self.width = image_size
        self.colors = _face_colors(template)
        self.rest_nodes = template.rest_joints[:NUM_NODES]

    def _view(self, camera_vertices):
        joints = self.template.regress_joints(camera_vertices)
        root = joints[0]
        image = render(camera_vertices, self.template.mesh.faces, self.colors, self.height, self.width)
        return SyntheticSample(image=image.astype(np.float32),
                               gt_mesh=camera_vertices - root,
                               gt_pose2d=project(joints),
                               gt_joints=joints - root)

    def sample(self, seed_sequence, paired=False):
        rng = np.random.default_rng(seed_sequence)
        transforms = forward_kinematics(self.rest_nodes, random_articulation(rng))
        posed = skin(self.template.mesh.vertices, self.template.skin_weights, transforms)
        tilt = rng.uniform(-GLOBAL_TILT_DEG, GLOBAL_TILT_DEG, size=2)
        roll = rng.uniform(-GLOBAL_ROLL_DEG, GLOBAL_ROLL_DEG)
        orientation = Rotation.from_euler('xyz', [tilt[0], tilt[1], roll], degrees=True).as_matrix()
        rotated = posed @ orientation.T
        center = 0.5 * (rotated.max(axis=0) + rotated.min(axis=0))
        camera = rotated - center + np.array([0.0, 0.0, CAMERA_DEPTH_MM])
        first = self._view(camera)
        if paired:
            angle = np.radians(rng.uniform(-PAIR_ROLL_DEG, PAIR_ROLL_DEG))
            c, s = np.cos(angle), np.sin(angle)
            rotation = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
            second = self._view(camera @ rotation.T)
            # both views carry the same mesh up to the roll
            second.gt_mesh = first.gt_mesh @ rotation.T
            second.gt_joints = first.gt_joints @ rotation.T
            first.paired = second
            first.rotation = rotation
            first.affine = np.array([[c, -s, 0.0], [s, c, 0.0]])
        return first


def generate_dataset(template, n, paired=False, seed=0, image_size=(128, 128), threads=1):
    """``n`` samples from per-sample seeds spawned off ``seed``; order is independent of ``threads``."""
    if n < 0:
        raise ConfigError(f"dataset size must be non-negative, got {n}")
    root = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    seeds = root.spawn(n)
    generator = SampleGenerator(template, image_size)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            samples = list(pool.map(lambda s: generator.sample(s, paired), seeds))
    else:
        samples = [generator.sample(s, paired) for s in seeds]
    logger.info("Generated %d %s samples at %dx%d", n, 'paired' if paired else 'single',
                image_size[0], image_size[1])
    return samples


def stack_samples(samples):
    """Batch arrays: images as [B, 3, H, W] plus meshes, poses and joints."""
    return {
        'images': np.stack([s.image for s in samples]).transpose(0, 3, 1, 2),
        'meshes': np.stack([s.gt_mesh for s in samples]),
        'poses': np.stack([s.gt_pose2d for s in samples]),
        'joints': np.stack([s.gt_joints for s in samples]),
    }


def save_dataset(samples, path):
    """One ``.npz`` per dataset; paired views are stored alongside the first views."""
    arrays = {'format_version': np.array(DATASET_FORMAT_VERSION)}
    for key, value in stack_samples(samples).items():
        arrays[key] = value
    if samples and samples[0].paired is not None:
        for key, value in stack_samples([s.paired for s in samples]).items():
            arrays[f"paired_{key}"] = value
        arrays['rotations'] = np.stack([s.rotation for s in samples])
        arrays['affines'] = np.stack([s.affine for s in samples])
    np.savez_compressed(path, **arrays)
    logger.info("Saved %d samples to %s", len(samples), path)


def load_dataset(path):
    try:
        data = np.load(path)
    except FileNotFoundError:
        raise ConfigError(f"dataset file not found: {path}")
    except (ValueError, zipfile.BadZipFile) as e:
        raise ConfigError(f"{path} is not a dataset file: {e}")
    if 'format_version' not in data:
        raise ConfigError(f"{path} lacks a format_version entry")
    if int(data['format_version']) != DATASET_FORMAT_VERSION:
        raise ConfigError(f"unsupported dataset format {int(data['format_version'])}")

    def unstack(prefix):
        return [SyntheticSample(image=img.transpose(1, 2, 0), gt_mesh=mesh, gt_pose2d=pose, gt_joints=joints)
                for img, mesh, pose, joints in zip(data[f"{prefix}images"], data[f"{prefix}meshes"],
                                                   data[f"{prefix}poses"], data[f"{prefix}joints"])]

    samples = unstack('')
    if 'rotations' in data:
        for sample, second, rotation, affine in zip(samples, unstack('paired_'), data['rotations'], data['affines']):
            sample.paired, sample.rotation, sample.affine = second, rotation, affine
    return samples


def save_preview(sample, path):
    """PNG of the rendered image with the 2D joints marked."""
    image = (np.clip(sample.image, 0.0, 1.0) * 255).astype(np.uint8)
    height, width = image.shape[:2]
    for x, y in to_pixels(sample.gt_pose2d, height, width):
        col, row = int(round(x)), int(round(y))
        if 0 <= row < height and 0 <= col < width:
            image[row, col] = (255, 255, 0)
    Image.fromarray(image).save(Path(path))
