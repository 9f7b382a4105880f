"""Synthetic low-contrast multi-structure volumes for desk-scale training.

Each sample places randomly oriented ellipsoids/capsules in a noisy
background; structure mean intensities sit contrast_delta apart on an
HU-like scale so the standard clip window applies verbatim. Later structures
overwrite earlier ones where they overlap, and the adjacency flag forces at
least one pair of structures to share a face, producing the weak-boundary
regime the network is meant to resolve.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional

import numpy as np
from scipy import ndimage

MIN_STRUCTURE_VOXELS = 20


@dataclass(frozen=True)
class SyntheticSpec:
    seed: int
    volume_shape: tuple
    num_structures: int = 3
    contrast_delta: float = 12.0
    noise_sigma: float = 12.0
    adjacency: bool = True
    background_intensity: float = -50.0


@dataclass
class VolumeSample:
    """One training example; edges are derived from labels downstream."""
    image: np.ndarray                 # float32 (H, W, D)
    labels: np.ndarray                # uint8 (H, W, D), 0 = background
    edges: Optional[np.ndarray]       # uint8 (H, W, D) or None
    spacing: tuple = (1.0, 1.0, 1.0)
    seed: int = 0

    def copy(self):
        return VolumeSample(self.image.copy(), self.labels.copy(),
                            None if self.edges is None else self.edges.copy(),
                            self.spacing, self.seed)


def nominal_intensity(spec: SyntheticSpec, label: int) -> float:
    """Noise-free mean intensity of one label (0 = background)."""
    return spec.background_intensity + label * spec.contrast_delta


def _random_rotation(rng: np.random.Generator) -> np.ndarray:
    m = rng.normal(size=(3, 3))
    q, r = np.linalg.qr(m)
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def _coords(shape) -> np.ndarray:
    axes = [np.arange(s, dtype=np.float64) for s in shape]
    return np.stack(np.meshgrid(*axes, indexing="ij"), axis=0)  # (3, H, W, D)


def _ellipsoid_mask(coords, center, semi_axes, rot) -> np.ndarray:
    rel = coords - np.asarray(center).reshape(3, 1, 1, 1)
    local = np.einsum("ji,jxyz->ixyz", rot, rel)
    q = sum((local[i] / semi_axes[i]) ** 2 for i in range(3))
    return q <= 1.0


def _capsule_mask(coords, center, direction, half_len, radius) -> np.ndarray:
    rel = coords - np.asarray(center).reshape(3, 1, 1, 1)
    t = np.einsum("i,ixyz->xyz", direction, rel)
    t = np.clip(t, -half_len, half_len)
    closest = rel - direction.reshape(3, 1, 1, 1) * t[None]
    return np.sqrt((closest ** 2).sum(axis=0)) <= radius


def _touches_border(mask: np.ndarray) -> bool:
    return bool(mask[0].any() or mask[-1].any() or mask[:, 0].any() or mask[:, -1].any()
                or mask[:, :, 0].any() or mask[:, :, -1].any())


def _adjacent_to(mask: np.ndarray, other: np.ndarray) -> bool:
    """True when mask overlaps `other` or shares a voxel face with it."""
    if (mask & other).any():
        return True
    grown = ndimage.binary_dilation(mask, structure=ndimage.generate_binary_structure(3, 1))
    return bool((grown & other).any())


def _draw_structure(rng, coords, shape):
    h, w, d = shape
    scale = min(h, w)
    center = np.array([rng.uniform(0.25 * h, 0.75 * h),
                       rng.uniform(0.25 * w, 0.75 * w),
                       rng.uniform(0.3 * d, 0.7 * d)])
    if rng.random() < 0.5:
        semi = np.array([rng.uniform(0.12, 0.24) * scale,
                         rng.uniform(0.12, 0.24) * scale,
                         rng.uniform(0.12, 0.28) * d])
        return _ellipsoid_mask(coords, center, semi, _random_rotation(rng))
    direction = rng.normal(size=3)
    direction /= np.linalg.norm(direction)
    half_len = rng.uniform(0.10, 0.22) * scale
    radius = rng.uniform(0.09, 0.16) * scale
    return _capsule_mask(coords, center, direction, half_len, radius)


def _place_labels(rng: np.random.Generator, spec: SyntheticSpec) -> np.ndarray:
    shape = tuple(spec.volume_shape)
    coords = _coords(shape)
    for _ in range(40):  # whole-arrangement retries
        labels = np.zeros(shape, dtype=np.uint8)
        union = np.zeros(shape, dtype=bool)
        ok = True
        for s in range(1, spec.num_structures + 1):
            placed = False
            for attempt in range(1000):
                mask = _draw_structure(rng, coords, shape)
                if not mask.any() or _touches_border(mask):
                    continue
                if spec.adjacency and s > 1 and not _adjacent_to(mask, union):
                    continue
                labels[mask] = s
                union |= mask
                placed = True
                break
            if not placed:
                raise RuntimeError(
                    f"could not place structure {s} inside volume {shape} after 1000 attempts")
            if not ok:
                break
        counts = np.bincount(labels.reshape(-1), minlength=spec.num_structures + 1)
        if (counts[1:] < MIN_STRUCTURE_VOXELS).any():
            continue  # a later structure swallowed an earlier one; redraw
        if spec.adjacency and spec.num_structures >= 2 and not _has_touching_pair(labels):
            continue
        return labels
    raise RuntimeError("synthetic arrangement kept violating size/adjacency constraints")


def _has_touching_pair(labels: np.ndarray) -> bool:
    for ax in range(3):
        a = np.moveaxis(labels, ax, 0)[:-1]
        b = np.moveaxis(labels, ax, 0)[1:]
        if ((a > 0) & (b > 0) & (a != b)).any():
            return True
    return False


def gen_synthetic(spec: SyntheticSpec, count: int) -> list:
    """Deterministically generate `count` samples (bit-identical per seed)."""
    samples = []
    for i in range(count):
        rng = np.random.default_rng([spec.seed, i])
        labels = _place_labels(rng, spec)
        image = np.full(labels.shape, spec.background_intensity, dtype=np.float64)
        for s in range(1, spec.num_structures + 1):
            image[labels == s] = nominal_intensity(spec, s)
        if spec.noise_sigma > 0:
            image += rng.normal(0.0, spec.noise_sigma, size=labels.shape)
        samples.append(VolumeSample(image=image.astype(np.float32), labels=labels,
                                    edges=None, spacing=(1.0, 1.0, 1.0), seed=i))
    return samples


# ---------------------------------------------------------------------------
# preprocessing and augmentation
# ---------------------------------------------------------------------------

def preprocess(volume: np.ndarray, clip_lo: float = -250.0, clip_hi: float = 200.0) -> np.ndarray:
    """Clip to the HU window, then z-score per volume (variance floor 1e-8)."""
    v = np.clip(np.asarray(volume, dtype=np.float64), clip_lo, clip_hi)
    mean = v.mean()
    sd = np.sqrt(max(v.var(), 1e-8))
    return ((v - mean) / sd).astype(np.float32)


def rotate_axial(volume: np.ndarray, angle_deg: float, order: int) -> np.ndarray:
    """Rotate in the (H, W) plane about the depth axis.

    Exact multiples of 90 degrees take the lossless axis-aligned path; other
    angles interpolate (order 0 = nearest for labels/edges, 1 = linear).
    """
    if angle_deg % 90.0 == 0.0:
        k = int(angle_deg // 90) % 4
        return np.ascontiguousarray(np.rot90(volume, k, axes=(0, 1)))
    return ndimage.rotate(volume, angle_deg, axes=(0, 1), reshape=False,
                          order=order, mode="nearest")


def apply_augment(sample: VolumeSample, flips, angle_deg: float) -> VolumeSample:
    """Deterministic flip/rotate; labels and edges move with the image using
    nearest-neighbor semantics."""
    img, lab = sample.image, sample.labels
    edges = sample.edges
    for ax in range(3):
        if flips[ax]:
            img = np.flip(img, axis=ax)
            lab = np.flip(lab, axis=ax)
            if edges is not None:
                edges = np.flip(edges, axis=ax)
    if angle_deg != 0.0:
        img = rotate_axial(img, angle_deg, order=1)
        lab = rotate_axial(lab, angle_deg, order=0)
        if edges is not None:
            edges = rotate_axial(edges, angle_deg, order=0)
    return VolumeSample(image=np.ascontiguousarray(img, dtype=np.float32),
                        labels=np.ascontiguousarray(lab, dtype=sample.labels.dtype),
                        edges=None if edges is None else np.ascontiguousarray(edges, dtype=np.uint8),
                        spacing=sample.spacing, seed=sample.seed)


def augment(sample: VolumeSample, rng: np.random.Generator,
            max_angle_deg: float = 15.0) -> VolumeSample:
    """Random flips (p=0.5 per axis) and in-plane rotation within +/-max_angle."""
    flips = rng.random(3) < 0.5
    angle = float(rng.uniform(-max_angle_deg, max_angle_deg))
    return apply_augment(sample, flips, angle)
