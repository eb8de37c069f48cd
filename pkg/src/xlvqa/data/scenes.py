"""Seeded scene generation and synthetic visual features.

A scene holds 3..8 attributed objects in the unit square. The (color, shape)
pair of every object is unique within its scene, so "the <color> <shape>"
always resolves; richer or shorter descriptors are handled at question
generation time. Features are sums of fixed random attribute embeddings
plus Gaussian noise; spatial vectors are (x, y, w, h, w*h).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..nn.rng import derive_rng
from .vocab import ATTRIBUTES, COLORS, MATERIALS, SHAPES, SIZES


class SceneConstraintError(RuntimeError):
    """Rejection sampling failed to satisfy scene constraints."""


@dataclass(frozen=True)
class SceneObject:
    shape: str
    color: str
    size: str
    material: str
    box: tuple[float, float, float, float]  # (x, y, w, h), inside [0, 1]^2

    def attr(self, name: str) -> str:
        return getattr(self, name)


@dataclass(frozen=True)
class Scene:
    scene_id: str
    objects: tuple[SceneObject, ...]


@dataclass(frozen=True)
class SceneConfig:
    min_objects: int = 3
    max_objects: int = 8

    def __post_init__(self):
        if not 1 <= self.min_objects <= self.max_objects:
            raise ValueError("invalid object count bounds")


MAX_ATTEMPTS = 1000


def generate_scene(seed, cfg: SceneConfig, scene_id: str = "") -> Scene:
    """Deterministically sample a scene; rejects duplicate (color, shape) pairs."""
    rng = derive_rng("scene", seed)
    n = int(rng.integers(cfg.min_objects, cfg.max_objects + 1))
    objects = []
    used_pairs = set()
    attempts = 0
    while len(objects) < n:
        attempts += 1
        if attempts > MAX_ATTEMPTS:
            raise SceneConstraintError(f"no valid scene after {MAX_ATTEMPTS} attempts")
        shape = SHAPES[rng.integers(len(SHAPES))]
        color = COLORS[rng.integers(len(COLORS))]
        if (color, shape) in used_pairs:
            continue
        used_pairs.add((color, shape))
        size = SIZES[rng.integers(len(SIZES))]
        material = MATERIALS[rng.integers(len(MATERIALS))]
        w = float(rng.uniform(0.05, 0.3))
        h = float(rng.uniform(0.05, 0.3))
        x = float(rng.uniform(0.0, 1.0 - w))
        y = float(rng.uniform(0.0, 1.0 - h))
        objects.append(SceneObject(shape, color, size, material, (x, y, w, h)))
    return Scene(scene_id, tuple(objects))


@dataclass
class VisualFeatures:
    features: np.ndarray  # (n_objects, d_v)
    spatial: np.ndarray  # (n_objects, 5)
    object_count: int


class FeatureSpace:
    """Fixed random attribute embeddings, drawn once per dataset seed."""

    def __init__(self, dataset_seed: int, d_v: int = 32, noise: float = 0.1):
        self.d_v = d_v
        self.noise = noise
        rng = derive_rng(dataset_seed, "attribute-embeddings")
        self.embeddings: dict[str, np.ndarray] = {}
        for attr in ("shape", "color", "size", "material"):
            for value in ATTRIBUTES[attr]:
                self.embeddings[value] = rng.standard_normal(d_v) / np.sqrt(d_v)

    def featurize(self, scene: Scene, noise_seed: int) -> VisualFeatures:
        rng = derive_rng(noise_seed, "featurize", scene.scene_id)
        n = len(scene.objects)
        feats = np.zeros((n, self.d_v))
        spatial = np.zeros((n, 5))
        for i, obj in enumerate(scene.objects):
            feats[i] = (
                self.embeddings[obj.shape]
                + self.embeddings[obj.color]
                + self.embeddings[obj.size]
                + self.embeddings[obj.material]
            )
            x, y, w, h = obj.box
            spatial[i] = (x, y, w, h, w * h)
        if self.noise > 0:
            feats += self.noise * rng.standard_normal(feats.shape)
        return VisualFeatures(feats, spatial, n)
