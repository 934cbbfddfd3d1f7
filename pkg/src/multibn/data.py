"""Deterministic synthetic video dataset.

Five (by default) classes of short clips, each defined by how a soft
colored blob moves over 8 frames.  Trajectories are anchored near the
frame center with a small jitter, so every class traces a distinct
spatiotemporal envelope (east sweep, west sweep, diagonal sweep, vertical
oscillation, orbit) that a small 3D CNN separates by construction.
Appearance (size, color, background, noise) is randomized identically
across classes.  Everything derives from the manifest seed; regeneration
is bitwise identical.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .container import IntegrityError, load_tensors, save_tensors
from .seeding import derived_rng

GENERATOR_VERSION = 2

CLIP_SHAPE = (3, 8, 32, 32)  # [C, T, H, W]
NOISE_SIGMA = 0.06


@dataclass(frozen=True)
class DatasetManifest:
    seed: int
    train_size: int
    test_size: int
    class_count: int = 5
    generator_version: int = GENERATOR_VERSION

    def __post_init__(self):
        if self.class_count < 2:
            raise ValueError(f"class_count must be >= 2, got {self.class_count}")
        if self.train_size < 0 or self.test_size < 0:
            raise ValueError("split sizes must be non-negative")
        if self.generator_version != GENERATOR_VERSION:
            raise ValueError(
                f"generator version {self.generator_version} not supported (have {GENERATOR_VERSION})"
            )


@dataclass
class Split:
    videos: np.ndarray  # [N, 3, 8, 32, 32] float32 in [0, 1]
    labels: np.ndarray  # [N] int64
    ids: np.ndarray  # [N] int64

    def __len__(self):
        return len(self.ids)


@dataclass
class Dataset:
    manifest: DatasetManifest
    train: Split
    test: Split


def _positions(label, rng, T):
    """Per-frame blob centers [T, 2] (row, col), the only class-dependent part.

    All trajectories are anchored near the frame center (jitter +-2 px) and
    stay inside the frame, so each class owns a distinct spatiotemporal
    envelope instead of relying on relative motion alone.
    """
    anchor = 16.0 + rng.uniform(-2.0, 2.0, size=2)
    speed = rng.uniform(1.7, 2.1)
    t = np.arange(T, dtype=np.float64)
    kind = label % 5
    if kind == 0:  # sweep east: west side early, east side late
        return np.stack([np.full(T, anchor[0]), anchor[1] - 7.0 + speed * t], axis=1)
    if kind == 1:  # sweep west
        return np.stack([np.full(T, anchor[0]), anchor[1] + 7.0 - speed * t], axis=1)
    if kind == 2:  # sweep diagonal: north-west early, south-east late
        d = speed / np.sqrt(2.0)
        return np.stack([anchor[0] - 5.0 + d * t, anchor[1] - 5.0 + d * t], axis=1)
    if kind == 3:  # vertical oscillation about the anchor, period 4 frames
        amp = rng.uniform(3.0, 4.5)
        return np.stack([anchor[0] + amp * np.sin(2.0 * np.pi * t / 4.0),
                         np.full(T, anchor[1])], axis=1)
    if kind == 4:  # orbit around the anchor
        radius = rng.uniform(4.5, 5.5)
        omega = rng.uniform(0.75, 0.95)
        phase = rng.uniform(0.0, 2.0 * np.pi)
        ang = phase + omega * t
        return np.stack([anchor[0] + radius * np.sin(ang), anchor[1] + radius * np.cos(ang)], axis=1)
    raise AssertionError


def _drift_angle_positions(label, rng, T):
    """Classes past the five named patterns sweep along golden-angle directions."""
    anchor = 16.0 + rng.uniform(-2.0, 2.0, size=2)
    speed = rng.uniform(1.7, 2.1)
    theta = np.deg2rad((label * 137.508) % 360.0)
    t = np.arange(T, dtype=np.float64)
    span = speed * (T - 1) / 2.0
    return np.stack([anchor[0] - span * np.sin(theta) + speed * np.sin(theta) * t,
                     anchor[1] - span * np.cos(theta) + speed * np.cos(theta) * t], axis=1)


def _render_clip(label, rng):
    C, T, H, W = CLIP_SHAPE
    centers = _positions(label, rng, T) if label < 5 else _drift_angle_positions(label, rng, T)
    radius = rng.uniform(2.8, 3.4)
    bg = rng.uniform(0.25, 0.35, size=C)
    color = rng.uniform(0.75, 0.95, size=C)
    rows = np.arange(H, dtype=np.float64)
    cols = np.arange(W, dtype=np.float64)
    dr = np.abs(rows[None, :] - (centers[:, 0:1] % H))  # [T, H]
    dr = np.minimum(dr, H - dr)
    dc = np.abs(cols[None, :] - (centers[:, 1:2] % W))  # [T, W]
    dc = np.minimum(dc, W - dc)
    dist = np.sqrt(dr[:, :, None] ** 2 + dc[:, None, :] ** 2)  # [T, H, W]
    mask = 1.0 / (1.0 + np.exp((dist - radius) / 0.6))
    clip = bg[:, None, None, None] * (1.0 - mask) + color[:, None, None, None] * mask
    clip = clip + rng.normal(0.0, NOISE_SIGMA, size=(C, T, H, W))
    return np.clip(clip, 0.0, 1.0).astype(np.float32)


def _make_split(manifest, start_id, size):
    C = manifest.class_count
    videos = np.empty((size,) + CLIP_SHAPE, dtype=np.float32)
    labels = np.empty(size, dtype=np.int64)
    ids = np.arange(start_id, start_id + size, dtype=np.int64)
    for i, sample_id in enumerate(ids):
        label = int(sample_id - start_id) % C  # stratified: counts within 1 of size/C
        rng = derived_rng(manifest.seed, "sample", int(sample_id), manifest.generator_version)
        videos[i] = _render_clip(label, rng)
        labels[i] = label
    return Split(videos=videos, labels=labels, ids=ids)


def generate_synthetic_dataset(manifest):
    """Build both splits from the manifest; test ids continue after train ids."""
    train = _make_split(manifest, 0, manifest.train_size)
    test = _make_split(manifest, manifest.train_size, manifest.test_size)
    return Dataset(manifest=manifest, train=train, test=test)


def save_dataset(path, dataset):
    tensors = {}
    for name, split in (("train", dataset.train), ("test", dataset.test)):
        tensors[f"{name}/videos"] = split.videos
        tensors[f"{name}/labels"] = split.labels
        tensors[f"{name}/ids"] = split.ids
    save_tensors(path, tensors, manifest=asdict(dataset.manifest))


def load_dataset(path):
    tensors, meta = load_tensors(path, require_dtype="float32")
    try:
        manifest = DatasetManifest(**meta)
        splits = {
            name: Split(videos=tensors[f"{name}/videos"],
                        labels=tensors[f"{name}/labels"],
                        ids=tensors[f"{name}/ids"])
            for name in ("train", "test")
        }
    except (KeyError, TypeError) as exc:
        raise IntegrityError(f"{path}: not a dataset container ({exc})") from exc
    for split in splits.values():
        if split.videos.ndim != 5 or split.videos.shape[1:] != CLIP_SHAPE:
            raise IntegrityError(f"{path}: video tensor has shape {split.videos.shape}")
        if split.videos.size and (split.videos.min() < 0.0 or split.videos.max() > 1.0):
            raise IntegrityError(f"{path}: pixel values outside [0, 1]")
    all_ids = np.concatenate([splits["train"].ids, splits["test"].ids])
    if len(np.unique(all_ids)) != len(all_ids):
        raise IntegrityError(f"{path}: sample ids are not unique across splits")
    return Dataset(manifest=manifest, train=splits["train"], test=splits["test"])
