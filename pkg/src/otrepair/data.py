"""Synthetic image classification data, trigger poisoning, and noise batches.

Classes are rendered as oriented sinusoidal gratings (class-specific angle,
frequency, and phase) with per-sample translation jitter and pixel noise;
a small MLP separates them comfortably while leaving room for a trigger
shortcut to be learned.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import DimensionError, FormatError, ValidationError
from .ioutil import atomic_write_bytes
from .tensors import DTYPE, Rng, Tensor

DATASET_MAGIC = b"OTBD"
DATASET_VERSION = 1

PATCH = "patch"
BLEND = "blend"


@dataclass
class Dataset:
    images: Tensor  # (N, A, H, W), values in [0, 1]
    labels: np.ndarray  # (N,) int64 in [0, class_count)
    class_count: int
    split: str = "train"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise DimensionError(f"images must be (N, A, H, W), got {self.images.shape}")
        if self.labels.shape != (self.images.shape[0],):
            raise DimensionError("labels length must equal image count")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise ValidationError(f"labels must lie in [0, {self.class_count})")

    def __len__(self) -> int:
        return self.images.shape[0]

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])


def _grating(c: int, class_count: int, shape: tuple[int, int, int], dy: float, dx: float) -> np.ndarray:
    a, h, w = shape
    angle = np.pi * c / class_count
    freq = 2.0 + (c % 3)  # cycles per image height
    phase = 2.0 * np.pi * c / class_count
    ii, jj = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    t = ((ii - h / 2 + dy) * np.cos(angle) + (jj - w / 2 + dx) * np.sin(angle)) / h
    img = 0.5 + 0.4 * np.sin(2.0 * np.pi * freq * t + phase)
    return np.broadcast_to(img, (a, h, w))


def gen_synthetic(
    class_count: int,
    per_class: int,
    shape: tuple[int, int, int] = (1, 16, 16),
    seed: int = 0,
    noise: float = 0.15,
    jitter: int = 2,
    split: str = "train",
) -> Dataset:
    """Deterministic per-class grating patterns plus seeded noise."""
    if class_count < 2:
        raise ValidationError("class_count must be >= 2")
    if per_class < 0:
        raise ValidationError("per_class must be >= 0")
    a, h, w = shape
    if a < 1 or h < 4 or w < 4:
        raise DimensionError(f"degenerate image shape {shape}")
    rng = Rng(seed).stream("synthetic", split)
    n = class_count * per_class
    images = np.empty((n, a, h, w), dtype=DTYPE)
    labels = np.empty(n, dtype=np.int64)
    offsets = rng.stream("jitter").integers(-jitter, jitter + 1, size=(n, 2)) if jitter else np.zeros((n, 2), np.int64)
    noise_field = rng.stream("pixel-noise").normal((n, a, h, w), scale=noise) if noise else 0.0
    pos = 0
    for c in range(class_count):
        for _ in range(per_class):
            base = _grating(c, class_count, shape, float(offsets[pos, 0]), float(offsets[pos, 1]))
            images[pos] = base
            labels[pos] = c
            pos += 1
    images = np.clip(images + noise_field, 0.0, 1.0).astype(DTYPE)
    order = rng.stream("order").permutation(n)
    return Dataset(images[order], labels[order], class_count, split, {"seed": seed})


# ---------------------------------------------------------------------------
# poisoning

@dataclass
class PoisonSpec:
    trigger_kind: str = PATCH
    target_label: int = 0
    poison_ratio: float = 0.10
    patch_size: int = 3
    blend_alpha: float = 0.2
    blend_pattern: Tensor | None = None
    pattern_seed: int = 7

    def validate(self, class_count: int, image_shape: tuple[int, int, int]):
        if self.trigger_kind not in (PATCH, BLEND):
            raise ValidationError(f"unknown trigger kind {self.trigger_kind!r}")
        if not 0 <= self.poison_ratio <= 1:
            raise ValidationError("poison_ratio must lie in [0, 1]")
        if not 0 <= self.target_label < class_count:
            raise ValidationError(f"target_label must lie in [0, {class_count})")
        _, h, w = image_shape
        if self.trigger_kind == PATCH and self.patch_size > min(h, w):
            raise DimensionError(f"patch size {self.patch_size} exceeds image {h}x{w}")

    def pattern_for(self, image_shape: tuple[int, int, int]) -> Tensor:
        if self.blend_pattern is not None:
            if tuple(self.blend_pattern.shape) != tuple(image_shape):
                raise DimensionError("blend pattern shape must match images")
            return self.blend_pattern
        return make_blend_pattern(image_shape, self.pattern_seed)


def make_blend_pattern(shape: tuple[int, int, int], seed: int = 7, gain: float = 3.0) -> Tensor:
    """Smooth seeded random field in [0, 1]: low-frequency cosine waves pushed
    toward high contrast, so a 0.2-opacity blend is a learnable cue."""
    a, h, w = shape
    rng = Rng(seed).stream("blend-pattern")
    ii, jj = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    field = np.zeros((h, w), dtype=np.float64)
    angles = rng.uniform((4,), 0.0, np.pi)
    freqs = rng.uniform((4,), 0.8, 2.5)
    phases = rng.uniform((4,), 0.0, 2.0 * np.pi)
    for k in range(4):
        t = (ii * np.cos(angles[k]) + jj * np.sin(angles[k])) / h
        field += np.cos(2.0 * np.pi * freqs[k] * t + phases[k])
    field = (field - field.mean()) / field.std()
    field = 0.5 + 0.5 * np.tanh(gain * field)
    return np.broadcast_to(field, (a, h, w)).astype(DTYPE)


def apply_trigger(images: Tensor, spec: PoisonSpec) -> Tensor:
    """Triggered copies of `images`; originals untouched."""
    out = images.copy()
    if spec.trigger_kind == PATCH:
        ps = spec.patch_size
        out[..., -ps:, -ps:] = 1.0
    else:
        pattern = spec.pattern_for(tuple(images.shape[1:]))
        out = ((1.0 - spec.blend_alpha) * out + spec.blend_alpha * pattern).astype(DTYPE)
    return out


def poison(ds: Dataset, spec: PoisonSpec, seed: int = 0) -> tuple[Dataset, np.ndarray]:
    """Poison floor(N * ratio) uniformly sampled images; returns the index set."""
    spec.validate(ds.class_count, ds.image_shape)
    n = len(ds)
    count = int(np.floor(n * spec.poison_ratio))
    if count == 0:
        return replace(ds, images=ds.images.copy(), labels=ds.labels.copy()), np.empty(0, dtype=np.int64)
    idx = np.sort(Rng(seed).stream("poison-idx").choice(n, count))
    images = ds.images.copy()
    labels = ds.labels.copy()
    images[idx] = apply_trigger(ds.images[idx], spec)
    labels[idx] = spec.target_label
    meta = dict(ds.meta, poisoned=count, trigger=spec.trigger_kind)
    return Dataset(images, labels, ds.class_count, ds.split, meta), idx


def make_asr_testset(test_ds: Dataset, spec: PoisonSpec) -> Dataset:
    """Trigger every test image whose true label is not the target.

    The returned labels all carry the target; the original labels live in
    meta["original_labels"].
    """
    spec.validate(test_ds.class_count, test_ds.image_shape)
    keep = test_ds.labels != spec.target_label
    images = apply_trigger(test_ds.images[keep], spec)
    labels = np.full(int(keep.sum()), spec.target_label, dtype=np.int64)
    meta = dict(test_ds.meta, original_labels=test_ds.labels[keep].tolist(), trigger=spec.trigger_kind)
    return Dataset(images, labels, test_ds.class_count, "asr", meta)


# ---------------------------------------------------------------------------
# noise batches for unlearning

@dataclass
class NoiseBatchSpec:
    shape: tuple[int, int, int]
    batch_size: int = 256
    label_ceiling: int = 9  # G: labels drawn uniformly from {0, ..., G}
    seed: int = 0

    def validate(self, class_count: int | None = None):
        if self.batch_size < 1:
            raise ValidationError("batch_size must be >= 1")
        if self.label_ceiling < 0:
            raise ValidationError("label_ceiling must be >= 0")
        if class_count is not None and self.label_ceiling >= class_count:
            raise ValidationError(f"label_ceiling must be < class_count ({class_count})")


def gen_noise_batch(spec: NoiseBatchSpec, rng: Rng | None = None) -> tuple[Tensor, np.ndarray]:
    """I.i.d. uniform [0,1] pixels and uniform labels over {0, ..., G}."""
    spec.validate()
    if rng is None:
        rng = Rng(spec.seed).stream("noise-batch")
    images = rng.stream("pixels").uniform((spec.batch_size,) + tuple(spec.shape))
    labels = rng.stream("labels").integers(0, spec.label_ceiling + 1, size=spec.batch_size)
    return images, labels


# ---------------------------------------------------------------------------
# container: MAGIC | version u32 LE | manifest_len u32 LE | manifest JSON |
# float32 LE pixels | uint8 labels

def dataset_bytes(ds: Dataset) -> bytes:
    if ds.class_count > 256:
        raise ValidationError("container stores labels as uint8; class_count must be <= 256")
    manifest = {
        "n": len(ds),
        "shape": list(ds.image_shape),
        "class_count": ds.class_count,
        "split": ds.split,
        "meta": ds.meta,
    }
    blob = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return b"".join(
        [
            DATASET_MAGIC,
            struct.pack("<I", DATASET_VERSION),
            struct.pack("<I", len(blob)),
            blob,
            np.ascontiguousarray(ds.images, dtype="<f4").tobytes(),
            np.ascontiguousarray(ds.labels, dtype=np.uint8).tobytes(),
        ]
    )


def save_dataset(ds: Dataset, path) -> None:
    atomic_write_bytes(path, dataset_bytes(ds))


def dataset_from_bytes(data: bytes) -> Dataset:
    if data[:4] != DATASET_MAGIC:
        raise FormatError(f"bad magic {data[:4]!r}, expected {DATASET_MAGIC!r}", 0)
    (version,) = struct.unpack("<I", data[4:8])
    if version != DATASET_VERSION:
        raise FormatError(f"unsupported container version {version}", 4)
    (mlen,) = struct.unpack("<I", data[8:12])
    try:
        manifest = json.loads(data[12 : 12 + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"manifest is not valid JSON: {exc}", 12) from exc
    offset = 12 + mlen
    n = manifest["n"]
    shape = tuple(manifest["shape"])
    pixel_bytes = 4 * n * int(np.prod(shape))
    if offset + pixel_bytes + n > len(data):
        raise FormatError("truncated container while reading pixels/labels", offset)
    images = np.frombuffer(data[offset : offset + pixel_bytes], dtype="<f4").reshape((n,) + shape).astype(DTYPE)
    offset += pixel_bytes
    labels = np.frombuffer(data[offset : offset + n], dtype=np.uint8).astype(np.int64)
    return Dataset(images, labels, manifest["class_count"], manifest["split"], manifest.get("meta", {}))


def load_dataset(path) -> Dataset:
    with open(path, "rb") as fh:
        return dataset_from_bytes(fh.read())
