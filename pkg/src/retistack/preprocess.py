"""Image/metadata normalization, eye-pair stacking, and dihedral augmentation."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .data import GENDER_ENCODING, PatientRecord

METADATA_MODES = ("none", "gender", "age", "both")


class PreprocessError(ValueError):
    pass


@dataclass(frozen=True)
class NormalizationSpec:
    """Min/max bounds for (x - min) / (max - min) scaling."""

    min_value: float
    max_value: float

    def __post_init__(self):
        if not self.max_value > self.min_value:
            raise PreprocessError("degenerate normalization range")

    def to_dict(self):
        return {"min_value": self.min_value, "max_value": self.max_value}

    @classmethod
    def from_dict(cls, d):
        return cls(min_value=d["min_value"], max_value=d["max_value"])


# Fixed bounds for 8-bit images; per-image extremes would destroy
# absolute intensity cues.
IMAGE_NORMALIZATION = NormalizationSpec(0.0, 255.0)


@dataclass(frozen=True)
class MetadataBounds:
    """Age bounds for metadata scaling, computed on the training splits only."""

    age_min: float
    age_max: float

    def __post_init__(self):
        if not self.age_max > self.age_min:
            raise PreprocessError("age_max must exceed age_min")

    def to_dict(self):
        return {"age_min": self.age_min, "age_max": self.age_max}

    @classmethod
    def from_dict(cls, d):
        return cls(age_min=d["age_min"], age_max=d["age_max"])

    @classmethod
    def from_records(cls, records: list[PatientRecord]) -> "MetadataBounds":
        ages = [r.age_years for r in records]
        lo, hi = min(ages), max(ages)
        if hi <= lo:
            hi = lo + 1.0  # all-equal ages: any bound works, the value clamps to 0
        return cls(age_min=lo, age_max=hi)


def minmax_normalize(x, spec: NormalizationSpec) -> np.ndarray:
    """Scale to [0, 1] via (x - min) / (max - min), clamping out-of-range values."""
    x = np.asarray(x, dtype=np.float64)
    scaled = (x - spec.min_value) / (spec.max_value - spec.min_value)
    return np.clip(scaled, 0.0, 1.0)


def resize_image(image: np.ndarray, target_side: int) -> np.ndarray:
    """Bilinear resize of an (H, W, 3) uint8 image to a square target."""
    if target_side < 8:
        raise PreprocessError(f"target_side {target_side} too small (minimum 8)")
    if image.ndim != 3 or image.shape[2] != 3 or image.size == 0:
        raise PreprocessError(f"expected a non-empty (H, W, 3) image, got shape {image.shape}")
    if image.shape[:2] == (target_side, target_side):
        return image
    pil = Image.fromarray(image)
    return np.asarray(pil.resize((target_side, target_side), Image.BILINEAR))


def stack_eye_pair(left: np.ndarray, right: np.ndarray) -> np.ndarray:
    """Stack two (3, H, W) eye tensors into one (6, H, W) tensor, left first."""
    left = np.asarray(left)
    right = np.asarray(right)
    if left.shape != right.shape:
        raise PreprocessError(f"eye shape mismatch: {left.shape} vs {right.shape}")
    if left.ndim != 3 or left.shape[0] != 3:
        raise PreprocessError(f"expected (3, H, W) tensors, got {left.shape}")
    return np.concatenate([left, right], axis=0)


def normalize_metadata(record: PatientRecord, bounds: MetadataBounds) -> tuple[float, float]:
    """Return (normalized age, encoded gender), both in [0, 1]."""
    age_n = (record.age_years - bounds.age_min) / (bounds.age_max - bounds.age_min)
    age_n = min(max(age_n, 0.0), 1.0)
    return age_n, GENDER_ENCODING[record.gender]


def expand_metadata(mode: str, age_n: float, gender_n: float) -> np.ndarray | None:
    """Build the 2-component metadata vector for the given ablation mode.

    Single-scalar modes duplicate their value into both components; mode
    "none" returns None and callers take the image-only path.
    """
    if mode not in METADATA_MODES:
        raise PreprocessError(f"unknown metadata mode {mode!r}, expected one of {METADATA_MODES}")
    if mode == "none":
        return None
    if mode == "age":
        return np.array([age_n, age_n], dtype=np.float64)
    if mode == "gender":
        return np.array([gender_n, gender_n], dtype=np.float64)
    return np.array([age_n, gender_n], dtype=np.float64)


N_AUGMENT_OPS = 8


def augment(t: np.ndarray, op_id: int) -> np.ndarray:
    """Apply one of the 8 dihedral ops (4 rotations x optional horizontal flip).

    op_id % 4 is the number of 90-degree rotations, op_id >= 4 adds a flip.
    Both eye channel blocks transform together.
    """
    if not (0 <= op_id < N_AUGMENT_OPS):
        raise PreprocessError(f"op_id must be in 0..{N_AUGMENT_OPS - 1}, got {op_id}")
    t = np.asarray(t)
    if t.ndim != 3:
        raise PreprocessError(f"expected (C, H, W) tensor, got shape {t.shape}")
    if op_id % 4 in (1, 3) and t.shape[1] != t.shape[2]:
        raise PreprocessError("90/270 degree rotations require a square tensor")
    out = np.rot90(t, k=op_id % 4, axes=(1, 2))
    if op_id >= 4:
        out = out[:, :, ::-1]
    return np.ascontiguousarray(out)


def inverse_augment_op(op_id: int) -> int:
    """Return the op that undoes ``op_id`` (rot-then-flip ops are involutions)."""
    if not (0 <= op_id < N_AUGMENT_OPS):
        raise PreprocessError(f"op_id must be in 0..{N_AUGMENT_OPS - 1}, got {op_id}")
    if op_id >= 4:
        return op_id
    return (4 - op_id) % 4


def load_eye_pair(
    record: PatientRecord,
    image_side: int,
    spec: NormalizationSpec = IMAGE_NORMALIZATION,
) -> np.ndarray:
    """Load, resize, normalize, and stack a patient's two eye images."""
    planes = []
    for path in (record.left_image_path, record.right_image_path):
        p = Path(path)
        if not p.exists():
            raise PreprocessError(f"patient {record.patient_id}: missing image file {p}")
        img = np.asarray(Image.open(p).convert("RGB"))
        img = resize_image(img, image_side)
        norm = minmax_normalize(img, spec)
        planes.append(np.transpose(norm, (2, 0, 1)).astype(np.float32))
    return stack_eye_pair(planes[0], planes[1])
