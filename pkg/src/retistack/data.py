"""Patient record loading, exclusions, splits, and synthetic dataset generation."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

log = logging.getLogger(__name__)

GENDERS = ("female", "male")
GENDER_ENCODING = {"female": 0.0, "male": 1.0}

N_DISEASE_FLAGS = 7
DIABETES_FLAG_INDEX = 0  # diabetes is the first of the seven flag columns

MANIFEST_COLUMNS = (
    "patient_id",
    "left_image_path",
    "right_image_path",
    "age_years",
    "gender",
    "diabetes_label",
)
FLAG_COLUMNS = tuple(f"flag_{i}" for i in range(1, N_DISEASE_FLAGS + 1))


class DataError(ValueError):
    """Raised for malformed manifests, annotations, or invalid records."""


@dataclass(frozen=True)
class PatientRecord:
    """One patient: both eye images, age, gender, and the binary diabetes label."""

    patient_id: str
    left_image_path: str
    right_image_path: str
    age_years: float
    gender: str
    diabetes_label: int
    disease_flags: tuple[bool, ...] | None = None

    def __post_init__(self):
        if not self.patient_id:
            raise DataError("patient_id must be non-empty")
        if not self.left_image_path or not self.right_image_path:
            raise DataError(f"patient {self.patient_id}: missing image path")
        if not (0.0 <= self.age_years <= 130.0):
            raise DataError(
                f"patient {self.patient_id}: age_years {self.age_years} outside [0, 130]"
            )
        if self.gender not in GENDERS:
            raise DataError(f"patient {self.patient_id}: gender must be one of {GENDERS}")
        if self.diabetes_label not in (0, 1):
            raise DataError(f"patient {self.patient_id}: diabetes_label must be 0 or 1")
        if self.disease_flags is not None:
            if len(self.disease_flags) != N_DISEASE_FLAGS:
                raise DataError(
                    f"patient {self.patient_id}: expected {N_DISEASE_FLAGS} disease flags"
                )
            if bool(self.disease_flags[DIABETES_FLAG_INDEX]) != bool(self.diabetes_label):
                raise DataError(
                    f"patient {self.patient_id}: diabetes_label disagrees with disease flags"
                )


@dataclass(frozen=True)
class DatasetSplits:
    """Deterministic three-way partition into train1 / train2 / test."""

    train1: list[PatientRecord]
    train2: list[PatientRecord]
    test: list[PatientRecord]
    seed: int
    ratios: tuple[float, float, float]

    def all_ids(self) -> list[str]:
        return [r.patient_id for part in (self.train1, self.train2, self.test) for r in part]


def _parse_row(row: dict, row_num: int, has_flags: bool) -> PatientRecord:
    def fail(field_name, detail):
        raise DataError(f"row {row_num}, field {field_name}: {detail}")

    pid = (row.get("patient_id") or "").strip()
    if not pid:
        fail("patient_id", "empty")
    left = (row.get("left_image_path") or "").strip()
    right = (row.get("right_image_path") or "").strip()
    if not left:
        fail("left_image_path", "missing image path")
    if not right:
        fail("right_image_path", "missing image path")
    try:
        age = float(row["age_years"])
    except (ValueError, TypeError):
        fail("age_years", f"not a number: {row.get('age_years')!r}")
    gender = (row.get("gender") or "").strip().lower()
    if gender not in GENDERS:
        fail("gender", f"expected one of {GENDERS}, got {row.get('gender')!r}")
    label_raw = (row.get("diabetes_label") or "").strip()
    if label_raw not in ("0", "1"):
        fail("diabetes_label", f"expected 0 or 1, got {label_raw!r}")
    flags = None
    if has_flags:
        vals = []
        for col in FLAG_COLUMNS:
            v = (row.get(col) or "").strip()
            if v not in ("0", "1"):
                fail(col, f"expected 0 or 1, got {v!r}")
            vals.append(v == "1")
        flags = tuple(vals)
    try:
        return PatientRecord(
            patient_id=pid,
            left_image_path=left,
            right_image_path=right,
            age_years=age,
            gender=gender,
            diabetes_label=int(label_raw),
            disease_flags=flags,
        )
    except DataError as e:
        raise DataError(f"row {row_num}: {e}") from e


def load_manifest(path: str | Path) -> list[PatientRecord]:
    """Load patient records from a CSV manifest.

    Header must start with the required columns; the seven optional
    ``flag_1..flag_7`` columns, when present, must agree with the label.
    """
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as f:
        reader = csv.DictReader(f)
        header = reader.fieldnames or []
        missing = [c for c in MANIFEST_COLUMNS if c not in header]
        if missing:
            raise DataError(f"manifest {path}: missing columns {missing}")
        has_flags = all(c in header for c in FLAG_COLUMNS)
        records = []
        seen = set()
        for row_num, row in enumerate(reader, start=2):
            rec = _parse_row(row, row_num, has_flags)
            if rec.patient_id in seen:
                raise DataError(f"row {row_num}: duplicate patient_id {rec.patient_id!r}")
            seen.add(rec.patient_id)
            records.append(rec)
    return records


def write_manifest(records: list[PatientRecord], path: str | Path) -> None:
    """Write records back out in the manifest schema."""
    path = Path(path)
    with_flags = all(r.disease_flags is not None for r in records) and records
    cols = MANIFEST_COLUMNS + (FLAG_COLUMNS if with_flags else ())
    with path.open("w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(cols)
        for r in records:
            row = [
                r.patient_id,
                r.left_image_path,
                r.right_image_path,
                f"{r.age_years:g}",
                r.gender,
                r.diabetes_label,
            ]
            if with_flags:
                row.extend(int(v) for v in r.disease_flags)
            writer.writerow(row)


# Column names of an ODIR-style annotation table.
ODIR_COLUMNS = {
    "id": "ID",
    "age": "Patient Age",
    "gender": "Patient Sex",
    "left": "Left-Fundus",
    "right": "Right-Fundus",
}
ODIR_FLAG_ORDER = ("D", "G", "C", "A", "H", "M", "O")  # diabetes first
_ODIR_GENDER = {"female": "female", "male": "male", "f": "female", "m": "male"}


def adapt_odir_annotations(path: str | Path, image_root: str | Path = "") -> list[dict]:
    """Convert an ODIR-style annotation CSV into manifest-schema rows.

    Expects per-patient left/right image names, age, gender, and the seven
    diagnostic flag columns; the ``D`` column becomes ``diabetes_label``.
    """
    path = Path(path)
    root = Path(image_root)
    rows = []
    with path.open(newline="", encoding="utf-8") as f:
        reader = csv.DictReader(f)
        header = reader.fieldnames or []
        if "D" not in header:
            raise DataError(f"annotation table {path}: missing diabetes column 'D'")
        for col in ODIR_COLUMNS.values():
            if col not in header:
                raise DataError(f"annotation table {path}: missing column {col!r}")
        for row_num, row in enumerate(reader, start=2):
            gender_raw = (row[ODIR_COLUMNS["gender"]] or "").strip().lower()
            if gender_raw not in _ODIR_GENDER:
                raise DataError(
                    f"row {row_num}: unknown gender string {row[ODIR_COLUMNS['gender']]!r}"
                )
            out = {
                "patient_id": row[ODIR_COLUMNS["id"]].strip(),
                "left_image_path": str(root / row[ODIR_COLUMNS["left"]].strip()),
                "right_image_path": str(root / row[ODIR_COLUMNS["right"]].strip()),
                "age_years": row[ODIR_COLUMNS["age"]].strip(),
                "gender": _ODIR_GENDER[gender_raw],
                "diabetes_label": row["D"].strip(),
            }
            for i, flag in enumerate(ODIR_FLAG_ORDER, start=1):
                if flag in header:
                    out[f"flag_{i}"] = row[flag].strip()
            rows.append(out)
    return rows


def apply_exclusions(
    records: list[PatientRecord], exclusion_path: str | Path
) -> list[PatientRecord]:
    """Drop records whose patient_id appears in the exclusion file.

    One id per line, ``#`` comments allowed. Order of the survivors is
    preserved; ids not present in the records only produce a warning.
    """
    path = Path(exclusion_path)
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as e:
        raise DataError(f"cannot read exclusion file {path}: {e}") from e
    excluded = set()
    for line in lines:
        entry = line.split("#", 1)[0].strip()
        if entry:
            excluded.add(entry)
    known = {r.patient_id for r in records}
    for pid in sorted(excluded - known):
        log.warning("exclusion id %r not present in dataset", pid)
    kept = [r for r in records if r.patient_id not in excluded]
    log.info("exclusions removed %d of %d records", len(records) - len(kept), len(records))
    return kept


def make_splits(
    records: list[PatientRecord],
    ratios: tuple[float, float, float] = (0.4, 0.4, 0.2),
    seed: int = 0,
) -> DatasetSplits:
    """Stratified deterministic three-way split.

    The shuffle is seeded; per-label groups are allocated to the three
    splits by largest-remainder rounding so totals exactly match the
    global largest-remainder split sizes.
    """
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or any(r < 0 for r in ratios):
        raise DataError("ratios must be three non-negative numbers")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise DataError(f"ratios must sum to 1, got {sum(ratios)}")
    n = len(records)
    if n < 3:
        raise DataError("need at least 3 records to split")

    # Global split sizes by largest remainder.
    quotas = [n * r for r in ratios]
    sizes = [int(q) for q in quotas]
    order = sorted(range(3), key=lambda i: quotas[i] - sizes[i], reverse=True)
    for i in order[: n - sum(sizes)]:
        sizes[i] += 1
    if any(s == 0 for s in sizes):
        raise DataError(f"ratios {ratios} leave an empty split for {n} records")

    rng = np.random.default_rng(seed)
    groups: dict[int, list[PatientRecord]] = {}
    for rec in records:
        groups.setdefault(rec.diabetes_label, []).append(rec)
    labels = sorted(groups)
    for lbl in labels:
        grp = groups[lbl]
        perm = rng.permutation(len(grp))
        groups[lbl] = [grp[i] for i in perm]

    # Per-class quotas per split, floored; leftover slots go to the cells
    # with the largest fractional parts while respecting split totals.
    cell = {}
    for lbl in labels:
        n_c = len(groups[lbl])
        for s in range(3):
            q = n_c * ratios[s]
            cell[(lbl, s)] = [int(q), q - int(q)]
    remaining_split = [sizes[s] - sum(cell[(lbl, s)][0] for lbl in labels) for s in range(3)]
    remaining_class = {
        lbl: len(groups[lbl]) - sum(cell[(lbl, s)][0] for s in range(3)) for lbl in labels
    }
    order = sorted(cell, key=lambda k: (-cell[k][1], k[0], k[1]))
    for lbl, s in order:
        if remaining_split[s] > 0 and remaining_class[lbl] > 0:
            cell[(lbl, s)][0] += 1
            remaining_split[s] -= 1
            remaining_class[lbl] -= 1
    # Greedy pass can strand slots when a class fills up early; sweep up the rest.
    while sum(remaining_split) > 0:
        lbl = next(l for l in labels if remaining_class[l] > 0)
        s = next(s for s in range(3) if remaining_split[s] > 0)
        cell[(lbl, s)][0] += 1
        remaining_split[s] -= 1
        remaining_class[lbl] -= 1

    parts: list[list[PatientRecord]] = [[], [], []]
    for lbl in labels:
        grp = groups[lbl]
        start = 0
        for s in range(3):
            take = cell[(lbl, s)][0]
            parts[s].extend(grp[start : start + take])
            start += take
    if any(not p for p in parts):
        raise DataError("splitting produced an empty split")
    return DatasetSplits(
        train1=parts[0], train2=parts[1], test=parts[2], seed=seed, ratios=ratios
    )


@dataclass
class SyntheticConfig:
    """Generator parameters for the desk-scale synthetic dataset.

    Diabetic patients get a bright square planted in both eye images and an
    age from ``age_class1_range``; healthy patients get noise-only images
    and an age from ``age_class0_range``. The two age ranges must overlap
    so age is informative but not sufficient on its own.
    """

    n_patients: int = 1000
    image_side: int = 32
    noise_sigma: float = 0.3
    signal_intensity: float = 0.12
    age_class1_range: tuple[float, float] = (50.0, 100.0)
    age_class0_range: tuple[float, float] = (0.0, 70.0)
    class_balance: float = 0.5
    seed: int = 0
    background: float = 0.3
    square_frac: float = 0.2  # signal square side as a fraction of image_side

    def __post_init__(self):
        if self.n_patients <= 0:
            raise DataError("n_patients must be positive")
        if self.image_side <= 0:
            raise DataError("image_side must be positive")
        if self.noise_sigma <= 0:
            raise DataError("noise_sigma must be positive")
        if not (0.0 < self.signal_intensity <= 1.0):
            raise DataError("signal_intensity must be in (0, 1]")
        if not (0.0 < self.class_balance < 1.0):
            raise DataError("class_balance must be in (0, 1)")
        for name, (lo, hi) in (
            ("age_class1_range", self.age_class1_range),
            ("age_class0_range", self.age_class0_range),
        ):
            if not (0.0 <= lo < hi <= 130.0):
                raise DataError(f"{name} must be an interval within [0, 130]")
        lo = max(self.age_class0_range[0], self.age_class1_range[0])
        hi = min(self.age_class0_range[1], self.age_class1_range[1])
        if hi <= lo:
            raise DataError("age ranges must partially overlap")
        if self.age_class0_range == self.age_class1_range:
            raise DataError("age ranges must not coincide (age would carry no signal)")


def _synth_eye_image(rng, cfg: SyntheticConfig, diabetic: bool) -> np.ndarray:
    side = cfg.image_side
    img = cfg.background + rng.normal(0.0, cfg.noise_sigma, size=(side, side))
    if diabetic:
        sq = max(2, int(round(cfg.square_frac * side)))
        top = int(rng.integers(0, side - sq + 1))
        left = int(rng.integers(0, side - sq + 1))
        img[top : top + sq, left : left + sq] += cfg.signal_intensity
    img = np.clip(img, 0.0, 1.0)
    img8 = np.round(img * 255.0).astype(np.uint8)
    return np.stack([img8] * 3, axis=-1)  # grayscale signal replicated to RGB


def generate_synthetic(cfg: SyntheticConfig, out_dir: str | Path) -> list[PatientRecord]:
    """Write a fully deterministic synthetic dataset and return its records.

    Images are saved as 8-bit RGB PNGs under ``out_dir``; reruns with the
    same config produce byte-identical files.
    """
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        images_dir = out_dir / "images"
        images_dir.mkdir(exist_ok=True)
    except OSError as e:
        raise DataError(f"cannot create output directory {out_dir}: {e}") from e

    rng = np.random.default_rng(cfg.seed)
    records = []
    width = len(str(cfg.n_patients - 1))
    for i in range(cfg.n_patients):
        label = int(rng.random() < cfg.class_balance)
        lo, hi = cfg.age_class1_range if label else cfg.age_class0_range
        age = float(rng.uniform(lo, hi))
        gender = GENDERS[int(rng.integers(0, 2))]
        pid = f"synth{i:0{width}d}"
        paths = []
        for eye in ("left", "right"):
            arr = _synth_eye_image(rng, cfg, diabetic=bool(label))
            path = images_dir / f"{pid}_{eye}.png"
            Image.fromarray(arr).save(path)
            paths.append(str(path))
        records.append(
            PatientRecord(
                patient_id=pid,
                left_image_path=paths[0],
                right_image_path=paths[1],
                age_years=age,
                gender=gender,
                diabetes_label=label,
            )
        )
    return records


def age_bayes_accuracy(cfg: SyntheticConfig) -> float:
    """Closed-form accuracy of the optimal age-only classifier.

    Both class-conditional age densities are uniform, so the integral of
    ``max(p0 * f0, p1 * f1)`` is a finite sum over the breakpoint intervals.
    """
    p1 = cfg.class_balance
    p0 = 1.0 - p1
    a0, b0 = cfg.age_class0_range
    a1, b1 = cfg.age_class1_range
    f0 = 1.0 / (b0 - a0)
    f1 = 1.0 / (b1 - a1)
    points = sorted({a0, b0, a1, b1})
    acc = 0.0
    for lo, hi in zip(points, points[1:]):
        mid = 0.5 * (lo + hi)
        d0 = p0 * f0 if a0 <= mid <= b0 else 0.0
        d1 = p1 * f1 if a1 <= mid <= b1 else 0.0
        acc += (hi - lo) * max(d0, d1)
    return acc
