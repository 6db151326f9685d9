"""Dataset model: volumes, labeled samples, binary volume persistence,
JSONL manifests, seeded synthetic cohort generation, gender-based splitting,
class-weight computation, and epoch batching.

The synthetic generator renders each sample from a disease-specific pattern
of Gaussian bumps.  Gender displaces every bump center along the x axis by
``gender_shift`` in opposite directions, so class-conditional distributions
are tighter within a gender than across the pooled cohort.  An additional
anatomy bump, independent of disease, carries the gender cue itself.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path

import numpy as np

from lungroute.errors import FormatError, ValidationError

DISEASES = ("adenocarcinoma", "squamous_cell_carcinoma", "covid19", "normal")
NUM_CLASSES = len(DISEASES)
GENDERS = ("F", "M")
FEMALE, MALE = 0, 1
SPLITS = ("train", "val")

VOLUME_MAGIC = b"LVOL"
VOLUME_VERSION = 1
MAX_SEED = 2**64 - 1


@dataclass
class Volume:
    """A (depth, height, width) float32 voxel grid, z-major then row-major."""

    voxels: np.ndarray

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(d) for d in self.voxels.shape)

    @classmethod
    def from_array(cls, arr) -> "Volume":
        vol = cls(np.ascontiguousarray(arr, dtype=np.float32))
        vol.validate()
        return vol

    def validate(self) -> None:
        v = self.voxels
        if not isinstance(v, np.ndarray) or v.ndim != 3:
            raise ValidationError("volume voxels must be a 3-D array")
        if any(d <= 0 for d in v.shape):
            raise ValidationError(f"volume dims must be positive, got {v.shape}")
        if v.dtype != np.float32:
            raise ValidationError(f"volume voxels must be float32, got {v.dtype}")
        if not np.isfinite(v).all():
            raise ValidationError("volume contains non-finite voxels")


@dataclass
class Sample:
    id: str
    volume: Volume
    gender: int  # index into GENDERS
    disease: int  # index into DISEASES
    split: str  # one of SPLITS


@dataclass
class Dataset:
    """An ordered collection of samples with unique ids."""

    samples: list[Sample] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    def __getitem__(self, i) -> Sample:
        return self.samples[i]

    def subset(self, split: str) -> "Dataset":
        if split not in SPLITS:
            raise ValidationError(f"unknown split {split!r}, expected one of {SPLITS}")
        return Dataset([s for s in self.samples if s.split == split])

    def disease_counts(self) -> np.ndarray:
        counts = np.zeros(NUM_CLASSES, dtype=np.int64)
        for s in self.samples:
            counts[s.disease] += 1
        return counts

    def gender_counts(self) -> np.ndarray:
        counts = np.zeros(len(GENDERS), dtype=np.int64)
        for s in self.samples:
            counts[s.gender] += 1
        return counts

    def validate(self) -> None:
        seen = set()
        for s in self.samples:
            if s.id in seen:
                raise ValidationError(f"duplicate sample id {s.id!r}")
            seen.add(s.id)
            if s.gender not in (FEMALE, MALE):
                raise ValidationError(f"sample {s.id!r}: gender index {s.gender} invalid")
            if not 0 <= s.disease < NUM_CLASSES:
                raise ValidationError(f"sample {s.id!r}: disease index {s.disease} invalid")
            if s.split not in SPLITS:
                raise ValidationError(f"sample {s.id!r}: unknown split {s.split!r}")


@dataclass
class CohortSpec:
    """Synthetic cohort description: per-cell counts plus signal parameters.

    ``counts[split][disease][gender]`` indexes SPLITS x DISEASES x GENDERS.
    """

    counts: np.ndarray
    dims: tuple[int, int, int] = (16, 64, 64)
    noise_sigma: float = 0.4
    gender_shift: float = 6.0
    class_separation: float = 1.0
    seed: int = 0

    def validate(self) -> None:
        counts = np.asarray(self.counts)
        if counts.shape != (len(SPLITS), NUM_CLASSES, len(GENDERS)):
            raise ValidationError(
                f"counts must have shape {(len(SPLITS), NUM_CLASSES, len(GENDERS))}, "
                f"got {counts.shape}"
            )
        if (counts < 0).any():
            si, di, gi = [int(v[0]) for v in np.nonzero(counts < 0)]
            raise ValidationError(
                f"negative count for cell (split={SPLITS[si]}, "
                f"disease={DISEASES[di]}, gender={GENDERS[gi]})"
            )
        if len(self.dims) != 3 or any(int(d) <= 0 for d in self.dims):
            raise ValidationError(f"volume dims must be 3 positive ints, got {self.dims}")
        if not self.noise_sigma > 0:
            raise ValidationError("noise_sigma must be > 0")
        if self.gender_shift < 0:
            raise ValidationError("gender_shift must be >= 0")
        if not self.class_separation > 0:
            raise ValidationError("class_separation must be > 0")
        if not 0 <= int(self.seed) <= MAX_SEED:
            raise ValidationError("seed must be a 64-bit non-negative integer")

    def total(self) -> int:
        return int(np.asarray(self.counts).sum())

    def to_json(self) -> dict:
        counts = {}
        for si, split in enumerate(SPLITS):
            counts[split] = {
                disease: {
                    gender: int(self.counts[si, di, gi])
                    for gi, gender in enumerate(GENDERS)
                }
                for di, disease in enumerate(DISEASES)
            }
        return {
            "seed": int(self.seed),
            "dims": [int(d) for d in self.dims],
            "noise_sigma": float(self.noise_sigma),
            "gender_shift": float(self.gender_shift),
            "class_separation": float(self.class_separation),
            "counts": counts,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "CohortSpec":
        if not isinstance(obj, dict):
            raise ValidationError("cohort spec must be a JSON object")
        unknown = set(obj) - {"seed", "dims", "noise_sigma", "gender_shift",
                              "class_separation", "counts"}
        if unknown:
            raise ValidationError(f"unknown cohort spec fields: {sorted(unknown)}")
        defaults = cls(counts=np.zeros((len(SPLITS), NUM_CLASSES, len(GENDERS)), dtype=np.int64))
        counts = np.zeros((len(SPLITS), NUM_CLASSES, len(GENDERS)), dtype=np.int64)
        raw_counts = obj.get("counts", {})
        for si, split in enumerate(SPLITS):
            per_disease = raw_counts.get(split, {})
            bad = set(per_disease) - set(DISEASES)
            if bad:
                raise ValidationError(f"unknown disease in counts[{split}]: {sorted(bad)}")
            for di, disease in enumerate(DISEASES):
                per_gender = per_disease.get(disease, {})
                bad = set(per_gender) - set(GENDERS)
                if bad:
                    raise ValidationError(
                        f"unknown gender in counts[{split}][{disease}]: {sorted(bad)}"
                    )
                for gi, gender in enumerate(GENDERS):
                    counts[si, di, gi] = int(per_gender.get(gender, 0))
        spec = cls(
            counts=counts,
            dims=tuple(int(d) for d in obj.get("dims", defaults.dims)),
            noise_sigma=float(obj.get("noise_sigma", defaults.noise_sigma)),
            gender_shift=float(obj.get("gender_shift", defaults.gender_shift)),
            class_separation=float(obj.get("class_separation", defaults.class_separation)),
            seed=int(obj.get("seed", defaults.seed)),
        )
        spec.validate()
        return spec


def default_cohort_spec(seed: int = 0) -> CohortSpec:
    """The shipped default cohort: the reference per-cell count table."""
    raw = resources.files("lungroute").joinpath("resources/cohort_defaults.json")
    spec = CohortSpec.from_json(json.loads(raw.read_text()))
    return replace(spec, seed=seed)


# Bump geometry.  Centers are (z, y, x) fractions of (dim - 1); sigmas are
# fractions of the dim.  Disease patterns differ in main-bump x position
# (0.2 + 0.2 * class) and in secondary-bump count; "normal" has none.
_BUMP_SIGMA_FRACS = (0.15, 0.08, 0.0625)
_JITTER_SIGMAS = (0.5, 1.0, 1.0)
# the subgroup cue: visible enough for a dedicated binary classifier, subtle
# enough that a pooled disease model cannot lean on it for free
_ANATOMY_BUMP = (0.50, 0.15, 0.50, 1.2)
_DISEASE_BUMPS = (
    ((0.50, 0.60, 0.20, 1.0),),
    ((0.50, 0.60, 0.40, 1.0), (0.50, 0.25, 0.40, 0.4)),
    ((0.50, 0.60, 0.60, 1.0), (0.50, 0.25, 0.60, 0.4), (0.50, 0.80, 0.60, 0.4)),
    (),
)


def _add_bump(vol: np.ndarray, fracs, x_shift: float, amplitude: float,
              rng: np.random.Generator) -> None:
    """Add one jittered separable Gaussian bump in place.

    Consumes exactly 4 normal draws (3 center jitters, 1 amplitude factor)
    so the per-sample stream layout stays fixed.
    """
    dims = vol.shape
    jitter = rng.normal(0.0, _JITTER_SIGMAS)
    amp = amplitude * max(1.0 + 0.15 * rng.standard_normal(), 0.2)
    centers = [f * (d - 1) for f, d in zip(fracs, dims)]
    centers[2] += x_shift
    profiles = []
    for axis in range(3):
        c = centers[axis] + jitter[axis]
        sigma = _BUMP_SIGMA_FRACS[axis] * dims[axis]
        t = (np.arange(dims[axis]) - c) / sigma
        profiles.append(np.exp(-0.5 * t * t))
    vol += amp * profiles[0][:, None, None] * profiles[1][None, :, None] * profiles[2][None, None, :]


def _render_volume(disease: int, gender: int, spec: CohortSpec,
                   rng: np.random.Generator) -> Volume:
    """Noise first, then the anatomy bump, then disease bumps, in that order."""
    vol = rng.normal(0.0, spec.noise_sigma, size=tuple(spec.dims))
    shift = spec.gender_shift if gender == MALE else -spec.gender_shift
    az, ay, ax, aamp = _ANATOMY_BUMP
    _add_bump(vol, (az, ay, ax), shift, aamp, rng)
    for bz, by, bx, bamp in _DISEASE_BUMPS[disease]:
        _add_bump(vol, (bz, by, bx), shift, bamp * spec.class_separation, rng)
    return Volume(vol.astype(np.float32))


def sample_rng(seed: int, index: int) -> np.random.Generator:
    """Counter-based per-sample stream; independent of generation order."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence((seed, index))))


def generate_synthetic(spec: CohortSpec) -> Dataset:
    """Render the full cohort described by ``spec``, deterministically."""
    spec.validate()
    if spec.total() == 0:
        raise ValidationError("cohort spec requests zero samples")
    counts = np.asarray(spec.counts)
    samples = []
    index = 0
    for si, split in enumerate(SPLITS):
        for di in range(NUM_CLASSES):
            for gi, gender in enumerate(GENDERS):
                for k in range(int(counts[si, di, gi])):
                    rng = sample_rng(int(spec.seed), index)
                    vol = _render_volume(di, gi, spec, rng)
                    sid = f"{split}-{gender}-d{di}-{k:03d}"
                    samples.append(Sample(sid, vol, gi, di, split))
                    index += 1
    dataset = Dataset(samples)
    dataset.validate()
    return dataset


def split_by_gender(dataset: Dataset) -> tuple[Dataset, Dataset]:
    """Partition into (male_subset, female_subset), preserving order."""
    male = [s for s in dataset if s.gender == MALE]
    female = [s for s in dataset if s.gender == FEMALE]
    return Dataset(male), Dataset(female)


@dataclass
class ClassWeights:
    """Per-class loss weights w_c = N / (C * n_c); empty classes get 0."""

    weights: np.ndarray
    empty_classes: tuple[int, ...]


def class_weights(dataset: Dataset) -> ClassWeights:
    if len(dataset) == 0:
        raise ValidationError("cannot compute class weights of an empty dataset")
    counts = dataset.disease_counts()
    total = int(counts.sum())
    weights = np.zeros(NUM_CLASSES)
    empty = []
    for c in range(NUM_CLASSES):
        if counts[c] == 0:
            empty.append(c)
        else:
            weights[c] = total / (NUM_CLASSES * counts[c])
    return ClassWeights(weights, tuple(empty))


def save_volume(volume: Volume, path) -> None:
    volume.validate()
    d, h, w = volume.dims
    with open(path, "wb") as fh:
        fh.write(VOLUME_MAGIC)
        fh.write(struct.pack("<IIII", VOLUME_VERSION, d, h, w))
        fh.write(np.ascontiguousarray(volume.voxels, dtype="<f4").tobytes())


def load_volume(path) -> Volume:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 20:
        raise FormatError(f"{path}: too short for a volume header")
    if raw[:4] != VOLUME_MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:4]!r}, expected {VOLUME_MAGIC!r}")
    version, d, h, w = struct.unpack_from("<IIII", raw, 4)
    if version != VOLUME_VERSION:
        raise FormatError(f"{path}: unsupported volume version {version}")
    if d <= 0 or h <= 0 or w <= 0:
        raise FormatError(f"{path}: non-positive dims ({d}, {h}, {w})")
    expect = 20 + 4 * d * h * w
    if len(raw) != expect:
        raise FormatError(f"{path}: payload is {len(raw)} bytes, expected {expect}")
    voxels = np.frombuffer(raw, dtype="<f4", offset=20).reshape(d, h, w)
    vol = Volume(np.ascontiguousarray(voxels, dtype=np.float32))
    vol.validate()
    return vol


def manifest_text(dataset: Dataset) -> str:
    """The canonical JSONL manifest content for a dataset.

    This is exactly what save_dataset writes, so hashing it identifies the
    dataset whether or not it was ever written to disk.
    """
    lines = []
    for s in dataset:
        record = {
            "id": s.id,
            "volume": f"volumes/{s.id}.lvol",
            "gender": GENDERS[s.gender],
            "disease": DISEASES[s.disease],
            "split": s.split,
        }
        lines.append(json.dumps(record))
    return "\n".join(lines) + "\n"


def save_dataset(dataset: Dataset, out_dir, manifest_name: str = "manifest.jsonl") -> Path:
    """Write volumes/<id>.lvol files plus a JSONL manifest; returns its path."""
    dataset.validate()
    out_dir = Path(out_dir)
    vol_dir = out_dir / "volumes"
    vol_dir.mkdir(parents=True, exist_ok=True)
    for s in dataset:
        save_volume(s.volume, vol_dir / f"{s.id}.lvol")
    manifest = out_dir / manifest_name
    manifest.write_text(manifest_text(dataset))
    return manifest


def load_manifest(path) -> Dataset:
    """Read a JSONL manifest, loading each referenced volume eagerly.

    Volume paths are resolved relative to the manifest's directory.
    """
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"manifest not found: {path}")
    base = path.parent
    samples = []
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            record = json.loads(line)
        except json.JSONDecodeError as exc:
            raise FormatError(f"{path}:{lineno}: invalid JSON ({exc})") from exc
        if not isinstance(record, dict):
            raise FormatError(f"{path}:{lineno}: record is not an object")
        missing = {"id", "volume", "gender", "disease", "split"} - set(record)
        if missing:
            raise ValidationError(f"{path}:{lineno}: missing fields {sorted(missing)}")
        sid = str(record["id"])
        if record["gender"] not in GENDERS:
            raise ValidationError(
                f"sample {sid!r}: unknown gender {record['gender']!r}, expected one of {GENDERS}"
            )
        if record["disease"] not in DISEASES:
            raise ValidationError(
                f"sample {sid!r}: unknown disease {record['disease']!r}, "
                f"expected one of {DISEASES}"
            )
        if record["split"] not in SPLITS:
            raise ValidationError(
                f"sample {sid!r}: unknown split {record['split']!r}, expected one of {SPLITS}"
            )
        vol_path = base / str(record["volume"])
        if not vol_path.exists():
            raise ValidationError(f"sample {sid!r}: volume file not found: {vol_path}")
        samples.append(
            Sample(
                id=sid,
                volume=load_volume(vol_path),
                gender=GENDERS.index(record["gender"]),
                disease=DISEASES.index(record["disease"]),
                split=str(record["split"]),
            )
        )
    dataset = Dataset(samples)
    dataset.validate()
    return dataset


def epoch_permutation(n: int, seed: int, epoch: int) -> np.ndarray:
    """The seeded order-of-visit for one epoch; stable given (seed, epoch).

    The trailing 1 keeps shuffle streams disjoint from the 2-tuple
    per-sample render streams even when both use the same seed value.
    """
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence((seed, epoch, 1))))
    return rng.permutation(n)


def batches(dataset: Dataset, batch_size: int, seed: int, epoch: int) -> list[list[Sample]]:
    """Seeded per-epoch permutation chunked into batches; final partial kept."""
    if batch_size < 1:
        raise ValidationError(f"batch_size must be >= 1, got {batch_size}")
    order = epoch_permutation(len(dataset), seed, epoch)
    out = []
    for start in range(0, len(dataset), batch_size):
        out.append([dataset[int(i)] for i in order[start:start + batch_size]])
    return out
