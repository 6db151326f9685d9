"""Volume preprocessing: trim uninformative end slices, resample to a fixed
resolution, normalize intensities, and flatten to the model input vector.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from lungroute import kernels
from lungroute.data import Volume
from lungroute.errors import ValidationError

NORMALIZATIONS = ("zscore", "minmax", "none")


@dataclass
class PreprocessConfig:
    trim_low_frac: float = 0.1
    trim_high_frac: float = 0.1
    target_dims: tuple[int, int, int] = (8, 32, 32)
    normalization: str = "zscore"

    def validate(self) -> None:
        for name, frac in (("trim_low_frac", self.trim_low_frac),
                           ("trim_high_frac", self.trim_high_frac)):
            if not 0.0 <= frac <= 0.45:
                raise ValidationError(f"{name} must be in [0, 0.45], got {frac}")
        if self.trim_low_frac + self.trim_high_frac >= 1.0:
            raise ValidationError("trim fractions must sum to less than 1")
        if len(self.target_dims) != 3 or any(int(d) <= 0 for d in self.target_dims):
            raise ValidationError(f"target_dims must be 3 positive ints, got {self.target_dims}")
        if self.normalization not in NORMALIZATIONS:
            raise ValidationError(
                f"normalization must be one of {NORMALIZATIONS}, got {self.normalization!r}"
            )

    def feature_length(self) -> int:
        return int(np.prod(self.target_dims))

    def to_json(self) -> dict:
        return {
            "trim_low_frac": float(self.trim_low_frac),
            "trim_high_frac": float(self.trim_high_frac),
            "target_dims": [int(d) for d in self.target_dims],
            "normalization": self.normalization,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "PreprocessConfig":
        if not isinstance(obj, dict):
            raise ValidationError("preprocess config must be a JSON object")
        unknown = set(obj) - {"trim_low_frac", "trim_high_frac", "target_dims", "normalization"}
        if unknown:
            raise ValidationError(f"unknown preprocess config fields: {sorted(unknown)}")
        defaults = cls()
        config = cls(
            trim_low_frac=float(obj.get("trim_low_frac", defaults.trim_low_frac)),
            trim_high_frac=float(obj.get("trim_high_frac", defaults.trim_high_frac)),
            target_dims=tuple(int(d) for d in obj.get("target_dims", defaults.target_dims)),
            normalization=str(obj.get("normalization", defaults.normalization)),
        )
        config.validate()
        return config


def trim_slices(volume: Volume, low_frac: float, high_frac: float) -> Volume:
    """Drop the first floor(low_frac*D) and last floor(high_frac*D) slices."""
    if low_frac < 0 or high_frac < 0:
        raise ValidationError("trim fractions must be non-negative")
    depth = volume.dims[0]
    lo = math.floor(low_frac * depth)
    hi = depth - math.floor(high_frac * depth)
    if hi - lo < 1:
        raise ValidationError(
            f"trim fractions ({low_frac}, {high_frac}) leave no slices of a depth-{depth} volume"
        )
    return Volume(np.ascontiguousarray(volume.voxels[lo:hi]))


def resize(volume: Volume, target_dims) -> Volume:
    """Corner-aligned trilinear resample to ``target_dims``."""
    if any(int(d) <= 0 for d in target_dims):
        raise ValidationError(f"target_dims must be positive, got {tuple(target_dims)}")
    out = kernels.resize_trilinear(volume.voxels, target_dims)
    return Volume(out.astype(np.float32))


def normalize(volume: Volume, mode: str) -> tuple[Volume, bool]:
    """Normalize intensities; returns (volume, degenerate_flag).

    A constant volume cannot be scaled (zero variance / zero range); it comes
    back all-zero with the flag set.
    """
    if mode not in NORMALIZATIONS:
        raise ValidationError(f"normalization must be one of {NORMALIZATIONS}, got {mode!r}")
    if mode == "none":
        return volume, False
    v = volume.voxels.astype(np.float64)
    if mode == "zscore":
        std = float(v.std())
        if std == 0.0:
            return Volume(np.zeros_like(volume.voxels)), True
        out = (v - v.mean()) / std
    else:
        lo, hi = float(v.min()), float(v.max())
        if hi == lo:
            return Volume(np.zeros_like(volume.voxels)), True
        out = (v - lo) / (hi - lo)
    return Volume(out.astype(np.float32)), False


def featurize(volume: Volume, config: PreprocessConfig) -> np.ndarray:
    """Trim, resize, normalize, then flatten z-major row-major to float64."""
    config.validate()
    volume.validate()
    trimmed = trim_slices(volume, config.trim_low_frac, config.trim_high_frac)
    resized = resize(trimmed, config.target_dims)
    normalized, _ = normalize(resized, config.normalization)
    return normalized.voxels.astype(np.float64).ravel()
