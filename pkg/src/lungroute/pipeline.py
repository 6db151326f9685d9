"""Two-stage training and routed inference: a gender classifier is trained
on the full cohort, disease classifiers are trained per gender subset (split
by TRUE labels), and at inference the predicted gender selects which disease
classifier sees the sample.  A pooled single-classifier baseline trains with
the same budget for comparison.

Training uses per-epoch seeded shuffles, weighted cross-entropy for disease
heads, Adam with a warmup+cosine schedule aligned to epoch boundaries, and
keeps the parameter snapshot with the best validation metric.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from lungroute import data, metrics, nncore
from lungroute.data import FEMALE, MALE, NUM_CLASSES, Dataset, Volume
from lungroute.errors import DivergenceError, ValidationError
from lungroute.preprocess import PreprocessConfig, featurize

SELECTION_METRICS = ("macro_f1", "accuracy")

# fixed per-role streams derived from the run seed
ROLE_GENDER, ROLE_DISEASE_MALE, ROLE_DISEASE_FEMALE, ROLE_BASELINE = range(4)


def role_seed(seed: int, role: int) -> int:
    """Derive an independent 64-bit sub-seed for one training role."""
    ss = np.random.SeedSequence((int(seed), int(role)))
    return int(ss.generate_state(1, np.uint64)[0])


@dataclass
class ScheduleSpec:
    """Schedule shape; concrete step counts are filled in per training run.

    Warmup rounds to whole epochs so the per-epoch log shows the exact peak
    at the warmup boundary.
    """

    peak_lr: float = 1e-4
    min_lr: float = 1e-6
    warmup_frac: float = 0.05

    def validate(self) -> None:
        if not 0.0 <= self.min_lr <= self.peak_lr:
            raise ValidationError("need 0 <= min_lr <= peak_lr")
        if not 0.0 <= self.warmup_frac < 1.0:
            raise ValidationError("warmup_frac must be in [0, 1)")

    def materialize(self, steps_per_epoch: int, epochs: int) -> nncore.LrSchedule:
        warm_epochs = int(round(self.warmup_frac * epochs))
        warm_epochs = min(max(warm_epochs, 0), epochs - 1)
        schedule = nncore.LrSchedule(
            peak_lr=self.peak_lr,
            min_lr=self.min_lr,
            warmup_steps=warm_epochs * steps_per_epoch,
            total_steps=epochs * steps_per_epoch,
        )
        schedule.validate()
        return schedule

    def to_json(self) -> dict:
        return {
            "peak_lr": float(self.peak_lr),
            "min_lr": float(self.min_lr),
            "warmup_frac": float(self.warmup_frac),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "ScheduleSpec":
        unknown = set(obj) - {"peak_lr", "min_lr", "warmup_frac"}
        if unknown:
            raise ValidationError(f"unknown schedule fields: {sorted(unknown)}")
        defaults = cls()
        spec = cls(
            peak_lr=float(obj.get("peak_lr", defaults.peak_lr)),
            min_lr=float(obj.get("min_lr", defaults.min_lr)),
            warmup_frac=float(obj.get("warmup_frac", defaults.warmup_frac)),
        )
        spec.validate()
        return spec


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 8
    schedule: ScheduleSpec = field(default_factory=ScheduleSpec)
    seed: int = 0
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)
    hidden_dims: tuple[int, ...] = (256, 64)
    selection_metric: str = "macro_f1"
    use_class_weights: bool = True  # disease heads; the gender stage is always unweighted

    def validate(self) -> None:
        if self.epochs < 1:
            raise ValidationError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValidationError("batch_size must be >= 1")
        if not 0 <= int(self.seed) <= data.MAX_SEED:
            raise ValidationError("seed must be a 64-bit non-negative integer")
        if self.selection_metric not in SELECTION_METRICS:
            raise ValidationError(
                f"selection_metric must be one of {SELECTION_METRICS}, "
                f"got {self.selection_metric!r}"
            )
        if not self.hidden_dims or any(int(d) <= 0 for d in self.hidden_dims):
            raise ValidationError(f"hidden_dims must be positive ints, got {self.hidden_dims}")
        self.schedule.validate()
        self.preprocess.validate()

    def to_json(self) -> dict:
        return {
            "epochs": int(self.epochs),
            "batch_size": int(self.batch_size),
            "schedule": self.schedule.to_json(),
            "seed": int(self.seed),
            "preprocess": self.preprocess.to_json(),
            "hidden_dims": [int(d) for d in self.hidden_dims],
            "selection_metric": self.selection_metric,
            "use_class_weights": bool(self.use_class_weights),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "TrainConfig":
        if not isinstance(obj, dict):
            raise ValidationError("train config must be a JSON object")
        known = {"epochs", "batch_size", "schedule", "seed", "preprocess",
                 "hidden_dims", "selection_metric", "use_class_weights"}
        unknown = set(obj) - known
        if unknown:
            raise ValidationError(f"unknown train config fields: {sorted(unknown)}")
        defaults = cls()
        config = cls(
            epochs=int(obj.get("epochs", defaults.epochs)),
            batch_size=int(obj.get("batch_size", defaults.batch_size)),
            schedule=ScheduleSpec.from_json(obj.get("schedule", {})),
            seed=int(obj.get("seed", defaults.seed)),
            preprocess=PreprocessConfig.from_json(obj.get("preprocess", {})),
            hidden_dims=tuple(int(d) for d in obj.get("hidden_dims", defaults.hidden_dims)),
            selection_metric=str(obj.get("selection_metric", defaults.selection_metric)),
            use_class_weights=bool(obj.get("use_class_weights", defaults.use_class_weights)),
        )
        config.validate()
        return config


def config_hash(config: TrainConfig) -> str:
    doc = json.dumps(config.to_json(), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(doc.encode()).hexdigest()


@dataclass
class TwoStageModel:
    gender_model: nncore.MlpModel
    male_disease_model: nncore.MlpModel
    female_disease_model: nncore.MlpModel
    preprocess: PreprocessConfig

    def validate(self) -> None:
        if self.gender_model.layer_dims[-1] != 2:
            raise ValidationError("gender model must have a 2-way head")
        for name, model in (("male", self.male_disease_model),
                            ("female", self.female_disease_model)):
            if model.layer_dims[-1] != NUM_CLASSES:
                raise ValidationError(f"{name} disease model must have a 4-way head")
        feat = self.preprocess.feature_length()
        for model in (self.gender_model, self.male_disease_model, self.female_disease_model):
            model.validate()
            if model.layer_dims[0] != feat:
                raise ValidationError(
                    f"model input width {model.layer_dims[0]} does not match "
                    f"preprocessing output length {feat}"
                )


@dataclass
class BaselineModel:
    disease_model: nncore.MlpModel
    preprocess: PreprocessConfig

    def validate(self) -> None:
        self.disease_model.validate()
        if self.disease_model.layer_dims[-1] != NUM_CLASSES:
            raise ValidationError("baseline disease model must have a 4-way head")
        if self.disease_model.layer_dims[0] != self.preprocess.feature_length():
            raise ValidationError("baseline input width does not match preprocessing output")


@dataclass
class Prediction:
    gender_probs: np.ndarray  # length 2
    routed_gender: int
    disease_probs: np.ndarray  # length 4
    disease: int


@dataclass
class FitResult:
    model: nncore.MlpModel
    history: list
    best_epoch: int


def init_classifier(feature_length: int, hidden_dims, head_width: int,
                    seed: int) -> nncore.MlpModel:
    """The documented seeded initialization for one classifier."""
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence((int(seed),))))
    dims = [int(feature_length), *[int(d) for d in hidden_dims], int(head_width)]
    return nncore.init_model(dims, rng)


def _fit(X_train, y_train, X_val, y_val, head_width: int, config: TrainConfig,
         weights=None) -> FitResult:
    """Epochs of shuffled minibatch Adam; returns the best-val snapshot."""
    n = len(X_train)
    n_batches = math.ceil(n / config.batch_size)
    schedule = config.schedule.materialize(n_batches, config.epochs)
    model = init_classifier(X_train.shape[1], config.hidden_dims, head_width, config.seed)
    adam = nncore.init_adam(model)
    best_model = model.copy()
    best_metric = -1.0
    best_epoch = -1
    history = []
    step = 0
    for epoch in range(config.epochs):
        order = data.epoch_permutation(n, config.seed, epoch)
        epoch_lr = nncore.lr_at(schedule, step)
        loss_sum = 0.0
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            lr = nncore.lr_at(schedule, step)
            grads = nncore.backward(model, X_train[idx], y_train[idx], weights)
            if not math.isfinite(grads.loss):
                raise DivergenceError(step, lr)
            nncore.adam_step(model, grads, adam, lr)
            loss_sum += grads.loss
            step += 1
        _, logits = nncore.forward_batch(model, X_val)
        preds = logits.argmax(axis=1)
        macro = metrics.macro_prf(metrics.confusion(y_val, preds, num_classes=head_width))
        metric = macro.macro_f1 if config.selection_metric == "macro_f1" else macro.accuracy
        history.append({
            "epoch": epoch,
            "train_loss": loss_sum / n_batches,
            "lr": float(epoch_lr),
            "val_accuracy": macro.accuracy,
            "val_macro_f1": macro.macro_f1,
        })
        if metric > best_metric:  # strict: earliest epoch wins ties
            best_model = model.copy()
            best_metric = metric
            best_epoch = epoch
    return FitResult(best_model, history, best_epoch)


def _feature_arrays(samples, feature_map, label_fn, head_width: int):
    X = np.stack([feature_map[s.id] for s in samples])
    y = np.array([int(label_fn(s)) for s in samples])
    if len(y) and (y.min() < 0 or y.max() >= head_width):
        raise ValidationError(f"labels out of range for a {head_width}-way head")
    return X, y


def _featurize_dataset(dataset: Dataset, config: PreprocessConfig) -> dict:
    return {s.id: featurize(s.volume, config) for s in dataset}


def train_classifier(dataset: Dataset, head_width: int, label_extractor,
                     config: TrainConfig, weights=None) -> FitResult:
    """Train one classifier on the dataset's train split, validating per epoch."""
    config.validate()
    train = dataset.subset("train")
    val = dataset.subset("val")
    if len(train) == 0:
        raise ValidationError("train split is empty")
    if len(val) == 0:
        raise ValidationError("val split is empty")
    feats = _featurize_dataset(dataset, config.preprocess)
    X_train, y_train = _feature_arrays(train, feats, label_extractor, head_width)
    X_val, y_val = _feature_arrays(val, feats, label_extractor, head_width)
    return _fit(X_train, y_train, X_val, y_val, head_width, config, weights)


def _weight_info(cw: data.ClassWeights) -> dict:
    return {
        "weights": [float(w) for w in cw.weights],
        "empty_classes": [data.DISEASES[c] for c in cw.empty_classes],
    }


@dataclass
class TwoStageResult:
    model: TwoStageModel
    histories: dict
    best_epochs: dict
    train_counts: dict
    class_weight_info: dict


def train_two_stage(dataset: Dataset, config: TrainConfig) -> TwoStageResult:
    """Stage I on the full cohort, Stage II per TRUE-gender subset."""
    config.validate()
    male_all, female_all = data.split_by_gender(dataset)
    for name, sub in (("male", male_all), ("female", female_all)):
        if len(sub.subset("train")) == 0:
            raise ValidationError(f"{name} subset has an empty train split")
        if len(sub.subset("val")) == 0:
            raise ValidationError(f"{name} subset has an empty val split")
    feats = _featurize_dataset(dataset, config.preprocess)

    def fit_part(part: Dataset, head_width, label_fn, role, weights):
        sub_config = replace(config, seed=role_seed(config.seed, role))
        X_train, y_train = _feature_arrays(part.subset("train"), feats, label_fn, head_width)
        X_val, y_val = _feature_arrays(part.subset("val"), feats, label_fn, head_width)
        return _fit(X_train, y_train, X_val, y_val, head_width, sub_config, weights)

    gender_fit = fit_part(dataset, 2, lambda s: s.gender, ROLE_GENDER, None)

    weight_info = {}
    weights = {}
    for name, sub in (("male", male_all), ("female", female_all)):
        if config.use_class_weights:
            cw = data.class_weights(sub.subset("train"))
            weights[name] = cw.weights
            weight_info[name] = _weight_info(cw)
        else:
            weights[name] = None
            weight_info[name] = None
    male_fit = fit_part(male_all, NUM_CLASSES, lambda s: s.disease,
                        ROLE_DISEASE_MALE, weights["male"])
    female_fit = fit_part(female_all, NUM_CLASSES, lambda s: s.disease,
                          ROLE_DISEASE_FEMALE, weights["female"])

    model = TwoStageModel(gender_fit.model, male_fit.model, female_fit.model,
                          config.preprocess)
    model.validate()
    return TwoStageResult(
        model=model,
        histories={"gender": gender_fit.history,
                   "disease_male": male_fit.history,
                   "disease_female": female_fit.history},
        best_epochs={"gender": gender_fit.best_epoch,
                     "disease_male": male_fit.best_epoch,
                     "disease_female": female_fit.best_epoch},
        train_counts={"male": len(male_all.subset("train")),
                      "female": len(female_all.subset("train")),
                      "total": len(dataset.subset("train"))},
        class_weight_info=weight_info,
    )


@dataclass
class BaselineResult:
    model: BaselineModel
    history: list
    best_epoch: int
    train_count: int
    class_weight_info: dict


def train_baseline(dataset: Dataset, config: TrainConfig) -> BaselineResult:
    """One pooled 4-way classifier with the same budget as a Stage II model."""
    config.validate()
    train = dataset.subset("train")
    if len(train) == 0:
        raise ValidationError("train split is empty")
    if config.use_class_weights:
        cw = data.class_weights(train)
        weights = cw.weights
        weight_info = _weight_info(cw)
    else:
        weights, weight_info = None, None
    sub_config = replace(config, seed=role_seed(config.seed, ROLE_BASELINE))
    fit = train_classifier(dataset, NUM_CLASSES, lambda s: s.disease, sub_config, weights)
    model = BaselineModel(fit.model, config.preprocess)
    model.validate()
    return BaselineResult(model, fit.history, fit.best_epoch, len(train), weight_info)


def predict_two_stage(model: TwoStageModel, volume: Volume,
                      gender_override=None) -> Prediction:
    """Route by predicted gender (ties go to female), then classify disease.

    ``gender_override`` substitutes a known gender for the routing decision
    (the true-label oracle used in routing studies); the gender stage's own
    probabilities are still reported.
    """
    x = featurize(volume, model.preprocess)
    _, gender_logits = nncore.forward(model.gender_model, x)
    gender_probs = nncore.softmax(gender_logits)
    routed = int(np.argmax(gender_probs))  # first max: ties resolve to female (0)
    if gender_override is not None:
        if gender_override not in (FEMALE, MALE):
            raise ValidationError(f"gender_override must be {FEMALE} or {MALE}")
        routed = int(gender_override)
    disease_model = model.male_disease_model if routed == MALE else model.female_disease_model
    _, disease_logits = nncore.forward(disease_model, x)
    disease_probs = nncore.softmax(disease_logits)
    return Prediction(
        gender_probs=gender_probs,
        routed_gender=routed,
        disease_probs=disease_probs,
        disease=int(np.argmax(disease_probs)),
    )


def evaluate(model, dataset: Dataset, split: str, routing: str = "predicted"):
    """Run the model over one split and assemble the metrics report.

    ``routing`` applies to two-stage models: "predicted" dispatches on the
    gender stage's argmax, "true" on the sample's label (oracle routing).
    """
    if routing not in ("predicted", "true"):
        raise ValidationError(f"routing must be 'predicted' or 'true', got {routing!r}")
    sub = dataset.subset(split)
    if len(sub) == 0:
        raise ValidationError(f"split {split!r} is empty")
    X = np.stack([featurize(s.volume, model.preprocess) for s in sub])
    y = np.array([s.disease for s in sub])

    if isinstance(model, BaselineModel):
        _, logits = nncore.forward_batch(model.disease_model, X)
        probs = nncore.softmax_batch(logits)
        return metrics.build_report(y, probs.argmax(axis=1), probs,
                                    probability_source="pooled")

    _, gender_logits = nncore.forward_batch(model.gender_model, X)
    gender_probs = nncore.softmax_batch(gender_logits)
    pred_gender = gender_probs.argmax(axis=1)
    true_gender = np.array([s.gender for s in sub])
    gender_accuracy = float(np.mean(pred_gender == true_gender))
    route = pred_gender if routing == "predicted" else true_gender
    probs = np.empty((len(sub), NUM_CLASSES))
    for g, disease_model in ((MALE, model.male_disease_model),
                             (FEMALE, model.female_disease_model)):
        mask = route == g
        if mask.any():
            _, logits = nncore.forward_batch(disease_model, X[mask])
            probs[mask] = nncore.softmax_batch(logits)
    return metrics.build_report(y, probs.argmax(axis=1), probs,
                                gender_accuracy=gender_accuracy,
                                probability_source="hard_routed")


def format_training_log(histories: dict) -> str:
    """Per-epoch table per trained model: loss, first-step lr, val metrics."""
    lines = []
    for name in sorted(histories):
        lines.append(f"=== {name} ===")
        lines.append("epoch | train_loss | lr | val_accuracy | val_macro_f1")
        for row in histories[name]:
            lines.append(
                f"{row['epoch']:5d} | {row['train_loss']:.6f} | {row['lr']:.6e} | "
                f"{row['val_accuracy']:.4f} | {row['val_macro_f1']:.4f}"
            )
        lines.append("")
    return "\n".join(lines)


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def save_two_stage(out_dir, result: TwoStageResult, config: TrainConfig,
                   provenance: dict | None = None) -> None:
    """Checkpoint directory: three model files, preprocess config, metadata, log.

    ``provenance`` (data source description, hashes) is stored verbatim in
    the metadata when given.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    nncore.save_model(result.model.gender_model, out_dir / "gender.lmlp")
    nncore.save_model(result.model.male_disease_model, out_dir / "disease_male.lmlp")
    nncore.save_model(result.model.female_disease_model, out_dir / "disease_female.lmlp")
    _write_json(out_dir / "preprocess.json", config.preprocess.to_json())
    meta = {
        "kind": "two_stage",
        "seed": int(config.seed),
        "config": config.to_json(),
        "config_hash": config_hash(config),
        "best_epochs": result.best_epochs,
        "train_counts": result.train_counts,
        "class_weights": result.class_weight_info,
        "history": result.histories,
    }
    if provenance is not None:
        meta["provenance"] = provenance
    _write_json(out_dir / "metadata.json", meta)
    (out_dir / "training_log.txt").write_text(format_training_log(result.histories))


def save_baseline(out_dir, result: BaselineResult, config: TrainConfig,
                  provenance: dict | None = None) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    nncore.save_model(result.model.disease_model, out_dir / "baseline.lmlp")
    _write_json(out_dir / "preprocess.json", config.preprocess.to_json())
    meta = {
        "kind": "baseline",
        "seed": int(config.seed),
        "config": config.to_json(),
        "config_hash": config_hash(config),
        "best_epochs": {"baseline": result.best_epoch},
        "train_counts": {"total": result.train_count},
        "class_weights": {"baseline": result.class_weight_info},
        "history": {"baseline": result.history},
    }
    if provenance is not None:
        meta["provenance"] = provenance
    _write_json(out_dir / "metadata.json", meta)
    (out_dir / "training_log.txt").write_text(
        format_training_log({"baseline": result.history})
    )


def load_checkpoint(checkpoint_dir):
    """Load a checkpoint directory as a TwoStageModel or BaselineModel."""
    checkpoint_dir = Path(checkpoint_dir)
    pp_path = checkpoint_dir / "preprocess.json"
    if not pp_path.exists():
        raise ValidationError(f"not a checkpoint directory (no preprocess.json): {checkpoint_dir}")
    pp = PreprocessConfig.from_json(json.loads(pp_path.read_text()))
    if (checkpoint_dir / "gender.lmlp").exists():
        model = TwoStageModel(
            gender_model=nncore.load_model(checkpoint_dir / "gender.lmlp"),
            male_disease_model=nncore.load_model(checkpoint_dir / "disease_male.lmlp"),
            female_disease_model=nncore.load_model(checkpoint_dir / "disease_female.lmlp"),
            preprocess=pp,
        )
    elif (checkpoint_dir / "baseline.lmlp").exists():
        model = BaselineModel(
            disease_model=nncore.load_model(checkpoint_dir / "baseline.lmlp"),
            preprocess=pp,
        )
    else:
        raise ValidationError(f"no model files found in {checkpoint_dir}")
    model.validate()
    return model
