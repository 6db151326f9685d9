"""Framework-free dense network: forward pass, losses, analytic gradients,
Adam, warmup+cosine learning-rate schedule, and a finite-difference checker.

Models are plain float64 numpy arrays.  Hidden layers are rectified, the
output layer is linear (logits).  All functions are pure except
:func:`adam_step`, which updates the model and optimizer state in place.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field

import numpy as np

from lungroute import kernels
from lungroute.errors import FormatError, ValidationError

# Probability clip inside the log; keeps the loss finite on zero probabilities
# without measurably biasing training.
EPS_CLIP = 1e-12

CHECKPOINT_MAGIC = b"LMLP"
CHECKPOINT_VERSION = 1


@dataclass
class MlpModel:
    """Dense network parameters.

    ``weights[l]`` has shape (layer_dims[l+1], layer_dims[l]); ``biases[l]``
    has length layer_dims[l+1].
    """

    layer_dims: list[int]
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    def n_params(self) -> int:
        return sum(w.size for w in self.weights) + sum(b.size for b in self.biases)

    def copy(self) -> "MlpModel":
        return MlpModel(
            list(self.layer_dims),
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
        )

    def validate(self) -> None:
        dims = self.layer_dims
        if len(dims) < 2 or any(d <= 0 for d in dims):
            raise ValidationError(f"layer_dims must be >=2 positive ints, got {dims}")
        if len(self.weights) != len(dims) - 1 or len(self.biases) != len(dims) - 1:
            raise ValidationError("parameter count does not match layer_dims")
        for l, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (dims[l + 1], dims[l]):
                raise ValidationError(
                    f"weight {l} has shape {w.shape}, expected {(dims[l + 1], dims[l])}"
                )
            if b.shape != (dims[l + 1],):
                raise ValidationError(f"bias {l} has shape {b.shape}, expected ({dims[l + 1]},)")
            if not (np.isfinite(w).all() and np.isfinite(b).all()):
                raise ValidationError(f"non-finite parameters in layer {l}")


def init_model(layer_dims, rng: np.random.Generator) -> MlpModel:
    """Glorot-uniform weights (bound sqrt(6/(fan_in+fan_out))), zero biases."""
    dims = [int(d) for d in layer_dims]
    weights, biases = [], []
    for l in range(len(dims) - 1):
        fan_in, fan_out = dims[l], dims[l + 1]
        bound = math.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    model = MlpModel(dims, weights, biases)
    model.validate()
    return model


def _forward_acts(model: MlpModel, X: np.ndarray):
    """All layer activations for a (batch, in) matrix; returns (acts, logits).

    ``acts[0]`` is the input; ``acts[-1]`` the penultimate (feature) layer.
    """
    acts = [X]
    a = X
    for l in range(model.n_layers - 1):
        a = a @ model.weights[l].T + model.biases[l]
        np.maximum(a, 0.0, out=a)
        acts.append(a)
    logits = a @ model.weights[-1].T + model.biases[-1]
    return acts, logits


def forward_batch(model: MlpModel, X: np.ndarray):
    """Forward pass on a (batch, in) matrix -> (features, logits)."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != model.layer_dims[0]:
        raise ValidationError(
            f"input has shape {X.shape}, expected (batch, {model.layer_dims[0]})"
        )
    if not np.isfinite(X).all():
        raise ValidationError("non-finite values in input")
    acts, logits = _forward_acts(model, X)
    return acts[-1], logits


def forward(model: MlpModel, x: np.ndarray):
    """Forward pass on a single input vector -> (features, logits)."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ValidationError(f"expected a 1-D input vector, got shape {x.shape}")
    features, logits = forward_batch(model, x[None, :])
    return features[0], logits[0]


def softmax(logits: np.ndarray) -> np.ndarray:
    """Max-shifted softmax of a 1-D logit vector."""
    z = np.asarray(logits, dtype=np.float64)
    e = np.exp(z - z.max())
    return e / e.sum()


def softmax_batch(logits: np.ndarray) -> np.ndarray:
    """Row-wise max-shifted softmax of a (batch, classes) matrix."""
    Z = np.asarray(logits, dtype=np.float64)
    e = np.exp(Z - Z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def cross_entropy(probs: np.ndarray, true_class: int) -> float:
    """-ln(p[true_class] + EPS_CLIP)."""
    probs = np.asarray(probs, dtype=np.float64)
    if not 0 <= true_class < probs.shape[-1]:
        raise ValidationError(f"class {true_class} out of range for {probs.shape[-1]} classes")
    return float(-np.log(probs[true_class] + EPS_CLIP))


def weighted_cross_entropy(probs: np.ndarray, true_class: int, weights) -> float:
    """Class-weighted cross-entropy: weights[true_class] * cross_entropy."""
    weights = np.asarray(weights, dtype=np.float64)
    probs = np.asarray(probs, dtype=np.float64)
    if weights.shape != (probs.shape[-1],):
        raise ValidationError(
            f"weights length {weights.shape} does not match {probs.shape[-1]} classes"
        )
    if (weights <= 0).any():
        raise ValidationError("class weights must all be positive")
    return weights[true_class] * cross_entropy(probs, true_class)


def batch_loss(model: MlpModel, X: np.ndarray, y: np.ndarray, class_weights=None) -> float:
    """Mean (weighted) cross-entropy of a batch under the current parameters."""
    _, logits = forward_batch(model, X)
    P = softmax_batch(logits)
    y = np.asarray(y)
    py = P[np.arange(len(y)), y]
    losses = -np.log(py + EPS_CLIP)
    if class_weights is not None:
        losses = np.asarray(class_weights, dtype=np.float64)[y] * losses
    return float(losses.mean())


@dataclass
class Gradients:
    """Mean-over-batch loss gradients, shaped like the model parameters."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    loss: float


def backward(model: MlpModel, X: np.ndarray, y: np.ndarray, class_weights=None) -> Gradients:
    """Analytic gradient of the mean (weighted) cross-entropy over a batch.

    The gradient includes the exact effect of the EPS_CLIP probability clip
    (a p/(p+eps) factor at the logits), so it matches finite differences of
    the implemented loss, not just the idealized one.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y)
    if X.ndim != 2 or len(X) == 0:
        raise ValidationError("backward requires a non-empty (batch, in) matrix")
    if len(y) != len(X):
        raise ValidationError("labels do not match batch size")
    n_out = model.layer_dims[-1]
    if (y < 0).any() or (y >= n_out).any():
        raise ValidationError(f"labels out of range for {n_out} output classes")

    acts, logits = _forward_acts(model, X)
    P = softmax_batch(logits)
    B = len(X)
    rows = np.arange(B)
    py = P[rows, y]

    if class_weights is not None:
        # zero is allowed here: empty classes carry weight 0 and contribute
        # nothing, matching how subset weights are computed upstream
        class_weights = np.asarray(class_weights, dtype=np.float64)
        if (class_weights < 0).any():
            raise ValidationError("class weights must be non-negative")
        wvec = class_weights[y]
    else:
        wvec = np.ones(B)
    losses = wvec * -np.log(py + EPS_CLIP)
    loss = float(losses.mean())

    # d loss / d logits, including the clip factor p/(p+eps)
    coeff = wvec * (py / (py + EPS_CLIP)) / B
    delta = P * coeff[:, None]
    delta[rows, y] -= coeff

    grads_w = [None] * model.n_layers
    grads_b = [None] * model.n_layers
    for l in range(model.n_layers - 1, -1, -1):
        grads_w[l] = delta.T @ acts[l]
        grads_b[l] = delta.sum(axis=0)
        if l > 0:
            delta = delta @ model.weights[l]
            delta *= acts[l] > 0  # rectifier mask
    return Gradients(grads_w, grads_b, loss)


@dataclass
class AdamState:
    """First/second moment accumulators mirroring the model parameters."""

    step: int
    m_w: list[np.ndarray]
    v_w: list[np.ndarray]
    m_b: list[np.ndarray]
    v_b: list[np.ndarray]
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8


def init_adam(model: MlpModel, beta1=0.9, beta2=0.999, epsilon=1e-8) -> AdamState:
    return AdamState(
        step=0,
        m_w=[np.zeros_like(w) for w in model.weights],
        v_w=[np.zeros_like(w) for w in model.weights],
        m_b=[np.zeros_like(b) for b in model.biases],
        v_b=[np.zeros_like(b) for b in model.biases],
        beta1=beta1,
        beta2=beta2,
        epsilon=epsilon,
    )


def adam_step(model: MlpModel, grads: Gradients, state: AdamState, lr: float) -> None:
    """One bias-corrected Adam update, in place; increments ``state.step``."""
    if lr < 0:
        raise ValidationError(f"learning rate must be >= 0, got {lr}")
    for g, p in zip(grads.weights, model.weights):
        if g.shape != p.shape:
            raise ValidationError(f"gradient shape {g.shape} does not match {p.shape}")
    for g, p in zip(grads.biases, model.biases):
        if g.shape != p.shape:
            raise ValidationError(f"gradient shape {g.shape} does not match {p.shape}")
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    for l in range(model.n_layers):
        kernels.adam_update(
            model.weights[l], grads.weights[l], state.m_w[l], state.v_w[l],
            lr, state.beta1, state.beta2, state.epsilon, bc1, bc2,
        )
        kernels.adam_update(
            model.biases[l], grads.biases[l], state.m_b[l], state.v_b[l],
            lr, state.beta1, state.beta2, state.epsilon, bc1, bc2,
        )


@dataclass
class LrSchedule:
    """Linear warmup to ``peak_lr``, then cosine decay to ``min_lr``."""

    peak_lr: float = 1e-4
    min_lr: float = 1e-6
    warmup_steps: int = 0
    total_steps: int = 1

    def validate(self) -> None:
        if not 0 <= self.min_lr <= self.peak_lr:
            raise ValidationError("need 0 <= min_lr <= peak_lr")
        if not 0 <= self.warmup_steps < self.total_steps:
            raise ValidationError("need 0 <= warmup_steps < total_steps")


def lr_at(schedule: LrSchedule, step: int) -> float:
    """Learning rate at a global step (0-based); step may equal total_steps."""
    if step < 0 or step > schedule.total_steps:
        raise ValidationError(
            f"step {step} outside schedule of {schedule.total_steps} steps"
        )
    if step < schedule.warmup_steps:
        return schedule.peak_lr * (step + 1) / schedule.warmup_steps
    span = schedule.total_steps - schedule.warmup_steps
    frac = (step - schedule.warmup_steps) / span
    return schedule.min_lr + 0.5 * (schedule.peak_lr - schedule.min_lr) * (
        1.0 + math.cos(math.pi * frac)
    )


def _hidden_pre_signs(model: MlpModel, X: np.ndarray) -> list:
    """Sign pattern of every hidden pre-activation (the relu kink sides)."""
    signs = []
    a = X
    for l in range(model.n_layers - 1):
        z = a @ model.weights[l].T + model.biases[l]
        signs.append(np.sign(z))
        a = np.maximum(z, 0.0)
    return signs


def grad_check(model: MlpModel, X: np.ndarray, y: np.ndarray,
               class_weights=None, h: float = 1e-4) -> float:
    """Max relative error between analytic and central-difference gradients.

    A probe that pushes any hidden pre-activation across its relu kink is
    excluded: the loss is not differentiable there, so a central difference
    measures the kink, not the gradient. O(parameters) full-batch loss
    evaluations; intended for small models.
    """
    grads = backward(model, X, y, class_weights)
    analytic = np.concatenate(
        [g.ravel() for g in grads.weights] + [g.ravel() for g in grads.biases]
    )
    tensors = list(model.weights) + list(model.biases)
    numeric = np.empty_like(analytic)
    k = 0
    for tensor in tensors:
        flat = tensor.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            lp = batch_loss(model, X, y, class_weights)
            sp = _hidden_pre_signs(model, X)
            flat[i] = orig - h
            lm = batch_loss(model, X, y, class_weights)
            sm = _hidden_pre_signs(model, X)
            flat[i] = orig
            if any((p != m).any() for p, m in zip(sp, sm)):
                numeric[k] = np.nan
            else:
                numeric[k] = (lp - lm) / (2.0 * h)
            k += 1
    valid = np.isfinite(numeric)
    if not valid.any():
        return float("inf")
    analytic, numeric = analytic[valid], numeric[valid]
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom))


def save_model(model: MlpModel, path) -> None:
    """Write an LMLP checkpoint (see README for the byte layout)."""
    model.validate()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<I", len(model.layer_dims)))
        fh.write(np.asarray(model.layer_dims, dtype="<u4").tobytes())
        for w, b in zip(model.weights, model.biases):
            fh.write(np.ascontiguousarray(w, dtype="<f4").tobytes())
            fh.write(np.ascontiguousarray(b, dtype="<f4").tobytes())


def load_model(path) -> MlpModel:
    """Read an LMLP checkpoint; parameters come back as float64."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:4]!r}, expected {CHECKPOINT_MAGIC!r}")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    (n_dims,) = struct.unpack_from("<I", raw, 8)
    if n_dims < 2:
        raise FormatError(f"{path}: layer count {n_dims} < 2")
    off = 12
    dims = np.frombuffer(raw, dtype="<u4", count=n_dims, offset=off)
    off += 4 * n_dims
    layer_dims = [int(d) for d in dims]
    weights, biases = [], []
    for l in range(len(layer_dims) - 1):
        rows, cols = layer_dims[l + 1], layer_dims[l]
        need = 4 * (rows * cols + rows)
        if off + need > len(raw):
            raise FormatError(f"{path}: truncated parameter payload")
        w = np.frombuffer(raw, dtype="<f4", count=rows * cols, offset=off)
        off += 4 * rows * cols
        b = np.frombuffer(raw, dtype="<f4", count=rows, offset=off)
        off += 4 * rows
        weights.append(w.astype(np.float64).reshape(rows, cols))
        biases.append(b.astype(np.float64))
    if off != len(raw):
        raise FormatError(f"{path}: {len(raw) - off} trailing bytes")
    model = MlpModel(layer_dims, weights, biases)
    model.validate()
    return model
