"""Neural-core tests: forward oracles, loss identities, gradient checks
against central finite differences, Adam behavior, schedule shape, and
checkpoint round-trips."""
import math

import numpy as np
import pytest

from lungroute import nncore
from lungroute.errors import FormatError, ValidationError


def build_model(layer_dims, seed=0):
    return nncore.init_model(layer_dims, np.random.default_rng(seed))


def zero_model(layer_dims):
    model = build_model(layer_dims)
    for w in model.weights:
        w[:] = 0.0
    for b in model.biases:
        b[:] = 0.0
    return model


def scalar_forward(model, x):
    """Per-neuron recomputation with plain Python loops, as an oracle."""
    a = [float(v) for v in x]
    for l in range(model.n_layers):
        out = []
        for j in range(model.layer_dims[l + 1]):
            s = float(model.biases[l][j])
            for i in range(model.layer_dims[l]):
                s += float(model.weights[l][j, i]) * a[i]
            out.append(s)
        if l < model.n_layers - 1:
            out = [max(v, 0.0) for v in out]
        prev = a
        a = out
    return np.asarray(prev), np.asarray(a)


def finite_diff_grads(model, X, y, weights=None, h=1e-4):
    """Central differences of the batch loss, parameter by parameter."""
    out = []
    for tensor in list(model.weights) + list(model.biases):
        g = np.zeros_like(tensor)
        flat_p = tensor.reshape(-1)
        flat_g = g.reshape(-1)
        for i in range(flat_p.size):
            orig = flat_p[i]
            flat_p[i] = orig + h
            lp = nncore.batch_loss(model, X, y, weights)
            flat_p[i] = orig - h
            lm = nncore.batch_loss(model, X, y, weights)
            flat_p[i] = orig
            flat_g[i] = (lp - lm) / (2.0 * h)
        out.append(g)
    n = len(model.weights)
    return out[:n], out[n:]


def max_rel_err(a, b):
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8)
    return float(np.max(np.abs(a - b) / denom))


def test_forward_zero_model_gives_zero_logits():
    model = zero_model([5, 3, 2])
    rng = np.random.default_rng(1)
    for _ in range(10):
        features, logits = nncore.forward(model, rng.normal(size=5))
        assert np.all(logits == 0.0)
        assert np.all(features == 0.0)


def test_forward_identity_layer_returns_input():
    model = zero_model([4, 4])
    model.weights[0][:] = np.eye(4)
    v = np.array([0.3, -1.7, 2.5, 0.0])
    features, logits = nncore.forward(model, v)
    assert np.array_equal(logits, v)
    # single-layer model: the feature vector is the input itself
    assert np.array_equal(features, v)


def test_forward_matches_scalar_recomputation():
    model = build_model([6, 5, 4, 3], seed=7)
    rng = np.random.default_rng(8)
    for _ in range(5):
        x = rng.normal(size=6)
        features, logits = nncore.forward(model, x)
        oracle_feat, oracle_logits = scalar_forward(model, x)
        assert np.allclose(logits, oracle_logits, rtol=0, atol=1e-12)
        assert np.allclose(features, oracle_feat, rtol=0, atol=1e-12)
        assert np.all(features >= 0.0)


def test_forward_batch_agrees_with_single():
    model = build_model([6, 4, 3], seed=2)
    X = np.random.default_rng(3).normal(size=(9, 6))
    feats, logits = nncore.forward_batch(model, X)
    for i in range(len(X)):
        f1, z1 = nncore.forward(model, X[i])
        assert np.allclose(logits[i], z1, atol=1e-12)
        assert np.allclose(feats[i], f1, atol=1e-12)


def test_forward_rejects_bad_input():
    model = build_model([5, 3, 2])
    with pytest.raises(ValidationError):
        nncore.forward(model, np.zeros(4))
    with pytest.raises(ValidationError):
        nncore.forward(model, np.array([1.0, 2.0, np.nan, 0.0, 0.0]))


def test_softmax_symmetry():
    p = nncore.softmax(np.array([0.0, 0.0]))
    assert np.allclose(p, [0.5, 0.5], atol=1e-12)


def test_softmax_analytic_case():
    p = nncore.softmax(np.array([math.log(2.0), 0.0]))
    assert np.allclose(p, [2.0 / 3.0, 1.0 / 3.0], atol=1e-12)


def test_softmax_survives_large_logits():
    p = nncore.softmax(np.array([1000.0, 0.0]))
    assert np.all(np.isfinite(p))
    assert np.allclose(p, [1.0, 0.0], atol=1e-12)


def test_softmax_sums_to_one_and_shift_invariant():
    rng = np.random.default_rng(11)
    for _ in range(1000):
        z = rng.normal(scale=rng.uniform(0.1, 100.0), size=rng.integers(2, 8))
        p = nncore.softmax(z)
        assert abs(p.sum() - 1.0) < 1e-9
        assert np.all(p >= 0.0) and np.all(p <= 1.0)
        q = nncore.softmax(z + rng.normal(scale=10.0))
        assert np.max(np.abs(p - q)) < 1e-9


def test_softmax_batch_matches_rowwise():
    Z = np.random.default_rng(12).normal(size=(16, 4)) * 5.0
    P = nncore.softmax_batch(Z)
    for i in range(len(Z)):
        assert np.allclose(P[i], nncore.softmax(Z[i]), atol=1e-12)


def test_cross_entropy_certainty_is_zero():
    assert abs(nncore.cross_entropy(np.array([1.0, 0.0]), 0)) < 1e-9


def test_cross_entropy_analytic_cases():
    assert abs(nncore.cross_entropy(np.array([0.5, 0.5]), 0) - math.log(2.0)) < 1e-9
    assert abs(nncore.cross_entropy(np.array([0.5, 0.5]), 1) - math.log(2.0)) < 1e-9
    assert abs(nncore.cross_entropy(np.array([0.25, 0.75]), 0) - math.log(4.0)) < 1e-9


def test_cross_entropy_zero_probability_is_finite():
    assert math.isfinite(nncore.cross_entropy(np.array([0.0, 1.0]), 0))


def test_cross_entropy_rejects_bad_class():
    with pytest.raises(ValidationError):
        nncore.cross_entropy(np.array([0.5, 0.5]), 2)


def test_weighted_with_unit_weights_is_exactly_unweighted():
    rng = np.random.default_rng(13)
    ones = np.ones(4)
    for _ in range(1000):
        p = rng.dirichlet(np.ones(4))
        c = int(rng.integers(4))
        assert nncore.weighted_cross_entropy(p, c, ones) == nncore.cross_entropy(p, c)


def test_weighted_cross_entropy_analytic_case():
    got = nncore.weighted_cross_entropy(np.array([0.5, 0.5]), 0, np.array([2.0, 1.0]))
    assert abs(got - 2.0 * math.log(2.0)) < 1e-9


def test_weighted_cross_entropy_imbalanced_counts():
    # weights from counts (125, 79, 100, 100): w_c = N / (4 n_c), N = 404
    counts = np.array([125, 79, 100, 100])
    weights = 404.0 / (4.0 * counts)
    got = nncore.weighted_cross_entropy(np.full(4, 0.25), 1, weights)
    assert abs(got - 1.2784810126582278 * math.log(4.0)) < 1e-9


def test_weighted_cross_entropy_rejects_nonpositive_weight():
    p = np.full(4, 0.25)
    with pytest.raises(ValidationError):
        nncore.weighted_cross_entropy(p, 0, np.array([1.0, 0.0, 1.0, 1.0]))
    with pytest.raises(ValidationError):
        nncore.weighted_cross_entropy(p, 0, np.array([1.0, -1.0, 1.0, 1.0]))


def test_backward_single_layer_closed_form():
    # one linear layer + softmax: d logits = (P - onehot) * w / B
    model = build_model([3, 2], seed=21)
    x = np.array([0.4, -1.2, 2.0])
    y = np.array([1])
    w = np.array([1.0, 2.5])
    _, logits = nncore.forward(model, x)
    P = nncore.softmax(logits)
    delta = P.copy()
    delta[1] -= 1.0
    delta *= w[1]
    grads = nncore.backward(model, x[None, :], y, w)
    assert np.allclose(grads.weights[0], np.outer(delta, x), atol=1e-9)
    assert np.allclose(grads.biases[0], delta, atol=1e-9)
    expect_loss = w[1] * -math.log(P[1] + nncore.EPS_CLIP)
    assert abs(grads.loss - expect_loss) < 1e-12


def test_backward_matches_finite_differences_unweighted():
    model = build_model([5, 7, 4], seed=22)
    rng = np.random.default_rng(23)
    X = rng.normal(size=(6, 5))
    y = rng.integers(0, 4, size=6)
    grads = nncore.backward(model, X, y)
    fd_w, fd_b = finite_diff_grads(model, X, y)
    for l in range(model.n_layers):
        assert max_rel_err(grads.weights[l], fd_w[l]) < 1e-4
        assert max_rel_err(grads.biases[l], fd_b[l]) < 1e-4


def test_backward_matches_finite_differences_weighted():
    model = build_model([5, 6, 4], seed=24)
    rng = np.random.default_rng(25)
    X = rng.normal(size=(5, 5))
    y = rng.integers(0, 4, size=5)
    w = np.array([0.8, 1.3, 1.0, 2.0])
    grads = nncore.backward(model, X, y, w)
    fd_w, fd_b = finite_diff_grads(model, X, y, w)
    for l in range(model.n_layers):
        assert max_rel_err(grads.weights[l], fd_w[l]) < 1e-4
        assert max_rel_err(grads.biases[l], fd_b[l]) < 1e-4


def test_backward_gradient_vanishes_at_perfect_fit():
    model = zero_model([3, 2])
    model.biases[0][:] = [50.0, -50.0]  # p[0] ~ 1 up to e^-100
    X = np.random.default_rng(26).normal(size=(4, 3))
    y = np.zeros(4, dtype=int)
    grads = nncore.backward(model, X, y)
    total = sum(float(np.abs(g).sum()) for g in grads.weights + grads.biases)
    assert total < 1e-12
    assert grads.loss < 1e-9


def test_backward_rejects_empty_batch_and_bad_labels():
    model = build_model([3, 2])
    with pytest.raises(ValidationError):
        nncore.backward(model, np.zeros((0, 3)), np.zeros(0, dtype=int))
    with pytest.raises(ValidationError):
        nncore.backward(model, np.zeros((2, 3)), np.array([0, 2]))


def test_backward_allows_zero_weight_for_absent_class():
    model = build_model([3, 4], seed=27)
    X = np.random.default_rng(28).normal(size=(4, 3))
    y = np.array([0, 1, 2, 2])  # class 3 absent, weight 0
    w = np.array([1.0, 2.0, 1.0, 0.0])
    grads = nncore.backward(model, X, y, w)
    assert all(np.isfinite(g).all() for g in grads.weights + grads.biases)
    with pytest.raises(ValidationError):
        nncore.backward(model, X, y, np.array([1.0, -2.0, 1.0, 1.0]))


def adam_fixture(seed=30):
    model = build_model([4, 3, 2], seed=seed)
    rng = np.random.default_rng(seed + 1)
    X = rng.normal(size=(6, 4))
    y = rng.integers(0, 2, size=6)
    return model, nncore.init_adam(model), X, y


def test_adam_zero_lr_is_parameter_noop():
    model, state, X, y = adam_fixture()
    before = model.copy()
    grads = nncore.backward(model, X, y)
    nncore.adam_step(model, grads, state, lr=0.0)
    assert state.step == 1
    for l in range(model.n_layers):
        assert np.array_equal(model.weights[l], before.weights[l])
        assert np.array_equal(model.biases[l], before.biases[l])


def test_adam_zero_gradients_are_noop():
    model, state, _, _ = adam_fixture()
    before = model.copy()
    zero = nncore.Gradients(
        [np.zeros_like(w) for w in model.weights],
        [np.zeros_like(b) for b in model.biases],
        0.0,
    )
    nncore.adam_step(model, zero, state, lr=0.1)
    for l in range(model.n_layers):
        assert np.array_equal(model.weights[l], before.weights[l])
        assert np.array_equal(model.biases[l], before.biases[l])


def test_adam_scalar_first_step_moves_by_lr():
    # m-hat = v-hat = 1 after one unit-gradient step, so delta = -lr/(1+eps)
    model = zero_model([1, 1])
    model.weights[0][0, 0] = 0.7
    state = nncore.init_adam(model)
    grads = nncore.Gradients([np.array([[1.0]])], [np.array([0.0])], 0.0)
    nncore.adam_step(model, grads, state, lr=0.1)
    assert abs((0.7 - model.weights[0][0, 0]) - 0.1) < 1e-7
    assert np.all(state.v_w[0] >= 0.0)


def test_adam_rejects_shape_mismatch_and_negative_lr():
    model, state, X, y = adam_fixture()
    grads = nncore.backward(model, X, y)
    bad = nncore.Gradients([g.T.copy() for g in grads.weights], grads.biases, 0.0)
    with pytest.raises(ValidationError):
        nncore.adam_step(model, bad, state, lr=0.1)
    with pytest.raises(ValidationError):
        nncore.adam_step(model, grads, state, lr=-0.1)


def test_adam_loop_reduces_loss_and_is_deterministic():
    def run():
        model = build_model([6, 8, 3], seed=40)
        state = nncore.init_adam(model)
        rng = np.random.default_rng(41)
        X = rng.normal(size=(24, 6))
        y = rng.integers(0, 3, size=24)
        first = nncore.batch_loss(model, X, y)
        for step in range(60):
            grads = nncore.backward(model, X, y)
            nncore.adam_step(model, grads, state, lr=0.01)
        return model, first, nncore.batch_loss(model, X, y)

    model_a, first, last = run()
    model_b, _, _ = run()
    assert last < first
    for l in range(model_a.n_layers):
        assert np.array_equal(model_a.weights[l], model_b.weights[l])
        assert np.array_equal(model_a.biases[l], model_b.biases[l])


def test_lr_schedule_shape():
    sched = nncore.LrSchedule(peak_lr=1e-4, min_lr=1e-6, warmup_steps=10, total_steps=110)
    sched.validate()
    # linear ramp reaches the peak on the last warmup step
    assert nncore.lr_at(sched, 9) == pytest.approx(1e-4, rel=1e-12)
    # cosine branch starts at the same value: continuous boundary
    assert nncore.lr_at(sched, 10) == pytest.approx(1e-4, rel=1e-12)
    assert nncore.lr_at(sched, 110) == pytest.approx(1e-6, rel=1e-12)
    assert nncore.lr_at(sched, 60) == pytest.approx((1e-4 + 1e-6) / 2.0, rel=1e-12)
    ramp = [nncore.lr_at(sched, s) for s in range(10)]
    assert all(b > a for a, b in zip(ramp, ramp[1:]))
    assert ramp[0] == pytest.approx(1e-5, rel=1e-12)
    decay = [nncore.lr_at(sched, s) for s in range(10, 111)]
    assert all(b < a for a, b in zip(decay, decay[1:]))


def test_lr_schedule_rejects_out_of_range_step():
    sched = nncore.LrSchedule(peak_lr=1e-4, min_lr=1e-6, warmup_steps=5, total_steps=50)
    with pytest.raises(ValidationError):
        nncore.lr_at(sched, 51)
    with pytest.raises(ValidationError):
        nncore.lr_at(sched, -1)
    with pytest.raises(ValidationError):
        nncore.LrSchedule(peak_lr=1e-4, min_lr=1e-3, warmup_steps=0, total_steps=10).validate()
    with pytest.raises(ValidationError):
        nncore.LrSchedule(warmup_steps=10, total_steps=10).validate()


def test_grad_check_passes_on_correct_implementation():
    model = build_model([8, 16, 4], seed=50)
    rng = np.random.default_rng(51)
    X = rng.normal(size=(4, 8))
    y = rng.integers(0, 4, size=4)
    w = np.array([0.8, 1.3, 1.0, 1.0])
    assert nncore.grad_check(model, X, y, w) < 1e-4


def test_grad_check_detects_corrupted_gradient(monkeypatch):
    model = build_model([6, 5, 3], seed=52)
    rng = np.random.default_rng(53)
    X = rng.normal(size=(4, 6))
    y = rng.integers(0, 3, size=4)

    true_backward = nncore.backward

    def corrupted(*args, **kwargs):
        grads = true_backward(*args, **kwargs)
        w0 = grads.weights[0]
        idx = np.unravel_index(np.argmax(np.abs(w0)), w0.shape)
        w0[idx] *= 2.0
        return grads

    monkeypatch.setattr(nncore, "backward", corrupted)
    assert nncore.grad_check(model, X, y) > 0.1


def test_grad_check_smallest_model():
    model = build_model([1, 1], seed=54)
    X = np.array([[0.5], [-1.5]])
    y = np.array([0, 0])
    err = nncore.grad_check(model, X, y)
    assert math.isfinite(err)
    assert err < 1e-4


def test_grad_check_skips_probes_that_cross_a_relu_kink():
    # pre-activation 1e-6 from the kink: the 1e-4 probes straddle it, and a
    # central difference there measures the kink, not the gradient
    model = build_model([1, 1, 2], seed=55)
    model.weights[0][:] = 1.0
    model.biases[0][:] = -1.0 + 1e-6
    X = np.array([[1.0]])
    y = np.array([0])
    assert nncore.grad_check(model, X, y) < 1e-4


def test_grad_check_handles_exactly_dead_hidden_layer():
    # a zeroed first layer pins every downstream pre-activation to exactly
    # 0.0; analytic relu'(0) = 0 must not be compared against half-slopes
    model = build_model([2, 1, 2], seed=56)
    model.weights[0][:] = 0.0
    model.biases[0][:] = 0.0
    rng = np.random.default_rng(57)
    X = rng.normal(size=(3, 2))
    y = np.array([0, 1, 0])
    assert nncore.grad_check(model, X, y) < 1e-4


def test_init_model_glorot_bounds_and_seeding():
    dims = [10, 6, 4]
    a = build_model(dims, seed=60)
    b = build_model(dims, seed=60)
    c = build_model(dims, seed=61)
    for l in range(a.n_layers):
        bound = math.sqrt(6.0 / (dims[l] + dims[l + 1]))
        assert np.all(np.abs(a.weights[l]) <= bound)
        assert np.all(a.biases[l] == 0.0)
        assert np.array_equal(a.weights[l], b.weights[l])
    assert not np.array_equal(a.weights[0], c.weights[0])


def test_model_validate_rejects_bad_shapes():
    model = build_model([4, 3, 2])
    model.weights[0] = model.weights[0].T.copy()
    with pytest.raises(ValidationError):
        model.validate()
    model = build_model([4, 3, 2])
    model.biases[1] = np.zeros(3)
    with pytest.raises(ValidationError):
        model.validate()
    model = build_model([4, 3, 2])
    model.weights[1][0, 0] = np.inf
    with pytest.raises(ValidationError):
        model.validate()


def test_checkpoint_roundtrip(tmp_path):
    model = build_model([8, 5, 4], seed=70)
    path = tmp_path / "model.lmlp"
    nncore.save_model(model, path)
    loaded = nncore.load_model(path)
    assert loaded.layer_dims == model.layer_dims
    for l in range(model.n_layers):
        # float32 quantization is the only loss in the round trip
        assert np.array_equal(loaded.weights[l], model.weights[l].astype(np.float32).astype(np.float64))
        assert np.array_equal(loaded.biases[l], model.biases[l].astype(np.float32).astype(np.float64))
    # a second save of the loaded model reproduces the bytes exactly
    path2 = tmp_path / "again.lmlp"
    nncore.save_model(loaded, path2)
    assert path.read_bytes() == path2.read_bytes()


def test_checkpoint_header_layout(tmp_path):
    model = zero_model([2, 3])
    path = tmp_path / "tiny.lmlp"
    nncore.save_model(model, path)
    raw = path.read_bytes()
    assert raw[:4] == b"LMLP"
    assert int.from_bytes(raw[4:8], "little") == 1
    assert int.from_bytes(raw[8:12], "little") == 2
    dims = np.frombuffer(raw, dtype="<u4", count=2, offset=12)
    assert list(dims) == [2, 3]
    assert len(raw) == 12 + 8 + 4 * (6 + 3)


def test_checkpoint_rejects_malformed_files(tmp_path):
    model = build_model([3, 2])
    good = tmp_path / "good.lmlp"
    nncore.save_model(model, good)
    raw = good.read_bytes()

    bad_magic = tmp_path / "magic.lmlp"
    bad_magic.write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(FormatError):
        nncore.load_model(bad_magic)

    bad_version = tmp_path / "version.lmlp"
    bad_version.write_bytes(raw[:4] + (99).to_bytes(4, "little") + raw[8:])
    with pytest.raises(FormatError):
        nncore.load_model(bad_version)

    truncated = tmp_path / "short.lmlp"
    truncated.write_bytes(raw[:-5])
    with pytest.raises(FormatError):
        nncore.load_model(truncated)

    trailing = tmp_path / "long.lmlp"
    trailing.write_bytes(raw + b"\x00\x00\x00\x00")
    with pytest.raises(FormatError):
        nncore.load_model(trailing)
