import math

import numpy as np
import pytest
import scipy.optimize

from madkit import engine
from madkit.arch import ArchDescriptor, Dense, Flatten, Relu
from madkit.data import LabeledSample
from madkit.errors import CapacityError, InputError, TrainingError
from conftest import make_batch


# ---------------------------------------------------------------------------
# init_model
# ---------------------------------------------------------------------------

def test_init_deterministic(conv_arch):
    a = engine.init_model(conv_arch, 7)
    b = engine.init_model(conv_arch, 7)
    assert np.array_equal(a.values, b.values)
    assert a.origin == "initialized"


def test_init_seeds_differ(conv_arch):
    a = engine.init_model(conv_arch, 7)
    b = engine.init_model(conv_arch, 8)
    assert np.any(a.values != b.values)


def test_init_finite_and_counted(mlp_arch):
    pv = engine.init_model(mlp_arch, 0)
    assert pv.values.size == 51
    assert np.all(np.isfinite(pv.values))


# ---------------------------------------------------------------------------
# forward / loss / predict
# ---------------------------------------------------------------------------

def test_zero_params_zero_logits(mlp_arch, rng):
    pv = engine.ParamVector(np.zeros(mlp_arch.param_count), mlp_arch)
    x = rng.uniform(size=mlp_arch.input_shape)
    assert np.array_equal(engine.forward(pv, x), np.zeros(3))


def test_forward_pure(conv_arch, rng):
    pv = engine.init_model(conv_arch, 3)
    x = rng.uniform(size=conv_arch.input_shape)
    assert np.array_equal(engine.forward(pv, x), engine.forward(pv, x))


def test_forward_shape_mismatch(conv_arch, rng):
    pv = engine.init_model(conv_arch, 3)
    with pytest.raises(InputError):
        engine.forward(pv, rng.uniform(size=(5, 5, 1)))


def test_forward_matches_matmul_oracle(mlp_arch, rng):
    # independent straight-line oracle: unpack the flat vector by the
    # documented layout and evaluate W2 @ relu(W1 @ x + b1) + b2
    pv = engine.init_model(mlp_arch, 11)
    x = rng.uniform(size=(2, 2, 1))
    w = pv.values
    w1 = w[0:24].reshape(6, 4)
    b1 = w[24:30]
    w2 = w[30:48].reshape(3, 6)
    b2 = w[48:51]
    flat = x.transpose(2, 0, 1).reshape(-1)  # channel-major flatten
    expected = w2 @ np.maximum(w1 @ flat + b1, 0.0) + b2
    assert np.allclose(engine.forward(pv, x), expected, atol=1e-6)


def test_loss_uniform_logits():
    arch = ArchDescriptor((Flatten(), Dense(1, 10)), (1, 1, 1), 10)
    pv = engine.ParamVector(np.zeros(arch.param_count), arch)
    val = engine.loss(pv, np.ones((1, 1, 1)), 4)
    assert val == pytest.approx(math.log(10), abs=1e-12)


def test_loss_two_logits():
    # logits (1, 0) via fixed weights on a unit input
    arch = ArchDescriptor((Flatten(), Dense(1, 2)), (1, 1, 1), 2)
    pv = engine.ParamVector(np.array([1.0, 0.0, 0.0, 0.0]), arch)
    assert engine.loss(pv, np.ones((1, 1, 1)), 0) == pytest.approx(0.3132616875182228, abs=1e-9)


def test_loss_saturates_to_zero():
    arch = ArchDescriptor((Flatten(), Dense(1, 2)), (1, 1, 1), 2)
    pv = engine.ParamVector(np.array([50.0, 0.0, 0.0, 0.0]), arch)
    assert engine.loss(pv, np.ones((1, 1, 1)), 0) < 1e-20


def test_loss_nonnegative(conv_arch, rng):
    pv = engine.init_model(conv_arch, 5)
    for _ in range(20):
        x = rng.uniform(size=conv_arch.input_shape)
        assert engine.loss(pv, x, int(rng.integers(0, 3))) >= 0.0


def test_loss_target_range(conv_arch, rng):
    pv = engine.init_model(conv_arch, 5)
    with pytest.raises(InputError):
        engine.loss(pv, rng.uniform(size=conv_arch.input_shape), 3)


def test_predict_tie_breaks_low():
    arch = ArchDescriptor((Flatten(), Dense(1, 2)), (1, 1, 1), 2)
    pv = engine.ParamVector(np.array([0.5, 0.5, 0.0, 0.0]), arch)
    assert engine.predict(pv, np.ones((1, 1, 1))) == 0


def test_predict_matches_argmax(conv_arch, rng):
    pv = engine.init_model(conv_arch, 9)
    xs = rng.uniform(size=(100,) + conv_arch.input_shape)
    preds = engine.predict_batch(pv, xs)
    logits = engine.forward_batch(pv, xs)
    assert np.array_equal(preds, np.argmax(logits, axis=1))


def test_predict_shift_invariant(mlp_arch, rng):
    # adding a constant to every output bias shifts all logits equally
    pv = engine.init_model(mlp_arch, 2)
    shifted = pv.values.copy()
    shifted[48:51] += 3.7  # final-layer biases
    pv2 = engine.ParamVector(shifted, mlp_arch)
    xs = rng.uniform(size=(50,) + mlp_arch.input_shape)
    assert np.array_equal(engine.predict_batch(pv, xs), engine.predict_batch(pv2, xs))


# ---------------------------------------------------------------------------
# grad
# ---------------------------------------------------------------------------

def fd_gradient(pv, batch, h=1e-4):
    d = pv.values.size
    g = np.empty(d)
    for j in range(d):
        up = pv.values.copy(); up[j] += h
        dn = pv.values.copy(); dn[j] -= h
        inputs = np.stack([s.input for s in batch])
        labels = np.array([s.label for s in batch])
        lu = engine.losses_batch(pv.replace(up), inputs, labels).mean()
        ld = engine.losses_batch(pv.replace(dn), inputs, labels).mean()
        g[j] = (lu - ld) / (2 * h)
    return g


@pytest.mark.parametrize("arch_name", ["mlp_arch", "conv_arch"])
def test_grad_matches_finite_differences(arch_name, rng, request):
    arch = request.getfixturevalue(arch_name)
    pv = engine.init_model(arch, 21)
    batch = make_batch(rng, arch, 8)
    g = engine.grad(pv, batch, reduction="mean")
    g_fd = fd_gradient(pv, batch)
    denom = max(np.abs(g_fd).max(), 1e-8)
    assert np.abs(g - g_fd).max() / denom < 1e-3


def test_grad_sum_vs_mean(conv_arch, rng):
    pv = engine.init_model(conv_arch, 4)
    batch = make_batch(rng, conv_arch, 6)
    gs = engine.grad(pv, batch, reduction="sum")
    gm = engine.grad(pv, batch, reduction="mean")
    assert np.allclose(gs, 6 * gm, atol=1e-9)


def test_grad_empty_batch(conv_arch):
    pv = engine.init_model(conv_arch, 4)
    with pytest.raises(InputError):
        engine.grad(pv, [], reduction="mean")


def test_grad_zero_at_convex_minimum(rng):
    # softmax regression is convex; find the minimum independently with
    # L-BFGS and check our gradient is stationary there
    arch = ArchDescriptor((Flatten(), Dense(2, 2)), (1, 2, 1), 2)
    batch = make_batch(rng, arch, 12)

    def fun(w):
        pv = engine.ParamVector(w, arch)
        inputs = np.stack([s.input for s in batch])
        labels = np.array([s.label for s in batch])
        return engine.losses_batch(pv, inputs, labels).mean()

    def jac(w):
        return engine.grad(engine.ParamVector(w, arch), batch, reduction="mean")

    res = scipy.optimize.minimize(fun, np.zeros(arch.param_count), jac=jac,
                                  method="L-BFGS-B",
                                  options={"gtol": 1e-10, "maxiter": 2000})
    g = engine.grad(engine.ParamVector(res.x, arch), batch, reduction="mean")
    assert np.linalg.norm(g) < 1e-6


# ---------------------------------------------------------------------------
# hvp / dense_hessian
# ---------------------------------------------------------------------------

def test_hvp_zero_vector(conv_arch, rng):
    pv = engine.init_model(conv_arch, 4)
    batch = make_batch(rng, conv_arch, 5)
    assert np.array_equal(engine.hvp(pv, batch, np.zeros(47)), np.zeros(47))


def test_hvp_linear(conv_arch, rng):
    pv = engine.init_model(conv_arch, 4)
    batch = make_batch(rng, conv_arch, 5)
    v1 = rng.standard_normal(47)
    v2 = rng.standard_normal(47)
    lhs = engine.hvp(pv, batch, v1 + v2)
    rhs = engine.hvp(pv, batch, v1) + engine.hvp(pv, batch, v2)
    assert np.abs(lhs - rhs).max() < 1e-5


def test_hvp_dimension_mismatch(conv_arch, rng):
    pv = engine.init_model(conv_arch, 4)
    with pytest.raises(InputError):
        engine.hvp(pv, make_batch(rng, conv_arch, 3), np.zeros(46))


def test_hvp_matches_dense_hessian(conv_arch, rng):
    pv = engine.init_model(conv_arch, 6)
    batch = make_batch(rng, conv_arch, 10)
    H = engine.dense_hessian(pv, batch)
    v = rng.standard_normal(47)
    hv = engine.hvp(pv, batch, v)
    denom = max(np.abs(H @ v).max(), 1e-12)
    assert np.abs(H @ v - hv).max() / denom < 1e-3


def test_dense_hessian_symmetry_reported(conv_arch, rng):
    pv = engine.init_model(conv_arch, 6)
    batch = make_batch(rng, conv_arch, 10)
    H, asym = engine.dense_hessian(pv, batch, return_asymmetry=True)
    assert asym < 1e-5
    assert np.array_equal(H, H.T)


def test_dense_hessian_columns_are_hvps(mlp_arch, rng):
    pv = engine.init_model(mlp_arch, 6)
    batch = make_batch(rng, mlp_arch, 6)
    H = engine.dense_hessian(pv, batch)
    for j in [0, 17, 50]:
        e = np.zeros(51); e[j] = 1.0
        assert np.abs(H[:, j] - engine.hvp(pv, batch, e)).max() < 1e-4


def test_dense_hessian_softmax_regression_oracle(rng):
    # closed form for a bias-free linear model: H = E[(diag(p)-pp^T) (x) xx^T]
    arch = ArchDescriptor((Flatten(), Dense(3, 3)), (1, 3, 1), 3)
    w = rng.standard_normal(arch.param_count) * 0.5
    w[9:] = 0.0  # zero the biases; oracle below covers the weight block
    pv = engine.ParamVector(w, arch)
    batch = make_batch(rng, arch, 7)
    inputs = np.stack([s.input for s in batch]).reshape(7, 3)
    H = engine.dense_hessian(pv, batch)
    W = w[:9].reshape(3, 3)
    expect = np.zeros((9, 9))
    for x in inputs:
        p = engine.softmax_np((W @ x)[None])[0]
        A = np.diag(p) - np.outer(p, p)
        expect += np.kron(A, np.outer(x, x))
    expect /= 7
    assert np.abs(H[:9, :9] - expect).max() < 1e-8


def test_dense_hessian_cap():
    arch = ArchDescriptor((Flatten(), Dense(2, 2)), (1, 2, 1), 2)
    pv = engine.init_model(arch, 0)
    with pytest.raises(CapacityError):
        engine.dense_hessian(pv, [], cap=3)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

def separable_set(rng, n=40):
    # two clusters on opposite corners, trivially separable
    arch = ArchDescriptor((Flatten(), Dense(4, 2)), (2, 2, 1), 2)
    samples = []
    for i in range(n):
        label = i % 2
        base = np.full((2, 2, 1), 0.9 if label else 0.1)
        samples.append(LabeledSample(
            np.clip(base + rng.normal(0, 0.02, (2, 2, 1)), 0, 1), label,
            sample_id=f"sep{i}"))
    return arch, samples


def test_train_loss_decreases_first_epochs(rng):
    arch, samples = separable_set(rng)
    cfg = engine.TrainConfig(learning_rate=0.5, momentum=0.0, epochs=10,
                             batch_size=len(samples), seed=0)
    _, hist = engine.train_stage(engine.init_model(arch, 0), samples, cfg)
    losses = hist["epoch_loss"]
    assert all(b < a for a, b in zip(losses, losses[1:]))


def test_train_zero_epochs_identity(rng):
    arch, samples = separable_set(rng)
    cfg1 = engine.TrainConfig(learning_rate=0.1, epochs=3, batch_size=16, seed=0)
    cfg0 = engine.TrainConfig(learning_rate=0.1, epochs=0, batch_size=16, seed=0)
    w_clean, w_bd = engine.train_two_stage(arch, samples, samples, cfg1, cfg0)
    assert np.array_equal(w_clean.values, w_bd.values)
    assert w_bd.origin == "backdoored"


def test_train_divergence_reports_epoch(mlp_arch, rng):
    # lr * weight_decay >> 2 amplifies every coordinate geometrically until
    # the logits overflow and the loss goes non-finite
    samples = make_batch(rng, mlp_arch, 8)
    cfg = engine.TrainConfig(learning_rate=10.0, weight_decay=1e10, epochs=60,
                             batch_size=8, seed=0)
    with pytest.raises(TrainingError) as err:
        engine.train_stage(engine.init_model(mlp_arch, 0), samples, cfg)
    assert err.value.epoch is not None


def test_train_deterministic(rng):
    arch, samples = separable_set(rng)
    cfg = engine.TrainConfig(learning_rate=0.2, epochs=4, batch_size=8, seed=3)
    a, _ = engine.train_stage(engine.init_model(arch, 1), samples, cfg)
    b, _ = engine.train_stage(engine.init_model(arch, 1), samples, cfg)
    assert np.array_equal(a.values, b.values)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def test_checkpoint_round_trip(tmp_path, conv_arch):
    pv = engine.init_model(conv_arch, 13)
    pv = pv.replace(pv.values, origin="backdoored")
    path = tmp_path / "model.ckpt"
    engine.save_checkpoint(path, pv)
    back = engine.load_checkpoint(path)
    assert np.array_equal(back.values, pv.values)
    assert back.arch == pv.arch
    assert back.origin == "backdoored"


def test_checkpoint_bad_magic(tmp_path):
    path = tmp_path / "bad.ckpt"
    path.write_bytes(b"NOPE" + b"\0" * 32)
    from madkit.errors import FormatError
    with pytest.raises(FormatError):
        engine.load_checkpoint(path)
