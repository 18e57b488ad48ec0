import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from elitepix.nn import (CheckpointError, ConvLstmParams, ConvLstmState, ModelConfig, OptimizerState,
                         ShapeError, UsageError, backward, checkpoint_bytes, cips_forward, conv2d,
                         convlstm_backward, convlstm_cell_step, convlstm_forward, init_params,
                         load_checkpoint, param_count, param_shapes, save_checkpoint)
from elitepix.nn import ops
from elitepix.nn.checkpoint import checkpoint_from_bytes
from elitepix.nn.model import glorot_bound

from gradcheck import grad_ok, numeric_grad, rel_error


def naive_conv(x, kernel, bias=None):
    """Direct summation with explicit zero padding."""
    h, w, c_in = x.shape
    k, _, _, c_out = kernel.shape
    p = k // 2
    out = np.zeros((h, w, c_out))
    for r in range(h):
        for c in range(w):
            for o in range(c_out):
                acc = 0.0 if bias is None else bias[o]
                for i in range(k):
                    for j in range(k):
                        rr, cc = r + i - p, c + j - p
                        if 0 <= rr < h and 0 <= cc < w:
                            for q in range(c_in):
                                acc += x[rr, cc, q] * kernel[i, j, q, o]
                out[r, c, o] = acc
    return out


def random_lstm(rng, c_in, c_h, k, scale=0.5):
    d = {}
    for g in ("fg", "in", "s", "out"):
        d[f"w_{g}"] = rng.normal(scale=scale, size=(k, k, c_in + c_h, c_h))
        d[f"b_{g}"] = rng.normal(scale=scale, size=c_h)
    return ConvLstmParams(**d)


# ----------------------------------------------------------------- conv2d

@given(st.integers(1, 7), st.integers(1, 7), st.integers(1, 3), st.integers(1, 3),
       st.sampled_from([1, 3, 5]), st.integers(0, 2 ** 31))
def test_conv2d_matches_naive_oracle(h, w, c_in, c_out, k, seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(h, w, c_in))
    kern = rng.normal(size=(k, k, c_in, c_out))
    b = rng.normal(size=c_out)
    assert np.max(np.abs(conv2d(x, kern, b) - naive_conv(x, kern, b))) <= 1e-12


def test_conv2d_identity_kernel(rng):
    x = rng.normal(size=(5, 6, 2))
    kern = np.zeros((3, 3, 2, 2))
    kern[1, 1] = np.eye(2)
    np.testing.assert_array_equal(conv2d(x, kern), x)


def test_conv2d_batched_equals_single(rng):
    x = rng.normal(size=(3, 4, 5, 2))
    kern = rng.normal(size=(3, 3, 2, 4))
    out = conv2d(x, kern)
    for i in range(3):
        np.testing.assert_allclose(out[i], conv2d(x[i], kern), atol=1e-13)


def test_conv2d_shape_errors(rng):
    with pytest.raises(ShapeError):
        conv2d(rng.normal(size=(4, 4, 2)), rng.normal(size=(3, 3, 3, 1)))
    with pytest.raises(ShapeError):
        conv2d(rng.normal(size=(4, 4, 2)), rng.normal(size=(2, 2, 2, 1)))


def test_conv2d_gradients(rng):
    x = rng.normal(size=(2, 4, 5, 2))
    kern = rng.normal(size=(3, 3, 2, 3))
    b = rng.normal(size=3)
    wout = rng.normal(size=(2, 4, 5, 3))

    def f():
        return float((conv2d(x, kern, b) * wout).sum())

    dx, dk, db = ops.conv2d_backward(wout, x, kern)
    for analytic, var in ((dx, x), (dk, kern), (db, b)):
        assert grad_ok(analytic, numeric_grad(f, var))


# -------------------------------------------------------------- elementwise

def test_sigmoid_matches_logistic(rng):
    x = rng.normal(scale=20, size=1000)
    # tanh form: absolute accuracy, relative error grows in the far negative tail
    np.testing.assert_allclose(ops.sigmoid(x.copy()), 1 / (1 + np.exp(-x)), rtol=0, atol=1e-15)
    assert np.all(np.isfinite(ops.sigmoid(np.array([-1e4, 1e4]))))


def test_sigmoid_and_relu_gradients(rng):
    x = rng.normal(size=(3, 4))
    x[np.abs(x) < 1e-3] = 0.5  # keep away from the relu kink
    wout = rng.normal(size=x.shape)
    y = ops.sigmoid(x.copy())
    assert grad_ok(ops.sigmoid_backward(wout, y),
                   numeric_grad(lambda: float((ops.sigmoid(x.copy()) * wout).sum()), x))
    assert grad_ok(ops.relu_backward(wout, x), numeric_grad(lambda: float((ops.relu(x) * wout).sum()), x))


def test_layer_norm_gradients(rng):
    x = rng.normal(size=(4, 2, 3, 3))
    gamma, beta = rng.normal(size=4), rng.normal(size=4)
    wout = rng.normal(size=x.shape)

    def f():
        return float((ops.layer_norm(x, gamma, beta)[0] * wout).sum())

    _, cache = ops.layer_norm(x, gamma, beta)
    dx, dg, db = ops.layer_norm_backward(wout, cache)
    for analytic, var in ((dx, x), (dg, gamma), (db, beta)):
        assert grad_ok(analytic, numeric_grad(f, var))


def test_layer_norm_normalises_channels(rng):
    x = rng.normal(3, 5, size=(16, 2, 4, 4))
    y, _ = ops.layer_norm(x, np.ones(16), np.zeros(16))
    np.testing.assert_allclose(y.mean(axis=0), 0, atol=1e-12)
    np.testing.assert_allclose(y.var(axis=0), 1, atol=1e-3)


def test_batch_norm_gradients(rng):
    x = rng.normal(size=(3, 2, 4, 4))
    gamma, beta = rng.normal(size=3), rng.normal(size=3)
    wout = rng.normal(size=x.shape)

    def f():
        return float((ops.batch_norm_train(x, gamma, beta)[0] * wout).sum())

    *_, cache = ops.batch_norm_train(x, gamma, beta)
    dx, dg, db = ops.batch_norm_backward(wout, cache)
    for analytic, var in ((dx, x), (dg, gamma), (db, beta)):
        assert grad_ok(analytic, numeric_grad(f, var))


def test_batch_norm_eval_uses_running_stats(rng):
    x = rng.normal(size=(2, 3, 4, 4))
    mean, var = np.array([1.0, -2.0]), np.array([4.0, 0.25])
    y = ops.batch_norm_eval(x, np.ones(2), np.zeros(2), mean, var)
    expect = (x - mean[:, None, None, None]) / np.sqrt(var[:, None, None, None] + ops.BN_EPS)
    np.testing.assert_allclose(y, expect, atol=1e-13)


def test_dense_gradients(rng):
    x = rng.normal(size=(4, 2, 3, 3))
    weight, bias = rng.normal(size=(4, 2)), rng.normal(size=2)
    wout = rng.normal(size=(2, 2, 3, 3))

    def f():
        return float((ops.dense(x, weight, bias) * wout).sum())

    dx, dw, db = ops.dense_backward(wout, x, weight)
    for analytic, var in ((dx, x), (dw, weight), (db, bias)):
        assert grad_ok(analytic, numeric_grad(f, var))


def test_dropout_mask_is_inverted(rng):
    m = ops.dropout_mask((200, 200), 0.25, rng)
    assert set(np.unique(m)) == {0.0, 1 / 0.75}
    assert abs(m.mean() - 1.0) < 0.02
    np.testing.assert_array_equal(ops.dropout_mask((3, 3), 0.0, rng), 1.0)


# ---------------------------------------------------------------- ConvLSTM

def scalar_lstm(xs, wx, wh, b):
    y = s = 0.0
    ys = []
    sig = lambda a: 1 / (1 + math.exp(-a))  # noqa: E731
    for x in xs:
        fg = sig(wx["fg"] * x + wh["fg"] * y + b["fg"])
        ig = sig(wx["in"] * x + wh["in"] * y + b["in"])
        cand = math.tanh(wx["s"] * x + wh["s"] * y + b["s"])
        og = sig(wx["out"] * x + wh["out"] * y + b["out"])
        s = fg * s + ig * cand
        y = og * math.tanh(s)
        ys.append(y)
    return ys


@given(st.integers(1, 12), st.integers(0, 2 ** 31))
def test_k1_convlstm_equals_scalar_lstm(n_t, seed):
    rng = np.random.default_rng(seed)
    params = random_lstm(rng, 1, 1, 1, scale=1.5)
    xs = rng.normal(size=n_t)
    # concat order is [hidden, input]
    wh = {g: getattr(params, f"w_{g}")[0, 0, 0, 0] for g in ("fg", "in", "s", "out")}
    wx = {g: getattr(params, f"w_{g}")[0, 0, 1, 0] for g in ("fg", "in", "s", "out")}
    b = {g: getattr(params, f"b_{g}")[0] for g in ("fg", "in", "s", "out")}
    out = convlstm_forward(xs.reshape(n_t, 1, 1, 1), params)
    assert np.max(np.abs(out.ravel() - scalar_lstm(xs, wx, wh, b))) <= 1e-12


@given(st.integers(1, 10), st.integers(0, 2 ** 31))
def test_cell_state_bounds(n_t, seed):
    rng = np.random.default_rng(seed)
    params = random_lstm(rng, 2, 3, 3, scale=0.5)
    x = rng.normal(size=(n_t, 4, 4, 2))
    state = ConvLstmState.zeros((4, 4, 3))
    for t in range(1, n_t + 1):
        state = convlstm_cell_step(x[t - 1], state, params)
        assert np.all(np.abs(state.s) < t)
        assert np.all(np.abs(state.y) < 1)


def test_cell_state_bounds_saturated(rng):
    # saturated gates round to exactly 1.0, so only the closed bound survives
    params = random_lstm(rng, 2, 3, 3, scale=3.0)
    x = rng.normal(scale=5, size=(8, 4, 4, 2))
    state = ConvLstmState.zeros((4, 4, 3))
    for t in range(1, 9):
        state = convlstm_cell_step(x[t - 1], state, params)
        assert np.all(np.abs(state.s) <= t)
        assert np.all(np.abs(state.y) <= 1)


def test_cell_step_fold_equals_forward(rng):
    params = random_lstm(rng, 2, 3, 3)
    x = rng.normal(size=(5, 6, 7, 2))
    state = ConvLstmState.zeros((6, 7, 3))
    for t in range(5):
        state = convlstm_cell_step(x[t], state, params)
    np.testing.assert_allclose(convlstm_forward(x, params, return_sequences=False), state.y, atol=1e-14)


def test_convlstm_shape_errors(rng):
    params = random_lstm(rng, 2, 3, 3)
    with pytest.raises(ShapeError):
        convlstm_forward(rng.normal(size=(4, 5, 5, 3)), params)
    with pytest.raises(ShapeError):
        convlstm_cell_step(rng.normal(size=(5, 5, 2)), ConvLstmState.zeros((4, 4, 3)), params)


@pytest.mark.parametrize("return_sequences", [True, False])
def test_convlstm_gradients(rng, return_sequences):
    params = random_lstm(rng, 2, 2, 3)
    x = rng.normal(size=(2, 3, 4, 4, 2))
    out_shape = (2, 3, 4, 4, 2) if return_sequences else (2, 4, 4, 2)
    wout = rng.normal(size=out_shape)

    def f():
        return float((convlstm_forward(x, params, return_sequences) * wout).sum())

    _, tape = convlstm_forward(x, params, return_sequences, record=True)
    dx, grads = convlstm_backward(wout, tape)
    assert grad_ok(dx, numeric_grad(f, x))
    for name, g in grads.items():
        assert grad_ok(g, numeric_grad(f, getattr(params, name))), name


# ------------------------------------------------------------- full model

TOY = ModelConfig(features=2, hidden=3, dropout=0.0)


def toy_input(rng, n_s=2, n_t=3, size=4, f=2):
    return rng.normal(size=(n_s, n_t, size, size, f))


def test_full_model_gradients(rng):
    model = init_params(TOY, 3)
    x = toy_input(rng)
    wout = rng.normal(size=(2, 4, 4, 1))

    def f():
        return float((cips_forward(x, model.copy(), "train", record=False) * wout).sum())

    m = model.copy()
    cips_forward(x, m, "train")
    grads = backward(wout, m)
    worst = 0.0
    for name, g in grads.items():
        num = numeric_grad(f, model.params[name])
        assert grad_ok(g, num), name
        if np.linalg.norm(g) > 1e-6:
            worst = max(worst, rel_error(g, num))
    assert worst <= 1e-4


def test_dropout_gradients_with_fixed_rng(rng):
    cfg = ModelConfig(features=2, hidden=3, dropout=0.5)
    model = init_params(cfg, 4)
    x = toy_input(rng)
    wout = rng.normal(size=(2, 4, 4, 1))

    def f():
        return float((cips_forward(x, model.copy(), "train", np.random.default_rng(9), record=False)
                      * wout).sum())

    m = model.copy()
    cips_forward(x, m, "train", np.random.default_rng(9))
    grads = backward(wout, m)
    for name in ("head.w", "conv4.w", "convlstm1.w_in"):
        assert grad_ok(grads[name], numeric_grad(f, model.params[name])), name


def test_output_shape_and_range(rng):
    model = init_params(TOY, 0)
    out = cips_forward(toy_input(rng, n_s=3, n_t=2, size=5), model, "train", record=False)
    assert out.shape == (3, 5, 5, 1)
    assert np.all((out > 0) & (out < 1))


def test_eval_forward_is_pure(rng):
    model = init_params(TOY, 0)
    x = toy_input(rng)
    cips_forward(x, model, "train", record=False)
    before = {k: v.copy() for k, v in model.state.items()}
    a = cips_forward(x, model, "eval")
    b = cips_forward(x, model, "eval")
    np.testing.assert_array_equal(a, b)
    for k in before:
        np.testing.assert_array_equal(before[k], model.state[k])


def test_train_forward_deterministic_per_seed(rng):
    cfg = ModelConfig(features=2, hidden=3, dropout=0.3)
    x = toy_input(rng)
    outs = [cips_forward(x, init_params(cfg, 1), "train", np.random.default_rng(5), record=False)
            for _ in range(2)]
    np.testing.assert_array_equal(*outs)


def test_running_stats_update():
    cfg = ModelConfig(features=2, hidden=3, dropout=0.0)
    model = init_params(cfg, 0)
    x = np.random.default_rng(0).normal(size=(2, 2, 4, 4, 2))
    cips_forward(x, model, "train", record=False)
    assert model.bn_updates == 1
    assert not np.allclose(model.state["bn2.mean"], 0)


def test_usage_errors(rng):
    model = init_params(ModelConfig(features=2, hidden=3), 0)
    x = toy_input(rng)
    with pytest.raises(UsageError):
        cips_forward(x, model, "eval")
    with pytest.raises(UsageError):
        cips_forward(x, model, "train")  # dropout without rng
    with pytest.raises(UsageError):
        backward(np.zeros((2, 4, 4, 1)), model)
    with pytest.raises(ShapeError):
        cips_forward(x[..., :1], model, "train", rng)


def test_float32_close_to_float64(rng):
    x = toy_input(rng)
    m64 = init_params(ModelConfig(features=2, hidden=4, dropout=0.0), 2)
    m32 = init_params(ModelConfig(features=2, hidden=4, dropout=0.0, dtype="float32"), 2)
    a = cips_forward(x, m64, "train", record=False)
    b = cips_forward(x, m32, "train", record=False)
    assert b.dtype == np.float32
    np.testing.assert_allclose(a, b, atol=1e-4)


# ---------------------------------------------------------- init and counts

def test_param_counts_closed_form():
    cfg = ModelConfig(features=2, hidden=16, kernel=3)
    assert 4 * (9 * 18 * 16 + 16) == 10432
    assert 9 * 16 * 16 + 16 == 2320
    trainable, non_trainable = param_count(cfg)
    assert trainable == 10432 + 32 + 4 * (9 * 32 * 16 + 16) + 32 + 2 * (2320 + 32) + 17
    assert non_trainable == 96  # three batch norms of 16 channels, 32 each
    assert init_params(cfg, 0).count() == (trainable, non_trainable)


@given(st.integers(1, 4), st.integers(1, 8), st.sampled_from([1, 3, 5]))
def test_param_count_matches_shapes(f, c, k):
    cfg = ModelConfig(features=f, hidden=c, kernel=k)
    assert param_count(cfg)[0] == sum(int(np.prod(s)) for s in param_shapes(cfg).values())


def test_init_rules():
    cfg = ModelConfig()
    a, b = init_params(cfg, 7), init_params(cfg, 7)
    for name in a.params:
        np.testing.assert_array_equal(a.params[name], b.params[name])
    for layer in ("convlstm1", "convlstm2"):
        np.testing.assert_array_equal(a.params[f"{layer}.b_fg"], 1.0)
        np.testing.assert_array_equal(a.params[f"{layer}.b_in"], 0.0)
    for name, v in a.params.items():
        if name.rsplit(".", 1)[1].startswith("w"):
            assert np.all(np.abs(v) <= glorot_bound(v.shape))
    assert glorot_bound((3, 3, 18, 16)) == pytest.approx(math.sqrt(6 / (9 * 18 + 9 * 16)))
    assert not np.array_equal(init_params(cfg, 8).params["conv3.w"], a.params["conv3.w"])


# ---------------------------------------------------------------- checkpoint

def test_checkpoint_round_trip(tmp_path, rng):
    model = init_params(ModelConfig(features=3, hidden=4, dropout=0.1), 5)
    cips_forward(toy_input(rng, f=3), model, "train", rng, record=False)
    opt = OptimizerState.zeros(model)
    opt = OptimizerState(7, {k: v + 0.5 for k, v in opt.m.items()}, {k: v + 2.0 for k, v in opt.v.items()})
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, model, opt)
    raw = path.read_bytes()
    loaded, lopt = load_checkpoint(path)
    assert checkpoint_bytes(loaded, lopt) == raw
    assert loaded.config == model.config and loaded.bn_updates == model.bn_updates
    for k in model.params:
        np.testing.assert_array_equal(model.params[k], loaded.params[k])
    assert lopt.step == 7
    no_opt, none = checkpoint_from_bytes(checkpoint_bytes(model))
    assert none is None


def test_checkpoint_corruption_detected():
    raw = checkpoint_bytes(init_params(ModelConfig(hidden=2), 0))
    with pytest.raises(CheckpointError):
        checkpoint_from_bytes(raw[:-8])
    with pytest.raises(CheckpointError):
        checkpoint_from_bytes(b"garbage")


# ---------------------------------------------------------- closed forms

def zero_lstm(c_in, c_h, k=3):
    return ConvLstmParams(**{f"{p}_{g}": np.zeros((k, k, c_in + c_h, c_h) if p == "w" else c_h)
                             for g in ("fg", "in", "s", "out") for p in ("w", "b")})


def test_zero_params_zero_state_closed_form(rng):
    state = convlstm_cell_step(rng.normal(size=(4, 4, 2)), ConvLstmState.zeros((4, 4, 3)), zero_lstm(2, 3))
    np.testing.assert_array_equal(state.s, 0.0)
    np.testing.assert_array_equal(state.y, 0.0)
    out = convlstm_forward(rng.normal(size=(5, 4, 4, 2)), zero_lstm(2, 3))
    np.testing.assert_array_equal(out, 0.0)


def test_zero_params_unit_cell_closed_form(rng):
    s0 = ConvLstmState(np.zeros((3, 3, 2)), np.ones((3, 3, 2)))
    state = convlstm_cell_step(rng.normal(size=(3, 3, 1)), s0, zero_lstm(1, 2))
    np.testing.assert_allclose(state.s, 0.5, atol=1e-15)
    np.testing.assert_allclose(state.y, 0.5 * math.tanh(0.5), atol=1e-15)


def test_single_step_forward_equals_cell_step(rng):
    params = random_lstm(rng, 2, 3, 3)
    x = rng.normal(size=(1, 5, 5, 2))
    state = convlstm_cell_step(x[0], ConvLstmState.zeros((5, 5, 3)), params)
    np.testing.assert_array_equal(convlstm_forward(x, params, return_sequences=False), state.y)


def test_zero_kernel_constant_bias(rng):
    out = conv2d(rng.normal(size=(4, 5, 2)), np.zeros((3, 3, 2, 3)), np.array([1.5, -2.0, 0.0]))
    np.testing.assert_array_equal(out, np.broadcast_to([1.5, -2.0, 0.0], (4, 5, 3)))


def test_bias_gradient_of_sum_is_pixel_count(rng):
    x = rng.normal(size=(2, 4, 5, 2))
    _, _, db = ops.conv2d_backward(np.ones((2, 4, 5, 3)), x, rng.normal(size=(3, 3, 2, 3)))
    np.testing.assert_array_equal(db, 2 * 4 * 5)


def test_constant_loss_gives_zero_gradients(rng):
    model = init_params(TOY, 0)
    cips_forward(toy_input(rng), model, "train")
    grads = backward(np.zeros((2, 4, 4, 1)), model)
    assert all(not np.any(g) for g in grads.values())
