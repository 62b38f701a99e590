import numpy as np
import pytest

from cpnet import engine as E
from cpnet.engine import Graph, Tensor
from cpnet.model import CPNet, ModelConfig
from cpnet.nn import (
    MLP2,
    AdamState,
    Linear,
    adam_step,
    clip_grad_norm,
    load_checkpoint,
    mlp2_forward,
    save_checkpoint,
    uniform_init,
)

from oracles import adam_scalar


def test_uniform_init_bounds_and_determinism():
    w = uniform_init((50, 4), 4, np.random.default_rng(0))
    assert np.all(np.abs(w.data) <= 0.5)
    w2 = uniform_init((50, 4), 4, np.random.default_rng(0))
    np.testing.assert_array_equal(w.data, w2.data)
    with pytest.raises(ValueError):
        uniform_init((2, 0), 0, np.random.default_rng(0))


def test_uniform_init_mean_near_zero():
    w = uniform_init((10_000,), 100, np.random.default_rng(1))
    assert abs(w.data.mean()) < 0.02


def test_linear_bias_starts_at_zero():
    layer = Linear(3, 2, np.random.default_rng(0))
    np.testing.assert_array_equal(layer.bias.data, 0.0)


def test_mlp2_identity_weights():
    rng = np.random.default_rng(0)
    mlp = MLP2(4, 4, 4, rng)
    for layer in (mlp.first, mlp.second):
        layer.weight.data = np.eye(4)
    x = np.abs(rng.standard_normal((3, 4)))
    np.testing.assert_allclose(mlp(Tensor(x)).data, x, atol=0)


def test_mlp2_shape_and_sharing():
    rng = np.random.default_rng(1)
    mlp = MLP2(96, 256, 96, rng)
    x = rng.standard_normal((2, 5, 96))
    out = mlp(Tensor(x))
    assert out.shape == (2, 5, 96)
    np.testing.assert_allclose(out.data[1, 3], mlp(Tensor(x[1, 3])).data, atol=1e-12)
    with pytest.raises(E.ShapeError):
        mlp(Tensor(np.ones((2, 95))))


def test_mlp2_gradients():
    rng = np.random.default_rng(2)
    mlp = MLP2(5, 7, 3, rng)
    x = rng.standard_normal((4, 5))
    target = rng.standard_normal((4, 3))

    def loss_fn():
        d = E.sub(mlp2_forward(Tensor(x), (mlp.first, mlp.second)), target)
        return E.mean(E.mul(d, d))

    with Graph() as g:
        loss = loss_fn()
    g.backward(loss)
    for name, p in mlp.named_parameters():
        analytic, orig = p.grad.copy(), p.data

        def f(t):
            p.data = t.data
            try:
                return loss_fn()
            finally:
                p.data = orig

        assert E.max_relative_error(analytic, E.finite_diff_grad(f, Tensor(orig))) < 1e-5, name


def test_adam_zero_grads_fresh_state_keeps_params():
    p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    state = adam_step([p], [np.zeros(2)], AdamState())
    np.testing.assert_array_equal(p.data, [1.0, -2.0])
    assert state.step == 1


def test_adam_zero_grads_decay_moments():
    p = Tensor(np.array([1.0]), requires_grad=True)
    state = adam_step([p], [np.array([2.0])], AdamState())
    m0, v0 = state.m[0].copy(), state.v[0].copy()
    adam_step([p], [np.zeros(1)], state)
    np.testing.assert_allclose(state.m[0], 0.9 * m0)
    np.testing.assert_allclose(state.v[0], 0.999 * v0)


def test_adam_constant_grad_matches_scalar_recurrence():
    p = Tensor(np.array([0.7]), requires_grad=True)
    state = AdamState(lr=0.01)
    for _ in range(25):
        adam_step([p], [np.array([0.3])], state)
    assert abs(p.data[0] - adam_scalar(0.7, [0.3] * 25, lr=0.01)) < 1e-12


def test_adam_quadratic_bowl_converges():
    w = Tensor(np.array([0.0]), requires_grad=True)
    state = AdamState(lr=0.1)
    for _ in range(500):
        adam_step([w], [2 * (w.data - 3.0)], state)
    assert abs(w.data[0] - 3.0) < 0.01


def test_adam_lr_zero_is_identity():
    rng = np.random.default_rng(3)
    p = Tensor(rng.standard_normal(4), requires_grad=True)
    before = p.data.copy()
    state = AdamState(lr=0.0)
    for _ in range(3):
        adam_step([p], [rng.standard_normal(4)], state)
    np.testing.assert_array_equal(p.data, before)


def test_adam_rejects_nonfinite_grads():
    p = Tensor(np.zeros(2), requires_grad=True)
    with pytest.raises(E.NonFiniteError, match="parameter 0"):
        adam_step([p], [np.array([0.0, np.nan])], AdamState())


def test_clip_grad_norm():
    grads = [np.array([3.0]), np.array([4.0])]
    assert clip_grad_norm(grads, 1.0) == pytest.approx(5.0)
    assert np.sqrt(grads[0][0] ** 2 + grads[1][0] ** 2) == pytest.approx(1.0)


def test_checkpoint_round_trip_bit_exact(tmp_path):
    model = CPNet(ModelConfig(lookback=16, horizon=8, hidden=8), seed=3)
    named = list(model.state_dict().items())
    path = tmp_path / "m.cpnt"
    save_checkpoint(path, named)
    back = load_checkpoint(path)
    assert [n for n, _ in back] == [n for n, _ in named]
    for (_, a), (_, b) in zip(named, back):
        assert a.shape == b.shape and a.tobytes() == b.tobytes()
    raw = path.read_bytes()
    assert raw[:4] == b"CPNT"
    assert int.from_bytes(raw[4:8], "little") == 1
    assert int.from_bytes(raw[8:16], "little") == len(named)


def test_checkpoint_rejects_garbage(tmp_path):
    path = tmp_path / "bad.cpnt"
    path.write_bytes(b"NOPE" + bytes(12))
    with pytest.raises(ValueError):
        load_checkpoint(path)


def test_default_param_count_formula():
    cfg = ModelConfig()
    i, o, h, e, kd = cfg.lookback, cfg.horizon, cfg.hidden, cfg.embed_channels, cfg.dilated_kernel
    expected = 0
    for b in cfg.branches:
        m = (i + o) // b.sampling_rate
        expected += e * b.token_length + e  # token conv
        expected += i * h + h + h * o + o  # token MLP
        expected += e + 1  # collapse
        expected += kd + 1 + b.sampling_rate + 1  # dilated + equispaced
        expected += m * h + h + h * (i + o) + (i + o)  # predictor
    expected += len(cfg.branches) + 1  # merge
    assert CPNet(cfg).num_parameters() == expected
