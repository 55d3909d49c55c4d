import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gradcheck import numeric_grad, rel_err
from ris import autodiff as ad
from ris.autodiff import Adam, ParameterSet, Tensor, parameter
from ris.errors import ConfigurationError, NonFiniteError, UsageError


def naive_mlp(params, x, activation="relu"):
    """Straight-line triple-loop evaluation, no numpy matmul."""
    sizes = ad.mlp_layer_sizes(params)
    h = [list(map(float, row)) for row in x]
    for layer in range(len(sizes) - 1):
        w = params[f"l{layer}.weight"].data
        b = params[f"l{layer}.bias"].data
        out = []
        for row in h:
            new = []
            for j in range(w.shape[1]):
                acc = b[j]
                for i in range(w.shape[0]):
                    acc += row[i] * w[i, j]
                if layer < len(sizes) - 2:
                    acc = max(acc, 0.0) if activation == "relu" else np.tanh(acc)
                new.append(acc)
            out.append(new)
        h = out
    return np.array(h)


# -- mlp_forward ------------------------------------------------------------


def test_zero_params_give_zero_output():
    params = ad.init_mlp([3, 5, 2], np.random.default_rng(0))
    for t in params.tensors():
        t.data[...] = 0.0
    out = ad.mlp_forward(params, np.random.default_rng(1).normal(size=(4, 3)), [5])
    assert np.all(out.data == 0.0)


def test_identity_layer_relu():
    params = ParameterSet([("l0.weight", np.eye(1)), ("l0.bias", np.zeros(1)),
                           ("l1.weight", np.eye(1)), ("l1.bias", np.zeros(1))])
    out = ad.mlp_forward(params, np.array([[-3.0], [3.0]]), [1], "relu")
    assert out.data[:, 0].tolist() == [0.0, 3.0]


@pytest.mark.parametrize("activation", ["relu", "tanh"])
@pytest.mark.parametrize("seed", range(5))
def test_mlp_matches_naive_evaluation(seed, activation):
    rng = np.random.default_rng(seed)
    params = ad.init_mlp([4, 7, 6, 3], rng)
    for t in params.tensors():
        t.data[...] = rng.normal(size=t.shape)
    x = rng.normal(size=(5, 4))
    out = ad.mlp_forward(params, x, [7, 6], activation).data
    np.testing.assert_allclose(out, naive_mlp(params, x, activation), rtol=0, atol=1e-12)
    assert np.array_equal(ad.mlp_apply(params, x, activation), out)


def test_mlp_forward_deterministic_and_apply_bitwise_equal():
    rng = np.random.default_rng(3)
    params = ad.init_mlp([6, 32, 32, 1], rng)
    x = rng.normal(size=(64, 6))
    a = ad.mlp_forward(params, x).data
    b = ad.mlp_forward(params, x).data
    assert a.tobytes() == b.tobytes()
    assert ad.mlp_apply(params, x).tobytes() == a.tobytes()
    # leading axes are flattened, not batched through matmul broadcasting
    x3 = x.reshape(4, 16, 6)
    assert ad.mlp_apply(params, x3).reshape(64, 1).tobytes() == a.tobytes()


def test_mlp_shape_mismatch_is_configuration_error():
    params = ad.init_mlp([3, 4, 1], np.random.default_rng(0))
    with pytest.raises(ConfigurationError):
        ad.mlp_forward(params, np.zeros((2, 5)))
    with pytest.raises(ConfigurationError):
        ad.mlp_forward(params, np.zeros((2, 3)), hidden_sizes=[8])


def test_init_bounds_and_zero_bias():
    params = ad.init_mlp([16, 8, 2], np.random.default_rng(0))
    assert np.all(np.abs(params["l0.weight"].data) <= 1 / 4)
    assert np.all(np.abs(params["l1.weight"].data) <= 1 / np.sqrt(8))
    assert np.all(params["l0.bias"].data == 0) and np.all(params["l1.bias"].data == 0)


# -- backward ---------------------------------------------------------------


def test_grad_of_sum_is_ones():
    w = parameter(np.array([1.5, -2.0, 3.0]))
    ad.backward(ad.tsum(w))
    assert w.grad.tolist() == [1.0, 1.0, 1.0]


def test_grad_of_sum_of_squares():
    w = parameter(np.array([1.0, -2.0]))
    ad.backward(ad.tsum(w * w))
    assert w.grad.tolist() == [2.0, -4.0]


def test_backward_accumulates_until_reset():
    w = parameter(np.array([1.0, -2.0]))
    ad.backward(ad.tsum(w * w))
    ad.backward(ad.tsum(w * w))
    assert w.grad.tolist() == [4.0, -8.0]
    w.zero_grad()
    assert w.grad.tolist() == [0.0, 0.0]


def test_backward_rejects_non_scalar():
    w = parameter(np.ones(3))
    with pytest.raises(UsageError):
        ad.backward(w * 2.0)


def test_shared_subexpression_gets_both_paths():
    w = parameter(np.array([0.7]))
    y = w * w
    ad.backward(ad.tsum(y + y * w))  # 2w + 3w^2 -> d = 2w... check against FD
    x = w.data.copy()
    fd = numeric_grad(lambda: float(np.sum(x * x + x * x * x)), x)
    assert rel_err(w.grad, fd) < 1e-8


def _positive(rng, shape):
    return rng.uniform(0.5, 2.0, size=shape)


# op name -> (builder on the list of parameter tensors, input generators)
OPS = {
    "add": (lambda a, b: a + b, [(3, 4), (4,)]),
    "sub": (lambda a, b: a - b, [(3, 4), (3, 1)]),
    "mul": (lambda a, b: a * b, [(3, 4), (1, 4)]),
    "div": (lambda a, b: a / b, [(3, 4), "pos(3, 4)"]),
    "neg": (lambda a: -a, [(5,)]),
    "power": (lambda a: a**3.0, [(5,)]),
    "exp": (lambda a: ad.exp(a), [(2, 3)]),
    "log": (lambda a: ad.log(a), ["pos(2, 3)"]),
    "tanh": (lambda a: ad.tanh(a), [(2, 3)]),
    "relu": (lambda a: ad.relu(a), [(4, 3)]),
    "abs": (lambda a: ad.absolute(a), [(4, 3)]),
    "clip": (lambda a: ad.clip(a, -0.5, 0.5), [(4, 3)]),
    "maximum": (lambda a, b: ad.maximum(a, b), [(4, 3), (4, 3)]),
    "minimum": (lambda a, b: ad.minimum(a, b), [(4, 3), (4, 3)]),
    "logaddexp": (lambda a, b: ad.logaddexp(a, b), [(4, 3), (3,)]),
    "sum_axis": (lambda a: ad.tsum(a, axis=1), [(4, 3)]),
    "mean": (lambda a: ad.mean(a, axis=0), [(4, 3)]),
    "logsumexp": (lambda a: ad.logsumexp(a, axis=0), [(5, 3)]),
    "reshape": (lambda a: ad.reshape(a, (2, 6)), [(3, 4)]),
    "getitem": (lambda a: a[:, 1:3], [(3, 4)]),
    "concat": (lambda a, b: ad.concat([a, b], axis=-1), [(3, 2), (3, 4)]),
    "matmul": (lambda a, b: ad.matmul(a, b), [(3, 4), (4, 2)]),
    "linear": (lambda x, w, b: ad.linear(x, w, b), [(3, 4), (4, 2), (2,)]),
}


def _draw(rng, spec):
    if isinstance(spec, str):
        return _positive(rng, eval(spec[3:]))
    return rng.normal(size=spec)


@pytest.mark.parametrize("op", sorted(OPS))
def test_op_gradients_match_finite_differences(op):
    build, specs = OPS[op]
    for seed in range(20):
        rng = np.random.default_rng(seed)
        leaves = [parameter(_draw(rng, s)) for s in specs]
        out = build(*leaves)
        weights = rng.normal(size=out.shape)
        loss = ad.tsum(out * weights)
        ad.backward(loss)

        def f():
            return float(np.sum(build(*[Tensor(l.data) for l in leaves]).data * weights))

        for leaf in leaves:
            fd = numeric_grad(f, leaf.data)
            assert rel_err(leaf.grad, fd) < 1e-4, (op, seed)


def _min_preactivation(params, x):
    sizes = ad.mlp_layer_sizes(params)
    h, smallest = x, np.inf
    for i in range(len(sizes) - 2):
        h = h @ params[f"l{i}.weight"].data + params[f"l{i}.bias"].data
        smallest = min(smallest, np.abs(h).min())
        h = np.maximum(h, 0)
    return smallest


def test_mlp_gradients_match_finite_differences():
    checked, seed = 0, 0
    while checked < 20:
        rng = np.random.default_rng(100 + seed)
        seed += 1
        params = ad.init_mlp([3, 6, 5, 2], rng)
        x = rng.normal(size=(4, 3))
        # finite differences are meaningless across a ReLU kink
        if _min_preactivation(params, x) < 1e-3:
            continue
        checked += 1
        w = rng.normal(size=(4, 2))
        loss = ad.tsum(ad.tanh(ad.mlp_forward(params, x)) * w)
        ad.backward(loss)
        for name, t in params.items():
            fd = numeric_grad(lambda: float(np.sum(np.tanh(ad.mlp_apply(params, x)) * w)), t.data)
            assert rel_err(t.grad, fd) < 1e-4, (seed, name)


# -- Adam -------------------------------------------------------------------


def test_adam_first_step_is_lr_times_sign():
    p = ParameterSet([("w", np.array([0.3, -0.2, 1.0]))])
    p["w"].grad[...] = [5.0, -3.0, 0.01]
    Adam(p, lr=1e-3).step()
    np.testing.assert_allclose(p["w"].data - [0.3, -0.2, 1.0], [-1e-3, 1e-3, -1e-3], atol=1e-6)


def test_adam_zero_grad_leaves_params():
    p = ParameterSet([("w", np.array([0.3, -0.2]))])
    before = p["w"].data.copy()
    opt = Adam(p, lr=1e-2)
    opt.step()
    opt.step()
    assert np.array_equal(p["w"].data, before)
    assert opt.t == 2


def test_adam_two_steps_hand_recurrence():
    lr, b1, b2, eps, g, w0 = 0.1, 0.9, 0.999, 1e-8, 0.5, 1.0
    p = ParameterSet([("w", np.array([w0]))])
    opt = Adam(p, lr, b1, b2, eps)
    w = w0
    m = v = 0.0
    for t in (1, 2):
        p["w"].grad[...] = g
        opt.step()
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        w = w - lr * (m / (1 - b1**t)) / (np.sqrt(v / (1 - b2**t)) + eps)
        assert abs(p["w"].data[0] - w) < 1e-12


def test_adam_rejects_non_finite_grad_without_touching_params():
    p = ParameterSet([("w", np.array([1.0, 2.0]))])
    p["w"].grad[...] = [np.nan, 1.0]
    opt = Adam(p, lr=0.1)
    with pytest.raises(NonFiniteError, match="w"):
        opt.step()
    assert p["w"].data.tolist() == [1.0, 2.0] and opt.t == 0


# -- Polyak -----------------------------------------------------------------


def _pair(target_value, online_value):
    t = ParameterSet([("a", np.full((2, 2), target_value)), ("b", np.full(3, target_value))])
    o = ParameterSet([("a", np.full((2, 2), online_value)), ("b", np.full(3, online_value))])
    return t, o


def test_polyak_boundaries_and_midpoint():
    t, o = _pair(0.0, 2.0)
    ad.polyak_update(t, o, 1.0)
    assert all(np.all(t[n].data == 2.0) for n in t)
    t, o = _pair(0.0, 2.0)
    ad.polyak_update(t, o, 0.0)
    assert all(np.all(t[n].data == 0.0) for n in t)
    t, o = _pair(0.0, 2.0)
    ad.polyak_update(t, o, 0.5)
    assert all(np.all(t[n].data == 1.0) for n in t)


def test_polyak_mismatch_errors():
    t = ParameterSet([("a", np.zeros(2))])
    with pytest.raises(ConfigurationError):
        ad.polyak_update(t, ParameterSet([("b", np.zeros(2))]), 0.5)
    with pytest.raises(ConfigurationError):
        ad.polyak_update(t, ParameterSet([("a", np.zeros(3))]), 0.5)


@settings(max_examples=50, deadline=None)
@given(tau=st.floats(0.001, 0.999), k=st.integers(1, 40))
def test_polyak_contraction(tau, k):
    rng = np.random.default_rng(0)
    t = ParameterSet([("a", rng.normal(size=5))])
    o = ParameterSet([("a", rng.normal(size=5))])
    gap0 = np.max(np.abs(t["a"].data - o["a"].data))
    for _ in range(k):
        ad.polyak_update(t, o, tau)
    gap = np.max(np.abs(t["a"].data - o["a"].data))
    assert gap == pytest.approx(gap0 * (1 - tau) ** k, rel=1e-9, abs=1e-14)


# -- checkpoints ------------------------------------------------------------


def test_checkpoint_roundtrip_byte_identical(tmp_path):
    rng = np.random.default_rng(0)
    params = ad.init_mlp([5, 7, 3], rng).prefixed("net.")
    params.add("scalar", parameter(np.array(2.5)))
    a, b = tmp_path / "a.ris", tmp_path / "b.ris"
    ad.save_checkpoint(a, params)
    loaded = ad.load_checkpoint(a)
    assert loaded.names() == params.names()
    ad.save_checkpoint(b, loaded)
    assert a.read_bytes() == b.read_bytes()
    assert a.read_bytes()[:4] == b"RIS1"


def test_checkpoint_layout():
    blob = ad.encode_checkpoint({"w": np.array([[1.0, 2.0]])})
    assert blob[:4] == b"RIS1"
    assert blob[4:8] == (1).to_bytes(4, "little")
    assert blob[8:12] == (1).to_bytes(4, "little") and blob[12:13] == b"w"
    assert blob[13:17] == (2).to_bytes(4, "little")
    assert blob[17:25] == (1).to_bytes(4, "little") + (2).to_bytes(4, "little")
    assert np.frombuffer(blob[25:], "<f8").tolist() == [1.0, 2.0]


def test_checkpoint_rejects_garbage():
    with pytest.raises(ConfigurationError):
        ad.decode_checkpoint(b"NOPE")
    blob = ad.encode_checkpoint({"w": np.ones(4)})
    with pytest.raises(ConfigurationError):
        ad.decode_checkpoint(blob[:-3])


def test_parameter_names_unique():
    p = ParameterSet([("a", np.zeros(1))])
    with pytest.raises(ConfigurationError):
        p.add("a", np.zeros(1))
