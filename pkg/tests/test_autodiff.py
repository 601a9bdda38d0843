import numpy as np
import pytest

from cadfield import autodiff as ad
from cadfield.errors import DimensionError, DoubleBackwardError, FormatError, NonFiniteError, OptimizerError


def numeric_grad(f, x, h=1e-5):
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        g[i] = (f(xp) - f(xm)) / (2 * h)
    return g


def check(build, *shapes, rng, tol=1e-6, positive=False):
    """Compare autodiff with central differences for every input."""
    values = [rng.normal(size=s) for s in shapes]
    if positive:
        values = [np.abs(v) + 0.5 for v in values]
    params = [ad.parameter(v) for v in values]
    build(*params).backward()
    for k, v in enumerate(values):
        def f(x, k=k):
            args = [ad.Tensor(x if j == k else values[j]) for j in range(len(values))]
            return float(build(*args).data)

        expected = numeric_grad(f, v)
        assert np.allclose(params[k].grad, expected, rtol=tol, atol=tol * 10), (k, params[k].grad, expected)


def test_forward_examples(rng):
    assert ad.sigmoid(ad.Tensor(0.0)).item() == 0.5
    a = rng.normal(size=(4, 5))
    assert np.array_equal(ad.matmul(ad.Tensor(np.eye(4)), ad.Tensor(a)).data, a)
    x = ad.Tensor(rng.normal(size=1000) * 10)
    total = ad.sum(ad.sin(x) * ad.sin(x) + ad.cos(x) * ad.cos(x)).item()
    assert abs(total - 1000) < 1e-12 * 1000


def test_sigmoid_strictly_inside(rng):
    s = ad.sigmoid(ad.Tensor(np.array([-800.0, -40.0, 0.0, 40.0, 800.0]))).data
    assert np.all(s > 0) and np.all(s < 1)


def test_square_grad():
    x = ad.parameter(3.0)
    (x * x).backward()
    assert x.grad == 6.0


def test_sigmoid_wx_matches_fd(rng):
    check(lambda w, x: ad.sum(ad.sigmoid(w * x)), (5,), (5,), rng=rng)


def test_disconnected_parameter_gets_zero():
    x, y = ad.parameter(2.0), ad.parameter(5.0)
    loss = x * 3.0 + y * 0.0
    loss.backward()
    assert y.grad == 0.0


@pytest.mark.parametrize("name,build,shapes,positive", [
    ("add", lambda a, b: ad.sum(a + b * b), [(3, 4), (4,)], False),
    ("sub_div", lambda a, b: ad.sum((a - b) / b), [(3,), (3,)], True),
    ("matmul", lambda a, b: ad.sum(ad.sin(ad.matmul(a, b))), [(3, 4), (4, 2)], False),
    ("linear", lambda x, w, b: ad.sum(ad.cos(ad.linear(x, w, b))), [(5, 3), (3, 4), (4,)], False),
    ("softplus", lambda a: ad.sum(ad.softplus(a) * a), [(6,)], False),
    ("exp_log", lambda a: ad.sum(ad.log(ad.exp(a) + 1.0)), [(6,)], False),
    ("sqrt_pow", lambda a: ad.sum(ad.sqrt(a) + a ** 3), [(6,)], True),
    ("norm", lambda a: ad.sum(ad.norm(a, axis=-1)), [(4, 3)], False),
    ("cumsum", lambda a: ad.sum(ad.exp(-ad.cumsum(a, axis=-1, exclusive=True)) * a), [(3, 5)], False),
    ("concat", lambda a, b: ad.sum(ad.concatenate([a, b], axis=1) ** 2 * 0.5), [(2, 3), (2, 2)], False),
    ("stack_take", lambda a: ad.sum(ad.take(ad.stack([a, a * 2.0], axis=0), (1, slice(None))) ** 3), [(4,)], False),
    ("reshape_transpose", lambda a: ad.sum(ad.transpose(ad.reshape(a, (3, 2))) @ ad.Tensor(np.ones((3, 1)))),
     [(6,)], False),
    ("mean_broadcast", lambda a: ad.mean(ad.broadcast_to(a, (4, 3)) * ad.Tensor(np.arange(12.0).reshape(4, 3))),
     [(3,)], False),
])
def test_op_gradients(name, build, shapes, positive, rng):
    check(build, *shapes, rng=rng, positive=positive)


def test_relu_clip_abs_away_from_kinks():
    x = np.array([-1.3, -0.4, 0.6, 2.2])
    p = ad.parameter(x)
    ad.sum(ad.relu(p) * 2.0 + ad.clip(p, -0.5, 1.0) + ad.absolute(p)).backward()
    assert np.array_equal(p.grad, np.array([0 + 0 - 1, 0 + 1 - 1, 2 + 1 + 1, 2 + 0 + 1], float))


def test_kink_monitor_records_masks():
    with ad.kink_monitor() as log:
        ad.relu(ad.Tensor(np.array([-1.0, 1.0])))
    assert len(log) == 1 and log[0].tolist() == [False, True]


def test_linearity_of_gradients(rng):
    w0 = rng.normal(size=4)
    grads = []
    for fn in (lambda w: ad.sum(ad.sin(w)), lambda w: ad.sum(w * w * w), None):
        w = ad.parameter(w0)
        loss = (ad.sum(ad.sin(w)) + ad.sum(w * w * w)) if fn is None else fn(w)
        loss.backward()
        grads.append(w.grad)
    assert np.allclose(grads[0] + grads[1], grads[2], atol=1e-14)


def test_double_backward_rejected():
    x = ad.parameter(1.0)
    loss = x * x
    loss.backward()
    with pytest.raises(DoubleBackwardError):
        loss.backward()


def test_shape_mismatch():
    with pytest.raises(DimensionError):
        ad.add(ad.Tensor(np.ones(3)), ad.Tensor(np.ones(4)))
    with pytest.raises(DimensionError):
        ad.matmul(ad.Tensor(np.ones((2, 3))), ad.Tensor(np.ones((2, 3))))


def test_non_finite_trips():
    with pytest.raises(NonFiniteError):
        ad.log(ad.Tensor(np.array([-1.0, 1.0])))


def test_adam_zero_grad_stationary():
    p = {"w": ad.parameter(np.array([1.0, -2.0]))}
    p["w"].grad = np.zeros(2)
    ad.adam_step(p, ad.OptimizerState(lr=0.1))
    assert np.array_equal(p["w"].data, [1.0, -2.0])


def test_adam_first_step_is_lr():
    p = {"w": ad.parameter(np.array([1.0, -2.0, 0.5]))}
    p["w"].grad = np.array([3.0, -0.01, 100.0])
    state = ad.OptimizerState(lr=0.01)
    ad.adam_step(p, state)
    assert np.allclose(np.abs(p["w"].data - [1.0, -2.0, 0.5]), 0.01, rtol=1e-5)
    assert state.step == 1


def test_adam_quadratic_converges():
    x = ad.parameter(1.0)
    state = ad.OptimizerState(lr=0.1)
    for _ in range(200):
        x.zero_grad()
        (x * x).backward()
        ad.adam_step({"x": x}, state)
    assert abs(x.item()) < 0.05


def test_adam_missing_grad():
    with pytest.raises(OptimizerError):
        ad.adam_step({"w": ad.parameter(1.0)}, ad.OptimizerState())


def test_checkpoint_round_trip(tmp_path, rng):
    arrays = {"a": rng.normal(size=(3, 4)), "b.c": np.array(2.5), "z": rng.normal(size=7)}
    path = tmp_path / "x.ckpt"
    ad.save_checkpoint(path, arrays, step=42, meta={"phase": 2})
    back, header = ad.load_checkpoint(path)
    assert header["step"] == 42 and header["meta"] == {"phase": 2}
    for k in arrays:
        assert np.array_equal(back[k], arrays[k])
    assert [p.name for p in tmp_path.iterdir()] == ["x.ckpt"]


def test_checkpoint_rejects_garbage(tmp_path):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"not a checkpoint at all")
    with pytest.raises(FormatError):
        ad.load_checkpoint(bad)
    good = tmp_path / "good.ckpt"
    ad.save_checkpoint(good, {"a": np.ones(10)})
    good.write_bytes(good.read_bytes()[:-8])
    with pytest.raises(FormatError, match="truncated"):
        ad.load_checkpoint(good)
