import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from msg3d.autodiff import (
    BatchNormState,
    CheckpointError,
    OptimizerState,
    Parameter,
    Tensor,
    as_tensor,
    backward,
    batch_norm,
    concat,
    contract,
    default_dtype,
    finite_diff_check,
    frame_stride,
    get_default_dtype,
    load_checkpoint,
    lr_schedule,
    matmul,
    multiscale_graph_conv,
    no_grad,
    pad,
    relu,
    save_checkpoint,
    scaled_learning_rate,
    set_debug,
    sgd_step,
    softmax,
    softmax_cross_entropy,
    stack,
    temporal_conv,
    window_gather,
)
from msg3d.autodiff.tensor import exp, log

RNG = np.random.default_rng(1234)


def weighted_sum(y, seed=0):
    r = np.random.default_rng(seed).standard_normal(y.shape)
    return (y * Tensor(r)).sum()


def check(f, at, **kw):
    rep = finite_diff_check(f, at, **kw)
    assert rep.passed, str(rep)
    return rep


# -- elementwise and shape ops ------------------------------------------------------

@pytest.mark.parametrize("op", [
    lambda a, b: a + b, lambda a, b: a - b, lambda a, b: a * b, lambda a, b: a / (b * b + 1.0),
])
def test_binary_ops_with_broadcasting(op):
    a = RNG.standard_normal((3, 4))
    b = Tensor(RNG.standard_normal((4,)), requires_grad=True)
    check(lambda t: weighted_sum(op(t, b)), a)
    check(lambda t: weighted_sum(op(Tensor(a), t)), b.data.copy())


def test_unary_and_reductions():
    x = RNG.uniform(0.5, 2.0, (3, 5))
    check(lambda t: weighted_sum(exp(t)), x)
    check(lambda t: weighted_sum(log(t)), x)
    check(lambda t: weighted_sum(t.mean(axis=1)), x)
    check(lambda t: t.sum(axis=(0, 1)), x)
    check(lambda t: weighted_sum(-t.reshape(5, 3).transpose(1, 0)), x)
    check(lambda t: weighted_sum(1.0 - t), x)
    check(lambda t: weighted_sum(2.0 / t), x)


def test_indexing_concat_stack_pad():
    x = RNG.standard_normal((4, 3))
    check(lambda t: weighted_sum(t[1:3]), x)
    check(lambda t: weighted_sum(t[[0, 0, 2]]), x)
    check(lambda t: weighted_sum(concat([t, t * 2.0], axis=1)), x)
    check(lambda t: weighted_sum(stack([t, t], axis=0)), x)
    check(lambda t: weighted_sum(pad(t, [(1, 2), (0, 1)])), x)


def test_matmul_variants():
    a = RNG.standard_normal((2, 3, 4))
    w = Tensor(RNG.standard_normal((4, 5)), requires_grad=True)
    check(lambda t: weighted_sum(matmul(t, w)), a)
    check(lambda t: weighted_sum(matmul(Tensor(a), t)), w.data.copy())
    m = RNG.standard_normal((3, 3))
    check(lambda t: weighted_sum(matmul(t, Tensor(a))), m)
    rhs = Tensor(RNG.standard_normal((2, 4, 2)))
    check(lambda t: weighted_sum(t @ rhs), a)
    with pytest.raises(ValueError):
        matmul(Tensor(np.ones(3)), Tensor(np.ones((3, 3))))
    with pytest.raises(ValueError):
        matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_contract_matches_einsum_and_grads():
    a = RNG.standard_normal((2, 3, 4))
    b = RNG.standard_normal((4, 5))
    out = contract(Tensor(a), Tensor(b), "ijk,kl->ijl")
    assert np.allclose(out.data, np.einsum("ijk,kl->ijl", a, b))
    check(lambda t: weighted_sum(contract(t, Tensor(b), "ijk,kl->il")), a)
    check(lambda t: weighted_sum(contract(Tensor(a), t, "ijk,kl->ijkl")), b)
    with pytest.raises(ValueError, match="repeated"):
        contract(Tensor(np.ones((2, 2))), Tensor(np.ones(2)), "ii,i->i")
    with pytest.raises(ValueError, match="extent"):
        contract(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))), "ij,jk->ik")


@settings(max_examples=25, deadline=None)
@given(m=st.integers(1, 4), k=st.integers(1, 4), n=st.integers(1, 4), seed=st.integers(0, 10_000))
def test_matmul_gradient_property(m, k, n, seed):
    rng = np.random.default_rng(seed)
    b = Tensor(rng.standard_normal((k, n)))
    rep = finite_diff_check(lambda t: weighted_sum(t @ b, seed), rng.standard_normal((m, k)))
    assert rep.passed, str(rep)


# -- graph mechanics ----------------------------------------------------------------------

def test_shared_subexpression_accumulates():
    x = Tensor(np.array([2.0, 3.0]), requires_grad=True)
    y = x * x + x
    backward(y.sum())
    assert np.array_equal(x.grad, 2 * x.data + 1)
    backward((x * 3.0).sum())
    assert np.array_equal(x.grad, 2 * x.data + 1 + 3)


def test_backward_errors():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ValueError, match="scalar"):
        backward(x * 2.0)
    with pytest.raises(RuntimeError):
        backward(Tensor(np.ones(1)))
    with pytest.raises(ValueError):
        backward(x * 2.0, np.ones(2))


def test_no_grad_builds_no_graph():
    x = Tensor(np.ones(3), requires_grad=True)
    with no_grad():
        y = x * 2.0
    assert not y.requires_grad and y.is_leaf


def test_debug_mode_traps_nan():
    set_debug(True)
    try:
        with pytest.raises(FloatingPointError), np.errstate(invalid="ignore"):
            log(Tensor(np.array([-1.0])))
    finally:
        set_debug(False)


def test_default_dtype_context():
    assert get_default_dtype() == np.float64
    with default_dtype(np.float32):
        assert as_tensor(1.5).dtype == np.float32
    assert as_tensor(1.5).dtype == np.float64
    assert (Tensor(np.ones(2, np.float32)) * 2.0).dtype == np.float32


# -- network primitives ---------------------------------------------------------------

def test_relu_and_softmax():
    x = RNG.standard_normal((4, 5))
    check(lambda t: weighted_sum(relu(t)), x, exclude=lambda v: np.abs(v) < 1e-3)
    check(lambda t: weighted_sum(softmax(t)), x)
    p = softmax(Tensor(x)).data
    assert np.allclose(p.sum(axis=1), 1)


def test_cross_entropy_value_and_grad():
    z = RNG.standard_normal((6, 4))
    labels = np.array([0, 1, 2, 3, 0, 1])
    loss = softmax_cross_entropy(Tensor(z), labels).item()
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    assert np.isclose(loss, -logp[np.arange(6), labels].mean())
    check(lambda t: softmax_cross_entropy(t, labels), z)
    with pytest.raises(ValueError):
        softmax_cross_entropy(Tensor(z), np.array([0, 1, 2, 3, 0, 4]))


@pytest.mark.parametrize("training", [True, False])
def test_batch_norm_grad(training):
    x = RNG.standard_normal((2, 3, 4, 5))
    state = BatchNormState.create(5, gamma=Tensor(RNG.uniform(0.5, 1.5, 5), requires_grad=True),
                                  beta=Tensor(RNG.standard_normal(5), requires_grad=True))
    state.running_mean = RNG.standard_normal(5)
    state.running_var = RNG.uniform(0.5, 2, 5)
    check(lambda t: weighted_sum(batch_norm(t, state, training)), x)
    check(lambda g: weighted_sum(batch_norm(Tensor(x), replace_gamma(state, g), training)), state.gamma)


def replace_gamma(state, g):
    state.gamma = g
    return state


def test_batch_norm_statistics():
    x = RNG.standard_normal((50, 3)) * 4 + 2
    state = BatchNormState.create(3)
    out = batch_norm(Tensor(x), state, training=True).data
    assert np.allclose(out.mean(axis=0), 0, atol=1e-12)
    assert np.allclose(out.var(axis=0), 1, atol=1e-3)
    assert np.allclose(state.running_mean, 0.1 * x.mean(axis=0))
    assert np.allclose(state.running_var, 0.9 + 0.1 * x.var(axis=0, ddof=1))


def naive_temporal_conv(x, w, stride, dil):
    t, n, c = x.shape
    k = w.shape[0]
    t_out = -(-t // stride)
    out = np.zeros((t_out, n, w.shape[2]))
    for to in range(t_out):
        for j in range(k):
            f = to * stride + dil * (j - (k - 1) // 2)
            if 0 <= f < t:
                out[to] += x[f] @ w[j]
    return out


@pytest.mark.parametrize("stride, dil", [(1, 1), (2, 1), (1, 3), (2, 2), (3, 1)])
def test_temporal_conv_oracle_and_grad(stride, dil):
    x = RNG.standard_normal((7, 2, 3))
    w = Tensor(RNG.standard_normal((3, 3, 4)), requires_grad=True)
    out = temporal_conv(Tensor(x), w, stride, dil).data
    assert np.allclose(out, naive_temporal_conv(x, w.data, stride, dil))
    check(lambda t: weighted_sum(temporal_conv(t, w, stride, dil)), x)
    check(lambda t: weighted_sum(temporal_conv(Tensor(x), t, stride, dil)), w.data.copy())


@pytest.mark.parametrize("cin, cout", [(2, 5), (5, 2)])
def test_multiscale_graph_conv_oracle_and_grad(cin, cout):
    x = RNG.standard_normal((2, 3, 4, cin))
    ops = [RNG.standard_normal((4, 4)) for _ in range(3)]
    ws = [RNG.standard_normal((cin, cout)) for _ in range(3)]
    out = multiscale_graph_conv(Tensor(x), [Tensor(a) for a in ops], [Tensor(w) for w in ws]).data
    oracle = np.zeros((2, 3, 4, cout))
    for b in range(2):
        for t in range(3):
            for a, w in zip(ops, ws):
                oracle[b, t] += a @ x[b, t] @ w
    assert np.allclose(out, oracle, rtol=1e-12, atol=1e-12)

    def with_op(i):
        return lambda z: weighted_sum(multiscale_graph_conv(
            Tensor(x), [z if j == i else Tensor(a) for j, a in enumerate(ops)], [Tensor(w) for w in ws]))

    check(lambda z: weighted_sum(multiscale_graph_conv(z, [Tensor(a) for a in ops], [Tensor(w) for w in ws])), x)
    check(with_op(1), ops[1].copy())
    check(lambda z: weighted_sum(multiscale_graph_conv(Tensor(x), [Tensor(a) for a in ops],
                                                        [Tensor(ws[0]), z, Tensor(ws[2])])), ws[1].copy())
    with pytest.raises(ValueError):
        multiscale_graph_conv(Tensor(x), [Tensor(ops[0])], [])


def test_window_gather_and_frame_stride_grad():
    x = RNG.standard_normal((2, 6, 3, 2))
    check(lambda t: weighted_sum(window_gather(t, 3, 2, 2)), x)
    check(lambda t: weighted_sum(frame_stride(t, 2)), x)
    assert window_gather(Tensor(x), 5, 1, 2).shape == (2, 3, 15, 2)
    with pytest.raises(ValueError):
        window_gather(Tensor(x), 4)


def test_gradcheck_detects_wrong_gradient():
    from msg3d.autodiff.tensor import make_result

    def bad_square(t):
        return make_result(t.data ** 2, (t,), lambda g: (g * t.data,), "bad_square")

    rep = finite_diff_check(lambda t: bad_square(t).sum(), RNG.standard_normal(4) + 3)
    assert not rep.passed
    assert "FAIL" in str(rep)


def test_gradcheck_rejects_nondeterminism_and_float32():
    counter = iter(range(100))
    with pytest.raises(ValueError, match="deterministic"):
        finite_diff_check(lambda t: (t * float(next(counter))).sum(), np.ones(2))
    with pytest.raises(ValueError, match="float64"):
        finite_diff_check(lambda t: t.sum(), Tensor(np.ones(2, np.float32), requires_grad=True))


def test_gradcheck_on_parameter_restores_state():
    p = Parameter(RNG.standard_normal(3), name="w")
    before = p.data.copy()
    p.grad = np.full(3, 7.0)
    check(lambda _: (p * p).sum(), p)
    assert np.array_equal(p.data, before)
    assert np.array_equal(p.grad, np.full(3, 7.0))


# -- optimizer ------------------------------------------------------------------------------

def test_sgd_momentum_two_steps_by_hand():
    p = Parameter(np.array([1.0, -2.0]), name="p")
    q = Parameter(np.array([0.5]), name="q", weight_decay_exempt=True)
    opt = OptimizerState(learning_rate=0.1, momentum=0.9, weight_decay=0.01)
    g1, g2 = np.array([0.2, 0.4]), np.array([-0.1, 0.3])
    p.grad, q.grad = g1, np.array([1.0])
    sgd_step(opt, [p, q])
    v1 = g1 + 0.01 * np.array([1.0, -2.0])
    p1 = np.array([1.0, -2.0]) - 0.1 * v1
    assert np.allclose(p.data, p1)
    assert np.allclose(q.data, [0.4])
    p.grad, q.grad = g2, np.array([1.0])
    sgd_step(opt, [p, q])
    v2 = 0.9 * v1 + g2 + 0.01 * p1
    assert np.allclose(p.data, p1 - 0.1 * v2)
    assert np.allclose(q.data, [0.4 - 0.1 * 1.9])


def test_sgd_requires_grad():
    p = Parameter(np.ones(2), name="p")
    with pytest.raises(ValueError, match="no gradient"):
        sgd_step(OptimizerState(), [p])


def test_lr_schedule_steps():
    opt = OptimizerState(learning_rate=0.05, milestones=(40, 30))
    rates = [lr_schedule(opt, e) for e in (0, 29, 30, 39, 40, 49)]
    assert np.allclose(rates, [0.05, 0.05, 0.005, 0.005, 0.0005, 0.0005])
    assert scaled_learning_rate(0.05, 64) == pytest.approx(0.1)
    assert scaled_learning_rate(0.05, 32) == 0.05


# -- checkpoint -----------------------------------------------------------------------------

def test_checkpoint_roundtrip(tmp_path):
    arrays = {"a": RNG.standard_normal((2, 3)), "scalar": np.array(3.5), "ünï": np.arange(4.0),
              "f32": RNG.standard_normal(3).astype(np.float32)}
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, arrays)
    back = load_checkpoint(path)
    assert list(back) == list(arrays)
    for k in arrays:
        assert back[k].dtype == np.float64
        assert np.array_equal(back[k], arrays[k].astype(np.float64))
    raw = path.read_bytes()
    assert raw[:8] == b"MSG3DCK1"


def test_checkpoint_errors(tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, {"w": np.ones(4)})
    raw = path.read_bytes()
    (tmp_path / "bad").write_bytes(b"NOTACKPT" + raw[8:])
    (tmp_path / "short").write_bytes(raw[:-3])
    (tmp_path / "long").write_bytes(raw + b"\0")
    for name, msg in (("bad", "magic"), ("short", "truncated"), ("long", "trailing")):
        with pytest.raises(CheckpointError, match=msg):
            load_checkpoint(tmp_path / name)
