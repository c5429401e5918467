"""Tape engine tests: forward values, backward rules, determinism."""

import math

import numpy as np
import pytest

from cardiofield import autodiff as ad
from cardiofield import nn

from oracles import central_difference, check_grad_fd, scalar_mlp_forward


def test_backward_quadratic():
    w = ad.Tensor([1.0, -2.0], requires_grad=True)
    loss = (w * w).sum()
    loss.backward()
    assert np.allclose(w.grad, [2.0, -4.0])


def test_backward_independent_leaf_gets_no_grad():
    w = ad.Tensor([1.0, 2.0], requires_grad=True)
    u = ad.Tensor([3.0], requires_grad=True)
    loss = (w * w).sum()
    loss.backward()
    assert u.grad is None  # never touched by the tape
    # an explicit zeros contract for untouched leaves
    assert np.allclose(np.zeros(1), u.grad if u.grad is not None else np.zeros(1))


def test_backward_accumulates_without_reset():
    w = ad.Tensor([1.0, -2.0], requires_grad=True)
    for _ in range(2):
        loss = (w * w).sum()
        loss.backward()
    assert np.allclose(w.grad, [4.0, -8.0])


def test_backward_rejects_nonscalar():
    w = ad.Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ad.AutodiffError):
        (w * w).backward()


def test_mlp_zero_weights_returns_bias():
    params = nn.mlp_init([3, 4, 2], activation="relu", rng=np.random.default_rng(1))
    for w, _ in params.layers:
        w.data[:] = 0.0
    params.layers[-1][1].data[:] = [0.7, -0.3]
    out = nn.mlp_forward(params, ad.Tensor([[0.5, -1.0, 2.0]]))
    assert np.allclose(out.data, [[0.7, -0.3]])


def test_mlp_identity_relu():
    params = nn.MlpParams(
        layers=[(ad.Tensor(np.eye(2), requires_grad=True), ad.Tensor(np.zeros(2), requires_grad=True)),
                (ad.Tensor(np.eye(2), requires_grad=True), ad.Tensor(np.zeros(2), requires_grad=True))],
        activation="relu",
    )
    out = nn.mlp_forward(params, ad.Tensor([[-1.0, 2.0]]))
    assert np.allclose(out.data, [[0.0, 2.0]])


def test_mlp_dim_mismatch_names_layer():
    params = nn.mlp_init([3, 4, 2], rng=np.random.default_rng(0))
    with pytest.raises(ad.ShapeError, match="layer 0"):
        nn.mlp_forward(params, ad.Tensor(np.zeros((1, 5))))


def test_mlp_forward_matches_scalar_reference():
    rng = np.random.default_rng(7)
    params = nn.mlp_init([4, 8, 3], activation="tanh", rng=rng)
    x = rng.normal(size=(5, 4))
    out = nn.mlp_forward(params, ad.Tensor(x)).data
    layers = [(w.data.tolist(), b.data.tolist()) for w, b in params.layers]
    for r in range(5):
        ref = scalar_mlp_forward(layers, "tanh", x[r])
        assert np.allclose(out[r], ref, atol=1e-12)


def test_mlp_composite_loss_matches_finite_differences():
    rng = np.random.default_rng(3)
    params = nn.mlp_init([3, 6, 6, 1], activation="tanh", rng=rng)
    x = rng.uniform(-2, 2, size=(16, 3))
    coeff = rng.normal(size=(16, 1))

    def forward():
        out = nn.mlp_forward(params, ad.Tensor(x))
        return (ad.Tensor(coeff) * ad.tanh(out)).sum()

    loss = forward()
    loss.backward()
    flat_params = [p.data for p in params.parameters()]
    grads = [p.grad for p in params.parameters()]

    def re_eval(_):
        with ad.no_grad():
            return forward().item()

    check_grad_fd(re_eval, flat_params, grads, n_probes=120, rng=np.random.default_rng(5))


@pytest.mark.parametrize(
    "op,dom",
    [
        (ad.exp, (-1.5, 1.5)),
        (ad.log, (0.2, 3.0)),
        (ad.sqrt, (0.2, 3.0)),
        (ad.tanh, (-2.0, 2.0)),
        (ad.sigmoid, (-4.0, 4.0)),
        (ad.softplus, (-4.0, 4.0)),
        (ad.sin, (-2.0, 2.0)),
        (ad.cos, (-2.0, 2.0)),
        (ad.absolute, (0.3, 2.0)),
    ],
)
def test_unary_op_gradients(op, dom):
    rng = np.random.default_rng(11)
    x = rng.uniform(*dom, size=(7,))
    t = ad.Tensor(x.copy(), requires_grad=True)
    (op(t) * ad.Tensor(np.arange(1.0, 8.0))).sum().backward()

    def f(arr):
        with ad.no_grad():
            return (op(ad.Tensor(arr)) * ad.Tensor(np.arange(1.0, 8.0))).sum().item()

    fd = central_difference(f, x.copy())
    assert np.allclose(t.grad, fd, rtol=1e-5, atol=1e-7)


def test_broadcast_add_mul_div_grads():
    rng = np.random.default_rng(2)
    a = rng.uniform(0.5, 2.0, size=(4, 3))
    b = rng.uniform(0.5, 2.0, size=(3,))
    ta, tb = ad.Tensor(a.copy(), requires_grad=True), ad.Tensor(b.copy(), requires_grad=True)
    ((ta * tb + tb) / ta).sum().backward()

    def f_b(arr):
        with ad.no_grad():
            return ((ad.Tensor(a) * ad.Tensor(arr) + ad.Tensor(arr)) / ad.Tensor(a)).sum().item()

    fd_b = central_difference(f_b, b.copy())
    assert np.allclose(tb.grad, fd_b, rtol=1e-6, atol=1e-9)


def test_softmax_rows_and_grad():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(3, 5))
    t = ad.Tensor(x.copy(), requires_grad=True)
    out = ad.softmax(t, axis=-1)
    assert np.allclose(out.data.sum(axis=-1), 1.0)
    coeff = rng.normal(size=(3, 5))
    (out * ad.Tensor(coeff)).sum().backward()

    def f(arr):
        with ad.no_grad():
            return (ad.softmax(ad.Tensor(arr), axis=-1) * ad.Tensor(coeff)).sum().item()

    fd = central_difference(f, x.copy())
    assert np.allclose(t.grad, fd, rtol=1e-5, atol=1e-8)


def test_concat_stack_getitem_gather_grads():
    rng = np.random.default_rng(8)
    a = rng.normal(size=(3, 2))
    b = rng.normal(size=(2, 2))
    ta = ad.Tensor(a.copy(), requires_grad=True)
    tb = ad.Tensor(b.copy(), requires_grad=True)
    cat = ad.concat([ta, tb], axis=0)
    picked = ad.gather_rows(cat, [0, 4, 4])
    loss = (picked * picked).sum()
    loss.backward()
    expect_a = np.zeros_like(a)
    expect_a[0] = 2 * a[0]
    expect_b = np.zeros_like(b)
    expect_b[1] = 2 * 2 * b[1]  # row picked twice -> contributions add
    assert np.allclose(ta.grad, expect_a)
    assert np.allclose(tb.grad, expect_b)


def test_shift2d_roundtrip_grad():
    x = ad.Tensor(np.arange(16.0).reshape(1, 4, 4), requires_grad=True)
    out = ad.shift2d(x, 1, 0)
    assert np.allclose(out.data[0, 0], 0.0)
    assert np.allclose(out.data[0, 1:], x.data[0, :3])
    (out * out).sum().backward()
    # gradient lands back on the source rows only
    assert np.allclose(x.grad[0, 3], 0.0)
    assert np.allclose(x.grad[0, :3], 2 * x.data[0, :3])


def test_conv2d_matches_finite_differences():
    rng = np.random.default_rng(9)
    x = rng.normal(size=(2, 3, 7, 7))
    w = rng.normal(size=(4, 3, 3, 3)) * 0.3
    b = rng.normal(size=(4,)) * 0.1
    tx = ad.Tensor(x.copy(), requires_grad=True)
    tw = ad.Tensor(w.copy(), requires_grad=True)
    tb = ad.Tensor(b.copy(), requires_grad=True)
    coeff = rng.normal(size=(2, 4, 4, 4))
    out = ad.conv2d(tx, tw, tb, stride=2, pad=1)
    assert out.shape == (2, 4, 4, 4)
    (out * ad.Tensor(coeff)).sum().backward()

    def makef(which):
        def f(arr):
            args = {"x": x, "w": w, "b": b}
            args[which] = arr
            with ad.no_grad():
                o = ad.conv2d(ad.Tensor(args["x"]), ad.Tensor(args["w"]), ad.Tensor(args["b"]), stride=2, pad=1)
                return (o * ad.Tensor(coeff)).sum().item()

        return f

    for which, t in [("w", tw), ("b", tb), ("x", tx)]:
        fd = central_difference(makef(which), {"x": x, "w": w, "b": b}[which].copy())
        assert np.allclose(t.grad, fd, rtol=1e-5, atol=1e-7), which


def test_positional_encode_trivial_values():
    out = ad.positional_encode(ad.Tensor([0.0]), 2, include_input=False)
    assert np.allclose(out.data, [0.0, 1.0, 0.0, 1.0])
    out = ad.positional_encode(ad.Tensor([1.0]), 1, include_input=False)
    assert np.allclose(out.data, [math.sin(math.pi), -1.0], atol=1e-12)


def test_positional_encode_matches_high_precision():
    # frozen from mpmath with 50-digit precision: sin/cos(2^j * pi * 0.3), j=0..3
    expected = [
        0.8090169943749475,    # sin(pi*0.3)
        0.5877852522924731,    # cos(pi*0.3)
        0.9510565162951535,    # sin(2*pi*0.3)
        -0.30901699437494745,  # cos(2*pi*0.3)
        -0.5877852522924731,   # sin(4*pi*0.3)
        -0.8090169943749475,   # cos(4*pi*0.3)
        0.9510565162951535,    # sin(8*pi*0.3)
        0.30901699437494745,   # cos(8*pi*0.3)
    ]
    out = ad.positional_encode(ad.Tensor([0.3]), 4, include_input=False)
    assert np.allclose(out.data, expected, atol=1e-12)


def test_positional_encode_pair_norm():
    rng = np.random.default_rng(6)
    x = rng.uniform(-1, 1, size=(50, 3))
    out = ad.positional_encode(ad.Tensor(x), 6, include_input=False).data.reshape(50, 3, 6, 2)
    norms = (out**2).sum(axis=-1)
    assert np.max(np.abs(norms - 1.0)) < 1e-12


def test_positional_encode_grad():
    rng = np.random.default_rng(10)
    x = rng.uniform(-1, 1, size=(4, 3))
    coeff = rng.normal(size=(4, ad.posenc_dim(3, 5, True)))
    t = ad.Tensor(x.copy(), requires_grad=True)
    (ad.positional_encode(t, 5, True) * ad.Tensor(coeff)).sum().backward()

    def f(arr):
        with ad.no_grad():
            return (ad.positional_encode(ad.Tensor(arr), 5, True) * ad.Tensor(coeff)).sum().item()

    fd = central_difference(f, x.copy())
    assert np.allclose(t.grad, fd, rtol=1e-5, atol=1e-8)


def test_tape_determinism_bit_identical():
    def run():
        rng = np.random.default_rng(42)
        params = nn.mlp_init([3, 8, 1], activation="relu", rng=rng)
        x = rng.uniform(-2, 2, size=(32, 3))
        loss = (nn.mlp_forward(params, ad.Tensor(x)) ** 2).sum()
        loss.backward()
        return [p.grad.copy() for p in params.parameters()]

    g1, g2 = run(), run()
    for a, b in zip(g1, g2):
        assert np.array_equal(a, b)


def test_nonfinite_guard_raises():
    x = ad.Tensor([1.0, 0.0])
    with pytest.raises(ad.NonFiniteError):
        ad.log(x)  # log(0) -> -inf


def test_no_grad_blocks_taping():
    w = ad.Tensor([2.0], requires_grad=True)
    with ad.no_grad():
        out = w * w
    assert not out.requires_grad
    assert out._parents == ()


def test_custom_unary_matches_fd():
    x = np.array([0.5, 1.5, -0.7])
    t = ad.Tensor(x.copy(), requires_grad=True)
    out = ad.custom_unary(t, lambda v: v**3, lambda v: 3 * v**2, "cube")
    (out * out).sum().backward()
    fd = central_difference(lambda a: float(((a**3) ** 2).sum()), x.copy())
    assert np.allclose(t.grad, fd, rtol=1e-6)
