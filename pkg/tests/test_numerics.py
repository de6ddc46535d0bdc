"""Tensor library: primitives, losses, autodiff, optimizer, grad checker."""

import math

import numpy as np
import pytest

from univid import numerics as nx
from univid.numerics import tensor as tz


def t64(a):
    return nx.Tensor(np.asarray(a, dtype=np.float64))


# -- forward primitives -------------------------------------------------------


def test_matmul_identity_is_identity():
    rng = np.random.default_rng(1)
    a = rng.standard_normal((2, 2)).astype(np.float32)
    eye = nx.Tensor(np.eye(2, dtype=np.float32))
    out = nx.matmul(eye, nx.Tensor(a))
    assert np.array_equal(out.numpy(), a)


def test_softmax_uniform():
    out = nx.softmax(nx.Tensor(np.zeros(4, dtype=np.float32)))
    assert np.allclose(out.numpy(), 0.25)


def test_layer_norm_constant_vector_matches_scalar_oracle():
    # scalar re-implementation: (x - mean) / sqrt(var + eps), var = 0
    x = np.full(8, 3.7, dtype=np.float64)
    eps = 1e-5
    mean = sum(x) / len(x)
    var = sum((v - mean) ** 2 for v in x) / len(x)
    expected = [(v - mean) / math.sqrt(var + eps) for v in x]
    out = nx.layer_norm(t64(x), eps=eps)
    assert np.allclose(out.numpy(), expected, atol=1e-12)
    assert np.allclose(out.numpy(), 0.0)


def test_shape_errors_name_the_primitive():
    with pytest.raises(nx.ShapeError, match="matmul"):
        nx.matmul(nx.Tensor(np.zeros((2, 3))), nx.Tensor(np.zeros((2, 3))))
    with pytest.raises(nx.ShapeError, match="mse"):
        nx.mse(nx.Tensor(np.zeros(3)), nx.Tensor(np.zeros(4)))
    with pytest.raises(nx.ShapeError, match="embedding"):
        nx.embedding(nx.Tensor(np.zeros((5, 2))), np.array([5]))


def test_finite_check_flag():
    bad = nx.Tensor(np.array([1.0, 0.0], dtype=np.float32))
    with np.errstate(divide="ignore"):
        with pytest.raises(nx.NonFiniteError):
            nx.log(bad)
        with nx.finite_checks(False):
            out = nx.log(bad)
            assert np.isinf(out.numpy()[1])


# -- losses -------------------------------------------------------------------


def test_cross_entropy_uniform_logits():
    logits = nx.Tensor(np.zeros((5, 132), dtype=np.float32))
    loss = nx.cross_entropy(logits, np.zeros(5, dtype=np.int64))
    assert abs(loss.item() - math.log(132)) < 1e-5


def test_cross_entropy_rejects_out_of_vocab_target():
    logits = nx.Tensor(np.zeros((2, 10), dtype=np.float32))
    with pytest.raises(nx.ShapeError, match="cross_entropy"):
        nx.cross_entropy(logits, np.array([3, 10]))


def test_mse_identity_and_offset():
    rng = np.random.default_rng(2)
    x = rng.standard_normal((3, 4)).astype(np.float32)
    assert nx.mse(nx.Tensor(x), nx.Tensor(x)).item() == 0.0
    assert abs(nx.mse(nx.Tensor(x), nx.Tensor(x + 1.0)).item() - 1.0) < 1e-6


# -- backward -----------------------------------------------------------------


def test_backward_sum_gives_ones():
    w = nx.Parameter(np.zeros((3, 2), dtype=np.float32))
    loss = nx.sum_(w.tensor)
    loss.backward()
    assert np.array_equal(w.grad, np.ones((3, 2), dtype=np.float32))


def test_backward_mse_at_zero_gives_zero_grad():
    w = nx.Parameter(np.zeros((2, 2), dtype=np.float32))
    x = nx.Tensor(np.ones((2, 2), dtype=np.float32))
    y = nx.Tensor(np.zeros((2, 2), dtype=np.float32))
    loss = nx.mse(nx.matmul(w.tensor, x), y)
    loss.backward()
    assert np.array_equal(w.grad, np.zeros((2, 2), dtype=np.float32))


def test_backward_twice_raises():
    w = nx.Parameter(np.ones(3, dtype=np.float32))
    loss = nx.sum_(w.tensor)
    loss.backward()
    with pytest.raises(nx.BackwardError):
        loss.backward()


def test_backward_requires_scalar():
    w = nx.Parameter(np.ones(3, dtype=np.float32))
    with pytest.raises(nx.BackwardError):
        nx.mul(w.tensor, 2.0).backward()


def test_three_layer_mlp_matches_finite_differences():
    rng = np.random.default_rng(7)
    layers = [nx.Linear(6, 8, rng, dtype=np.float64), nx.Linear(8, 8, rng, dtype=np.float64),
              nx.Linear(8, 4, rng, dtype=np.float64)]
    x = t64(rng.standard_normal((5, 6)))
    y = t64(rng.standard_normal((5, 4)))
    params = []
    for i, m in enumerate(layers):
        params.extend(m.named_parameters(prefix=f"l{i}."))

    def loss_fn():
        h = x
        for m in layers[:-1]:
            h = nx.gelu(m(h))
        return nx.mse(layers[-1](h), y)

    report = nx.grad_check(loss_fn, params, h=1e-5)
    assert report.max_rel_error <= 1e-6, report.summary()


# -- per-primitive finite-difference property -----------------------------------

PRIMITIVE_CASES = {
    "add": lambda p, rng: nx.add(p, t64(rng.standard_normal(p.shape))),
    "sub": lambda p, rng: nx.sub(p, t64(rng.standard_normal(p.shape))),
    "mul": lambda p, rng: nx.mul(p, t64(rng.standard_normal(p.shape))),
    "div": lambda p, rng: nx.div(p, t64(rng.standard_normal(p.shape) + 3.0)),
    "neg": lambda p, rng: nx.neg(p),
    "power": lambda p, rng: nx.power(nx.add(nx.mul(p, p), 0.5), 1.7),
    "exp": lambda p, rng: nx.exp(p),
    "log": lambda p, rng: nx.log(nx.add(nx.mul(p, p), 0.5)),
    "sqrt": lambda p, rng: nx.sqrt(nx.add(nx.mul(p, p), 0.5)),
    "tanh": lambda p, rng: nx.tanh(p),
    "gelu": lambda p, rng: nx.gelu(p),
    "matmul": lambda p, rng: nx.matmul(p, t64(rng.standard_normal((p.shape[-1], 3)))),
    "reshape": lambda p, rng: nx.reshape(p, (p.size,)),
    "transpose": lambda p, rng: nx.transpose(p, (1, 0)),
    "concat": lambda p, rng: nx.concat([p, t64(rng.standard_normal(p.shape))], axis=0),
    "pad": lambda p, rng: nx.pad_axis(p, 0, 1, 2),
    "slice": lambda p, rng: p[1:3, :2],
    "take": lambda p, rng: nx.take(p, np.array([0, 2, 2, 1])),
    "add_rows": lambda p, rng: nx.add_rows(p, np.array([1, 3]), t64(rng.standard_normal((2, p.shape[1])))),
    "sum": lambda p, rng: nx.sum_(p, axis=0),
    "mean": lambda p, rng: nx.mean(p, axis=1),
    "softmax": lambda p, rng: nx.softmax(p, axis=-1),
    "log_softmax": lambda p, rng: nx.log_softmax(p, axis=-1),
    "layer_norm": lambda p, rng: nx.layer_norm(p),
    "l2_normalize": lambda p, rng: nx.l2_normalize(p),
    "attention": lambda p, rng: nx.attention(p, t64(rng.standard_normal(p.shape)),
                                             t64(rng.standard_normal(p.shape)), causal=True),
    "cross_entropy": lambda p, rng: nx.cross_entropy(p, rng.integers(0, p.shape[1], size=p.shape[0])),
    "mse": lambda p, rng: nx.mse(p, t64(rng.standard_normal(p.shape))),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVE_CASES))
def test_primitive_gradients_match_finite_differences(name):
    build = PRIMITIVE_CASES[name]
    worst = 0.0
    for seed in range(20):
        rng = np.random.default_rng(1000 + seed)
        p = nx.Parameter(rng.standard_normal((4, 5)))
        out_rng = np.random.default_rng(2000 + seed)
        w = t64(out_rng.standard_normal(build(p.tensor, np.random.default_rng(3000 + seed)).shape))

        def loss_fn():
            return nx.sum_(nx.mul(build(p.tensor, np.random.default_rng(3000 + seed)), w))

        report = nx.grad_check(loss_fn, [p], h=1e-5)
        worst = max(worst, report.max_rel_error)
    assert worst <= 1e-6, f"{name}: worst rel err {worst:.3e}"


def test_determinism_same_seed_same_bits():
    def run():
        rng = np.random.default_rng(42)
        lin = nx.Linear(8, 8, rng)
        x = nx.Tensor(rng.standard_normal((4, 8)).astype(np.float32))
        loss = nx.mse(nx.gelu(lin(x)), nx.Tensor(np.zeros((4, 8), dtype=np.float32)))
        loss.backward()
        return loss.item(), lin.weight.grad.copy(), lin.weight.data.copy()

    l1, g1, w1 = run()
    l2, g2, w2 = run()
    assert l1 == l2
    assert np.array_equal(g1, g2)
    assert np.array_equal(w1, w2)


# -- optimizer ------------------------------------------------------------------


def _named(params):
    for i, p in enumerate(params):
        p.name = f"p{i}"
    return params


def test_adamw_zero_grad_zero_decay_leaves_param():
    p = _named([nx.Parameter(np.array([1.0, -2.0], dtype=np.float32))])[0]
    opt = nx.AdamW([p], lr=0.1, weight_decay=0.0)
    before = p.data.copy()
    opt.step()
    assert np.array_equal(p.data, before)


def test_adamw_single_step_matches_scalar_oracle():
    lr, b1, b2, eps, wd = 0.05, 0.9, 0.999, 1e-8, 0.01
    w0, g = 0.7, 0.3
    p = _named([nx.Parameter(np.array([w0], dtype=np.float32))])[0]
    p.tensor.grad = np.array([g], dtype=np.float32)
    opt = nx.AdamW([p], lr=lr, betas=(b1, b2), eps=eps, weight_decay=wd)
    opt.step()
    # scalar AdamW re-implementation
    m = (1 - b1) * g
    v = (1 - b2) * g * g
    m_hat = m / (1 - b1)
    v_hat = v / (1 - b2)
    expected = w0 - lr * (m_hat / (math.sqrt(v_hat) + eps) + wd * w0)
    assert abs(p.data[0] - expected) < 1e-6
    # update direction opposes the gradient
    assert (p.data[0] - w0) * g < 0


def test_adamw_frozen_param_bitwise_unchanged():
    p = _named([nx.Parameter(np.array([1.5, 2.5], dtype=np.float32))])[0]
    p.set_trainable(False)
    opt = nx.AdamW([p], lr=0.5)
    before = p.data.tobytes()
    p.tensor.grad = np.array([10.0, -10.0], dtype=np.float32)
    for _ in range(5):
        opt.step()
    assert p.data.tobytes() == before


def test_adamw_missing_state_errors():
    p = _named([nx.Parameter(np.zeros(2, dtype=np.float32))])[0]
    p.set_trainable(False)
    opt = nx.AdamW([p], lr=0.1)
    p.set_trainable(True)  # trainable again without rebuilding states
    with pytest.raises(nx.MissingStateError):
        opt.step()


def test_adamw_deterministic():
    def run():
        rng = np.random.default_rng(5)
        p = _named([nx.Parameter(rng.standard_normal(8).astype(np.float32))])[0]
        opt = nx.AdamW([p], lr=0.01)
        for step in range(10):
            p.tensor.grad = np.full(8, 0.1 * (step + 1), dtype=np.float32)
            opt.step()
        return p.data.copy()

    assert np.array_equal(run(), run())


# -- grad_check itself -----------------------------------------------------------


def test_grad_check_attention_block():
    rng = np.random.default_rng(11)
    block = nx.TransformerBlock(16, 2, rng, dtype=np.float64)
    x = t64(rng.standard_normal((6, 16)))
    y = t64(rng.standard_normal((6, 16)))
    params = list(block.named_parameters(prefix="blk."))

    def loss_fn():
        return nx.mse(block(x, causal=True), y)

    report = nx.grad_check(loss_fn, params, h=1e-5)
    assert report.passed, report.summary()


def test_grad_check_constant_function_zero_both_sides():
    p = nx.Parameter(np.ones(4, dtype=np.float64))

    def loss_fn():
        return nx.mse(nx.mul(p.tensor, 0.0), nx.Tensor(np.zeros(4, dtype=np.float64)))

    p.name = "konst"
    report = nx.grad_check(loss_fn, [p])
    assert report.max_rel_error == 0.0
    assert report.params[0].max_abs_diff == 0.0


def test_cross_entropy_gradient_is_probs_minus_onehot_over_n():
    n, vocab = 6, 9
    logits = nx.Parameter(np.zeros((n, vocab), dtype=np.float64))
    targets = np.arange(n) % vocab
    loss = nx.cross_entropy(logits.tensor, targets)
    loss.backward()
    probs = np.full((n, vocab), 1.0 / vocab)
    onehot = np.zeros((n, vocab))
    onehot[np.arange(n), targets] = 1.0
    assert np.allclose(logits.grad, (probs - onehot) / n, atol=1e-12)


def test_unreachable_parameter_grad_is_zero_filled():
    used = nx.Parameter(np.ones(2, dtype=np.float32))
    unused = nx.Parameter(np.ones(2, dtype=np.float32))
    loss = nx.sum_(used.tensor)
    loss.backward()
    assert np.array_equal(unused.grad, np.zeros(2, dtype=np.float32))


def test_module_names_are_unique_and_hierarchical():
    rng = np.random.default_rng(3)
    block = nx.TransformerBlock(8, 2, rng)
    names = [p.name for p in block.named_parameters(prefix="b.")]
    assert len(names) == len(set(names))
    assert all(n.startswith("b.") for n in names)
    assert any("attn.wq.weight" in n for n in names)


def test_no_grad_disables_recording():
    p = nx.Parameter(np.ones(3, dtype=np.float32))
    with nx.no_grad():
        out = nx.mul(p.tensor, 2.0)
    assert not out.requires_grad
    assert out._parents == ()


def test_causal_bias_blocks_future():
    b = nx.causal_bias(4, np.float32)
    assert b[0, 1] < -1e29 and b[1, 0] == 0.0 and b[2, 2] == 0.0
