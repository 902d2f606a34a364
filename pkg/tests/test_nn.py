import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from streamtag import autodiff as ad
from streamtag import nn
from streamtag.autodiff import Tensor
from streamtag.errors import ContractViolation, DegenerateInputError, InputError


def param_set(entries):
    p = nn.ParameterSet()
    for path, value in entries.items():
        p.add(path, value)
    return p


# -- linear ------------------------------------------------------------------

def test_linear_identity():
    x = Tensor(np.array([[1.0, 2.0]], dtype=np.float32))
    y = nn.linear_forward(x, Tensor(np.eye(2, dtype=np.float32)),
                          Tensor(np.zeros(2, dtype=np.float32)))
    np.testing.assert_array_equal(y.data, [[1.0, 2.0]])


def test_linear_zero_weight_bias_rows(rng):
    x = Tensor(rng.standard_normal((5, 3)).astype(np.float32))
    y = nn.linear_forward(x, Tensor(np.zeros((3, 2), dtype=np.float32)),
                          Tensor(np.array([3.0, 3.0], dtype=np.float32)))
    np.testing.assert_array_equal(y.data, np.full((5, 2), 3.0))


def test_linear_vs_dot_product_oracle(rng):
    x = rng.standard_normal((3, 4)).astype(np.float32)
    w = rng.standard_normal((4, 6)).astype(np.float32)
    b = rng.standard_normal(6).astype(np.float32)
    y = nn.linear_forward(Tensor(x), Tensor(w), Tensor(b)).data
    expect = np.empty((3, 6))
    for i in range(3):
        for j in range(6):
            expect[i, j] = sum(float(x[i, k]) * float(w[k, j]) for k in range(4)) \
                + float(b[j])
    assert np.abs(y - expect).max() <= 1e-6


def test_linear_shape_mismatch():
    with pytest.raises(ContractViolation):
        nn.linear_forward(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 2))),
                          Tensor(np.zeros(2)))


def test_linear_backward_exact(rng):
    x = Tensor(rng.standard_normal((3, 4)).astype(np.float32), requires_grad=True)
    w = Tensor(rng.standard_normal((4, 2)).astype(np.float32), requires_grad=True)
    b = Tensor(np.zeros(2, dtype=np.float32), requires_grad=True)
    g = rng.standard_normal((3, 2)).astype(np.float32)
    y = nn.linear_forward(x, w, b)
    y.backward(g)
    np.testing.assert_allclose(x.grad, g @ w.data.T, atol=1e-6)
    np.testing.assert_allclose(w.grad, x.data.T @ g, atol=1e-6)
    np.testing.assert_allclose(b.grad, g.sum(axis=0), atol=1e-6)


# -- layer norm -----------------------------------------------------------------

def test_layer_norm_constant_row():
    x = Tensor(np.full((1, 8), 3.5, dtype=np.float32))
    y = nn.layer_norm(x, Tensor(np.ones(8)), Tensor(np.zeros(8)))
    np.testing.assert_allclose(y.data, 0.0, atol=1e-6)


def test_layer_norm_already_normalized():
    x = Tensor(np.array([[1.0, -1.0]], dtype=np.float32))
    y = nn.layer_norm(x, Tensor(np.ones(2)), Tensor(np.zeros(2)))
    np.testing.assert_allclose(y.data, [[1.0, -1.0]], atol=1e-4)


def test_layer_norm_vs_mean_var_oracle(rng):
    x = rng.standard_normal((4, 7)).astype(np.float32)
    g = rng.standard_normal(7).astype(np.float32)
    b = rng.standard_normal(7).astype(np.float32)
    y = nn.layer_norm(Tensor(x), Tensor(g), Tensor(b)).data
    for i in range(4):
        row = x[i].astype(np.float64)
        mu = row.mean()
        var = ((row - mu) ** 2).mean()
        expect = (row - mu) / math.sqrt(var + 1e-5) * g + b
        assert np.abs(y[i] - expect).max() <= 1e-6


def test_layer_norm_backward(rng):
    x = rng.standard_normal((3, 6)).astype(np.float32)
    g = np.ones(6, dtype=np.float32)
    b = np.zeros(6, dtype=np.float32)
    from test_autodiff import check_grads

    check_grads(lambda t, gg, bb: (nn.layer_norm(t, gg, bb)
                                   * nn.layer_norm(t, gg, bb)).sum(), x, g, b)


# -- attention ---------------------------------------------------------------------

def attn_params(rng, d):
    p = {}
    for name in ("wq", "wk", "wv", "wo"):
        p[name] = Tensor(rng.standard_normal((d, d)).astype(np.float32) * 0.3)
    for name in ("bq", "bk", "bv", "bo"):
        p[name] = Tensor(rng.standard_normal(d).astype(np.float32) * 0.1)
    return p


def test_attention_single_token_is_value_projection(rng):
    d = 8
    p = attn_params(rng, d)
    x = rng.standard_normal((1, d)).astype(np.float32)
    y, _ = nn.multi_head_attention(Tensor(x), p, n_heads=2)
    expect = (x @ p["wv"].data + p["bv"].data) @ p["wo"].data + p["bo"].data
    np.testing.assert_allclose(y.data, expect, atol=1e-5)


def test_causal_outputs_bit_identical_under_future_perturbation(rng):
    d, t_len = 8, 7
    p = attn_params(rng, d)
    x = rng.standard_normal((t_len, d)).astype(np.float32)
    for t in range(t_len - 1):
        x2 = x.copy()
        x2[t + 1:] += rng.standard_normal((t_len - t - 1, d)).astype(np.float32)
        y1, _ = nn.multi_head_attention(Tensor(x), p, 2, causal=True)
        y2, _ = nn.multi_head_attention(Tensor(x2), p, 2, causal=True)
        assert np.array_equal(y1.data[: t + 1], y2.data[: t + 1])


def test_cached_incremental_matches_full_causal(rng):
    d, t_len = 12, 9
    p = attn_params(rng, d)
    x = rng.standard_normal((t_len, d)).astype(np.float32)
    full, _ = nn.multi_head_attention(Tensor(x), p, 3, causal=True)
    cache = nn.AttnCache(t_len, d)
    rows = []
    for t in range(t_len):
        y, cache = nn.multi_head_attention(
            Tensor(x[t:t + 1]), p, 3, causal=True, cache=cache)
        rows.append(y.data[0])
    assert np.abs(np.stack(rows) - full.data).max() <= 1e-5


def test_cache_requires_causal(rng):
    p = attn_params(rng, 8)
    with pytest.raises(ContractViolation):
        nn.multi_head_attention(Tensor(np.zeros((1, 8), dtype=np.float32)),
                                p, 2, causal=False, cache=nn.AttnCache(4, 8))


def test_attention_head_divisibility(rng):
    p = attn_params(rng, 8)
    with pytest.raises(ContractViolation):
        nn.multi_head_attention(Tensor(np.zeros((2, 8))), p, 3)


# -- GRU ------------------------------------------------------------------------

def zero_gru(d_in, d_h):
    return {
        "wi": Tensor(np.zeros((d_in, 3 * d_h), dtype=np.float32)),
        "wh": Tensor(np.zeros((d_h, 3 * d_h), dtype=np.float32)),
        "bi": Tensor(np.zeros(3 * d_h, dtype=np.float32)),
        "bh": Tensor(np.zeros(3 * d_h, dtype=np.float32)),
    }


def test_gru_zero_weights_halves_state(rng):
    v = rng.standard_normal(5).astype(np.float32)
    out = nn.gru_cell(Tensor(np.zeros(3, dtype=np.float32).reshape(1, 3)),
                      Tensor(v.reshape(1, 5)), zero_gru(3, 5))
    np.testing.assert_allclose(out.data, 0.5 * v.reshape(1, 5), atol=1e-7)


def test_gru_zero_everything_is_zero():
    out = nn.gru_cell(Tensor(np.zeros((1, 3))), Tensor(np.zeros((1, 5))),
                      zero_gru(3, 5))
    np.testing.assert_array_equal(out.data, np.zeros((1, 5)))


def test_gru_vs_scalar_loop_oracle(rng):
    d_in, d_h = 4, 3
    params = {
        "wi": Tensor(rng.standard_normal((d_in, 3 * d_h)).astype(np.float32)),
        "wh": Tensor(rng.standard_normal((d_h, 3 * d_h)).astype(np.float32)),
        "bi": Tensor(rng.standard_normal(3 * d_h).astype(np.float32)),
        "bh": Tensor(rng.standard_normal(3 * d_h).astype(np.float32)),
    }
    x = rng.standard_normal(d_in).astype(np.float32)
    h = rng.standard_normal(d_h).astype(np.float32)
    out = nn.gru_cell(Tensor(x.reshape(1, -1)), Tensor(h.reshape(1, -1)),
                      params).data[0]

    def sigmoid(v):
        return 1.0 / (1.0 + math.exp(-v))

    wi, wh = params["wi"].data, params["wh"].data
    bi, bh = params["bi"].data, params["bh"].data
    expect = np.zeros(d_h)
    for j in range(d_h):
        gi = [sum(float(x[i]) * float(wi[i, c * d_h + j]) for i in range(d_in))
              + float(bi[c * d_h + j]) for c in range(3)]
        gh = [sum(float(h[i]) * float(wh[i, c * d_h + j]) for i in range(d_h))
              + float(bh[c * d_h + j]) for c in range(3)]
        r = sigmoid(gi[0] + gh[0])
        z = sigmoid(gi[1] + gh[1])
        n = math.tanh(gi[2] + r * gh[2])
        expect[j] = (1 - z) * n + z * float(h[j])
    assert np.abs(out - expect).max() <= 1e-6


def test_np_gru_matches_graph_gru(rng):
    d = 6
    params = {k: Tensor(v.data if isinstance(v, Tensor) else v)
              for k, v in zero_gru(d, d).items()}
    for name in ("wi", "wh"):
        params[name] = Tensor(rng.standard_normal((d, 3 * d)).astype(np.float32))
    x = rng.standard_normal(d).astype(np.float32)
    h = rng.standard_normal(d).astype(np.float32)
    a = nn.gru_cell(Tensor(x.reshape(1, -1)), Tensor(h.reshape(1, -1)), params)
    b = nn.np_gru_cell(x, h, params)
    np.testing.assert_allclose(a.data[0], b, atol=1e-6)


# -- cross entropy ------------------------------------------------------------------

def test_ce_uniform_logits():
    logits = Tensor(np.zeros((3, 4), dtype=np.float32))
    loss = nn.softmax_cross_entropy(logits, np.array([0, 1, 3]))
    assert abs(loss.item() - math.log(4)) < 1e-6


def test_ce_saturated():
    logits = np.zeros((1, 4), dtype=np.float32)
    logits[0, 2] = 1000.0
    loss = nn.softmax_cross_entropy(Tensor(logits), np.array([2]))
    assert loss.item() <= 1e-6


def test_ce_vs_log_sum_exp_oracle(rng):
    logits = rng.standard_normal((5, 7)).astype(np.float32)
    targets = rng.integers(0, 7, size=5)
    loss = nn.softmax_cross_entropy(Tensor(logits), targets).item()
    expect = 0.0
    for i in range(5):
        row = logits[i].astype(np.float64)
        expect += math.log(np.exp(row).sum()) - row[targets[i]]
    assert abs(loss - expect / 5) <= 1e-6


def test_ce_gradient_is_softmax_minus_onehot(rng):
    logits = Tensor(rng.standard_normal((4, 3)).astype(np.float32),
                    requires_grad=True)
    targets = np.array([0, 2, 1, 1])
    mask = np.array([True, True, False, True])
    loss = nn.softmax_cross_entropy(logits, targets, mask)
    loss.backward()
    z = logits.data.astype(np.float64)
    probs = np.exp(z - z.max(axis=1, keepdims=True))
    probs /= probs.sum(axis=1, keepdims=True)
    probs[np.arange(4), targets] -= 1
    probs[~mask] = 0
    np.testing.assert_allclose(logits.grad, probs / mask.sum(), atol=1e-6)


def test_ce_all_masked_raises():
    with pytest.raises(DegenerateInputError):
        nn.softmax_cross_entropy(Tensor(np.zeros((2, 3))), np.array([0, 1]),
                                 np.array([False, False]))


def test_ce_target_out_of_range():
    with pytest.raises(InputError):
        nn.softmax_cross_entropy(Tensor(np.zeros((1, 3))), np.array([3]))


def test_bce_with_logits_oracle(rng):
    z = rng.standard_normal(9).astype(np.float32)
    y = rng.integers(0, 2, size=9).astype(np.float32)
    loss = nn.bce_with_logits(Tensor(z.reshape(3, 3)), y.reshape(3, 3)).item()
    p = 1.0 / (1.0 + np.exp(-z.astype(np.float64)))
    expect = -(y * np.log(p) + (1 - y) * np.log(1 - p)).mean()
    assert abs(loss - expect) <= 1e-6


# -- Adam ---------------------------------------------------------------------------

def test_adam_first_step_is_signed_lr(rng):
    p = param_set({"w": rng.standard_normal(6).astype(np.float32)})
    g = rng.standard_normal(6).astype(np.float32)
    g[np.abs(g) < 0.1] = 0.5  # keep gradients away from eps
    before = p["w"].data.copy()
    p["w"].grad = g.copy()
    nn.adam_step(p, lr=1e-2)
    np.testing.assert_allclose(before - p["w"].data, 1e-2 * np.sign(g),
                               atol=1e-6 * 1e-2 + 1e-9)


def test_adam_zero_gradient_keeps_parameter():
    p = param_set({"w": np.array([1.0, -2.0], dtype=np.float32)})
    p["w"].grad = np.zeros(2, dtype=np.float32)
    nn.adam_step(p, lr=0.1)
    np.testing.assert_array_equal(p["w"].data, [1.0, -2.0])


def test_adam_descends_quadratic():
    p = param_set({"w": np.array([1.0], dtype=np.float32)})
    for _ in range(2):
        w = p["w"]
        loss = (w * w).sum()
        p.zero_grads()
        loss.backward()
        nn.adam_step(p, lr=0.1)
    assert float(p["w"].data[0] ** 2) < 1.0


def test_adam_missing_gradient_raises():
    p = param_set({"w": np.ones(2, dtype=np.float32)})
    with pytest.raises(ContractViolation):
        nn.adam_step(p, lr=0.1)


def test_adam_deterministic(rng):
    def run():
        p = param_set({"w": np.arange(4, dtype=np.float32)})
        for step in range(3):
            p["w"].grad = (np.arange(4, dtype=np.float32) + step) * 0.1
            nn.adam_step(p, lr=1e-3)
        return p["w"].data.copy()

    np.testing.assert_array_equal(run(), run())


# -- finite differences -----------------------------------------------------------------

def test_fd_linear_loss():
    p = param_set({"w": np.arange(1, 7, dtype=np.float32)})

    def loss_fn():
        return p["w"].sum()

    assert nn.finite_difference_check(loss_fn, p, probes=6) <= 1e-4


def test_fd_composed_model(rng):
    p = param_set({
        "w1": rng.standard_normal((5, 4)).astype(np.float32) * 0.5,
        "b1": np.zeros(4, dtype=np.float32),
        "g": np.ones(4, dtype=np.float32),
        "b": np.zeros(4, dtype=np.float32),
    })
    x = np.asarray(rng.standard_normal((3, 5)), dtype=np.float32)
    targets = np.array([0, 3, 1])

    def loss_fn():
        h = nn.linear_forward(Tensor(x), p["w1"], p["b1"])
        h = nn.layer_norm(h, p["g"], p["b"])
        return nn.softmax_cross_entropy(h, targets)

    assert nn.finite_difference_check(loss_fn, p, probes=30, eps=1e-3) <= 1e-2


def test_fd_zero_gradient_coordinate():
    # second parameter never contributes; absolute threshold keeps it quiet
    p = param_set({"w": np.ones(2, dtype=np.float32),
                   "unused": np.ones(3, dtype=np.float32)})

    def loss_fn():
        return p["w"].sum() + (p["unused"] * 0.0).sum()

    assert nn.finite_difference_check(loss_fn, p, probes=20) <= 1e-4


# -- serialization ------------------------------------------------------------------------

def test_parameter_roundtrip_bit_exact(tmp_path, rng):
    p = nn.ParameterSet()
    p.add("layer/w", rng.standard_normal((3, 4)).astype(np.float32))
    p.add("layer/b", rng.standard_normal(4).astype(np.float32))
    p.add("frozen", rng.standard_normal(2).astype(np.float32), trainable=False)
    path = str(tmp_path / "params.bin")
    nn.save_parameters(path, p, header={"note": 1})
    loaded, header = nn.load_parameters(path)
    assert header == {"note": 1}
    assert loaded.paths() == p.paths()
    for path_name, t in p.items():
        assert np.array_equal(loaded[path_name].data, t.data)
        assert loaded.is_trainable(path_name) == p.is_trainable(path_name)
    assert loaded.checksum() == p.checksum()
