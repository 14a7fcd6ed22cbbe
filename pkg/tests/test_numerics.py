"""Numeric kernel contracts, each checked against an independent oracle."""

from __future__ import annotations

import math

import numpy as np
import pytest

from idaware.errors import (
    DimensionError,
    EmptySupervisionError,
    NumericError,
)
from idaware import numerics as nm


def _matmul_oracle(a, b):
    # Deliberately naive triple loop; no shared code with the implementation.
    n, k = a.shape
    k2, m = b.shape
    assert k == k2
    out = np.zeros((n, m))
    for i in range(n):
        for j in range(m):
            s = 0.0
            for t in range(k):
                s += a[i, t] * b[t, j]
            out[i, j] = s
    return out


def _softmax_oracle(row):
    exps = [math.exp(v) for v in row]
    z = sum(exps)
    return [e / z for e in exps]


def test_matmul_matches_naive_loops():
    rng = np.random.default_rng(0)
    for _ in range(10):
        n, k, m = rng.integers(1, 7, size=3)
        a = rng.standard_normal((n, k))
        b = rng.standard_normal((k, m))
        np.testing.assert_allclose(nm.matmul(a, b), _matmul_oracle(a, b), atol=1e-12)


def test_matmul_rejects_bad_shapes():
    with pytest.raises(DimensionError) as exc:
        nm.matmul(np.zeros((2, 3)), np.zeros((4, 2)))
    assert "(2, 3)" in str(exc.value) and "(4, 2)" in str(exc.value)
    with pytest.raises(DimensionError):
        nm.matmul(np.zeros(3), np.zeros((3, 2)))


def test_softmax_rows_sum_to_one_and_match_oracle():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((5, 7)) * 3
    s = nm.softmax_rows(x)
    np.testing.assert_allclose(s.sum(axis=1), np.ones(5), atol=1e-12)
    for i in range(5):
        np.testing.assert_allclose(s[i], _softmax_oracle(x[i]), atol=1e-12)


def test_softmax_rows_survives_huge_logits():
    x = np.array([[1e4, 1e4 + 1.0], [-1e4, 0.0]])
    s = nm.softmax_rows(x)
    assert np.all(np.isfinite(s))
    np.testing.assert_allclose(s.sum(axis=1), [1.0, 1.0], atol=1e-12)
    # Equal logits split evenly regardless of magnitude.
    np.testing.assert_allclose(nm.softmax_rows(np.array([[777.0, 777.0]]))[0], [0.5, 0.5])


def test_scaled_dot_attention_matches_composition():
    rng = np.random.default_rng(2)
    q = rng.standard_normal((3, 4))
    k = rng.standard_normal((5, 4))
    v = rng.standard_normal((5, 6))
    out, w = nm.scaled_dot_attention(q, k, v)
    expect_w = nm.softmax_rows(_matmul_oracle(q, k.T) / math.sqrt(4))
    np.testing.assert_allclose(w, expect_w, atol=1e-12)
    np.testing.assert_allclose(out, _matmul_oracle(expect_w, v), atol=1e-12)
    np.testing.assert_allclose(w.sum(axis=1), np.ones(3), atol=1e-12)


def test_scaled_dot_attention_single_key_copies_value():
    rng = np.random.default_rng(3)
    q = rng.standard_normal((4, 8))
    k = rng.standard_normal((1, 8))
    v = rng.standard_normal((1, 8))
    out, w = nm.scaled_dot_attention(q, k, v)
    np.testing.assert_allclose(w, np.ones((4, 1)))
    for row in out:
        np.testing.assert_allclose(row, v[0])


def test_layer_norm_rows_standardized():
    rng = np.random.default_rng(4)
    x = rng.standard_normal((6, 9)) * 5 + 2
    y = nm.layer_norm(x, np.ones(9), np.zeros(9))
    np.testing.assert_allclose(y.mean(axis=1), np.zeros(6), atol=1e-12)
    # Variance is 1 up to the eps regularizer.
    np.testing.assert_allclose(y.var(axis=1), np.ones(6), atol=1e-4)


def test_layer_norm_constant_row_yields_beta():
    beta = np.array([0.5, -1.0, 2.0])
    y = nm.layer_norm(np.full((2, 3), 7.0), np.ones(3), beta)
    np.testing.assert_allclose(y, np.tile(beta, (2, 1)))


def test_layer_norm_affine_shape_mismatch():
    with pytest.raises(DimensionError):
        nm.layer_norm(np.zeros((2, 3)), np.ones(4), np.zeros(4))


def _ce_oracle(logits, targets, mask):
    # Direct per-row probability computation.
    total, count = 0.0, 0
    for t in range(logits.shape[0]):
        if not mask[t]:
            continue
        probs = _softmax_oracle(logits[t])
        total += -math.log(probs[targets[t]])
        count += 1
    return total / count


def test_cross_entropy_matches_brute_force():
    rng = np.random.default_rng(5)
    logits = rng.standard_normal((7, 11)) * 2
    targets = rng.integers(0, 11, size=7)
    mask = np.array([True, False, True, True, False, True, True])
    got = nm.cross_entropy_next_token(logits, targets, mask)
    assert got == pytest.approx(_ce_oracle(logits, targets, mask), abs=1e-12)


def test_cross_entropy_ignores_unmasked_targets():
    rng = np.random.default_rng(6)
    logits = rng.standard_normal((5, 4))
    targets = rng.integers(0, 4, size=5)
    mask = np.array([False, True, False, True, False])
    base = nm.cross_entropy_next_token(logits, targets, mask)
    corrupted = targets.copy()
    corrupted[0] = (corrupted[0] + 1) % 4
    corrupted[2] = (corrupted[2] + 2) % 4
    assert nm.cross_entropy_next_token(logits, corrupted, mask) == base


def test_cross_entropy_uniform_logits_is_log_vocab():
    logits = np.zeros((3, 16))
    targets = np.array([1, 5, 9])
    mask = np.ones(3, dtype=bool)
    assert nm.cross_entropy_next_token(logits, targets, mask) == pytest.approx(
        math.log(16), abs=1e-12
    )


def test_cross_entropy_empty_mask_raises():
    with pytest.raises(EmptySupervisionError):
        nm.cross_entropy_next_token(np.zeros((2, 3)), np.zeros(2, dtype=int), np.zeros(2, dtype=bool))


def test_optimizer_step_arithmetic():
    params = {"w": np.array([1.0]), "frozen": np.array([3.0])}
    grads = {"w": np.array([2.0])}
    out = nm.optimizer_step(params, grads, 0.1)
    np.testing.assert_allclose(out["w"], [0.8])
    np.testing.assert_allclose(out["frozen"], [3.0])
    # Zero gradient leaves the parameter unchanged.
    same = nm.optimizer_step(params, {"w": np.zeros(1)}, 0.5)
    np.testing.assert_allclose(same["w"], params["w"])
    # Inputs are not mutated.
    np.testing.assert_allclose(params["w"], [1.0])


def test_two_steps_compose_additively():
    params = {"w": np.array([1.0, -2.0])}
    g1 = {"w": np.array([0.5, 1.0])}
    g2 = {"w": np.array([-1.0, 0.25])}
    stepped = nm.optimizer_step(nm.optimizer_step(params, g1, 0.2), g2, 0.2)
    combined = {"w": g1["w"] + g2["w"]}
    np.testing.assert_allclose(stepped["w"], nm.optimizer_step(params, combined, 0.2)["w"])


def test_finite_diff_on_quadratic():
    # loss = sum(w^2) has exact gradient 2w; central differences are exact for
    # quadratics up to roundoff.
    w = np.array([[0.3, -1.2], [2.0, 0.0]])
    grads = nm.finite_diff_grad(lambda p: float(np.sum(p["w"] ** 2)), {"w": w})
    np.testing.assert_allclose(grads["w"], 2 * w, atol=1e-8)


def test_grad_check_passes_and_detects_corruption():
    w = np.array([0.7, -0.4, 1.1])

    def good(params):
        loss = float(np.sum(np.tanh(params["w"]) ** 2))
        grad = 2 * np.tanh(params["w"]) * (1 - np.tanh(params["w"]) ** 2)
        return loss, {"w": grad}

    report = nm.grad_check(good, {"w": w}, tol=1e-4)
    assert report.passed and report.max_rel_error < 1e-6

    def corrupted(params):
        loss, grads = good(params)
        grads["w"] = grads["w"] * 2.0  # deliberate backward bug
        return loss, grads

    bad = nm.grad_check(corrupted, {"w": w}, tol=1e-4)
    assert not bad.passed
    assert bad.worst_param == "w"
    assert "FAIL" in bad.summary()


def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(7)
    params = {
        "b.bias": rng.standard_normal(3),
        "a.weight": rng.standard_normal((2, 4)),
    }
    path = tmp_path / "model.ckpt"
    nm.save_checkpoint(path, params)
    loaded = nm.load_checkpoint(path)
    assert sorted(loaded) == ["a.weight", "b.bias"]
    for name in params:
        np.testing.assert_array_equal(loaded[name], params[name])
    # Header is a single JSON line naming shapes.
    first = path.read_bytes().split(b"\n", 1)[0].decode()
    assert '"format_version": 1' in first and '"a.weight"' in first


def test_checkpoint_bitwise_deterministic(tmp_path):
    params = {"w": np.linspace(-1, 1, 13).reshape(13, 1)}
    p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    nm.save_checkpoint(p1, params)
    nm.save_checkpoint(p2, params)
    assert p1.read_bytes() == p2.read_bytes()


def test_checkpoint_rejects_garbage(tmp_path):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"\x00\x01not json\n")
    with pytest.raises(NumericError):
        nm.load_checkpoint(bad)
    truncated = tmp_path / "trunc.ckpt"
    nm.save_checkpoint(truncated, {"w": np.ones(8)})
    data = truncated.read_bytes()
    truncated.write_bytes(data[:-8])
    with pytest.raises(NumericError):
        nm.load_checkpoint(truncated)


def test_as_f64_rejects_nan():
    with pytest.raises(NumericError):
        nm.as_f64([1.0, float("nan")])
