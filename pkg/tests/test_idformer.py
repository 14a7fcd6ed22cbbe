"""Projector contracts: fixed-length output, permutation invariance, pass-through,
capacity, and full gradient verification against central differences."""

from __future__ import annotations

import numpy as np
import pytest

from idaware import idformer as idf
from idaware import numerics as nm
from idaware.errors import CapacityError, ConfigError, DimensionError

CFG = idf.IDFormerConfig(n_queries=3, d_model=8, d_visual=5, n_heads=2)


@pytest.fixture()
def params():
    return idf.init_params(CFG, seed=11)


def _feats(rng, n_patches, d_visual=CFG.d_visual):
    return rng.standard_normal((n_patches, d_visual))


def test_config_validation():
    with pytest.raises(ConfigError):
        idf.IDFormerConfig(n_heads=3, d_model=8).validate()
    with pytest.raises(ConfigError):
        idf.IDFormerConfig(modulation_mode="sideways").validate()
    with pytest.raises(ConfigError):
        idf.IDFormerConfig(n_queries=0).validate()


def test_init_is_deterministic_and_scaled():
    a = idf.init_params(CFG, seed=5)
    b = idf.init_params(CFG, seed=5)
    for name in a:
        np.testing.assert_array_equal(a[name], b[name])
    assert not np.array_equal(a["query_bank"], idf.init_params(CFG, seed=6)["query_bank"])
    # Query bank is small-scale Gaussian; linear maps respect the 1/sqrt(fan_in) bound.
    assert np.abs(a["query_bank"]).max() < 0.2
    assert np.abs(a["attn1.wq.w"]).max() <= 1.0 / np.sqrt(CFG.d_model)
    assert np.abs(a["in_proj.w"]).max() <= 1.0 / np.sqrt(CFG.d_visual)


@pytest.mark.parametrize("n_patches", [1, 7, 49])
def test_compress_fixed_length(params, n_patches):
    rng = np.random.default_rng(n_patches)
    out = idf.compress(params, CFG, _feats(rng, n_patches))
    assert out.shape == (CFG.n_queries, CFG.d_model)
    assert np.all(np.isfinite(out))


def test_compress_single_patch_rows_identical(params):
    rng = np.random.default_rng(1)
    out = idf.compress(params, CFG, _feats(rng, 1))
    # One key means attention weight 1 everywhere: every query returns the same
    # normalized projected value.
    for row in out[1:]:
        np.testing.assert_allclose(row, out[0], atol=1e-12)


def test_compress_patch_width_mismatch(params):
    with pytest.raises(DimensionError):
        idf.compress(params, CFG, np.zeros((4, CFG.d_visual + 1)))


def test_modulate_permutation_invariance(params):
    rng = np.random.default_rng(2)
    test = idf.compress(params, CFG, _feats(rng, 4))
    blocks = [idf.compress(params, CFG, _feats(rng, 4)) for _ in range(4)]
    base = idf.modulate(params, CFG, test, blocks)
    for perm_seed in range(3):
        order = np.random.default_rng(perm_seed).permutation(4)
        permuted = idf.modulate(params, CFG, test, [blocks[i] for i in order])
        np.testing.assert_allclose(permuted, base, atol=1e-12)


def test_modulate_empty_ids_is_residual_norm(params):
    rng = np.random.default_rng(3)
    test = idf.compress(params, CFG, _feats(rng, 4))
    out = idf.modulate(params, CFG, test, [])
    expect = nm.layer_norm(test, params["norm2.gamma"], params["norm2.beta"])
    np.testing.assert_allclose(out, expect, atol=1e-12)


def test_modulate_id_as_query_mode(params):
    cfg = idf.IDFormerConfig(
        n_queries=3, d_model=8, d_visual=5, n_heads=2, modulation_mode="id_as_query"
    )
    rng = np.random.default_rng(4)
    test = idf.compress(params, cfg, _feats(rng, 4))
    blocks = [idf.compress(params, cfg, _feats(rng, 4)) for _ in range(2)]
    out = idf.modulate(params, cfg, test, blocks)
    assert out.shape == (cfg.n_queries, cfg.d_model)
    # Pass-through case matches the default mode exactly.
    np.testing.assert_allclose(
        idf.modulate(params, cfg, test, []), idf.modulate(params, CFG, test, []), atol=0
    )


def test_forward_output_order_and_capacity(params):
    rng = np.random.default_rng(5)
    ids = [_feats(rng, 4) for _ in range(2)]
    tests = [_feats(rng, 3)]
    outs = idf.forward(params, CFG, ids, tests)
    assert len(outs) == 3
    np.testing.assert_allclose(outs[0], idf.compress(params, CFG, ids[0]), atol=1e-12)
    blocks = [idf.compress(params, CFG, f) for f in ids]
    np.testing.assert_allclose(
        outs[2],
        idf.modulate(params, CFG, idf.compress(params, CFG, tests[0]), blocks),
        atol=1e-12,
    )
    with pytest.raises(CapacityError):
        idf.forward(params, CFG, [_feats(rng, 2)] * 5, [_feats(rng, 2)] * 4)


def test_forward_at_capacity_boundary(params):
    rng = np.random.default_rng(6)
    outs = idf.forward(params, CFG, [_feats(rng, 2)] * 5, [_feats(rng, 2)] * 3)
    assert len(outs) == 8


def test_ablated_forward_skips_modulation(params):
    rng = np.random.default_rng(7)
    ids = [_feats(rng, 4)]
    tests = [_feats(rng, 3)]
    outs = idf.forward(params, CFG, ids, tests, ablate_modulate=True)
    np.testing.assert_allclose(
        outs[1], idf.compress(params, CFG, tests[0]), atol=1e-12
    )


def test_backward_requires_cache(params):
    with pytest.raises(ValueError):
        idf.backward(params, None, [])


def _warm_params(cfg, seed):
    """Parameter point for gradient checks.

    The cold training init leaves some attention-score gradients below the
    finite-difference noise floor (|loss|*eta/eps), where the pinned relative
    tolerance cannot be met for reasons unrelated to backward correctness.
    Checks therefore run at a warmer random point.
    """
    base = idf.init_params(cfg, seed)
    r = np.random.default_rng(seed + 1000)
    out = {}
    for k, v in base.items():
        if ".wq" in k or ".wk" in k:
            out[k] = r.normal(0, 1.0, v.shape)
        elif k.endswith(".gamma"):
            out[k] = r.uniform(0.7, 1.3, v.shape)
        elif k.endswith(".beta"):
            out[k] = r.normal(0, 0.3, v.shape)
        elif k == "query_bank":
            out[k] = r.normal(0, 0.8, v.shape)
        else:
            out[k] = r.normal(0, 0.5, v.shape)
    return out


def _loss_and_grad(cfg, feat_seed=5, n_probes=4, ablate=False):
    """Multi-probe scalar loss so every parameter coordinate carries signal."""
    rng = np.random.default_rng(feat_seed)
    probes = []
    for _ in range(n_probes):
        ids = [rng.standard_normal((3, cfg.d_visual)), rng.standard_normal((2, cfg.d_visual))]
        tests = [rng.standard_normal((4, cfg.d_visual)), rng.standard_normal((2, cfg.d_visual))]
        probes.append((ids, tests))

    def fn(params):
        total, grads = 0.0, {}
        for pi, (ids, tests) in enumerate(probes):
            outputs, cache = idf.forward(
                params, cfg, ids, tests, want_cache=True, ablate_modulate=ablate
            )
            rr = np.random.default_rng(feat_seed * 7919 + pi)
            weights = [rr.standard_normal(o.shape) * 2.0 for o in outputs]
            total += float(sum(np.sum(w * o) for w, o in zip(weights, outputs)))
            for k, v in idf.backward(params, cache, weights).items():
                grads[k] = grads.get(k, 0) + v
        return total, grads

    return fn


@pytest.mark.parametrize("mode", ["test_as_query", "id_as_query"])
def test_gradients_match_finite_differences(mode):
    cfg = idf.IDFormerConfig(
        n_queries=2, d_model=6, d_visual=4, n_heads=2, modulation_mode=mode
    )
    params = _warm_params(cfg, seed=21)
    report = nm.grad_check(_loss_and_grad(cfg), params, tol=1e-4)
    assert report.passed, report.summary()


def test_gradients_ablated_path():
    cfg = idf.IDFormerConfig(n_queries=2, d_model=6, d_visual=4, n_heads=1)
    params = _warm_params(cfg, seed=31)
    fn = _loss_and_grad(cfg, ablate=True)
    _, grads = fn(params)
    # Modulation parameters get no gradient when ablated.
    assert not any(k.startswith(("attn2.", "norm2.")) for k in grads)

    def padded(p):
        # The numeric oracle covers every parameter, so report exact zeros for
        # the groups the ablated path never touches.
        loss, g = fn(p)
        full = {k: np.zeros_like(v) for k, v in p.items()}
        full.update(g)
        return loss, full

    report = nm.grad_check(padded, params, tol=1e-4)
    assert report.passed, report.summary()


def test_backward_freeze_excludes_group():
    cfg = idf.IDFormerConfig(n_queries=2, d_model=6, d_visual=4, n_heads=1)
    params = idf.init_params(cfg, seed=41)
    rng = np.random.default_rng(42)
    outputs, cache = idf.forward(
        params, cfg, [rng.standard_normal((3, 4))], [rng.standard_normal((2, 4))], want_cache=True
    )
    upstream = [np.ones_like(o) for o in outputs]
    full = idf.backward(params, cache, upstream)
    frozen = idf.backward(params, cache, upstream, freeze=["attn1", "query_bank"])
    assert any(k.startswith("attn1.") for k in full)
    assert not any(k.startswith("attn1.") or k == "query_bank" for k in frozen)
    np.testing.assert_allclose(frozen["norm1.gamma"], full["norm1.gamma"])


def test_empty_id_backward_flows(params):
    rng = np.random.default_rng(43)
    outputs, cache = idf.forward(params, CFG, [], [_feats(rng, 3)], want_cache=True)
    grads = idf.backward(params, cache, [np.ones_like(outputs[0])])
    assert "query_bank" in grads and "norm2.gamma" in grads
