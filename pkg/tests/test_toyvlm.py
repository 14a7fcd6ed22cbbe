import numpy as np
import pytest

from idaware import checkkit, idformer
from idaware import numerics as nm
from idaware.errors import AssemblyError, DimensionError
from idaware.idformer import IDFormerConfig
from idaware.toyvlm.assembly import assemble_embeddings, splice_sequence
from idaware.toyvlm.dataset import make_synthetic_dataset
from idaware.toyvlm.lm import (
    TinyLMConfig,
    init_lm_params,
    lm_backward_batch,
    lm_forward_batch,
)
from idaware.toyvlm.model import (
    ce_grad,
    greedy_decode,
    init_composed_params,
    sample_loss_and_grad,
    split_params,
)
from idaware.toyvlm.vocab import build_vocab
from idaware.toyvlm.world import SyntheticWorld, WorldConfig

ICFG = IDFormerConfig(n_queries=2, d_model=16, d_visual=16, n_heads=2)


@pytest.fixture(scope="module")
def setup():
    world = SyntheticWorld(WorldConfig())
    vocab = build_vocab()
    lcfg = TinyLMConfig(
        vocab_size=len(vocab.tokens), d_model=16, n_layers=2, n_heads=2,
        d_ff=32, max_seq=96,
    )
    params = init_composed_params(ICFG, lcfg, seed=11)
    samples = make_synthetic_dataset(world, vocab, 8, seed=13)
    return world, vocab, lcfg, params, samples


# ------------------------------------------------------------------- lm


def test_lm_forward_shape_and_determinism():
    cfg = TinyLMConfig(vocab_size=9, d_model=8, n_layers=1, n_heads=1, d_ff=12, max_seq=5)
    params = init_lm_params(cfg, seed=0)
    emb = np.random.default_rng(1).standard_normal((2, 5, 8))
    a, _ = lm_forward_batch(params, cfg, emb)
    b, _ = lm_forward_batch(params, cfg, emb)
    assert a.shape == (2, 5, 9)
    np.testing.assert_array_equal(a, b)


def test_lm_is_causal():
    cfg = TinyLMConfig(vocab_size=7, d_model=8, n_layers=2, n_heads=2, d_ff=16, max_seq=6)
    params = init_lm_params(cfg, seed=3)
    rng = np.random.default_rng(4)
    emb = rng.standard_normal((1, 6, 8))
    base, _ = lm_forward_batch(params, cfg, emb)
    bumped = emb.copy()
    # Perturb one coordinate (a uniform row shift would vanish in layer norm);
    # a change at position 4 may only affect logits at positions >= 4.
    bumped[0, 4, 2] += 10.0
    out, _ = lm_forward_batch(params, cfg, bumped)
    np.testing.assert_array_equal(out[0, :4], base[0, :4])
    assert not np.allclose(out[0, 4:], base[0, 4:])


def test_lm_rejects_overlong_input():
    cfg = TinyLMConfig(vocab_size=7, d_model=8, n_layers=1, n_heads=1, d_ff=12, max_seq=4)
    params = init_lm_params(cfg, seed=0)
    with pytest.raises(DimensionError):
        lm_forward_batch(params, cfg, np.zeros((1, 5, 8)))


def test_lm_backward_matches_numeric_embedding_grad():
    cfg = TinyLMConfig(vocab_size=6, d_model=8, n_layers=1, n_heads=2, d_ff=10, max_seq=4)
    params = init_lm_params(cfg, seed=5)
    rng = np.random.default_rng(6)
    emb = rng.standard_normal((1, 4, 8))
    w = rng.standard_normal((1, 4, 6))

    def loss_of(e):
        logits, _ = lm_forward_batch(params, cfg, e)
        return float(np.sum(w * logits))

    logits, cache = lm_forward_batch(params, cfg, emb)
    demb, _ = lm_backward_batch(params, cfg, cache, w)
    eps = 1e-6
    num = np.zeros_like(emb)
    flat, nflat = emb.reshape(-1), num.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = loss_of(emb)
        flat[i] = orig - eps
        lo = loss_of(emb)
        flat[i] = orig
        nflat[i] = (hi - lo) / (2 * eps)
    np.testing.assert_allclose(demb, num, rtol=1e-5, atol=1e-7)


# -------------------------------------------------------------- assembly


def test_spliced_rows_are_projector_outputs_bitwise(setup):
    _, vocab, lcfg, params, samples = setup
    idf_params, lm_params = split_params(params)
    for sample in samples:
        blocks = idformer.forward(
            idf_params, ICFG,
            [r.feats for r in sample.id_refs], list(sample.test_feats),
        )
        asm = splice_sequence(sample, blocks, lm_params["tok_emb"])
        for index, start, n_rows in asm.image_rows:
            chunk = asm.embeddings[start : start + n_rows]
            assert chunk.tobytes() == blocks[index].tobytes()
            assert (asm.token_ids[start : start + n_rows] == -1).all()
        # Text rows equal embedding-table rows, also bitwise.
        for pos, tok in enumerate(asm.token_ids):
            if tok >= 0:
                assert asm.embeddings[pos].tobytes() == lm_params["tok_emb"][tok].tobytes()


def test_assembly_mask_covers_response_exactly(setup):
    _, vocab, lcfg, params, samples = setup
    sample = samples[0]
    asm = assemble_embeddings(sample, split_params(params)[0], ICFG,
                              split_params(params)[1]["tok_emb"])
    n_resp = len(sample.response)
    assert asm.resp_mask.sum() == n_resp
    assert asm.resp_mask[-n_resp:].all()
    np.testing.assert_array_equal(
        asm.token_ids[-n_resp:], np.asarray(sample.response)
    )


def test_assembly_rejects_wrong_block_count(setup):
    _, vocab, _, params, samples = setup
    sample = samples[0]
    _, lm_params = split_params(params)
    blocks = [np.zeros((2, 16))] * (len(sample.id_refs) + len(sample.test_feats) - 1)
    with pytest.raises(AssemblyError):
        splice_sequence(sample, blocks, lm_params["tok_emb"])


def test_assembly_rejects_bad_block_width(setup):
    _, vocab, _, params, samples = setup
    sample = samples[0]
    _, lm_params = split_params(params)
    n = len(sample.id_refs) + len(sample.test_feats)
    blocks = [np.zeros((2, 7))] * n
    with pytest.raises(AssemblyError):
        splice_sequence(sample, blocks, lm_params["tok_emb"])


# ----------------------------------------------------------------- model


def test_split_params_requires_prefixes():
    with pytest.raises(DimensionError):
        split_params({"unprefixed": np.zeros(1)})


def test_ce_grad_matches_numeric():
    rng = np.random.default_rng(2)
    logits = rng.standard_normal((5, 4))
    targets = np.array([1, 3, 0, 2, 1])
    mask = np.array([True, False, True, True, False])
    analytic = ce_grad(logits, targets, mask)
    eps = 1e-6
    num = np.zeros_like(logits)
    for i in range(5):
        for j in range(4):
            logits[i, j] += eps
            hi = nm.cross_entropy_next_token(logits, targets, mask)
            logits[i, j] -= 2 * eps
            lo = nm.cross_entropy_next_token(logits, targets, mask)
            logits[i, j] += eps
            num[i, j] = (hi - lo) / (2 * eps)
    np.testing.assert_allclose(analytic, num, atol=1e-9)
    assert (analytic[~mask] == 0).all()


def test_sample_loss_finite_and_ablation_differs(setup):
    _, vocab, lcfg, params, samples = setup
    for sample in samples[:4]:
        full = sample_loss_and_grad(
            params, ICFG, lcfg, vocab, sample, want_grads=False
        )
        ablated = sample_loss_and_grad(
            params, ICFG, lcfg, vocab, sample, ablate_modulate=True, want_grads=False
        )
        assert np.isfinite(full) and np.isfinite(ablated)
        assert full != ablated  # modulation changes test-image rows


def test_grads_cover_all_trainable_params(setup):
    _, vocab, lcfg, params, samples = setup
    _, grads = sample_loss_and_grad(params, ICFG, lcfg, vocab, samples[0])
    missing = set(params) - set(grads)
    # Placeholder rows exist inside tok_emb (dense table), so tok_emb itself is
    # present; nothing else may go missing.
    assert not missing
    for name, g in grads.items():
        assert g.shape == params[name].shape, name


def test_placeholder_embedding_rows_never_get_gradient(setup):
    _, vocab, lcfg, params, samples = setup
    placeholder_rows = [
        i for i, t in enumerate(vocab.tokens) if vocab.placeholder_slot(t)
    ]
    assert placeholder_rows
    for sample in samples[:4]:
        _, grads = sample_loss_and_grad(params, ICFG, lcfg, vocab, sample)
        g = grads["lm.tok_emb"][placeholder_rows]
        assert (g == 0.0).all()


def test_freeze_drops_groups(setup):
    _, vocab, lcfg, params, samples = setup
    _, grads = sample_loss_and_grad(
        params, ICFG, lcfg, vocab, samples[0],
        freeze=("idf.attn1", "lm.tok_emb"),
    )
    assert not any(k.startswith("idf.attn1") for k in grads)
    assert "lm.tok_emb" not in grads


def test_greedy_decode_emits_known_tokens(setup):
    _, vocab, lcfg, params, samples = setup
    out = greedy_decode(params, ICFG, lcfg, vocab, samples[0], max_new=6)
    assert isinstance(out, list) and len(out) <= 6
    for tok in out:
        assert 0 <= tok < len(vocab.tokens)
        assert tok != vocab.eot_id


# -------------------------------------------------------------- checkkit


def test_checkkit_lm_case_passes_and_corruption_caught():
    case = checkkit.lm_case()
    report = checkkit.run_case(case)
    assert report.passed, report.summary()
    bad = checkkit.run_case(case, corrupt="block0.attn.wv.w")
    assert not bad.passed
    assert bad.worst_param == "block0.attn.wv.w"


def test_checkkit_rejects_unknown_corrupt_target():
    case = checkkit.lm_case()
    with pytest.raises(KeyError):
        checkkit.run_case(case, corrupt="no.such.param")


def test_checkkit_case_registry_names():
    cases = checkkit.all_cases()
    assert set(cases) == {"projector", "projector-id-query", "lm", "composed"}
