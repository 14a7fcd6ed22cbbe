"""Ready-made gradient-check cases for every trainable component.

Each case bundles a parameter point and a ``loss_and_grad`` callable suitable
for :func:`idaware.numerics.grad_check`.  Checks run at a warm random point:
the cold training init leaves some coordinates below the finite-difference
noise floor (|loss| * machine-eta / eps), where the pinned relative tolerance
cannot be met for reasons unrelated to backward correctness.

Structurally dead embedding rows — image placeholders (their positions are
replaced by projector outputs), vocabulary rows a probe never touches, and
positional rows past the probe length — are excluded by construction: the
composed case reparameterizes the token table so only live rows are checked,
and sizes ``max_seq`` to the probe.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np

from . import idformer
from .idformer import IDFormerConfig
from .numerics import GradCheckReport, GradientBundle, grad_check
from .toyvlm.dataset import IdRef, InterleavedSample, PromptSegment
from .toyvlm.lm import TinyLMConfig, init_lm_params, lm_backward_batch, lm_forward_batch
from .toyvlm.model import ce_grad, init_composed_params, sample_loss_and_grad
from .toyvlm.vocab import build_vocab

LossAndGrad = Callable[[Mapping[str, np.ndarray]], tuple[float, GradientBundle]]


@dataclass(frozen=True)
class CheckCase:
    name: str
    params: dict[str, np.ndarray]
    loss_and_grad: LossAndGrad
    # Same scalar without the backward pass, for cheap numeric probing.
    loss_only: Callable[[Mapping[str, np.ndarray]], float] | None = None


def warm_point(
    init: GradientBundle,
    seed: int,
    scale_overrides: Mapping[str, float] | None = None,
) -> dict[str, np.ndarray]:
    """Redraw a parameter store at gradient-check-friendly scales.

    ``scale_overrides`` maps a name substring to a Gaussian scale; the first
    matching override wins.  Score projections want their attention logits
    near unit variance — saturated rows starve the score path of gradient,
    near-zero rows starve everything downstream.
    """
    rng = np.random.default_rng(seed + 1000)
    overrides = dict(scale_overrides or {})
    out = {}
    for name, value in init.items():
        scale = next((s for frag, s in overrides.items() if frag in name), None)
        if scale is not None:
            out[name] = rng.normal(0, scale, value.shape)
        elif ".wq" in name or ".wk" in name:
            out[name] = rng.normal(0, 1.0, value.shape)
        elif name.endswith(".gamma"):
            out[name] = rng.uniform(0.7, 1.3, value.shape)
        elif name.endswith(".beta"):
            out[name] = rng.normal(0, 0.3, value.shape)
        elif name.endswith("query_bank") or "emb" in name:
            out[name] = rng.normal(0, 0.8, value.shape)
        else:
            out[name] = rng.normal(0, 0.5, value.shape)
    return out


def projector_case(seed: int = 21, mode: str = "test_as_query") -> CheckCase:
    """Projector alone, both stages, random linear probes over every output."""
    cfg = IDFormerConfig(
        n_queries=3, d_model=8, d_visual=5, n_heads=2, modulation_mode=mode
    )
    params = warm_point(idformer.init_params(cfg, seed), seed)
    feat_seed = seed * 13 + 5
    rng = np.random.default_rng(feat_seed)
    probes = []
    for _ in range(4):
        ids = [rng.standard_normal((3, cfg.d_visual)), rng.standard_normal((2, cfg.d_visual))]
        tests = [rng.standard_normal((4, cfg.d_visual)), rng.standard_normal((2, cfg.d_visual))]
        probes.append((ids, tests))

    def fn(p):
        total, grads = 0.0, {}
        for pi, (ids, tests) in enumerate(probes):
            outputs, cache = idformer.forward(p, cfg, ids, tests, want_cache=True)
            rr = np.random.default_rng(feat_seed * 7919 + pi)
            weights = [rr.standard_normal(o.shape) * 2.0 for o in outputs]
            total += float(sum(np.sum(w * o) for w, o in zip(weights, outputs)))
            for k, v in idformer.backward(p, cache, weights).items():
                grads[k] = grads.get(k, 0) + v
        return total, grads

    def loss_only(p):
        total = 0.0
        for pi, (ids, tests) in enumerate(probes):
            outputs = idformer.forward(p, cfg, ids, tests)
            rr = np.random.default_rng(feat_seed * 7919 + pi)
            weights = [rr.standard_normal(o.shape) * 2.0 for o in outputs]
            total += float(sum(np.sum(w * o) for w, o in zip(weights, outputs)))
        return total

    suffix = "" if mode == "test_as_query" else "-id-query"
    return CheckCase(
        name=f"projector{suffix}", params=params, loss_and_grad=fn, loss_only=loss_only
    )


def lm_case(seed: int = 7) -> CheckCase:
    """Decoder alone on a dense probe: every vocabulary row and position live."""
    vocab_size = 6
    tokens = np.array([0, 1, 2, 3, 4, 5, 0], dtype=np.int64)
    cfg = TinyLMConfig(
        vocab_size=vocab_size, d_model=8, n_layers=2, n_heads=2, d_ff=12,
        max_seq=len(tokens) - 1,
    )
    params = warm_point(init_lm_params(cfg, seed), seed)
    inputs_ids = tokens[:-1]
    targets = tokens[1:]
    mask = np.ones(len(targets), dtype=bool)

    def fn(p):
        from . import numerics as nm

        emb = p["tok_emb"][inputs_ids]
        logits, cache = lm_forward_batch(p, cfg, emb[None])
        loss = nm.cross_entropy_next_token(logits[0], targets, mask)
        dlogits = ce_grad(logits[0], targets, mask)
        demb, grads = lm_backward_batch(p, cfg, cache, dlogits[None])
        dtok = np.zeros_like(p["tok_emb"])
        np.add.at(dtok, inputs_ids, demb[0])
        grads["tok_emb"] = dtok
        return loss, grads

    def loss_only(p):
        from . import numerics as nm

        logits, _ = lm_forward_batch(p, cfg, p["tok_emb"][inputs_ids][None])
        return nm.cross_entropy_next_token(logits[0], targets, mask)

    return CheckCase(name="lm", params=params, loss_and_grad=fn, loss_only=loss_only)


def _composed_probe_samples(vocab, rng, d_visual: int):
    """Two equal-length interleaved probes (so every positional row is live)."""

    def text(*words):
        return PromptSegment(kind="text", tokens=tuple(vocab.id(w) for w in words))

    def refs(n_patches=(3, 2)):
        return [
            IdRef(name_token=vocab.id(n), feats=rng.standard_normal((p, d_visual)))
            for n, p in zip(("Ann", "Bob"), n_patches)
        ]

    a = InterleavedSample(
        task_kind="qa",
        id_refs=refs(),
        test_feats=[rng.standard_normal((4, d_visual))],
        prompt=[
            text("Ann", "is"), PromptSegment(kind="id_slot", index=0), text("."),
            text("Bob", "is"), PromptSegment(kind="id_slot", index=1), text("."),
            text("who", "is", "left", "in"),
            PromptSegment(kind="test_slot", index=0), text("?"),
        ],
        response=[vocab.id(w) for w in ("Bob", "left", "middle", "right")]
        + [vocab.eot_id],
    )
    b = InterleavedSample(
        task_kind="location",
        id_refs=refs((2, 4)),
        test_feats=[rng.standard_normal((3, d_visual))],
        prompt=[
            text("Bob", "is"), PromptSegment(kind="id_slot", index=0), text("."),
            text("Ann", "is"), PromptSegment(kind="id_slot", index=1), text("."),
            text("where", "is", "Ann", "in"),
            PromptSegment(kind="test_slot", index=0), text("?"),
        ],
        response=[vocab.id(w) for w in ("right", "Ann", "describe", "who")]
        + [vocab.eot_id],
    )
    c = InterleavedSample(
        task_kind="caption",
        id_refs=refs((4, 3)),
        test_feats=[rng.standard_normal((2, d_visual))],
        prompt=[
            text("Ann", "is"), PromptSegment(kind="id_slot", index=0), text("."),
            text("Bob", "is"), PromptSegment(kind="id_slot", index=1), text("."),
            text("which", "shows", "Bob", "in"),
            PromptSegment(kind="test_slot", index=0), text("?"),
        ],
        response=[vocab.id(w) for w in ("middle", "Ann", "in", "Bob")]
        + [vocab.eot_id],
    )
    return [a.validate(), b.validate(), c.validate()]


def composed_case(seed: int = 3) -> CheckCase:
    """Projector + decoder end to end, cross-entropy loss on real samples.

    The token table is reparameterized to its live rows: placeholder rows and
    never-referenced words are dead by construction and a finite-difference
    probe of them would compare noise against an exact zero.
    """
    vocab = build_vocab(names=("Ann", "Bob"), max_images=2, extra_words=())
    icfg = IDFormerConfig(n_queries=3, d_model=16, d_visual=7, n_heads=2, max_images=4)
    rng = np.random.default_rng(seed * 101 + 9)
    samples = _composed_probe_samples(vocab, rng, icfg.d_visual)

    seq_len = None
    live: set[int] = set()
    for s in samples:
        n = sum(
            len(seg.tokens) if seg.kind == "text" else icfg.n_queries
            for seg in s.prompt
        ) + len(s.response)
        seq_len = n if seq_len is None else seq_len
        assert n == seq_len, "probe samples must share one length"
        # Live = appears as an *input* row.  The final response token (the end
        # marker) is only ever the dropped last row, so its embedding is dead.
        for seg in s.prompt:
            live.update(seg.tokens)
        live.update(s.response[:-1])
    live_rows = np.array(sorted(live), dtype=np.int64)

    lcfg = TinyLMConfig(
        vocab_size=len(vocab.tokens), d_model=icfg.d_model, n_layers=1,
        n_heads=2, d_ff=24, max_seq=seq_len - 1,
    )
    base = warm_point(
        init_composed_params(icfg, lcfg, seed),
        seed,
        scale_overrides={"attn2.wq": 0.2, "attn2.wk": 0.2, ".wq": 0.35, ".wk": 0.35},
    )
    base_tok = base["lm.tok_emb"]
    params = {k: v for k, v in base.items() if k != "lm.tok_emb"}
    params["lm.tok_emb_live"] = base_tok[live_rows].copy()

    def restore(p):
        full_tok = base_tok.copy()
        full_tok[live_rows] = p["lm.tok_emb_live"]
        model_params = {k: v for k, v in p.items() if k != "lm.tok_emb_live"}
        model_params["lm.tok_emb"] = full_tok
        return model_params

    def fn(p):
        model_params = restore(p)
        total, grads = 0.0, {}
        for s in samples:
            loss, g = sample_loss_and_grad(model_params, icfg, lcfg, vocab, s)
            total += loss
            for k, v in g.items():
                grads[k] = grads.get(k, 0) + v
        grads["lm.tok_emb_live"] = grads.pop("lm.tok_emb")[live_rows]
        return total, grads

    def loss_only(p):
        model_params = restore(p)
        return sum(
            sample_loss_and_grad(
                model_params, icfg, lcfg, vocab, s, want_grads=False
            )
            for s in samples
        )

    return CheckCase(
        name="composed", params=params, loss_and_grad=fn, loss_only=loss_only
    )


def all_cases() -> dict[str, Callable[[], CheckCase]]:
    return {
        "projector": projector_case,
        "projector-id-query": lambda: projector_case(mode="id_as_query"),
        "lm": lm_case,
        "composed": composed_case,
    }


def run_case(
    case: CheckCase,
    tol: float = 1e-4,
    eps: float = 1e-6,
    corrupt: str | None = None,
) -> GradCheckReport:
    """Execute one case; ``corrupt`` doubles a named analytic gradient to
    demonstrate that the check actually catches wrong backward passes."""
    fn = case.loss_and_grad
    if corrupt is not None:
        if corrupt not in case.params:
            raise KeyError(
                f"cannot corrupt unknown parameter {corrupt!r}; "
                f"have {sorted(case.params)}"
            )
        inner = fn

        def fn(p):  # noqa: F811 - deliberate wrapper
            loss, grads = inner(p)
            grads = dict(grads)
            grads[corrupt] = grads[corrupt] * 2.0
            return loss, grads

    return grad_check(fn, case.params, tol=tol, eps=eps, loss_fn=case.loss_only)
