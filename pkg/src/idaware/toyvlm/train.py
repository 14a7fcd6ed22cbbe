"""Two-stage training loop over interleaved samples.

Stage one trains on crop-regime data (reference images cut from the queried
scene), stage two on shot-regime data (fresh poses).  Batches group samples by
structural signature — same segment layout, response length, and feature
shapes — so every group runs as one dense (B, T, D) pass with no padding.
The grouped path is an exact reimplementation of the per-sample loss in
``model.py``; a test pins the two against each other.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .. import idformer
from .. import numerics as nm
from ..errors import ConfigError, NumericError
from ..idformer import IDFormerConfig
from .dataset import InterleavedSample
from .lm import TinyLMConfig, lm_backward_batch, lm_forward_batch
from .model import split_params
from .vocab import Vocab

TRAIN_STAGES = (1, 2)


@dataclass(frozen=True)
class TrainSchedule:
    stage1_epochs: int = 5
    stage2_epochs: int = 5
    stage1_rate: float = 3e-3
    stage2_rate: float = 1e-3
    batch_size: int = 128
    # Classical heavy-ball momentum, applied by the stage runner; the
    # optimizer step itself stays a plain first-order update.
    momentum: float = 0.9
    seed: int = 0

    def validate(self) -> "TrainSchedule":
        if self.stage1_epochs < 1 or self.stage2_epochs < 1:
            raise ConfigError("epoch counts must be at least 1")
        if self.stage1_rate <= 0 or self.stage2_rate <= 0:
            raise ConfigError("learning rates must be positive")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError("momentum must be in [0, 1)")
        return self


@dataclass
class FlatSample:
    """Per-sample layout, precomputed once so epochs only stack arrays."""

    token_ids: np.ndarray  # (L,), -1 on image rows
    resp_mask: np.ndarray  # (L,) bool
    image_rows: tuple[tuple[int, int, int], ...]
    ref_feats: list[np.ndarray]
    test_feats: list[np.ndarray]
    signature: tuple


def flatten_sample(sample: InterleavedSample, n_queries: int) -> FlatSample:
    token_ids: list[int] = []
    image_rows: list[tuple[int, int, int]] = []
    n_refs = len(sample.id_refs)
    for seg in sample.prompt:
        if seg.kind == "text":
            token_ids.extend(seg.tokens)
        else:
            index = seg.index if seg.kind == "id_slot" else n_refs + seg.index
            image_rows.append((index, len(token_ids), n_queries))
            token_ids.extend([-1] * n_queries)
    prompt_len = len(token_ids)
    token_ids.extend(sample.response)
    mask = np.zeros(len(token_ids), dtype=bool)
    mask[prompt_len:] = True
    ref_feats = [np.asarray(r.feats, dtype=np.float64) for r in sample.id_refs]
    test_feats = [np.asarray(f, dtype=np.float64) for f in sample.test_feats]
    # Signature: everything that fixes array shapes and row layout.
    signature = (
        len(token_ids),
        prompt_len,
        tuple(image_rows),
        tuple(f.shape for f in ref_feats),
        tuple(f.shape for f in test_feats),
    )
    return FlatSample(
        token_ids=np.asarray(token_ids, dtype=np.int64),
        resp_mask=mask,
        image_rows=tuple(image_rows),
        ref_feats=ref_feats,
        test_feats=test_feats,
        signature=signature,
    )


def _batch_ce_and_grad(
    logits: np.ndarray, targets: np.ndarray, mask: np.ndarray, loss_scale: float
) -> tuple[float, np.ndarray]:
    """Summed per-sample masked-mean NLL over a group; gradient pre-scaled.

    ``logits`` (B, T, V); ``targets`` (B, T); ``mask`` (T,) — identical across
    the group by construction.
    """
    rows = logits[:, mask]
    ids = targets[:, mask]
    b, r, v = rows.shape
    shifted = rows - rows.max(axis=-1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=-1))
    picked = np.take_along_axis(shifted, ids[..., None], axis=-1)[..., 0]
    loss_sum = float((logz - picked).sum() / r)
    if not np.isfinite(loss_sum):
        raise NumericError("training loss became non-finite")
    probs = np.exp(shifted - logz[..., None])
    drows = probs
    drows[np.arange(b)[:, None], np.arange(r)[None, :], ids] -= 1.0
    drows *= loss_scale / r
    dlogits = np.zeros_like(logits)
    dlogits[:, mask] = drows
    return loss_sum, dlogits


def group_loss_and_grad(
    params: Mapping[str, np.ndarray],
    idf_config: IDFormerConfig,
    lm_config: TinyLMConfig,
    flats: Sequence[FlatSample],
    loss_scale: float,
    ablate_modulate: bool = False,
) -> tuple[float, dict[str, np.ndarray]]:
    """One dense pass over same-signature samples.

    Returns the *summed* loss over the group and gradients of
    ``loss_scale * summed_loss``.
    """
    idf_params, lm_params = split_params(params)
    first = flats[0]
    n_refs = len(first.ref_feats)
    tokens = np.stack([f.token_ids for f in flats])
    mask = first.resp_mask

    ref_blocks, ref_caches = [], []
    for k in range(n_refs):
        feats = np.stack([f.ref_feats[k] for f in flats])
        out, cache = idformer.compress_batch(idf_params, idf_config, feats)
        ref_blocks.append(out)
        ref_caches.append(cache)
    stacked_ids = np.stack(ref_blocks, axis=1) if ref_blocks else None

    test_blocks, test_caches, mod_caches = [], [], []
    for m in range(len(first.test_feats)):
        feats = np.stack([f.test_feats[m] for f in flats])
        out, cache = idformer.compress_batch(idf_params, idf_config, feats)
        test_caches.append(cache)
        if ablate_modulate:
            test_blocks.append(out)
            mod_caches.append(None)
        else:
            blk, mcache = idformer.modulate_batch(
                idf_params, idf_config, out, stacked_ids
            )
            test_blocks.append(blk)
            mod_caches.append(mcache)
    blocks = ref_blocks + test_blocks

    tok_emb = lm_params["tok_emb"]
    b, length = tokens.shape
    emb = np.zeros((b, length, lm_config.d_model))
    text = tokens >= 0
    emb[text] = tok_emb[tokens[text]]
    for index, start, n in first.image_rows:
        emb[:, start : start + n] = blocks[index]

    logits, lm_cache = lm_forward_batch(lm_params, lm_config, emb[:, :-1])
    loss_sum, dlogits = _batch_ce_and_grad(
        logits, tokens[:, 1:], mask[1:], loss_scale
    )

    dinputs, lm_grads = lm_backward_batch(lm_params, lm_config, lm_cache, dlogits)
    d_rows = np.zeros_like(emb)
    d_rows[:, :-1] = dinputs

    demb = np.zeros_like(tok_emb)
    np.add.at(demb, tokens[text], d_rows[text])
    lm_grads["tok_emb"] = demb

    grads: dict[str, np.ndarray] = {}
    d_id_blocks = (
        np.zeros((b, n_refs, idf_config.n_queries, idf_config.d_model))
        if n_refs
        else None
    )
    for m in range(len(first.test_feats)):
        _, start, n = next(row for row in first.image_rows if row[0] == n_refs + m)
        dtest = d_rows[:, start : start + n]
        if ablate_modulate:
            d_compressed = dtest
        else:
            d_compressed, d_ids = idformer.modulate_batch_bwd(
                mod_caches[m], dtest, grads
            )
            if d_ids is not None:
                d_id_blocks += d_ids
        idformer.compress_batch_bwd(test_caches[m], d_compressed, grads)
    for k in range(n_refs):
        _, start, n = next(row for row in first.image_rows if row[0] == k)
        dref = d_rows[:, start : start + n]
        if d_id_blocks is not None:
            dref = dref + d_id_blocks[:, k]
        idformer.compress_batch_bwd(ref_caches[k], dref, grads)

    merged = {"idf." + k: v for k, v in grads.items()}
    merged.update(("lm." + k, v) for k, v in lm_grads.items())
    return loss_sum, merged


def _accumulate(total: dict[str, np.ndarray], part: Mapping[str, np.ndarray]) -> None:
    for name, value in part.items():
        if name in total:
            total[name] = total[name] + value
        else:
            total[name] = value


def run_stage(
    params: dict[str, np.ndarray],
    idf_config: IDFormerConfig,
    lm_config: TinyLMConfig,
    samples: Sequence[InterleavedSample],
    epochs: int,
    rate: float,
    batch_size: int,
    rng: np.random.Generator,
    ablate_modulate: bool = False,
    momentum: float = 0.0,
    trainable: tuple[str, ...] | None = None,
) -> tuple[dict[str, np.ndarray], list[float]]:
    """Train over one stage's data; returns updated params and per-epoch mean loss.

    ``trainable`` restricts updates to parameters whose name starts with one
    of the given prefixes (e.g. ``("idf.",)`` adapts the projector against a
    frozen decoder); None trains everything.
    """
    flats = [flatten_sample(s, idf_config.n_queries) for s in samples]
    losses = []
    velocity: dict[str, np.ndarray] = {}
    for _ in range(epochs):
        order = rng.permutation(len(flats))
        epoch_loss = 0.0
        for lo in range(0, len(order), batch_size):
            batch = order[lo : lo + batch_size]
            by_sig: dict[tuple, list[FlatSample]] = {}
            for i in batch:
                by_sig.setdefault(flats[i].signature, []).append(flats[i])
            grads: dict[str, np.ndarray] = {}
            for sig in sorted(by_sig, key=repr):
                loss_sum, g = group_loss_and_grad(
                    params,
                    idf_config,
                    lm_config,
                    by_sig[sig],
                    loss_scale=1.0 / len(batch),
                    ablate_modulate=ablate_modulate,
                )
                epoch_loss += loss_sum
                _accumulate(grads, g)
            if trainable is not None:
                grads = {
                    name: g
                    for name, g in grads.items()
                    if name.startswith(trainable)
                }
            if momentum > 0.0:
                for name, g in grads.items():
                    prev = velocity.get(name)
                    velocity[name] = g if prev is None else momentum * prev + g
                grads = velocity
            params = nm.optimizer_step(params, grads, rate)
        losses.append(epoch_loss / len(flats))
    return params, losses


def train_dual_stage(
    params: dict[str, np.ndarray],
    idf_config: IDFormerConfig,
    lm_config: TinyLMConfig,
    vocab: Vocab,
    stage1_samples: Sequence[InterleavedSample],
    stage2_samples: Sequence[InterleavedSample],
    schedule: TrainSchedule,
    ablate_modulate: bool = False,
    skip_stage: int | None = None,
) -> tuple[dict[str, np.ndarray], list[tuple[int, int, float]]]:
    """Both stages in sequence; ``skip_stage`` drops stage 1 or 2 entirely.

    Returns updated params and a loss curve of (stage, epoch, mean_loss) rows.
    """
    schedule.validate()
    if skip_stage not in (None, *TRAIN_STAGES):
        raise ConfigError(f"skip_stage must be None, 1 or 2, got {skip_stage!r}")
    del vocab  # reserved for schedule-dependent curricula; not needed today
    curves: list[tuple[int, int, float]] = []
    plan = [
        (1, stage1_samples, schedule.stage1_epochs, schedule.stage1_rate),
        (2, stage2_samples, schedule.stage2_epochs, schedule.stage2_rate),
    ]
    for stage, samples, epochs, rate in plan:
        if stage == skip_stage or epochs == 0:
            continue
        if not samples:
            raise ConfigError(f"stage {stage} has no samples and is not skipped")
        rng = np.random.default_rng(np.random.SeedSequence([schedule.seed, stage]))
        params, losses = run_stage(
            params,
            idf_config,
            lm_config,
            samples,
            epochs,
            rate,
            schedule.batch_size,
            rng,
            ablate_modulate=ablate_modulate,
            momentum=schedule.momentum,
        )
        curves.extend((stage, e, loss) for e, loss in enumerate(losses))
    return params, curves


def curves_to_csv(curves: Sequence[tuple[int, int, float]]) -> str:
    lines = ["stage,epoch,mean_loss"]
    lines += [f"{s},{e},{v:.10f}" for s, e, v in curves]
    return "\n".join(lines) + "\n"
