"""Composed projector + decoder: one loss, one merged gradient bundle.

Parameter names carry an ``idf.`` or ``lm.`` prefix so a single checkpoint and
a single optimizer step cover both halves.
"""

from __future__ import annotations

from typing import Mapping

import numpy as np

from .. import idformer, numerics as nm
from ..errors import DimensionError
from ..idformer import IDFormerConfig
from .assembly import AssembledSample, splice_sequence
from .dataset import InterleavedSample
from .lm import TinyLMConfig, lm_backward_batch, lm_forward_batch
from .vocab import Vocab


def split_params(
    params: Mapping[str, np.ndarray],
) -> tuple[dict[str, np.ndarray], dict[str, np.ndarray]]:
    idf_params: dict[str, np.ndarray] = {}
    lm_params: dict[str, np.ndarray] = {}
    for name, value in params.items():
        if name.startswith("idf."):
            idf_params[name[4:]] = value
        elif name.startswith("lm."):
            lm_params[name[3:]] = value
        else:
            raise DimensionError(f"parameter {name!r} lacks an idf./lm. prefix")
    return idf_params, lm_params


def init_composed_params(
    idf_config: IDFormerConfig,
    lm_config: TinyLMConfig,
    seed: int,
) -> dict[str, np.ndarray]:
    from .lm import init_lm_params

    merged = {
        "idf." + k: v for k, v in idformer.init_params(idf_config, seed).items()
    }
    merged.update(
        ("lm." + k, v) for k, v in init_lm_params(lm_config, seed + 1).items()
    )
    reserved = lm_config.reserved_pos_dims() + lm_config.reserved_lex_dims()
    if reserved:
        # The decoder reserves trailing slices of the residual stream for
        # position and token identity; start the projector's output norms at
        # zero there so spliced image rows enter those channels clean.
        for key in ("idf.norm1.gamma", "idf.norm2.gamma"):
            gamma = merged[key].copy()
            gamma[lm_config.d_model - reserved :] = 0.0
            merged[key] = gamma
    return merged


def ce_grad(logits: np.ndarray, targets: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """d loss / d logits for the masked mean NLL; zero rows off the mask."""
    probs = nm.softmax_rows(logits)
    dlogits = np.zeros_like(probs)
    idx = np.flatnonzero(mask)
    dlogits[idx] = probs[idx]
    dlogits[idx, targets[idx].astype(np.int64)] -= 1.0
    dlogits[idx] /= idx.size
    return dlogits


def sample_loss_and_grad(
    params: Mapping[str, np.ndarray],
    idf_config: IDFormerConfig,
    lm_config: TinyLMConfig,
    vocab: Vocab,
    sample: InterleavedSample,
    ablate_modulate: bool = False,
    want_grads: bool = True,
    freeze: tuple[str, ...] = (),
):
    """Loss (and merged gradients) of the decoder on one interleaved sample.

    The decoder consumes every row but the last and is supervised on rows whose
    *target* is a response token.
    """
    idf_params, lm_params = split_params(params)
    blocks, idf_cache = idformer.forward(
        idf_params,
        idf_config,
        [ref.feats for ref in sample.id_refs],
        list(sample.test_feats),
        want_cache=True,
        ablate_modulate=ablate_modulate,
    )
    assembled = splice_sequence(sample, blocks, lm_params["tok_emb"])
    inputs = assembled.embeddings[:-1]
    targets = assembled.token_ids[1:]
    mask = assembled.resp_mask[1:]
    logits, lm_cache = lm_forward_batch(lm_params, lm_config, inputs[None])
    loss = nm.cross_entropy_next_token(logits[0], targets, mask)
    if not want_grads:
        return loss

    dlogits = ce_grad(logits[0], targets, mask)
    dinputs, lm_grads = lm_backward_batch(lm_params, lm_config, lm_cache, dlogits[None])
    d_rows = np.zeros_like(assembled.embeddings)
    d_rows[:-1] = dinputs[0]

    demb = np.zeros_like(lm_params["tok_emb"])
    text = assembled.token_ids >= 0
    np.add.at(demb, assembled.token_ids[text], d_rows[text])
    lm_grads["tok_emb"] = demb

    upstream = [np.zeros_like(block) for block in blocks]
    for index, start, n_rows in assembled.image_rows:
        upstream[index] += d_rows[start : start + n_rows]
    idf_freeze = tuple(n[4:] for n in freeze if n.startswith("idf."))
    idf_grads = idformer.backward(idf_params, idf_cache, upstream, freeze=idf_freeze)

    merged = {"idf." + k: v for k, v in idf_grads.items()}
    merged.update(("lm." + k, v) for k, v in lm_grads.items())
    for name in freeze:
        merged.pop(name, None)
    return loss, merged


def greedy_decode(
    params: Mapping[str, np.ndarray],
    idf_config: IDFormerConfig,
    lm_config: TinyLMConfig,
    vocab: Vocab,
    sample: InterleavedSample,
    max_new: int = 16,
    ablate_modulate: bool = False,
) -> list[int]:
    """Greedy continuation of the sample's prompt; stops at the end marker."""
    idf_params, lm_params = split_params(params)
    blocks = idformer.forward(
        idf_params,
        idf_config,
        [ref.feats for ref in sample.id_refs],
        list(sample.test_feats),
        ablate_modulate=ablate_modulate,
    )
    assembled = splice_sequence(sample, blocks, lm_params["tok_emb"])
    prompt_len = int((~assembled.resp_mask).sum())
    rows = assembled.embeddings[:prompt_len]
    out: list[int] = []
    for _ in range(max_new):
        if rows.shape[0] > lm_config.max_seq:
            break
        logits, _ = lm_forward_batch(lm_params, lm_config, rows[None])
        nxt = int(np.argmax(logits[0, -1]))
        if nxt == vocab.eot_id:
            break
        out.append(nxt)
        rows = np.concatenate([rows, lm_params["tok_emb"][nxt][None]], axis=0)
    return out
