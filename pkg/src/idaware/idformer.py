"""Two-stage cross-attention image projector.

Stage one (*compress*) lets a learnable query bank attend over an image's
projected patch features, turning any number of patches into a fixed block of
``n_queries`` tokens of width ``d_model``.  Stage two (*modulate*) attends the
test-image token block over the concatenation of all reference-image token
blocks and folds the result back in residually, so test tokens arrive at the
language model already aligned with the identities they should be compared to.

All math is float64 with hand-written backward passes; gradients are verified
against central differences in the test suite.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import CapacityError, ConfigError, DimensionError
from .layers import (
    accumulate,
    attention_bwd,
    attention_fwd,
    init_linear,
    layernorm_bwd,
    layernorm_fwd,
    linear_bwd,
    linear_fwd,
)
from .numerics import GradientBundle

MODULATION_MODES = ("test_as_query", "id_as_query")


@dataclass(frozen=True)
class IDFormerConfig:
    """Shape/behavior knobs for the projector.

    ``max_images`` bounds the combined reference + test image count accepted by
    a single forward pass.
    """

    n_queries: int = 4
    d_model: int = 64
    d_visual: int = 16
    n_heads: int = 1
    modulation_mode: str = "test_as_query"
    max_images: int = 8
    # Attention gain of the modulation stage's reference-copier start (its
    # wq = wk = copier_gain * I).  Higher values sharpen the initial
    # test-to-reference matching; too low and modulation starts by blurring
    # every reference into every test token.
    copier_gain: float = 0.5

    def validate(self) -> "IDFormerConfig":
        if self.n_queries < 1:
            raise ConfigError(f"n_queries must be >= 1, got {self.n_queries}")
        if self.copier_gain < 0:
            raise ConfigError(f"copier_gain must be >= 0, got {self.copier_gain}")
        if self.d_model < 1 or self.d_visual < 1:
            raise ConfigError(
                f"d_model/d_visual must be positive, got {self.d_model}/{self.d_visual}"
            )
        if self.n_heads < 1 or self.d_model % self.n_heads:
            raise ConfigError(
                f"n_heads must divide d_model, got n_heads={self.n_heads} d_model={self.d_model}"
            )
        if self.modulation_mode not in MODULATION_MODES:
            raise ConfigError(
                f"modulation_mode must be one of {MODULATION_MODES}, got {self.modulation_mode!r}"
            )
        if self.max_images < 1:
            raise ConfigError(f"max_images must be >= 1, got {self.max_images}")
        return self


def init_params(config: IDFormerConfig, seed: int) -> GradientBundle:
    """Fresh parameter store: query bank is 0.02-scaled Gaussian, linear maps
    are scaled-uniform with bound 1/sqrt(fan_in), norms start as identity."""
    config.validate()
    rng = np.random.default_rng(seed)
    d, dv = config.d_model, config.d_visual
    params: GradientBundle = {}
    params["query_bank"] = rng.standard_normal((config.n_queries, d)) * 0.02
    init_linear(rng, params, "in_proj", d, dv)
    for block in ("attn1", "attn2"):
        for name in ("wq", "wk", "wv", "wo"):
            # Key maps carry no bias: attention logits are invariant to a
            # per-row constant shift, so a key bias would be untrainable.
            init_linear(rng, params, f"{block}.{name}", d, d, bias=name != "wk")
    # The modulation stage starts as a soft reference-copier rather than a
    # random mixer: with wq == wk == alpha * I the attention scores reduce to
    # scaled dot products (test tokens attend to the reference tokens they
    # already resemble), and with wv == wo == I the winning reference token is
    # injected verbatim — in the same basis as the spliced reference rows, so
    # downstream matching is plain vector similarity.  Training only has to
    # refine the mechanism, not discover it.
    alpha = config.copier_gain
    params["attn2.wq.w"] = np.eye(d) * alpha
    params["attn2.wk.w"] = np.eye(d) * alpha
    params["attn2.wv.w"] = np.eye(d)
    params["attn2.wo.w"] = np.eye(d)
    for norm in ("norm1", "norm2"):
        params[f"{norm}.gamma"] = np.ones(d)
        params[f"{norm}.beta"] = np.zeros(d)
    return params


def _check_patches(config: IDFormerConfig, feats: np.ndarray, what: str) -> np.ndarray:
    arr = np.asarray(feats, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] < 1:
        raise DimensionError(f"{what} must be (n_patches, d_visual), got {arr.shape}")
    if arr.shape[1] != config.d_visual:
        raise DimensionError(
            f"{what} width {arr.shape[1]} != configured d_visual {config.d_visual}"
        )
    return arr


def compress_batch(
    params: Mapping[str, np.ndarray],
    config: IDFormerConfig,
    feats: np.ndarray,
) -> tuple[np.ndarray, dict]:
    """Compress a batch of same-shape images: (B, P, d_visual) -> (B, n_queries, d_model)."""
    b = feats.shape[0]
    kv0, c_proj = linear_fwd(feats, params, "in_proj")
    q_in = np.broadcast_to(params["query_bank"], (b, config.n_queries, config.d_model))
    attn_out, c_attn = attention_fwd(q_in, kv0, params, "attn1.", config.n_heads)
    out, c_norm = layernorm_fwd(attn_out, params, "norm1")
    return out, {"proj": c_proj, "attn": c_attn, "norm": c_norm}


def compress_batch_bwd(
    cache: dict, dout: np.ndarray, grads: GradientBundle
) -> np.ndarray:
    """Backward of :func:`compress_batch`; returns gradient w.r.t. patch features."""
    dattn = layernorm_bwd(cache["norm"], dout, grads)
    dq_in, dkv0 = attention_bwd(cache["attn"], dattn, grads)
    accumulate(grads, "query_bank", dq_in.sum(axis=0))
    return linear_bwd(cache["proj"], dkv0, grads)


def modulate_batch(
    params: Mapping[str, np.ndarray],
    config: IDFormerConfig,
    test_tokens: np.ndarray,
    id_tokens: np.ndarray | None,
) -> tuple[np.ndarray, dict]:
    """Modulate test token blocks against reference token blocks.

    ``test_tokens`` is (B, n_queries, d_model); ``id_tokens`` is
    (B, K, n_queries, d_model) or None/empty for the pass-through case, which
    reduces to the residual norm of the unmodified test tokens.
    """
    b, nq, d = test_tokens.shape
    empty = id_tokens is None or id_tokens.shape[1] == 0
    if empty:
        out, c_norm = layernorm_fwd(test_tokens, params, "norm2")
        return out, {"mode": "empty", "norm": c_norm}
    k = id_tokens.shape[1]
    flat_ids = id_tokens.reshape(b, k * nq, d)
    if config.modulation_mode == "test_as_query":
        attn_out, c_attn = attention_fwd(
            test_tokens, flat_ids, params, "attn2.", config.n_heads
        )
        out, c_norm = layernorm_fwd(test_tokens + attn_out, params, "norm2")
        return out, {"mode": "test_as_query", "attn": c_attn, "norm": c_norm, "k": k}
    # id_as_query: reference tokens query the test block, then their outputs are
    # mean-pooled across images back onto the test positions.
    attn_out, c_attn = attention_fwd(
        flat_ids, test_tokens, params, "attn2.", config.n_heads
    )
    pooled = attn_out.reshape(b, k, nq, d).mean(axis=1)
    out, c_norm = layernorm_fwd(test_tokens + pooled, params, "norm2")
    return out, {"mode": "id_as_query", "attn": c_attn, "norm": c_norm, "k": k}


def modulate_batch_bwd(
    cache: dict, dout: np.ndarray, grads: GradientBundle
) -> tuple[np.ndarray, np.ndarray | None]:
    """Backward of :func:`modulate_batch`.

    Returns ``(d test_tokens, d id_tokens)`` with the latter shaped
    (B, K, n_queries, d_model), or None in the pass-through case.
    """
    dres = layernorm_bwd(cache["norm"], dout, grads)
    if cache["mode"] == "empty":
        return dres, None
    k = cache["k"]
    if cache["mode"] == "test_as_query":
        dtest_q, dflat_ids = attention_bwd(cache["attn"], dres, grads)
        dtest = dres + dtest_q
        b, _, d = dtest.shape
        return dtest, dflat_ids.reshape(b, k, -1, d)
    b, nq, d = dres.shape
    dpooled = np.broadcast_to(dres[:, None, :, :] / k, (b, k, nq, d))
    dflat_q, dtest_kv = attention_bwd(
        cache["attn"], dpooled.reshape(b, k * nq, d), grads
    )
    return dres + dtest_kv, dflat_q.reshape(b, k, nq, d)


def compress(
    params: Mapping[str, np.ndarray],
    config: IDFormerConfig,
    feats: np.ndarray,
) -> np.ndarray:
    """Single-image compression: (n_patches, d_visual) -> (n_queries, d_model)."""
    arr = _check_patches(config, feats, "patch features")
    out, _ = compress_batch(params, config, arr[None])
    return out[0]


def modulate(
    params: Mapping[str, np.ndarray],
    config: IDFormerConfig,
    test_tokens: np.ndarray,
    id_tokens: Sequence[np.ndarray],
) -> np.ndarray:
    """Single test block modulated against a list of reference blocks."""
    test = np.asarray(test_tokens, dtype=np.float64)
    expected = (config.n_queries, config.d_model)
    if test.shape != expected:
        raise DimensionError(f"test tokens shape {test.shape} != {expected}")
    ids = None
    if len(id_tokens):
        stacked = np.stack([np.asarray(t, dtype=np.float64) for t in id_tokens])
        if stacked.shape[1:] != expected:
            raise DimensionError(
                f"reference token blocks shape {stacked.shape[1:]} != {expected}"
            )
        ids = stacked[None]
    out, _ = modulate_batch(params, config, test[None], ids)
    return out[0]


def forward(
    params: Mapping[str, np.ndarray],
    config: IDFormerConfig,
    id_feats: Sequence[np.ndarray],
    test_feats: Sequence[np.ndarray],
    want_cache: bool = False,
    ablate_modulate: bool = False,
):
    """Full pass over one sample's images.

    Returns token blocks for every reference image (compressed) followed by
    every test image (compressed then modulated against all references), each
    (n_queries, d_model).  With ``ablate_modulate`` the modulation stage is an
    identity pass-through and test outputs are the bare compressed blocks.
    """
    config.validate()
    total = len(id_feats) + len(test_feats)
    if total > config.max_images:
        raise CapacityError(
            f"{total} images exceed the supported maximum of {config.max_images}"
        )
    id_caches, id_out = [], []
    for i, feats in enumerate(id_feats):
        arr = _check_patches(config, feats, f"reference image {i}")
        out, cache = compress_batch(params, config, arr[None])
        id_out.append(out[0])
        id_caches.append(cache)
    stacked_ids = np.stack(id_out)[None] if id_out else None
    test_caches, mod_caches, test_out = [], [], []
    for j, feats in enumerate(test_feats):
        arr = _check_patches(config, feats, f"test image {j}")
        out, cache = compress_batch(params, config, arr[None])
        test_caches.append(cache)
        if ablate_modulate:
            test_out.append(out[0])
            mod_caches.append(None)
        else:
            mod, mcache = modulate_batch(params, config, out, stacked_ids)
            test_out.append(mod[0])
            mod_caches.append(mcache)
    outputs = id_out + test_out
    if not want_cache:
        return outputs
    cache = {
        "config": config,
        "n_ids": len(id_feats),
        "n_tests": len(test_feats),
        "id_caches": id_caches,
        "test_caches": test_caches,
        "mod_caches": mod_caches,
        "ablate": ablate_modulate,
    }
    return outputs, cache


def backward(
    params: Mapping[str, np.ndarray],
    cache: dict | None,
    upstream: Sequence[np.ndarray],
    freeze: Iterable[str] = (),
) -> GradientBundle:
    """Gradients for every parameter given upstream gradients per output block.

    ``upstream`` aligns with :func:`forward`'s output order (references first,
    then tests).  ``freeze`` drops parameter groups by name prefix.
    """
    if cache is None:
        raise ValueError("backward requires the cache from forward(want_cache=True)")
    n_ids, n_tests = cache["n_ids"], cache["n_tests"]
    if len(upstream) != n_ids + n_tests:
        raise DimensionError(
            f"expected {n_ids + n_tests} upstream gradients, got {len(upstream)}"
        )
    grads: GradientBundle = {}
    d_id_out = [np.asarray(upstream[i], dtype=np.float64).copy() for i in range(n_ids)]
    for j in range(n_tests):
        dout = np.asarray(upstream[n_ids + j], dtype=np.float64)
        if cache["ablate"]:
            d_compressed = dout[None]
        else:
            d_compressed, d_ids = modulate_batch_bwd(
                cache["mod_caches"][j], dout[None], grads
            )
            if d_ids is not None:
                for i in range(n_ids):
                    d_id_out[i] += d_ids[0, i]
        compress_batch_bwd(cache["test_caches"][j], d_compressed, grads)
    for i in range(n_ids):
        compress_batch_bwd(cache["id_caches"][i], d_id_out[i][None], grads)
    frozen = tuple(freeze)
    if frozen:
        grads = {
            name: g
            for name, g in grads.items()
            if not any(name == p or name.startswith(p.rstrip(".") + ".") for p in frozen)
        }
    return grads
