"""Tiny causal decoder: embeddings in, next-token logits out.

Pre-norm blocks (causal self-attention + tanh feed-forward), a final norm, and
a bias-free output projection.  The embedding table is exposed because sample
assembly splices image token blocks in between embedded text rows.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from ..errors import ConfigError, DimensionError
from ..layers import (
    attention_bwd,
    attention_fwd,
    ff_bwd,
    ff_fwd,
    init_linear,
    layernorm_bwd,
    layernorm_fwd,
    linear_bwd,
    linear_fwd,
)
from ..numerics import GradientBundle


@dataclass(frozen=True)
class TinyLMConfig:
    vocab_size: int
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 1
    d_ff: int = 128
    max_seq: int = 64
    # Structural initialisation knobs.  At desk scale the model trains for
    # only a few hundred steps of plain descent, so retrieval machinery that
    # a large run would discover on its own has to be reachable from the
    # start.  The residual stream is laid out as three channels — content
    # (leading dims, where spliced image rows live), a lexical slice
    # (lex_dims, where token identity lives), and a positional slice
    # (pos_dims, sinusoidal with a small base so the offset kernel
    # concentrates on nearby rows).  When the slices each fill exactly one
    # head (and there are at least three heads), attention starts wired.
    # All heads but the last read an offset kernel (query position code
    # rotated back, keys verbatim) and copy their own residual slice from
    # the rows they read: content-slice heads look window_offset back, so a
    # row absorbs the image content just behind it, while the lexical-slice
    # head reads a band of offsets (lex_offset .. lex_offset + lex_band - 1)
    # spanning a caption's image block, so every row of the block picks up
    # the name written just before it, scaled by carry_gain.  The
    # last head, wired only in the final layer, starts as a matcher: queries
    # and keys compare content (through a fixed random sketch, gain
    # match_gain, plus an opposed-sign positional term of gain
    # match_repulsion that pushes it off itself and its neighbours), and its
    # value path delivers the lexical slice of whatever it attends.  The
    # lexical channel is split into a write half, where token embeddings
    # live and which only the anchor hop reads, and a read half, which only
    # deliveries land in and which is all the output projection sees.  A
    # row's own token can therefore never reach the logits from the
    # prediction position — everything the readout sees arrived over an
    # attention hop — and matching noise can dilute the delivered signal but
    # never vote for a wrong token.  On layouts that don't fit (tiny test
    # models), initialisation falls back to plain content matching: wq = wk
    # = attn_alpha * I and, when attn_copy is set, wv = wo = I.
    emb_scale: float = 1.0
    attn_alpha: float = 0.25
    attn_copy: bool = True
    pos_dims: int = 16
    lex_dims: int = 16
    pos_base: float = 30.0
    pos_scale: float = 1.0
    window_gain: float = 2.0
    window_offset: float = 3.0
    lex_offset: float = 2.0
    lex_band: int = 4
    carry_gain: float = 2.0
    match_gain: float = 2.0
    match_repulsion: float = 3.0

    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    def structured(self) -> bool:
        """Whether the channelled head wiring applies to this layout."""
        return (
            self.n_heads >= 3
            and self.pos_dims == self.lex_dims == self.head_dim()
            and self.window_gain > 0
        )

    def reserved_pos_dims(self) -> int:
        """Effective width of the positional slice (even, fits one head)."""
        if self.structured():
            return self.pos_dims
        cap = min(self.head_dim(), self.d_model // 4)
        return min(self.pos_dims, cap - cap % 2)

    def reserved_lex_dims(self) -> int:
        """Effective width of the lexical slice (zero unless structured)."""
        return self.lex_dims if self.structured() else 0

    def validate(self) -> "TinyLMConfig":
        if self.vocab_size < 2:
            raise ConfigError("vocab_size must be at least 2")
        if self.n_layers < 1:
            raise ConfigError("n_layers must be positive")
        if self.n_heads < 1 or self.d_model % self.n_heads:
            raise ConfigError(
                f"n_heads must divide d_model ({self.n_heads} vs {self.d_model})"
            )
        if self.max_seq < 2:
            raise ConfigError("max_seq must be at least 2")
        if self.emb_scale <= 0:
            raise ConfigError("emb_scale must be positive")
        if self.attn_alpha < 0:
            raise ConfigError("attn_alpha must be non-negative")
        if self.pos_dims < 0 or self.pos_dims % 2:
            raise ConfigError("pos_dims must be an even non-negative int")
        if self.lex_dims < 0:
            raise ConfigError("lex_dims must be non-negative")
        if self.pos_base <= 1:
            raise ConfigError("pos_base must exceed 1")
        if self.pos_scale <= 0:
            raise ConfigError("pos_scale must be positive")
        for field in ("window_gain", "carry_gain", "match_gain", "match_repulsion"):
            if getattr(self, field) < 0:
                raise ConfigError(f"{field} must be non-negative")
        if self.lex_band < 1:
            raise ConfigError("lex_band must be at least 1")
        return self


def sinusoidal_positions(
    n: int, d: int, scale: float = 1.0, base: float = 10000.0
) -> np.ndarray:
    """Classic fixed sin/cos position code; even columns sine, odd cosine."""
    pos = np.arange(n, dtype=np.float64)[:, None]
    i = np.arange(d, dtype=np.float64)[None, :]
    angle = pos / np.power(base, 2.0 * (i // 2) / d)
    table = np.where(i % 2 == 0, np.sin(angle), np.cos(angle))
    return table * scale


def position_shift(d: int, offset: float, base: float = 10000.0) -> np.ndarray:
    """Linear map R with R @ pos(p) == pos(p - offset) for sinusoidal codes.

    Block-diagonal: each sin/cos frequency pair is rotated by offset * its
    angular rate.
    """
    rot = np.zeros((d, d))
    for pair in range(d // 2):
        theta = offset / np.power(base, 2.0 * pair / d)
        c, s = np.cos(theta), np.sin(theta)
        j = 2 * pair
        rot[j, j] = c
        rot[j, j + 1] = -s
        rot[j + 1, j] = s
        rot[j + 1, j + 1] = c
    return rot


def init_lm_params(config: TinyLMConfig, seed: int) -> GradientBundle:
    config.validate()
    rng = np.random.default_rng(seed)
    d = config.d_model
    dp = config.reserved_pos_dims()
    dl = config.reserved_lex_dims()
    pos_at = d - dp
    lex_at = pos_at - dl
    tok_emb = rng.standard_normal((config.vocab_size, d)) * config.emb_scale
    if dp:
        tok_emb[:, pos_at:] = 0.0
        pos_emb = np.zeros((config.max_seq, d))
        pos_emb[:, pos_at:] = sinusoidal_positions(
            config.max_seq, dp, config.pos_scale, config.pos_base
        )
    else:
        pos_emb = sinusoidal_positions(
            config.max_seq, d, config.pos_scale, config.pos_base
        )
    structured = config.structured()
    if structured:
        dh = config.head_dim()
        rep = dh // 2
        half = dl // 2
        lex_in = slice(lex_at, lex_at + half)
        lex_out = slice(lex_at + half, pos_at)
        tok_emb[:, lex_out] = 0.0
        # Fixed random sketch of the content channel for the match head.  The
        # 1/sqrt(width) scale keeps sketched dot products an unbiased,
        # (dh - rep)/width -sized estimate of the raw content dot product.
        sketch = rng.standard_normal((dh - rep, lex_at)) / np.sqrt(lex_at)
        shift = position_shift(dp, config.window_offset, config.pos_base)
        lex_shift = sum(
            position_shift(dp, config.lex_offset + k, config.pos_base)
            for k in range(config.lex_band)
        ) / config.lex_band
    params: GradientBundle = {"tok_emb": tok_emb, "pos_emb": pos_emb}
    for i in range(config.n_layers):
        p = f"block{i}."
        params[p + "ln1.gamma"] = np.ones(d)
        params[p + "ln1.beta"] = np.zeros(d)
        for name in ("wq", "wk", "wv", "wo"):
            init_linear(rng, params, p + "attn." + name, d, d, bias=name != "wk")
        if structured:
            # Channelled wiring (see the config docstring).  Window heads are
            # wired in every layer; the matcher only in the last, where the
            # content it compares has already been absorbed — earlier layers
            # leave that head silent rather than moving lexical noise around.
            wq = np.zeros((d, d))
            wk = np.zeros((d, d))
            wv = np.zeros((d, d))
            wo = np.zeros((d, d))
            m = config.n_heads - 1
            for h in range(m):
                r = slice(h * dh, (h + 1) * dh)
                rot = lex_shift if h == m - 1 else shift
                wq[r, pos_at:] = rot * config.window_gain
                wk[r, pos_at:] = np.eye(dp) * config.window_gain
                if h == m - 1:
                    carry = slice(h * dh, h * dh + half)
                    wv[carry, lex_in] = np.eye(half) * config.carry_gain
                    wo[lex_out, carry] = np.eye(half)
                else:
                    wv[r, r] = np.eye(dh)
                    wo[r, r] = np.eye(dh)
            if i == config.n_layers - 1:
                top = slice(m * dh, m * dh + dh - rep)
                wq[top, :lex_at] = sketch * config.match_gain
                wk[top, :lex_at] = sketch * config.match_gain
                low = slice(m * dh + dh - rep, d)
                near = slice(pos_at, pos_at + rep)
                wq[low, near] = -np.eye(rep) * config.match_repulsion
                wk[low, near] = np.eye(rep) * config.match_repulsion
                carry = slice(m * dh, m * dh + half)
                wv[carry, lex_out] = np.eye(half) * config.carry_gain
                wo[lex_out, carry] = np.eye(half)
            for name, w in (("wq", wq), ("wk", wk), ("wv", wv), ("wo", wo)):
                params[p + "attn." + name + ".w"] = w
        else:
            if config.attn_alpha > 0:
                params[p + "attn.wq.w"] = np.eye(d) * config.attn_alpha
                params[p + "attn.wk.w"] = np.eye(d) * config.attn_alpha
            if config.attn_copy:
                params[p + "attn.wv.w"] = np.eye(d)
                params[p + "attn.wo.w"] = np.eye(d)
        params[p + "ln2.gamma"] = np.ones(d)
        params[p + "ln2.beta"] = np.zeros(d)
        init_linear(rng, params, p + "ff.w1", config.d_ff, d)
        init_linear(rng, params, p + "ff.w2", d, config.d_ff)
        if dp:
            # Keep the reserved channels clean at init: the feed-forward path
            # may read them but starts out not writing over them.
            w2 = params[p + "ff.w2.w"].copy()
            w2[lex_at if structured else pos_at :, :] = 0.0
            params[p + "ff.w2.w"] = w2
    params["final_norm.gamma"] = np.ones(d)
    params["final_norm.beta"] = np.zeros(d)
    init_linear(rng, params, "out_proj", config.vocab_size, d, bias=False)
    # Start decoding against the embedding table (logits = x @ tok_emb.T) so
    # content copied into the residual stream immediately surfaces as that
    # token's logit.  With the split lexical channel, read only the delivery
    # half — scored against each token's write-half code — so neither image
    # content nor the predicting row's own token can sway the scores.  The
    # 1/sqrt(d) factor keeps initial logits O(1) after the final layer norm.
    out = np.zeros_like(tok_emb)
    if structured:
        out[:, lex_out] = tok_emb[:, lex_in]
    else:
        out[:, :] = tok_emb
    params["out_proj.w"] = out / np.sqrt(d)
    return params


def lm_forward_batch(
    params: Mapping[str, np.ndarray], config: TinyLMConfig, embeddings: np.ndarray
) -> tuple[np.ndarray, dict]:
    """(B, T, d_model) embedded rows -> (B, T, vocab) logits plus cache."""
    b, t, d = embeddings.shape
    if d != config.d_model:
        raise DimensionError(f"embedding width {d} != d_model {config.d_model}")
    if t > config.max_seq:
        raise DimensionError(f"sequence length {t} exceeds max_seq {config.max_seq}")
    x = embeddings + params["pos_emb"][:t]
    blocks = []
    for i in range(config.n_layers):
        p = f"block{i}."
        h, c_ln1 = layernorm_fwd(x, params, p + "ln1")
        a, c_attn = attention_fwd(h, h, params, p + "attn.", config.n_heads, causal=True)
        x = x + a
        h2, c_ln2 = layernorm_fwd(x, params, p + "ln2")
        f, c_ff = ff_fwd(h2, params, p + "ff.")
        x = x + f
        blocks.append({"ln1": c_ln1, "attn": c_attn, "ln2": c_ln2, "ff": c_ff})
    xf, c_fn = layernorm_fwd(x, params, "final_norm")
    logits, c_out = linear_fwd(xf, params, "out_proj")
    cache = {"blocks": blocks, "final": c_fn, "out": c_out, "t": t}
    return logits, cache


def lm_backward_batch(
    params: Mapping[str, np.ndarray],
    config: TinyLMConfig,
    cache: dict,
    dlogits: np.ndarray,
) -> tuple[np.ndarray, GradientBundle]:
    """Backward of :func:`lm_forward_batch`; returns (d embeddings, grads)."""
    grads: GradientBundle = {}
    dxf = linear_bwd(cache["out"], dlogits, grads)
    dx = layernorm_bwd(cache["final"], dxf, grads)
    for i in reversed(range(config.n_layers)):
        c = cache["blocks"][i]
        dh2 = ff_bwd(c["ff"], dx, grads)
        dx = dx + layernorm_bwd(c["ln2"], dh2, grads)
        dq, dkv = attention_bwd(c["attn"], dx, grads)
        dx = dx + layernorm_bwd(c["ln1"], dq + dkv, grads)
    t = cache["t"]
    dpos = np.zeros_like(params["pos_emb"])
    dpos[:t] = dx.sum(axis=0)
    grads["pos_emb"] = dpos
    return dx, grads


def lm_forward(
    params: Mapping[str, np.ndarray], config: TinyLMConfig, embeddings: np.ndarray
) -> np.ndarray:
    """Single-sequence convenience wrapper: (T, d_model) -> (T, vocab)."""
    logits, _ = lm_forward_batch(params, config, embeddings[None])
    return logits[0]
