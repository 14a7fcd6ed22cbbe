"""Batched neural building blocks with explicit analytic backward passes.

Arrays carry a leading batch dimension: activations are ``(B, T, D)``.  Every
forward returns ``(output, cache)`` and every backward consumes that cache plus
the upstream gradient, accumulating parameter gradients into a flat bundle.
Parameters live in flat name->array stores; the ``prefix`` argument scopes a
block's names (e.g. ``"attn1."`` owns ``attn1.wq.w`` ... ``attn1.wo.b``).
"""

from __future__ import annotations

from typing import Mapping

import numpy as np

from .errors import DimensionError
from .numerics import LAYER_NORM_EPS, GradientBundle

# Finite stand-in for -inf so masked logits survive max-subtraction untouched.
MASK_FILL = -1e30


def accumulate(grads: GradientBundle, name: str, value: np.ndarray) -> None:
    if name in grads:
        grads[name] = grads[name] + value
    else:
        grads[name] = value


def init_linear(
    rng: np.random.Generator,
    store: GradientBundle,
    prefix: str,
    d_out: int,
    d_in: int,
    bias: bool = True,
) -> None:
    """Scaled-uniform init, bound 1/sqrt(fan_in), for weight (and bias if any)."""
    bound = 1.0 / np.sqrt(float(d_in))
    store[prefix + ".w"] = rng.uniform(-bound, bound, size=(d_out, d_in))
    if bias:
        store[prefix + ".b"] = rng.uniform(-bound, bound, size=(d_out,))


def linear_fwd(
    x: np.ndarray, params: Mapping[str, np.ndarray], prefix: str
) -> tuple[np.ndarray, dict]:
    w = params[prefix + ".w"]
    b = params.get(prefix + ".b")
    if x.shape[-1] != w.shape[1]:
        raise DimensionError(
            f"linear {prefix!r}: input width {x.shape[-1]} != fan-in {w.shape[1]}"
        )
    y = x @ w.T if b is None else x @ w.T + b
    return y, {"x": x, "w": w, "prefix": prefix, "has_bias": b is not None}


def linear_bwd(cache: dict, dy: np.ndarray, grads: GradientBundle) -> np.ndarray:
    x, w, prefix = cache["x"], cache["w"], cache["prefix"]
    dx = dy @ w
    dy2 = dy.reshape(-1, dy.shape[-1])
    x2 = np.ascontiguousarray(x).reshape(-1, x.shape[-1])
    accumulate(grads, prefix + ".w", dy2.T @ x2)
    if cache["has_bias"]:
        accumulate(grads, prefix + ".b", dy2.sum(axis=0))
    return dx


def layernorm_fwd(
    x: np.ndarray, params: Mapping[str, np.ndarray], prefix: str
) -> tuple[np.ndarray, dict]:
    gamma = params[prefix + ".gamma"]
    beta = params[prefix + ".beta"]
    mu = np.mean(x, axis=-1, keepdims=True)
    var = np.mean((x - mu) ** 2, axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + LAYER_NORM_EPS)
    xhat = (x - mu) * inv_std
    y = gamma * xhat + beta
    return y, {"xhat": xhat, "inv_std": inv_std, "gamma": gamma, "prefix": prefix}


def layernorm_bwd(cache: dict, dy: np.ndarray, grads: GradientBundle) -> np.ndarray:
    xhat, inv_std, gamma, prefix = (
        cache["xhat"],
        cache["inv_std"],
        cache["gamma"],
        cache["prefix"],
    )
    lead = tuple(range(dy.ndim - 1))
    accumulate(grads, prefix + ".gamma", np.sum(dy * xhat, axis=lead))
    accumulate(grads, prefix + ".beta", np.sum(dy, axis=lead))
    dxhat = dy * gamma
    m1 = np.mean(dxhat, axis=-1, keepdims=True)
    m2 = np.mean(dxhat * xhat, axis=-1, keepdims=True)
    return inv_std * (dxhat - m1 - xhat * m2)


def _split_heads(x: np.ndarray, n_heads: int) -> np.ndarray:
    b, t, d = x.shape
    dh = d // n_heads
    return x.reshape(b, t, n_heads, dh).transpose(0, 2, 1, 3)


def _merge_heads(x: np.ndarray) -> np.ndarray:
    b, h, t, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, t, h * dh)


def attention_fwd(
    q_in: np.ndarray,
    kv_in: np.ndarray,
    params: Mapping[str, np.ndarray],
    prefix: str,
    n_heads: int,
    causal: bool = False,
) -> tuple[np.ndarray, dict]:
    """Projected multi-head scaled-dot attention block.

    ``q_in`` is (B, M, D), ``kv_in`` is (B, N, D); output is (B, M, D).
    ``causal`` masks key positions above the diagonal (requires M == N).
    """
    d_model = q_in.shape[-1]
    if d_model % n_heads:
        raise DimensionError(f"d_model {d_model} not divisible by n_heads {n_heads}")
    q, cq = linear_fwd(q_in, params, prefix + "wq")
    k, ck = linear_fwd(kv_in, params, prefix + "wk")
    v, cv = linear_fwd(kv_in, params, prefix + "wv")
    qh = _split_heads(q, n_heads)
    kh = _split_heads(k, n_heads)
    vh = _split_heads(v, n_heads)
    scale = 1.0 / np.sqrt(float(qh.shape[-1]))
    scores = np.matmul(qh, np.swapaxes(kh, -1, -2)) * scale
    if causal:
        m, n = scores.shape[-2], scores.shape[-1]
        if m != n:
            raise DimensionError(f"causal attention needs square scores, got {m}x{n}")
        scores = np.where(np.tril(np.ones((m, n), dtype=bool)), scores, MASK_FILL)
    shifted = scores - np.max(scores, axis=-1, keepdims=True)
    e = np.exp(shifted)
    weights = e / np.sum(e, axis=-1, keepdims=True)
    ctx = np.matmul(weights, vh)
    merged = _merge_heads(ctx)
    out, co = linear_fwd(merged, params, prefix + "wo")
    cache = {
        "cq": cq,
        "ck": ck,
        "cv": cv,
        "co": co,
        "qh": qh,
        "kh": kh,
        "vh": vh,
        "weights": weights,
        "scale": scale,
        "n_heads": n_heads,
    }
    return out, cache


def attention_bwd(
    cache: dict, dout: np.ndarray, grads: GradientBundle
) -> tuple[np.ndarray, np.ndarray]:
    """Returns ``(d q_in, d kv_in)`` and accumulates the block's weight grads."""
    n_heads = cache["n_heads"]
    dmerged = linear_bwd(cache["co"], dout, grads)
    dctx = _split_heads(dmerged, n_heads)
    weights, qh, kh, vh, scale = (
        cache["weights"],
        cache["qh"],
        cache["kh"],
        cache["vh"],
        cache["scale"],
    )
    dweights = np.matmul(dctx, np.swapaxes(vh, -1, -2))
    dvh = np.matmul(np.swapaxes(weights, -1, -2), dctx)
    # Softmax backward per row; masked positions carry weight 0, so their
    # score gradient vanishes automatically.
    inner = np.sum(dweights * weights, axis=-1, keepdims=True)
    dscores = weights * (dweights - inner)
    dqh = np.matmul(dscores, kh) * scale
    dkh = np.matmul(np.swapaxes(dscores, -1, -2), qh) * scale
    dq = _merge_heads(dqh)
    dk = _merge_heads(dkh)
    dv = _merge_heads(dvh)
    dq_in = linear_bwd(cache["cq"], dq, grads)
    dkv_in = linear_bwd(cache["ck"], dk, grads)
    dkv_in = dkv_in + linear_bwd(cache["cv"], dv, grads)
    return dq_in, dkv_in


def ff_fwd(
    x: np.ndarray, params: Mapping[str, np.ndarray], prefix: str
) -> tuple[np.ndarray, dict]:
    """Two-layer tanh feed-forward (smooth, so finite differences stay honest)."""
    a, c1 = linear_fwd(x, params, prefix + "w1")
    h = np.tanh(a)
    y, c2 = linear_fwd(h, params, prefix + "w2")
    return y, {"c1": c1, "c2": c2, "h": h}


def ff_bwd(cache: dict, dy: np.ndarray, grads: GradientBundle) -> np.ndarray:
    dh = linear_bwd(cache["c2"], dy, grads)
    da = dh * (1.0 - cache["h"] ** 2)
    return linear_bwd(cache["c1"], da, grads)
