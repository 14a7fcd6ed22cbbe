"""Float64 numeric kernel: the small set of array ops everything else is built on.

All functions operate on dense row-major ``numpy.float64`` arrays, are pure, and
are deterministic for identical inputs.  Analytic gradients elsewhere in the
package are verified against :func:`finite_diff_grad`, which must therefore stay
independent of any backward-pass code.
"""

from __future__ import annotations

import json
import os
import tempfile
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from .errors import DimensionError, EmptySupervisionError, NumericError

# A parameter store / gradient bundle is a flat name -> array mapping.
GradientBundle = dict[str, np.ndarray]

LAYER_NORM_EPS = 1e-5

CHECKPOINT_FORMAT_VERSION = 1


def as_f64(x, name: str = "array") -> np.ndarray:
    """Coerce to a float64 ndarray, rejecting non-finite values."""
    arr = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"{name} contains non-finite values")
    return arr


def ensure_finite(arr: np.ndarray, context: str) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values produced in {context}")
    return arr


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """2-D matrix product with shape checking.

    Raises :class:`DimensionError` naming both shapes on mismatch.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(
            f"matmul expects 2-D operands, got shapes {a.shape} and {b.shape}"
        )
    if a.shape[1] != b.shape[0]:
        raise DimensionError(
            f"matmul inner dimensions disagree: {a.shape} @ {b.shape}"
        )
    return a @ b


def softmax_rows(x: np.ndarray) -> np.ndarray:
    """Row-wise softmax with max-subtraction for stability."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim < 1:
        raise DimensionError("softmax_rows expects at least 1-D input")
    shifted = x - np.max(x, axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=-1, keepdims=True)


def scaled_dot_attention(
    q: np.ndarray, k: np.ndarray, v: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """softmax(q kᵀ / sqrt(d)) v  over 2-D inputs.

    Returns ``(output, weights)`` where weights rows sum to 1.
    """
    q = np.asarray(q, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if q.ndim != 2 or k.ndim != 2 or v.ndim != 2:
        raise DimensionError(
            f"scaled_dot_attention expects 2-D q/k/v, got {q.shape}, {k.shape}, {v.shape}"
        )
    if q.shape[1] != k.shape[1]:
        raise DimensionError(f"q/k width mismatch: {q.shape} vs {k.shape}")
    if k.shape[0] != v.shape[0]:
        raise DimensionError(f"k/v row mismatch: {k.shape} vs {v.shape}")
    scale = 1.0 / np.sqrt(float(q.shape[1]))
    weights = softmax_rows(q @ k.T * scale)
    return weights @ v, weights


def layer_norm(
    x: np.ndarray,
    gamma: np.ndarray,
    beta: np.ndarray,
    eps: float = LAYER_NORM_EPS,
) -> np.ndarray:
    """Per-row normalization with affine parameters.

    A zero-variance row normalizes to zeros, so the output row equals ``beta``.
    """
    x = np.asarray(x, dtype=np.float64)
    gamma = np.asarray(gamma, dtype=np.float64)
    beta = np.asarray(beta, dtype=np.float64)
    if gamma.shape != (x.shape[-1],) or beta.shape != (x.shape[-1],):
        raise DimensionError(
            f"layer_norm affine shapes {gamma.shape}/{beta.shape} do not match row width {x.shape[-1]}"
        )
    mu = np.mean(x, axis=-1, keepdims=True)
    var = np.mean((x - mu) ** 2, axis=-1, keepdims=True)
    xhat = (x - mu) / np.sqrt(var + eps)
    return gamma * xhat + beta


def cross_entropy_next_token(
    logits: np.ndarray, targets: np.ndarray, mask: np.ndarray
) -> float:
    """Mean negative log-likelihood of ``targets`` under ``logits`` rows where ``mask``.

    ``logits`` is (T, V); ``targets`` is (T,) integer ids; ``mask`` is (T,) bool.
    Positions outside the mask never influence the value.  An all-false mask is
    an error (:class:`EmptySupervisionError`).
    """
    logits = np.asarray(logits, dtype=np.float64)
    targets = np.asarray(targets)
    mask = np.asarray(mask, dtype=bool)
    if logits.ndim != 2:
        raise DimensionError(f"logits must be 2-D, got {logits.shape}")
    if targets.shape != (logits.shape[0],) or mask.shape != (logits.shape[0],):
        raise DimensionError(
            f"targets/mask shapes {targets.shape}/{mask.shape} do not match logits rows {logits.shape[0]}"
        )
    if not mask.any():
        raise EmptySupervisionError("cross_entropy_next_token over an empty mask")
    rows = logits[mask]
    ids = targets[mask].astype(np.int64)
    if np.any(ids < 0) or np.any(ids >= logits.shape[1]):
        raise DimensionError("target id outside vocabulary under supervision mask")
    shifted = rows - np.max(rows, axis=1, keepdims=True)
    logz = np.log(np.sum(np.exp(shifted), axis=1))
    nll = logz - shifted[np.arange(rows.shape[0]), ids]
    loss = float(np.mean(nll))
    if not np.isfinite(loss):
        raise NumericError("cross_entropy_next_token produced a non-finite loss")
    return loss


def optimizer_step(
    params: Mapping[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
    rate: float,
) -> GradientBundle:
    """Plain gradient descent: ``p - rate * g`` for every named parameter.

    Names present in ``params`` but absent from ``grads`` pass through
    unchanged (frozen groups).  Returns a new store; inputs are not mutated.
    """
    out: GradientBundle = {}
    for name, value in params.items():
        g = grads.get(name)
        if g is None:
            out[name] = value.copy()
            continue
        if g.shape != value.shape:
            raise DimensionError(
                f"gradient shape {g.shape} does not match parameter {name!r} shape {value.shape}"
            )
        out[name] = value - rate * g
    return out


def finite_diff_grad(
    loss_fn: Callable[[Mapping[str, np.ndarray]], float],
    params: Mapping[str, np.ndarray],
    eps: float = 1e-6,
) -> GradientBundle:
    """Central-difference gradient of a scalar loss over every parameter entry.

    Independent oracle for analytic backward passes: the only property it uses
    of ``loss_fn`` is that it is a deterministic pure function of the store.
    """
    grads: GradientBundle = {}
    # Work on a mutable copy so loss_fn sees perturbed stores.
    work = {k: np.array(v, dtype=np.float64, copy=True) for k, v in params.items()}
    for name in sorted(work):
        arr = work[name]
        g = np.zeros_like(arr)
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = loss_fn(work)
            flat[i] = orig - eps
            lo = loss_fn(work)
            flat[i] = orig
            gflat[i] = (hi - lo) / (2.0 * eps)
        grads[name] = g
    return grads


@dataclass
class GradCheckReport:
    """Outcome of comparing analytic gradients against central differences."""

    passed: bool
    max_rel_error: float
    worst_param: str
    tol: float
    per_param: dict[str, float] = field(default_factory=dict)

    def summary(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (
            f"grad check {status}: max relative error {self.max_rel_error:.3e} "
            f"at {self.worst_param!r} (tol {self.tol:.1e})"
        )


def relative_errors(
    analytic: Mapping[str, np.ndarray],
    numeric: Mapping[str, np.ndarray],
    floor: float = 1e-8,
) -> dict[str, float]:
    """Per-parameter max of |a-n| / max(|a|, |n|, floor)."""
    out: dict[str, float] = {}
    for name in sorted(numeric):
        if name not in analytic:
            raise DimensionError(f"analytic gradients missing parameter {name!r}")
        a = analytic[name]
        n = numeric[name]
        if a.shape != n.shape:
            raise DimensionError(
                f"gradient shape mismatch for {name!r}: {a.shape} vs {n.shape}"
            )
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
        out[name] = float(np.max(np.abs(a - n) / denom)) if a.size else 0.0
    return out


def grad_check(
    loss_and_grad_fn: Callable[[Mapping[str, np.ndarray]], tuple[float, GradientBundle]],
    params: Mapping[str, np.ndarray],
    tol: float = 1e-4,
    eps: float = 1e-6,
    loss_fn: Callable[[Mapping[str, np.ndarray]], float] | None = None,
) -> GradCheckReport:
    """Compare analytic gradients with finite differences.

    ``loss_and_grad_fn(params)`` must return ``(loss, gradient bundle)``; the
    loss alone is re-evaluated under perturbation for the numeric route.  Pass
    ``loss_fn`` to skip the (wasted) backward pass during those re-evaluations;
    it must compute the identical scalar.  Failure is a report outcome, not an
    exception.
    """
    _, analytic = loss_and_grad_fn(params)
    numeric = finite_diff_grad(loss_fn or (lambda p: loss_and_grad_fn(p)[0]), params, eps=eps)
    per_param = relative_errors(analytic, numeric)
    worst = max(per_param, key=per_param.get) if per_param else ""
    worst_err = per_param.get(worst, 0.0)
    return GradCheckReport(
        passed=worst_err < tol,
        max_rel_error=worst_err,
        worst_param=worst,
        tol=tol,
        per_param=per_param,
    )


def atomic_write_bytes(path: str | os.PathLike, data: bytes) -> None:
    """Write via a temp file in the target directory, then rename."""
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=".part")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path: str | os.PathLike, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def save_checkpoint(path: str | os.PathLike, params: Mapping[str, np.ndarray]) -> None:
    """Serialize a parameter store.

    Layout: one JSON header line carrying the format version and the ordered
    (name, shape) manifest, then the raw little-endian float64 payload of each
    parameter in manifest order.
    """
    names = sorted(params)
    header = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "params": [[name, list(params[name].shape)] for name in names],
    }
    chunks = [json.dumps(header, sort_keys=True).encode("utf-8"), b"\n"]
    for name in names:
        arr = np.ascontiguousarray(params[name], dtype=np.float64)
        chunks.append(arr.astype("<f8", copy=False).tobytes())
    atomic_write_bytes(path, b"".join(chunks))


def load_checkpoint(path: str | os.PathLike) -> GradientBundle:
    """Inverse of :func:`save_checkpoint`; validates version and payload size."""
    with open(path, "rb") as fh:
        header_line = fh.readline()
        try:
            header = json.loads(header_line.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise NumericError(f"unreadable checkpoint header in {path}") from exc
        version = header.get("format_version")
        if version != CHECKPOINT_FORMAT_VERSION:
            raise NumericError(
                f"unsupported checkpoint format version {version!r} in {path}"
            )
        params: GradientBundle = {}
        for name, shape in header.get("params", []):
            count = int(np.prod(shape)) if shape else 1
            payload = fh.read(count * 8)
            if len(payload) != count * 8:
                raise NumericError(f"truncated checkpoint payload for {name!r} in {path}")
            params[name] = np.frombuffer(payload, dtype="<f8").reshape(shape).copy()
        if fh.read(1):
            raise NumericError(f"trailing bytes after checkpoint payload in {path}")
    return params
