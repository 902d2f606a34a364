"""Neural building blocks on top of the autodiff engine.

Provides the parameter container with Adam state, the layer primitives used
by the encoder and the restart classifier (linear, layer norm, multi-head
attention with an incremental key/value cache, GRU cell), the training
losses, a finite-difference gradient checker, and the manifest+blob
parameter serialization format.
"""

from __future__ import annotations

import hashlib
import json
import os
import tempfile
from dataclasses import dataclass, field
from typing import Callable, Iterator, Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, make_node, no_grad
from .errors import (
    ContractViolation,
    DegenerateInputError,
    InputError,
    NumericError,
)

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8
LAYER_NORM_EPS = 1e-5


class ParameterSet:
    """Named map from parameter path to Tensor, with per-parameter Adam state.

    Iteration order is insertion order, which makes optimizer updates and
    serialization deterministic.
    """

    def __init__(self):
        self._tensors: dict[str, Tensor] = {}
        self._trainable: dict[str, bool] = {}
        self.step = 0
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}

    def add(self, path: str, value: np.ndarray, trainable: bool = True) -> Tensor:
        if path in self._tensors:
            raise ContractViolation(f"duplicate parameter path {path!r}")
        t = Tensor(value, requires_grad=trainable)
        self._tensors[path] = t
        self._trainable[path] = trainable
        return t

    def __getitem__(self, path: str) -> Tensor:
        return self._tensors[path]

    def __contains__(self, path: str) -> bool:
        return path in self._tensors

    def __len__(self) -> int:
        return len(self._tensors)

    def paths(self) -> list[str]:
        return list(self._tensors)

    def items(self) -> Iterator[tuple[str, Tensor]]:
        return iter(self._tensors.items())

    def is_trainable(self, path: str) -> bool:
        return self._trainable[path]

    def subset(self, prefix: str) -> dict[str, Tensor]:
        """Parameters under ``prefix``, keyed by the remaining path suffix."""
        out = {}
        for path, t in self._tensors.items():
            if path.startswith(prefix):
                out[path[len(prefix):]] = t
        return out

    def zero_grads(self) -> None:
        for t in self._tensors.values():
            t.grad = None

    def n_values(self) -> int:
        return sum(t.size for t in self._tensors.values())

    def checksum(self) -> str:
        h = hashlib.sha256()
        for path, t in self._tensors.items():
            h.update(path.encode())
            h.update(t.data.astype("<f4", copy=False).tobytes())
        return h.hexdigest()


def adam_step(params: ParameterSet, lr: float) -> ParameterSet:
    """One bias-corrected Adam update over all trainable parameters.

    Gradients must be populated for every trainable parameter; they are
    cleared afterwards. Deterministic given identical state and gradients.
    """
    missing = [p for p, t in params.items()
               if params.is_trainable(p) and t.grad is None]
    if missing:
        raise ContractViolation(
            f"adam_step: missing gradients for {missing[:4]}"
            f"{'...' if len(missing) > 4 else ''}")
    params.step += 1
    t = params.step
    bc1 = 1.0 - ADAM_BETA1 ** t
    bc2 = 1.0 - ADAM_BETA2 ** t
    for path, tensor in params.items():
        if not params.is_trainable(path):
            continue
        g = tensor.grad
        m = params._m.get(path)
        v = params._v.get(path)
        if m is None:
            m = np.zeros_like(tensor.data)
            v = np.zeros_like(tensor.data)
            params._m[path] = m
            params._v[path] = v
        m *= ADAM_BETA1
        m += (1.0 - ADAM_BETA1) * g
        v *= ADAM_BETA2
        v += (1.0 - ADAM_BETA2) * (g * g)
        update = (m / bc1) / (np.sqrt(v / bc2) + ADAM_EPS)
        tensor.data -= np.float32(lr) * update
        tensor.grad = None
    return params


# -- initializers ---------------------------------------------------------------

def init_weight(rng: np.random.Generator, d_in: int, d_out: int) -> np.ndarray:
    """uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)), float32."""
    limit = 1.0 / np.sqrt(d_in)
    return rng.uniform(-limit, limit, size=(d_in, d_out)).astype(np.float32)


def init_embedding(rng: np.random.Generator, rows: int, d: int) -> np.ndarray:
    limit = 1.0 / np.sqrt(d)
    return rng.uniform(-limit, limit, size=(rows, d)).astype(np.float32)


# -- layers -----------------------------------------------------------------------

def linear_forward(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """y = x @ w + b over the trailing axis."""
    if x.shape[-1] != w.shape[0] or b.shape != (w.shape[1],):
        raise ContractViolation(
            f"linear shapes do not conform: x{x.shape} w{w.shape} b{b.shape}")
    return ad.add(ad.matmul(x, w), b)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor) -> Tensor:
    """Per-row zero-mean unit-variance normalization then affine transform."""
    d = x.shape[-1]
    if d < 1 or gain.shape != (d,) or bias.shape != (d,):
        raise ContractViolation(
            f"layer_norm shapes do not conform: x{x.shape} gain{gain.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + np.float32(LAYER_NORM_EPS))
    xhat = (x.data - mu) * inv
    data = xhat * gain.data + bias.data

    def backward(g):
        if bias.requires_grad:
            bias.accumulate_grad(g.reshape(-1, d).sum(axis=0))
        if gain.requires_grad:
            gain.accumulate_grad((g * xhat).reshape(-1, d).sum(axis=0))
        if x.requires_grad:
            dxhat = g * gain.data
            term = dxhat - dxhat.mean(axis=-1, keepdims=True) \
                - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
            x.accumulate_grad(term * inv)

    return make_node(data, (x, gain, bias), backward)


def np_layer_norm(x: np.ndarray, gain: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """Raw-array layer norm used on the incremental streaming path."""
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + np.float32(LAYER_NORM_EPS)) * gain + bias


class AttnCache:
    """Append-only key/value store for incremental causal attention.

    Rows 1..t are never rewritten once appended; capacity is fixed up front.
    """

    def __init__(self, max_len: int, d: int):
        self.k = np.zeros((max_len, d), dtype=np.float32)
        self.v = np.zeros((max_len, d), dtype=np.float32)
        self.n = 0

    def append(self, k_row: np.ndarray, v_row: np.ndarray) -> None:
        if self.n >= self.k.shape[0]:
            raise ContractViolation("attention cache capacity exceeded")
        self.k[self.n] = k_row
        self.v[self.n] = v_row
        self.n += 1


_CAUSAL_MASKS: dict[int, np.ndarray] = {}


def _causal_mask(t: int) -> np.ndarray:
    mask = _CAUSAL_MASKS.get(t)
    if mask is None:
        mask = np.triu(np.ones((t, t), dtype=bool), k=1)
        _CAUSAL_MASKS[t] = mask
    return mask


def multi_head_attention(
    x: Tensor,
    params: Mapping[str, Tensor],
    n_heads: int,
    causal: bool = False,
    cache: AttnCache | None = None,
) -> tuple[Tensor, AttnCache | None]:
    """Scaled dot-product attention over ``n_heads`` heads with output projection.

    In causal mode positions attend only to themselves and earlier positions.
    With a cache (causal only), ``x`` is the single new row; its output is
    computed against the stored keys/values, which the call extends. Cached
    calls run outside the autodiff graph.
    """
    d = x.shape[-1]
    if d % n_heads != 0:
        raise ContractViolation(f"d={d} not divisible by n_heads={n_heads}")
    if cache is not None and not causal:
        raise ContractViolation("attention cache requires causal mode")
    dh = d // n_heads
    scale = np.float32(1.0 / np.sqrt(dh))

    if cache is not None:
        xd = x.data.reshape(-1, d)
        if xd.shape[0] != 1:
            raise ContractViolation("cached attention consumes one row at a time")
        wq, wk, wv, wo = (params[k].data for k in ("wq", "wk", "wv", "wo"))
        bq, bk, bv, bo = (params[k].data for k in ("bq", "bk", "bv", "bo"))
        q = (xd @ wq + bq).reshape(n_heads, dh)
        cache.append(xd @ wk + bk, xd @ wv + bv)
        keys = cache.k[: cache.n].reshape(-1, n_heads, dh)
        vals = cache.v[: cache.n].reshape(-1, n_heads, dh)
        scores = np.einsum("hd,jhd->hj", q, keys) * scale
        scores -= scores.max(axis=-1, keepdims=True)
        e = np.exp(scores)
        w = e / e.sum(axis=-1, keepdims=True)
        ctx = np.einsum("hj,jhd->hd", w, vals).reshape(1, d)
        out = ctx @ wo + bo
        return Tensor(out.reshape(x.shape)), cache

    t = x.shape[-2]
    lead = x.shape[:-2]
    q = linear_forward(x, params["wq"], params["bq"])
    k = linear_forward(x, params["wk"], params["bk"])
    v = linear_forward(x, params["wv"], params["bv"])
    split = lead + (t, n_heads, dh)
    q = ad.swapaxes(ad.reshape(q, split), -3, -2)
    k = ad.swapaxes(ad.reshape(k, split), -3, -2)
    v = ad.swapaxes(ad.reshape(v, split), -3, -2)
    scores = ad.mul(ad.matmul(q, ad.swapaxes(k, -1, -2)), Tensor(scale))
    if causal:
        scores = ad.masked_fill(scores, _causal_mask(t), -np.inf)
    weights = ad.softmax(scores, axis=-1)
    ctx = ad.matmul(weights, v)
    ctx = ad.reshape(ad.swapaxes(ctx, -3, -2), lead + (t, d))
    y = linear_forward(ctx, params["wo"], params["bo"])
    return y, None


def gru_cell(x: Tensor, h: Tensor, params: Mapping[str, Tensor]) -> Tensor:
    """Standard GRU update with reset/update gates and tanh candidate.

    Parameters hold fused gate blocks in (reset, update, candidate) order:
    ``wi`` [d_in, 3*d_h], ``wh`` [d_h, 3*d_h], ``bi``/``bh`` [3*d_h].
    """
    dh = h.shape[-1]
    wi, wh = params["wi"], params["wh"]
    if x.shape[-1] != wi.shape[0] or wi.shape[1] != 3 * dh or wh.shape != (dh, 3 * dh):
        raise ContractViolation(
            f"gru shapes do not conform: x{x.shape} h{h.shape} wi{wi.shape}")
    gi = linear_forward(x, wi, params["bi"])
    gh = linear_forward(h, wh, params["bh"])
    r = ad.sigmoid(gi[..., :dh] + gh[..., :dh])
    z = ad.sigmoid(gi[..., dh:2 * dh] + gh[..., dh:2 * dh])
    n = ad.tanh(gi[..., 2 * dh:] + ad.mul(r, gh[..., 2 * dh:]))
    return (1.0 - z) * n + z * h


def np_gru_cell(x: np.ndarray, h: np.ndarray, params: Mapping[str, Tensor]) -> np.ndarray:
    """Raw-array GRU step for the streaming path; mirrors gru_cell exactly."""
    dh = h.shape[-1]
    gi = x @ params["wi"].data + params["bi"].data
    gh = h @ params["wh"].data + params["bh"].data
    r = ad.np_sigmoid(gi[..., :dh] + gh[..., :dh])
    z = ad.np_sigmoid(gi[..., dh:2 * dh] + gh[..., dh:2 * dh])
    n = np.tanh(gi[..., 2 * dh:] + r * gh[..., 2 * dh:])
    return (1.0 - z) * n + z * h


# -- losses --------------------------------------------------------------------

def softmax_cross_entropy(
    logits: Tensor,
    targets: np.ndarray,
    mask: np.ndarray | None = None,
) -> Tensor:
    """Mean negative log-likelihood over unmasked positions.

    ``targets`` holds class indices with the same leading shape as ``logits``;
    gradient at unmasked rows is (softmax - onehot) / count.
    """
    c = logits.shape[-1]
    targets = np.asarray(targets)
    if targets.shape != logits.shape[:-1]:
        raise ContractViolation(
            f"targets shape {targets.shape} does not match logits {logits.shape}")
    if targets.size and (targets.min() < 0 or targets.max() >= c):
        raise InputError(f"target class out of range [0, {c})")
    flat = logits.data.reshape(-1, c)
    tflat = targets.reshape(-1)
    if mask is None:
        keep = np.ones(tflat.shape[0], dtype=bool)
    else:
        keep = np.asarray(mask, dtype=bool).reshape(-1)
    count = int(keep.sum())
    if count == 0:
        raise DegenerateInputError("softmax_cross_entropy: all positions masked")
    shifted = flat - flat.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1))
    nll = lse - shifted[np.arange(tflat.shape[0]), tflat]
    data = np.asarray(nll[keep].sum() / count, dtype=flat.dtype)

    def backward(g):
        probs = np.exp(shifted - lse[:, None])
        probs[np.arange(tflat.shape[0]), tflat] -= 1.0
        probs[~keep] = 0.0
        probs *= np.float32(g) / count
        logits.accumulate_grad(probs.reshape(logits.shape))

    return make_node(data, (logits,), backward)


def bce_with_logits(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean binary cross-entropy from raw scores; stable for large |logit|."""
    z = logits.data.reshape(-1)
    y = np.asarray(targets, dtype=np.float32).reshape(-1)
    if z.shape != y.shape:
        raise ContractViolation("bce_with_logits: shape mismatch")
    n = z.shape[0]
    per = np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))
    data = np.asarray(per.sum() / n, dtype=z.dtype)

    def backward(g):
        grad = (ad.np_sigmoid(z) - y) * (np.float32(g) / n)
        logits.accumulate_grad(grad.reshape(logits.shape))

    return make_node(data, (logits,), backward)


# -- gradient checking ------------------------------------------------------------

def finite_difference_check(
    loss_fn: Callable[[], Tensor],
    params: ParameterSet,
    probes: int,
    eps: float = 1e-3,
    seed: int = 0,
) -> float:
    """Max relative error between central differences and backward gradients.

    Backward gradients come from the model's own 32-bit pass. The probe
    losses are evaluated with the parameters temporarily upcast to float64
    so the difference quotient is not drowned by storage rounding of the
    loss scalar (the ops preserve input dtype). Probes ``probes`` randomly
    chosen trainable coordinates; near-zero gradients are compared against
    an absolute threshold of 1e-6 (the relative denominator is floored
    there).
    """
    if probes < 1:
        raise ContractViolation("probes must be >= 1")
    params.zero_grads()
    loss = loss_fn()
    if not np.isfinite(loss.data):
        raise NumericError("finite_difference_check: non-finite loss")
    loss.backward()
    analytic = {
        p: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data))
        for p, t in params.items() if params.is_trainable(p)
    }
    paths = sorted(analytic)
    sizes = np.array([analytic[p].size for p in paths])
    total = int(sizes.sum())
    rng = np.random.default_rng(seed)
    flat_choices = rng.integers(0, total, size=probes)
    bounds = np.cumsum(sizes)

    originals = {p: t.data for p, t in params.items()}
    for p, t in params.items():
        t.data = t.data.astype(np.float64)
    try:
        worst = 0.0
        for flat in flat_choices:
            which = int(np.searchsorted(bounds, flat, side="right"))
            idx = int(flat - (bounds[which - 1] if which else 0))
            path = paths[which]
            buf = params[path].data.reshape(-1)
            orig = buf[idx]
            with no_grad():
                buf[idx] = orig + eps
                f_plus = float(loss_fn().data)
                buf[idx] = orig - eps
                f_minus = float(loss_fn().data)
            buf[idx] = orig
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                raise NumericError(
                    "finite_difference_check: non-finite probe loss")
            g_fd = (f_plus - f_minus) / (2.0 * eps)
            g_an = float(analytic[path].reshape(-1)[idx])
            denom = max(abs(g_fd), abs(g_an), 1e-6)
            worst = max(worst, abs(g_fd - g_an) / denom)
    finally:
        for p, t in params.items():
            t.data = originals[p]
    params.zero_grads()
    return worst


# -- serialization ------------------------------------------------------------------

def atomic_write_bytes(path: str, payload: bytes) -> None:
    """Write via a temp file in the same directory, then rename."""
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path: str, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def save_parameters(path: str, params: ParameterSet, header: dict | None = None) -> None:
    """Single-file format: one JSON manifest line, then a flat float32 blob.

    The manifest lists parameter path, shape, trainable flag and byte offset
    into the little-endian float32 blob. Round-trips are bit-exact.
    """
    entries = []
    chunks = []
    offset = 0
    for p, t in params.items():
        raw = t.data.astype("<f4", copy=False).tobytes(order="C")
        entries.append({
            "path": p,
            "shape": list(t.shape),
            "trainable": params.is_trainable(p),
            "offset": offset,
        })
        chunks.append(raw)
        offset += len(raw)
    manifest = {
        "format": "streamtag-params",
        "version": 1,
        "header": header or {},
        "blob_bytes": offset,
        "params": entries,
    }
    payload = json.dumps(manifest).encode("utf-8") + b"\n" + b"".join(chunks)
    atomic_write_bytes(path, payload)


def load_parameters(path: str) -> tuple[ParameterSet, dict]:
    with open(path, "rb") as f:
        raw = f.read()
    nl = raw.index(b"\n")
    manifest = json.loads(raw[:nl].decode("utf-8"))
    if manifest.get("format") != "streamtag-params":
        raise InputError(f"{path}: not a streamtag parameter file")
    blob = raw[nl + 1:]
    if len(blob) != manifest["blob_bytes"]:
        raise InputError(f"{path}: blob length mismatch")
    params = ParameterSet()
    for entry in manifest["params"]:
        shape = tuple(entry["shape"])
        n = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        arr = np.frombuffer(blob, dtype="<f4", count=n, offset=start)
        params.add(entry["path"], arr.reshape(shape).copy(),
                   trainable=entry["trainable"])
    return params, manifest["header"]
