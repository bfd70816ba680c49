"""Minimal dense tensor ops with hand-written backward passes.

Tensors are plain float64 numpy arrays. Every differentiable op comes as a
``*_forward`` returning ``(output, cache)`` and a ``*_backward`` consuming the
upstream gradient and that cache. Ops accept an optional leading batch axis:
``[C, H, W]`` inputs are promoted to ``[1, C, H, W]`` internally.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DTYPE = np.float64


class ShapeError(ValueError):
    pass


class CheckpointError(ValueError):
    """Raised when a checkpoint file is missing, truncated or corrupt."""


@dataclass
class Parameter:
    name: str
    value: np.ndarray
    grad: np.ndarray | None = field(default=None)

    def __post_init__(self):
        self.value = np.asarray(self.value, dtype=DTYPE)
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        elif self.grad.shape != self.value.shape:
            raise ShapeError(f"{self.name}: grad shape {self.grad.shape} != {self.value.shape}")

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.value)


def _as_batch(x: np.ndarray) -> tuple[np.ndarray, bool]:
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise ShapeError(f"expected [C,H,W] or [N,C,H,W], got shape {x.shape}")


# ---------------------------------------------------------------------------
# conv2d
# ---------------------------------------------------------------------------


def conv2d_forward(x, weight, bias, stride=1, padding=0):
    """Cross-correlation with zero padding.

    x: [N,C,H,W] or [C,H,W]; weight: [K,C,kh,kw]; bias: [K].
    """
    x = np.asarray(x, dtype=DTYPE)
    xb, squeeze = _as_batch(x)
    if stride < 1:
        raise ShapeError("stride must be >= 1")
    k, c, kh, kw = weight.shape
    n, cx, h, w = xb.shape
    if cx != c:
        raise ShapeError(f"input has {cx} channels, kernel expects {c}")
    if bias.shape != (k,):
        raise ShapeError(f"bias shape {bias.shape} != ({k},)")
    if padding:
        xp = np.pad(xb, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        xp = xb
    hp, wp = xp.shape[2], xp.shape[3]
    if hp < kh or wp < kw:
        raise ShapeError("kernel larger than padded input")
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    windows = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    windows = windows[:, :, :ho, :wo]
    cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    wmat = weight.reshape(k, -1)
    out = cols @ wmat.T + bias
    out = out.reshape(n, ho, wo, k).transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(out)
    cache = (cols, weight, xp.shape, stride, padding, (n, ho, wo), squeeze)
    return (out[0] if squeeze else out), cache


def conv2d_backward(dout, cache, input_grad=True):
    """Returns (dx, dweight, dbias); dx is None when ``input_grad`` is false."""
    cols, weight, padded_shape, stride, padding, (n, ho, wo), squeeze = cache
    k, c, kh, kw = weight.shape
    dout = np.asarray(dout, dtype=DTYPE)
    if squeeze:
        dout = dout[None]
    d2 = dout.transpose(0, 2, 3, 1).reshape(n * ho * wo, k)
    dweight = (d2.T @ cols).reshape(weight.shape)
    dbias = d2.sum(axis=0)
    if not input_grad:
        return None, dweight, dbias
    dcols = (d2 @ weight.reshape(k, -1)).reshape(n, ho, wo, c, kh, kw)
    dxp = np.zeros(padded_shape, dtype=DTYPE)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += dcols[
                :, :, :, :, i, j
            ].transpose(0, 3, 1, 2)
    if padding:
        dx = dxp[:, :, padding:-padding, padding:-padding]
    else:
        dx = dxp
    dx = np.ascontiguousarray(dx)
    return (dx[0] if squeeze else dx), dweight, dbias


def conv2d(x, kernel: Parameter, bias: Parameter, stride=1, padding=0):
    out, _ = conv2d_forward(x, kernel.value, bias.value, stride, padding)
    return out


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------


def relu_forward(x):
    x = np.asarray(x, dtype=DTYPE)
    mask = x > 0
    return x * mask, mask


def relu_backward(dout, mask):
    return dout * mask


def relu(x):
    return relu_forward(x)[0]


# ---------------------------------------------------------------------------
# attention maps and distillation distances
# ---------------------------------------------------------------------------


def _log_softmax_spatial(x, temperature):
    xb, squeeze = _as_batch(np.asarray(x, dtype=DTYPE))
    n, k = xb.shape[:2]
    z = xb.reshape(n, k, -1) / temperature
    z = z - z.max(axis=2, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=2, keepdims=True))
    return logp, xb.shape, squeeze


def spatial_softmax_forward(features, temperature=4.0):
    """Per-channel softmax over all spatial positions."""
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    logp, shape, squeeze = _log_softmax_spatial(features, temperature)
    p = np.exp(logp).reshape(shape)
    return (p[0] if squeeze else p), (p, temperature, squeeze)


def spatial_softmax_backward(dout, cache):
    p, temperature, squeeze = cache
    dout = np.asarray(dout, dtype=DTYPE)
    if squeeze:
        dout = dout[None]
    n, k = p.shape[:2]
    pf = p.reshape(n, k, -1)
    df = dout.reshape(n, k, -1)
    dz = pf * (df - (pf * df).sum(axis=2, keepdims=True))
    dx = (dz / temperature).reshape(p.shape)
    return dx[0] if squeeze else dx


def spatial_softmax(features, temperature=4.0):
    return spatial_softmax_forward(features, temperature)[0]


def kl_channelwise_forward(student, teacher, temperature=4.0):
    """Channel-wise KL between spatial attention maps.

    T^2/K * sum_k sum_j A(s)_kj * log(A(s)_kj / A(t)_kj), with the student's
    map in the leading factor. A batch axis is averaged over.
    Returns (loss, cache); the teacher is treated as a constant.
    """
    student = np.asarray(student, dtype=DTYPE)
    teacher = np.asarray(teacher, dtype=DTYPE)
    if student.shape != teacher.shape:
        raise ShapeError(f"student {student.shape} vs teacher {teacher.shape}")
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    logp, shape, squeeze = _log_softmax_spatial(student, temperature)
    logq, _, _ = _log_softmax_spatial(teacher, temperature)
    n, k = shape[:2]
    p = np.exp(logp)
    d = logp - logq
    per_image = (temperature**2 / k) * (p * d).sum(axis=(1, 2))
    loss = float(per_image.mean())
    return loss, (p, d, temperature, shape, squeeze)


def kl_channelwise_backward(cache, dloss=1.0):
    """Gradient w.r.t. the student tensor."""
    p, d, temperature, shape, squeeze = cache
    n, k = shape[:2]
    dz = p * (d - (p * d).sum(axis=2, keepdims=True))
    ds = dz * (temperature / (k * n)) * dloss
    ds = ds.reshape(shape)
    return ds[0] if squeeze else ds


def kl_channelwise(student, teacher, temperature=4.0) -> float:
    return kl_channelwise_forward(student, teacher, temperature)[0]


def l2_loss_forward(a, b):
    """Mean squared difference over all elements; differentiable w.r.t. ``a``."""
    a = np.asarray(a, dtype=DTYPE)
    b = np.asarray(b, dtype=DTYPE)
    if a.shape != b.shape:
        raise ShapeError(f"{a.shape} vs {b.shape}")
    diff = a - b
    return float(np.mean(diff * diff)), diff


def l2_loss_backward(diff, dloss=1.0):
    return (2.0 / diff.size) * diff * dloss


def l2_loss(a, b) -> float:
    return l2_loss_forward(a, b)[0]


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


def sgd_step(params, learning_rate):
    """value <- value - lr * grad, then zero the gradients."""
    for p in params:
        if p.grad is None:
            raise ValueError(f"parameter {p.name!r} has no gradient")
        if p.grad.shape != p.value.shape:
            raise ShapeError(f"parameter {p.name!r}: grad shape mismatch")
    for p in params:
        p.value = p.value - learning_rate * p.grad
        p.zero_grad()


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

_MAGIC = b"FODCKPT1"
_DIGEST_SIZE = 32


def encode_tensors(tensors: dict[str, np.ndarray], descriptor: dict | None = None) -> bytes:
    """Serialize named tensors to bytes.

    Layout: magic | u64 header length | JSON header | float64 LE payload |
    sha256 of everything before it. Key order is preserved.
    """
    entries = []
    chunks = []
    offset = 0
    for name, arr in tensors.items():
        a = np.asarray(arr, dtype="<f8", order="C")
        entries.append({"name": name, "shape": list(a.shape), "offset": offset})
        chunks.append(a.tobytes())
        offset += a.nbytes
    header = json.dumps(
        {"descriptor": descriptor or {}, "tensors": entries}, sort_keys=True, separators=(",", ":")
    ).encode()
    body = _MAGIC + struct.pack("<Q", len(header)) + header + b"".join(chunks)
    return body + hashlib.sha256(body).digest()


def decode_tensors(blob: bytes) -> tuple[dict[str, np.ndarray], dict]:
    if len(blob) < len(_MAGIC) + 8 + _DIGEST_SIZE or not blob.startswith(_MAGIC):
        raise CheckpointError("not a checkpoint (bad magic or truncated header)")
    body, digest = blob[:-_DIGEST_SIZE], blob[-_DIGEST_SIZE:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError("checkpoint digest mismatch (truncated or corrupt file)")
    (hlen,) = struct.unpack("<Q", body[8:16])
    try:
        header = json.loads(body[16 : 16 + hlen])
    except ValueError as exc:
        raise CheckpointError(f"unreadable checkpoint header: {exc}") from exc
    payload = body[16 + hlen :]
    out = {}
    for e in header["tensors"]:
        count = int(np.prod(e["shape"], dtype=np.int64))
        start, stop = e["offset"], e["offset"] + 8 * count
        if stop > len(payload):
            raise CheckpointError(f"tensor {e['name']!r} extends past end of payload")
        out[e["name"]] = np.frombuffer(payload[start:stop], dtype="<f8").reshape(tuple(e["shape"])).astype(DTYPE)
    return out, header["descriptor"]


def save_tensors(path, tensors, descriptor=None) -> None:
    Path(path).write_bytes(encode_tensors(tensors, descriptor))


def load_tensors(path):
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    return decode_tensors(path.read_bytes())
