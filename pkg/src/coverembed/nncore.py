"""Forward/backward kernels for the embedding network, plus Adam.

Activations are channels-last: ``(batch, time, freq, channels)``.  Every
``*_forward`` returns ``(out, cache)`` and the matching ``*_backward`` maps
the upstream gradient and that cache to gradients of the inputs.  Kernels
keep the dtype of their inputs (float32 for training, float64 for gradient
checks); statistics are always accumulated in float64.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import FormatError, InvalidInputError, NumericError, ShapeError

BN_EPS = 1e-5
BN_MOMENTUM = 0.9


# --- reductions ----------------------------------------------------------

_BLOCK_ROWS = 4096


def channel_sum(a: np.ndarray) -> np.ndarray:
    """Sum over every axis but the last.

    Rows are summed in blocks of 4096 in the input dtype and the block totals
    are combined in float64, avoiding a full float64 copy of large tensors.
    """
    a2 = a.reshape(-1, a.shape[-1])
    n = a2.shape[0]
    nb = n // _BLOCK_ROWS
    total = np.zeros(a2.shape[1], dtype=np.float64)
    if nb:
        partial = a2[: nb * _BLOCK_ROWS].reshape(nb, _BLOCK_ROWS, -1).sum(axis=1)
        total += partial.sum(axis=0, dtype=np.float64)
    total += a2[nb * _BLOCK_ROWS :].sum(axis=0, dtype=np.float64)
    return total


# --- convolution ---------------------------------------------------------
#
# Inputs are zero-padded by one cell and flattened to rows of channels.  On
# that padded grid a 3x3 tap at offset (i, j) is the contiguous row slice
# starting at i * (F + 2) + j, so output row p (padded coordinates of its
# top-left tap) is sum_taps flat[p + off] @ w[i, j].  Rows landing on padding
# are computed and discarded.  Narrow inputs go through an explicit column
# matrix instead, where nine tiny GEMMs would be bandwidth-bound.

_IM2COL_MAX_CIN = 4


def _pad_flat(x: np.ndarray) -> np.ndarray:
    b, t, f, c = x.shape
    xp = np.zeros((b, t + 2, f + 2, c), dtype=x.dtype)
    xp[:, 1:-1, 1:-1, :] = x
    return xp.reshape(-1, c)


def _tap_offsets(f: int):
    return [(i, j, i * (f + 2) + j) for i in range(3) for j in range(3)]


def conv2d_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray):
    """3x3 same-padded cross-correlation, kernels laid out (3, 3, Cin, Cout)."""
    if x.ndim != 4:
        raise ShapeError(f"conv2d expects (B, T, F, C) input, got {x.shape}")
    if w.ndim != 4 or w.shape[:2] != (3, 3):
        raise ShapeError(f"conv2d kernels must be (3, 3, Cin, Cout), got {w.shape}")
    if x.shape[-1] != w.shape[2]:
        raise ShapeError(f"input has {x.shape[-1]} channels, kernels expect {w.shape[2]}")
    bsz, t, f, cin = x.shape
    cout = w.shape[3]
    flat = _pad_flat(x)
    n = flat.shape[0]
    m = n - 2 * (f + 2) - 2
    out = np.zeros((n, cout), dtype=x.dtype)
    if cin <= _IM2COL_MAX_CIN:
        # tap-major columns: each row is one contiguous copy of a shifted channel
        cols = np.empty((9 * cin, m), dtype=x.dtype)
        for i, j, off in _tap_offsets(f):
            k = 3 * i + j
            cols[k * cin : (k + 1) * cin] = flat[off : off + m].T
        out[:m] = (w.reshape(9 * cin, cout).T @ cols).T
        saved = cols
    else:
        acc = out[:m]
        for i, j, off in _tap_offsets(f):
            acc += flat[off : off + m] @ w[i, j]
        saved = flat
    out += b
    y = np.ascontiguousarray(out.reshape(bsz, t + 2, f + 2, cout)[:, :t, :f, :])
    return y, (saved, w, x.shape)


def conv2d_backward(dout: np.ndarray, cache, need_input_grad: bool = True):
    saved, w, xshape = cache
    bsz, t, f, cin = xshape
    cout = w.shape[3]
    dpad = np.zeros((bsz, t + 2, f + 2, cout), dtype=dout.dtype)
    dpad[:, :t, :f, :] = dout
    d = dpad.reshape(-1, cout)
    n = d.shape[0]
    m = n - 2 * (f + 2) - 2
    db = channel_sum(dout).astype(w.dtype)
    taps = _tap_offsets(f)
    if cin <= _IM2COL_MAX_CIN:
        dw = (saved @ d[:m]).reshape(w.shape)
    else:
        dw = np.empty_like(w)
        for i, j, off in taps:
            dw[i, j] = saved[off : off + m].T @ d[:m]
    if not need_input_grad:
        return None, dw, db
    dflat = np.zeros((n, cin), dtype=dout.dtype)
    if cin <= _IM2COL_MAX_CIN:
        dcols = w.reshape(9 * cin, cout) @ d[:m].T
        for i, j, off in taps:
            k = 3 * i + j
            dflat[off : off + m] += dcols[k * cin : (k + 1) * cin].T
    else:
        for i, j, off in taps:
            dflat[off : off + m] += d[:m] @ w[i, j].T
    dx = dflat.reshape(bsz, t + 2, f + 2, cin)[:, 1:-1, 1:-1, :]
    return np.ascontiguousarray(dx), dw, db


# --- batch normalization -------------------------------------------------

def batchnorm_forward(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray,
                      running_mean: np.ndarray, running_var: np.ndarray,
                      train: bool, update_stats: bool = True):
    """Per-channel normalization over every axis but the last.

    In train mode the running statistics are updated in place (momentum 0.9).
    """
    if train:
        if x.shape[0] < 2:
            raise InvalidInputError("batchnorm in train mode needs a batch of at least 2")
        n = x.size // x.shape[-1]
        mean = channel_sum(x) / n
        var = channel_sum(np.square(x - mean.astype(x.dtype))) / n
        if update_stats:
            running_mean *= BN_MOMENTUM
            running_mean += (1 - BN_MOMENTUM) * mean
            running_var *= BN_MOMENTUM
            running_var += (1 - BN_MOMENTUM) * var * n / max(n - 1, 1)
    else:
        mean = running_mean.astype(np.float64)
        var = running_var.astype(np.float64)
    inv_std = 1.0 / np.sqrt(var + BN_EPS)
    xhat = ((x - mean.astype(x.dtype)) * inv_std.astype(x.dtype))
    out = xhat * gamma + beta
    return out, (xhat, gamma, inv_std.astype(x.dtype), train)


def batchnorm_backward(dout: np.ndarray, cache):
    xhat, gamma, inv_std, train = cache
    dbeta = channel_sum(dout)
    dgamma = channel_sum(dout * xhat)
    dxhat = dout * gamma
    if train:
        n = dout.size // dout.shape[-1]
        dx = (inv_std / n) * (n * dxhat - (dbeta * gamma).astype(dout.dtype)
                              - xhat * (dgamma * gamma).astype(dout.dtype))
    else:
        dx = dxhat * inv_std
    return dx, dgamma.astype(gamma.dtype), dbeta.astype(gamma.dtype)


# --- pooling / reductions ------------------------------------------------

def meanpool_forward(x: np.ndarray, window: tuple[int, int] = (3, 2)):
    """Non-overlapping mean pooling (stride == window); remainders are dropped."""
    pt, pf = window
    bsz, t, f, c = x.shape
    to, fo = t // pt, f // pf
    if to < 1 or fo < 1:
        raise ShapeError(f"input {t}x{f} is smaller than the {pt}x{pf} pooling window")
    blocks = x[:, : to * pt, : fo * pf, :].reshape(bsz, to, pt, fo, pf, c)
    out = blocks[:, :, 0].copy()
    for k in range(1, pt):
        out += blocks[:, :, k]
    pooled = out[:, :, :, 0].copy()
    for k in range(1, pf):
        pooled += out[:, :, :, k]
    pooled *= x.dtype.type(1.0 / (pt * pf))
    return pooled, (x.shape, window)


def meanpool_backward(dout: np.ndarray, cache):
    xshape, (pt, pf) = cache
    bsz, to, fo, c = dout.shape
    dx = np.zeros(xshape, dtype=dout.dtype)
    spread = np.broadcast_to((dout / (pt * pf))[:, :, None, :, None, :], (bsz, to, pt, fo, pf, c))
    dx[:, : to * pt, : fo * pf, :] = spread.reshape(bsz, to * pt, fo * pf, c)
    return dx


def global_mean_forward(x: np.ndarray):
    """Average over time and frequency: (B, T, F, C) -> (B, C)."""
    return x.mean(axis=(1, 2), dtype=np.float64).astype(x.dtype), x.shape


def global_mean_backward(dout: np.ndarray, xshape):
    _, t, f, _ = xshape
    return np.broadcast_to((dout / (t * f))[:, None, None, :], xshape).copy()


# --- pointwise -----------------------------------------------------------

def relu_forward(x: np.ndarray):
    mask = x > 0
    return np.maximum(x, 0, dtype=x.dtype), mask


def relu_backward(dout: np.ndarray, mask):
    return dout * mask


def dropout_forward(x: np.ndarray, rate: float, train: bool, rng: np.random.Generator | None = None):
    """Inverted dropout; identity in eval mode or at rate 0."""
    if not train or rate <= 0:
        return x, None
    if not 0 <= rate < 1:
        raise InvalidInputError(f"dropout rate must be in [0, 1), got {rate}")
    rng = rng if rng is not None else np.random.default_rng()
    keep = rng.random(x.shape) >= rate
    mask = keep.astype(x.dtype) / x.dtype.type(1.0 - rate)
    return x * mask, mask


def dropout_backward(dout: np.ndarray, mask):
    return dout if mask is None else dout * mask


def dense_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray):
    if x.shape[-1] != w.shape[0]:
        raise ShapeError(f"dense input width {x.shape[-1]} != weight rows {w.shape[0]}")
    return x @ w + b, (x, w)


def dense_backward(dout: np.ndarray, cache):
    x, w = cache
    return dout @ w.T, x.T @ dout, dout.sum(axis=0, dtype=np.float64).astype(w.dtype)


def l2_normalize_forward(x: np.ndarray, min_norm: float = 1e-12):
    """Row-wise unit Euclidean norm."""
    norms = np.sqrt(np.sum(np.square(x, dtype=np.float64), axis=-1, keepdims=True))
    if np.any(norms <= min_norm):
        raise InvalidInputError("cannot normalize a zero vector")
    y = (x / norms).astype(x.dtype)
    return y, (y, norms.astype(x.dtype))


def l2_normalize_backward(dout: np.ndarray, cache):
    y, norms = cache
    return (dout - y * np.sum(y * dout, axis=-1, keepdims=True)) / norms


def l2_normalize(v) -> np.ndarray:
    return l2_normalize_forward(np.asarray(v, dtype=np.float64))[0]


# --- optimizer -----------------------------------------------------------

class Adam:
    """Adam with bias correction; parameters are updated in place."""

    def __init__(self, lr: float = 1e-4, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        for name, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise NumericError(f"non-finite gradient for parameter {name!r}")
            if g.shape != params[name].shape:
                raise ShapeError(f"gradient shape {g.shape} != parameter shape {params[name].shape} for {name!r}")
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1**t
        c2 = 1.0 - self.beta2**t
        for name, g in grads.items():
            p = params[name]
            m = self.m.setdefault(name, np.zeros_like(p))
            v = self.v.setdefault(name, np.zeros_like(p))
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * np.square(g)
            p -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype)


# --- checkpoint file -----------------------------------------------------

CKPT_MAGIC = b"CVNW"
CKPT_VERSION = 1


def _pack_tensors(tensors: dict[str, np.ndarray]) -> bytes:
    parts = [struct.pack("<I", len(tensors))]
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f4")
        key = name.encode("utf-8")
        parts.append(struct.pack("<H", len(key)) + key)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise FormatError("checkpoint truncated")
        out = self.blob[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack("<" + fmt, self.take(struct.calcsize("<" + fmt)))

    def tensors(self) -> dict[str, np.ndarray]:
        (count,) = self.unpack("I")
        out = {}
        for _ in range(count):
            (klen,) = self.unpack("H")
            name = self.take(klen).decode("utf-8")
            (rank,) = self.unpack("B")
            dims = self.unpack(f"{rank}I") if rank else ()
            n = int(np.prod(dims, dtype=np.int64))
            out[name] = np.frombuffer(self.take(4 * n), dtype="<f4").reshape(dims).astype(np.float32)
        return out


def encode_checkpoint(k_kernels: int, embed_dim: int, tensors: dict[str, np.ndarray],
                      adam: Adam | None = None) -> bytes:
    blob = [CKPT_MAGIC, struct.pack("<III", CKPT_VERSION, k_kernels, embed_dim), _pack_tensors(tensors)]
    if adam is None:
        blob.append(struct.pack("<B", 0))
    else:
        blob.append(struct.pack("<BQdddd", 1, adam.step_count, adam.lr, adam.beta1, adam.beta2, adam.eps))
        blob.append(_pack_tensors({f"m/{k}": v for k, v in adam.m.items()}
                                  | {f"v/{k}": v for k, v in adam.v.items()}))
    return b"".join(blob)


def decode_checkpoint(blob: bytes):
    """Return ``(k_kernels, embed_dim, tensors, adam_or_None)``."""
    r = _Reader(blob)
    if r.take(4) != CKPT_MAGIC:
        raise FormatError("not a CVNW checkpoint (bad magic)")
    version, k_kernels, embed_dim = r.unpack("III")
    if version != CKPT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    tensors = r.tensors()
    (has_adam,) = r.unpack("B")
    adam = None
    if has_adam:
        step, lr, b1, b2, eps = r.unpack("Qdddd")
        adam = Adam(lr, b1, b2, eps)
        adam.step_count = step
        for key, val in r.tensors().items():
            kind, name = key.split("/", 1)
            (adam.m if kind == "m" else adam.v)[name] = val
    if r.pos != len(blob):
        raise FormatError("trailing bytes after checkpoint payload")
    return k_kernels, embed_dim, tensors, adam


def save_checkpoint(path, k_kernels: int, embed_dim: int, tensors: dict[str, np.ndarray],
                    adam: Adam | None = None) -> None:
    Path(path).write_bytes(encode_checkpoint(k_kernels, embed_dim, tensors, adam))


def load_checkpoint(path):
    return decode_checkpoint(Path(path).read_bytes())
