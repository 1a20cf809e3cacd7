"""Five-block convolutional encoder: melody matrix -> unit-norm embedding.

Each block is batchnorm -> 3x3 conv -> ReLU -> 3x2 mean pool -> dropout,
with K, 2K, 4K, 8K, 16K output channels.  A global time/frequency average,
a dense layer and L2 normalization follow.
"""

from __future__ import annotations

import hashlib
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import nncore as nn
from .errors import ConfigError, DataError, ShapeError
from .preprocess import OUT_FREQ, OUT_TIME

logger = logging.getLogger(__name__)

N_BLOCKS = 5
POOL = (3, 2)


@dataclass(frozen=True)
class EncoderConfig:
    k_kernels: int = 64
    embed_dim: int = 512
    dropout_rates: tuple[float, ...] = (0.0, 0.1, 0.1, 0.2, 0.3)
    input_shape: tuple[int, int] = (OUT_TIME, OUT_FREQ)

    def __post_init__(self):
        if self.k_kernels < 1 or self.embed_dim < 1:
            raise ConfigError("k_kernels and embed_dim must be >= 1")
        if len(self.dropout_rates) != N_BLOCKS:
            raise ConfigError(f"need exactly {N_BLOCKS} dropout rates")

    @property
    def widths(self) -> list[int]:
        return [self.k_kernels * 2**i for i in range(N_BLOCKS)]

    @property
    def feature_dim(self) -> int:
        return self.widths[-1]


@dataclass
class Embedding:
    track_id: str
    vector: np.ndarray


def spatial_trajectory(input_shape=(OUT_TIME, OUT_FREQ)) -> list[tuple[int, int]]:
    shapes = [tuple(input_shape)]
    for _ in range(N_BLOCKS):
        t, f = shapes[-1]
        shapes.append((t // POOL[0], f // POOL[1]))
    return shapes


@dataclass
class _Cache:
    blocks: list = field(default_factory=list)
    pooled_shape: tuple = ()
    dense: tuple = ()
    norm: tuple = ()


class Encoder:
    def __init__(self, config: EncoderConfig | None = None, seed: int = 0, dtype=np.float32):
        self.config = config or EncoderConfig()
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        self.params: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}
        cin = 1
        for i, cout in enumerate(self.config.widths):
            p = f"block{i}"
            self.params[f"{p}.bn.gamma"] = np.ones(cin, self.dtype)
            self.params[f"{p}.bn.beta"] = np.zeros(cin, self.dtype)
            self.params[f"{p}.conv.w"] = (rng.standard_normal((3, 3, cin, cout))
                                          * np.sqrt(2.0 / (9 * cin))).astype(self.dtype)
            self.params[f"{p}.conv.b"] = np.zeros(cout, self.dtype)
            self.buffers[f"{p}.bn.running_mean"] = np.zeros(cin, np.float32)
            self.buffers[f"{p}.bn.running_var"] = np.ones(cin, np.float32)
            cin = cout
        e = self.config.embed_dim
        self.params["dense.w"] = (rng.standard_normal((cin, e)) * np.sqrt(2.0 / cin)).astype(self.dtype)
        self.params["dense.b"] = np.zeros(e, self.dtype)

    def num_parameters(self) -> int:
        return sum(int(v.size) for v in self.params.values())

    def _check_input(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=self.dtype)
        if x.ndim == 3:
            x = x[..., None]
        if x.ndim != 4 or x.shape[1:] != (*self.config.input_shape, 1):
            raise ShapeError(f"encoder expects (B, {self.config.input_shape[0]}, "
                             f"{self.config.input_shape[1]}[, 1]) input, got {x.shape}")
        return x

    def forward(self, x, train: bool = False, rng: np.random.Generator | None = None,
                update_stats: bool = True, return_features: bool = False):
        """Return ``(embeddings, cache)``; cache feeds :meth:`backward`."""
        h = self._check_input(x)
        cache = _Cache()
        for i, rate in enumerate(self.config.dropout_rates):
            p = f"block{i}"
            h, bn_c = nn.batchnorm_forward(h, self.params[f"{p}.bn.gamma"], self.params[f"{p}.bn.beta"],
                                           self.buffers[f"{p}.bn.running_mean"],
                                           self.buffers[f"{p}.bn.running_var"], train, update_stats)
            h, conv_c = nn.conv2d_forward(h, self.params[f"{p}.conv.w"], self.params[f"{p}.conv.b"])
            h, relu_c = nn.relu_forward(h)
            h, pool_c = nn.meanpool_forward(h, POOL)
            h, drop_c = nn.dropout_forward(h, rate, train, rng)
            cache.blocks.append((bn_c, conv_c, relu_c, pool_c, drop_c))
        feats, cache.pooled_shape = nn.global_mean_forward(h)
        z, cache.dense = nn.dense_forward(feats, self.params["dense.w"], self.params["dense.b"])
        out, cache.norm = nn.l2_normalize_forward(z)
        if return_features:
            return out, cache, feats
        return out, cache

    def backward(self, dout: np.ndarray, cache: _Cache) -> dict[str, np.ndarray]:
        grads: dict[str, np.ndarray] = {}
        dz = nn.l2_normalize_backward(dout.astype(self.dtype), cache.norm)
        dfeat, grads["dense.w"], grads["dense.b"] = nn.dense_backward(dz, cache.dense)
        dh = nn.global_mean_backward(dfeat, cache.pooled_shape)
        for i in reversed(range(N_BLOCKS)):
            p = f"block{i}"
            bn_c, conv_c, relu_c, pool_c, drop_c = cache.blocks[i]
            dh = nn.dropout_backward(dh, drop_c)
            dh = nn.meanpool_backward(dh, pool_c)
            dh = nn.relu_backward(dh, relu_c)
            dh, grads[f"{p}.conv.w"], grads[f"{p}.conv.b"] = nn.conv2d_backward(dh, conv_c)
            dh, grads[f"{p}.bn.gamma"], grads[f"{p}.bn.beta"] = nn.batchnorm_backward(dh, bn_c)
        return grads

    def embed(self, x, batch_size: int = 32) -> np.ndarray:
        """Eval-mode embeddings in fixed-size chunks."""
        x = self._check_input(x)
        if x.shape[0] == 0:
            return np.zeros((0, self.config.embed_dim), self.dtype)
        chunks = [self.forward(x[i : i + batch_size])[0] for i in range(0, x.shape[0], batch_size)]
        return np.concatenate(chunks, axis=0)

    # --- state -----------------------------------------------------------

    def state(self) -> dict[str, np.ndarray]:
        return {**self.params, **{k: v.astype(np.float32) for k, v in self.buffers.items()}}

    def load_state(self, tensors: dict[str, np.ndarray]) -> None:
        missing = (set(self.params) | set(self.buffers)) - set(tensors)
        if missing:
            raise DataError(f"checkpoint lacks tensors: {sorted(missing)}")
        for name in self.params:
            if tensors[name].shape != self.params[name].shape:
                raise ShapeError(f"{name}: checkpoint shape {tensors[name].shape} != {self.params[name].shape}")
            self.params[name] = tensors[name].astype(self.dtype).copy()
        for name in self.buffers:
            self.buffers[name] = tensors[name].astype(np.float32).copy()

    def copy(self, dtype=None) -> "Encoder":
        other = Encoder.__new__(Encoder)
        other.config = self.config
        other.dtype = np.dtype(dtype or self.dtype)
        other.params = {k: v.astype(other.dtype).copy() for k, v in self.params.items()}
        other.buffers = {k: v.copy() for k, v in self.buffers.items()}
        return other

    def save(self, path, adam: nn.Adam | None = None) -> None:
        nn.save_checkpoint(path, self.config.k_kernels, self.config.embed_dim, self.state(), adam)

    @classmethod
    def load(cls, path, config: EncoderConfig | None = None):
        """Return ``(encoder, adam_or_None)`` from a CVNW checkpoint."""
        k, e, tensors, adam = nn.load_checkpoint(path)
        if config is None:
            config = EncoderConfig(k_kernels=k, embed_dim=e)
        elif (config.k_kernels, config.embed_dim) != (k, e):
            raise ConfigError(f"checkpoint is K={k}, E={e}; config asks K={config.k_kernels}, E={config.embed_dim}")
        enc = cls(config)
        enc.load_state(tensors)
        return enc, adam

    def fingerprint(self) -> str:
        return hashlib.sha256(nn.encode_checkpoint(self.config.k_kernels, self.config.embed_dim,
                                                   self.state())).hexdigest()


def embed_tracks(inputs, encoder: Encoder, parallelism: int = 1, batch_size: int = 32):
    """Embed ``(track_id, loader)`` pairs, where ``loader()`` returns a 1024x36 matrix.

    Returns ``(embeddings, failures)``; a failing loader is reported and skipped.
    Chunk boundaries depend only on input order, so results do not change
    with ``parallelism``.
    """
    items = list(inputs)
    chunks = [items[i : i + batch_size] for i in range(0, len(items), batch_size)]

    def run(chunk):
        ids, mats, failed = [], [], []
        for track_id, loader in chunk:
            try:
                mats.append(np.asarray(loader(), dtype=encoder.dtype))
                ids.append(track_id)
            except Exception as exc:  # reported per track, run continues
                logger.warning("track %s failed: %s", track_id, exc)
                failed.append((track_id, str(exc)))
        if not mats:
            return [], failed
        vecs = encoder.forward(np.stack(mats))[0]
        return [Embedding(t, v) for t, v in zip(ids, vecs)], failed

    if parallelism > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=parallelism) as pool:
            results = list(pool.map(run, chunks))
    else:
        results = [run(c) for c in chunks]
    embeddings = [e for r in results for e in r[0]]
    failures = [f for r in results for f in r[1]]
    return embeddings, failures
