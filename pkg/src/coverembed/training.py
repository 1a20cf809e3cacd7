"""Triplet training with in-batch negative mining.

Every ordered (anchor, positive) pair of same-work tracks in a batch forms
one triplet.  Its negative is the farthest one still closer than the
positive, or, when no negative is closer, the nearest one.
"""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .encoder import Encoder, EncoderConfig
from .errors import ConfigError, InvalidInputError, MiningError, NumericError
from .nncore import Adam

logger = logging.getLogger(__name__)

SEMI_HARD = "semi-hard"
EASIEST_HARD = "easiest-hard"


@dataclass(frozen=True)
class TripletConfig:
    margin: float = 1.0
    batch_size: int = 100
    works_per_batch: int = 20
    covers_per_work: int = 5
    initial_lr: float = 1e-4
    plateau_window: int = 5000
    lr_factor: float = 0.5
    min_lr: float = 1e-7
    max_steps: int = 100_000
    eval_every: int = 500
    eval_batches: int = 10
    seed: int = 42

    def __post_init__(self):
        if self.works_per_batch * self.covers_per_work != self.batch_size:
            raise ConfigError(f"works_per_batch ({self.works_per_batch}) x covers_per_work "
                              f"({self.covers_per_work}) must equal batch_size ({self.batch_size})")
        if not self.margin > 0:
            raise ConfigError("margin must be positive")
        if self.works_per_batch < 2 or self.covers_per_work < 2:
            raise ConfigError("a batch needs >= 2 works and >= 2 covers per work")
        if self.max_steps < 1 or self.eval_every < 1 or self.plateau_window < 1:
            raise ConfigError("max_steps, eval_every and plateau_window must be >= 1")


@dataclass
class MiningOutcome:
    anchor: int
    positive: int
    negative: int
    d_ap: float
    d_an: float
    kind: str


def pairwise_sq_distances(vectors, unit_tol: float = 1e-4) -> np.ndarray:
    v = np.asarray(vectors, dtype=np.float64)
    if v.ndim != 2:
        raise InvalidInputError(f"expected a (B, E) matrix, got shape {v.shape}")
    if not np.all(np.isfinite(v)):
        raise InvalidInputError("embeddings contain NaN or Inf")
    sq = np.einsum("ij,ij->i", v, v)
    if np.any(np.abs(sq - 1.0) > 2 * unit_tol):
        raise InvalidInputError("embedding rows must be unit-norm")
    d = sq[:, None] + sq[None, :] - 2.0 * (v @ v.T)
    d = np.maximum(0.5 * (d + d.T), 0.0)
    np.fill_diagonal(d, 0.0)
    return d


def mine_negative(dist: np.ndarray, labels, a: int, p: int) -> MiningOutcome:
    labels = np.asarray(labels)
    if a == p or labels[a] != labels[p]:
        raise InvalidInputError("anchor and positive must be distinct tracks of the same work")
    negatives = np.nonzero(labels != labels[a])[0]
    if negatives.size == 0:
        raise MiningError("batch holds a single work; no negative available")
    d_ap = float(dist[a, p])
    d_an = dist[a, negatives]
    closer = d_an < d_ap
    if closer.any():
        idx = int(np.argmax(np.where(closer, d_an, -np.inf)))
        kind = SEMI_HARD
    else:
        idx = int(np.argmin(d_an))
        kind = EASIEST_HARD
    n = int(negatives[idx])
    return MiningOutcome(a, p, n, d_ap, float(dist[a, n]), kind)


def mine_batch(dist: np.ndarray, labels) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorized mining over every (anchor, positive) pair; returns index arrays (a, p, n)."""
    labels = np.asarray(labels)
    same = labels[:, None] == labels[None, :]
    if same.all():
        raise MiningError("batch holds a single work; no negative available")
    anchors, positives, negs = [], [], []
    for a in range(len(labels)):
        pos = np.nonzero(same[a])[0]
        pos = pos[pos != a]
        if pos.size == 0:
            continue
        neg = np.nonzero(~same[a])[0]
        d_ap = dist[a, pos][:, None]
        d_an = dist[a, neg][None, :]
        closer = d_an < d_ap
        semi = np.argmax(np.where(closer, d_an, -np.inf), axis=1)
        easy = np.argmin(np.broadcast_to(d_an, closer.shape), axis=1)
        pick = np.where(closer.any(axis=1), semi, easy)
        anchors.append(np.full(pos.size, a))
        positives.append(pos)
        negs.append(neg[pick])
    if not anchors:
        raise InvalidInputError("no track in the batch has an in-batch positive")
    return np.concatenate(anchors), np.concatenate(positives), np.concatenate(negs)


@dataclass
class LossResult:
    loss: float
    grad: np.ndarray
    active_fraction: float
    n_triplets: int
    triplets: tuple = field(repr=False, default=())


def batch_triplet_loss(embeddings, labels, margin: float = 1.0) -> LossResult:
    """Mean hinge ``max(0, d_ap + margin - d_an)`` over all in-batch (anchor, positive) pairs.

    The gradient treats the mined negatives as fixed and flows only through
    triplets with a positive hinge.
    """
    emb = np.asarray(embeddings)
    x = emb.astype(np.float64)
    dist = pairwise_sq_distances(x)
    a, p, n = mine_batch(dist, labels)
    hinge = dist[a, p] + margin - dist[a, n]
    active = hinge > 0
    count = a.size
    loss = float(np.maximum(hinge, 0.0).sum() / count)

    grad = np.zeros_like(x)
    aa, pp, nn_ = a[active], p[active], n[active]
    scale = 2.0 / count
    np.add.at(grad, aa, scale * (x[nn_] - x[pp]))
    np.add.at(grad, pp, scale * (x[pp] - x[aa]))
    np.add.at(grad, nn_, scale * (x[aa] - x[nn_]))
    return LossResult(loss, grad.astype(emb.dtype if np.issubdtype(emb.dtype, np.floating) else np.float64),
                      float(active.mean()), int(count), (a, p, n))


# --- data ------------------------------------------------------------------

@dataclass
class TrackSet:
    """Preprocessed inputs ``(N, 1024, 36)`` with their work labels."""

    inputs: np.ndarray
    works: np.ndarray
    track_ids: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.works = np.asarray(self.works)
        if len(self.inputs) != len(self.works):
            raise InvalidInputError("inputs and works differ in length")
        if not self.track_ids:
            self.track_ids = [str(i) for i in range(len(self.works))]

    def by_work(self) -> dict:
        groups: dict = {}
        for i, w in enumerate(self.works.tolist()):
            groups.setdefault(w, []).append(i)
        return groups


def sample_batch(tracks: TrackSet, config: TripletConfig, rng: np.random.Generator):
    """Draw ``works_per_batch`` distinct works and ``covers_per_work`` distinct tracks of each.

    Returns ``(inputs, labels, indices)``.
    """
    groups = tracks.by_work()
    eligible = sorted((w for w, idx in groups.items() if len(idx) >= config.covers_per_work), key=str)
    if len(eligible) < config.works_per_batch:
        raise ConfigError(f"only {len(eligible)} works have >= {config.covers_per_work} tracks; "
                          f"a batch needs {config.works_per_batch}")
    chosen = rng.choice(len(eligible), size=config.works_per_batch, replace=False)
    indices = []
    for w in chosen:
        members = groups[eligible[w]]
        indices.extend(members[i] for i in rng.choice(len(members), size=config.covers_per_work, replace=False))
    indices = np.asarray(indices)
    return tracks.inputs[indices], tracks.works[indices], indices


# --- loop ------------------------------------------------------------------

@dataclass
class TrainResult:
    encoder: Encoder
    log: list[dict]
    best_eval_loss: float
    best_step: int
    stop_reason: str
    adam: Adam | None = None
    initial_eval_loss: float = math.nan


LOG_FIELDS = ["step", "train_loss", "eval_loss", "lr", "active_triplet_fraction"]


def evaluation_loss(encoder: Encoder, batches, margin: float) -> float:
    losses = [batch_triplet_loss(encoder.forward(x)[0], y, margin).loss for x, y in batches]
    return float(np.mean(losses))


def train(train_set: TrackSet, eval_set: TrackSet, encoder_config: EncoderConfig | None = None,
          config: TripletConfig | None = None, encoder: Encoder | None = None,
          log_path=None, checkpoint_path=None, progress_every: int = 0) -> TrainResult:
    """Adam training with a halve-on-plateau schedule; returns the best-eval encoder.

    The evaluation loss is measured every ``eval_every`` steps (and at the
    last step) on fixed seeded batches in eval mode.  When it has not improved
    on its best value for ``plateau_window`` steps the learning rate is
    multiplied by ``lr_factor``; training stops at ``max_steps`` or once the
    learning rate drops below ``min_lr``.
    """
    config = config or TripletConfig()
    encoder = encoder or Encoder(encoder_config or EncoderConfig(), seed=config.seed)
    if set(train_set.works.tolist()) & set(eval_set.works.tolist()):
        raise ConfigError("train and eval splits share works")

    rng = np.random.default_rng(config.seed)
    eval_rng = np.random.default_rng([config.seed, 1])
    eval_batches = [sample_batch(eval_set, config, eval_rng)[:2] for _ in range(config.eval_batches)]
    adam = Adam(lr=config.initial_lr)
    initial_eval = evaluation_loss(encoder, eval_batches, config.margin)

    best_loss = math.inf
    best_step = 0
    best_state = encoder.copy()
    since = 0
    log: list[dict] = []
    stop_reason = "max_steps"
    started = time.perf_counter()

    for step in range(1, config.max_steps + 1):
        x, labels, _ = sample_batch(train_set, config, rng)
        emb, cache = encoder.forward(x, train=True, rng=rng)
        res = batch_triplet_loss(emb, labels, config.margin)
        if not math.isfinite(res.loss):
            raise NumericError(f"non-finite training loss at step {step}")
        grads = encoder.backward(res.grad, cache)
        adam.step(encoder.params, grads)

        row = {"step": step, "train_loss": res.loss, "eval_loss": "", "lr": adam.lr,
               "active_triplet_fraction": res.active_fraction}
        if step % config.eval_every == 0 or step == config.max_steps:
            ev = evaluation_loss(encoder, eval_batches, config.margin)
            if not math.isfinite(ev):
                raise NumericError(f"non-finite evaluation loss at step {step}")
            row["eval_loss"] = ev
            if ev < best_loss:
                best_loss, best_step, since = ev, step, step
                best_state = encoder.copy()
            elif step - since >= config.plateau_window:
                adam.lr *= config.lr_factor
                since = step
                logger.info("step %d: eval loss stalled, lr -> %.3g", step, adam.lr)
        log.append(row)
        if progress_every and step % progress_every == 0:
            logger.info("step %d loss %.4f active %.2f (%.1fs)", step, res.loss, res.active_fraction,
                        time.perf_counter() - started)
        if adam.lr < config.min_lr:
            stop_reason = "min_lr"
            break

    if log_path is not None:
        write_log(log, log_path)
    if checkpoint_path is not None:
        best_state.save(checkpoint_path)
    return TrainResult(best_state, log, best_loss, best_step, stop_reason, adam, initial_eval)


def write_log(rows: list[dict], path) -> None:
    with Path(path).open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=LOG_FIELDS)
        writer.writeheader()
        writer.writerows(rows)
