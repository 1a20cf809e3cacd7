import csv

import numpy as np
import pytest

from coverembed import training
from coverembed.encoder import Encoder, EncoderConfig
from coverembed.errors import ConfigError, CoverEmbedError, InvalidInputError, MiningError
from coverembed.training import (
    TrackSet,
    TripletConfig,
    batch_triplet_loss,
    mine_batch,
    mine_negative,
    pairwise_sq_distances,
    sample_batch,
)
from gradcheck import probe_gradients
from oracles import oracle_loss, oracle_negative, random_unit


class TestDistances:
    def test_examples(self):
        v = np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0], [-1.0, 0.0]])
        d = pairwise_sq_distances(v)
        assert d[0, 1] == 0 and d[0, 2] == pytest.approx(2) and d[0, 3] == pytest.approx(4)

    def test_non_finite(self):
        with pytest.raises(InvalidInputError):
            pairwise_sq_distances(np.array([[np.nan, 1.0], [1.0, 0.0]]))

    def test_not_unit(self):
        with pytest.raises(InvalidInputError):
            pairwise_sq_distances(np.array([[2.0, 0.0], [1.0, 0.0]]))


def _with_distances(d_ap, negatives):
    """Distance matrix whose row 0 has positive 1 at d_ap and the given negatives."""
    n = 2 + len(negatives)
    dist = np.zeros((n, n))
    dist[0, 1] = dist[1, 0] = d_ap
    for i, d in enumerate(negatives, start=2):
        dist[0, i] = dist[i, 0] = d
    return dist, [0, 0] + list(range(1, len(negatives) + 1))


class TestMining:
    def test_highest_below_positive(self):
        dist, labels = _with_distances(1.0, [0.5, 0.8, 1.5])
        out = mine_negative(dist, labels, 0, 1)
        assert out.d_an == 0.8 and out.kind == training.SEMI_HARD

    def test_lowest_when_none_below(self):
        dist, labels = _with_distances(1.0, [1.5, 1.2])
        out = mine_negative(dist, labels, 0, 1)
        assert out.d_an == 1.2 and out.negative == 3 and out.kind == training.EASIEST_HARD

    @pytest.mark.parametrize("d", [0.0, 0.7, 3.9])
    def test_single_negative(self, d):
        dist, labels = _with_distances(1.0, [d])
        assert mine_negative(dist, labels, 0, 1).negative == 2

    def test_ties_take_lowest_index(self):
        dist, labels = _with_distances(1.0, [0.5, 0.5, 2.0, 2.0])
        assert mine_negative(dist, labels, 0, 1).negative == 2
        dist, labels = _with_distances(1.0, [2.0, 2.0])
        assert mine_negative(dist, labels, 0, 1).negative == 2

    def test_single_work(self):
        with pytest.raises(MiningError):
            mine_negative(np.zeros((2, 2)), [0, 0], 0, 1)

    def test_bad_pair(self):
        with pytest.raises(InvalidInputError):
            mine_negative(np.zeros((3, 3)), [0, 0, 1], 0, 2)

    def test_matches_oracle_on_random_instances(self):
        rng = np.random.default_rng(0)
        for _ in range(300):
            n = int(rng.integers(3, 12))
            labels = rng.integers(0, 3, n)
            # quantized distances produce plenty of ties
            d = np.round(rng.uniform(0, 4, (n, n)), 1)
            d = np.triu(d, 1) + np.triu(d, 1).T
            for a in range(n):
                for p in range(n):
                    if a != p and labels[a] == labels[p] and np.any(labels != labels[a]):
                        assert mine_negative(d, labels, a, p).negative == oracle_negative(d, labels, a, p)

    def test_batch_agrees_with_single(self):
        rng = np.random.default_rng(1)
        labels = np.repeat(np.arange(4), 3)
        d = pairwise_sq_distances(random_unit(rng, 12, 6))
        a, p, n = mine_batch(d, labels)
        assert a.size == 4 * 3 * 2
        for ai, pi, ni in zip(a, p, n):
            assert mine_negative(d, labels, ai, pi).negative == ni


class TestLoss:
    def test_collapsed_works_far_apart(self):
        emb = np.repeat(np.eye(3), 2, axis=0)  # d_ap = 0, d_an = 2
        res = batch_triplet_loss(emb, [0, 0, 1, 1, 2, 2], margin=1.0)
        assert res.loss == 0 and res.active_fraction == 0 and not res.grad.any()

    def test_equidistant_gives_margin(self):
        # (e0 + ei)/sqrt(2): every pair at squared distance 1
        e = np.eye(7)
        emb = (e[0] + e[1:]) / np.sqrt(2)
        res = batch_triplet_loss(emb, [0, 0, 1, 1, 2, 2], margin=1.0)
        assert res.loss == pytest.approx(1.0)

    def test_matches_brute_force(self):
        rng = np.random.default_rng(2)
        for _ in range(40):
            emb = random_unit(rng, 12, 4)
            labels = rng.integers(0, 4, 12)
            if np.all(np.bincount(labels) < 2) or len(set(labels)) < 2:
                continue
            margin = float(rng.uniform(0.1, 2.0))
            assert batch_triplet_loss(emb, labels, margin).loss == pytest.approx(
                oracle_loss(emb, labels, margin), abs=1e-6)

    def test_gradient_against_differences(self):
        rng = np.random.default_rng(3)
        emb = random_unit(rng, 12, 5)
        labels = np.repeat(np.arange(4), 3)
        res = batch_triplet_loss(emb, labels, 1.0)
        arrays = {"e": emb}

        def loss():
            d = np.sum((arrays["e"][:, None] - arrays["e"][None]) ** 2, axis=-1)
            a, p, n = res.triplets
            return float(np.maximum(d[a, p] + 1.0 - d[a, n], 0).mean())

        errors = probe_gradients(loss, arrays, {"e": res.grad}, 120, rng, step=1e-6)
        assert max(errors) < 1e-5

    def test_grad_dtype_follows_input(self):
        emb = random_unit(np.random.default_rng(4), 6, 3).astype(np.float32)
        assert batch_triplet_loss(emb, [0, 0, 1, 1, 2, 2]).grad.dtype == np.float32


def test_encoder_and_loss_gradients():
    enc = Encoder(EncoderConfig(k_kernels=2, embed_dim=8), seed=0, dtype=np.float64)
    rng = np.random.default_rng(0)
    # dense input: runs of identical cells would put many ReLU units on the kink at once
    x = rng.random((8, 1024, 36))
    labels = np.repeat(np.arange(4), 2)

    def forward():
        return enc.forward(x, train=True, rng=np.random.default_rng(7), update_stats=False)

    out, cache = forward()
    grads = enc.backward(batch_triplet_loss(out, labels).grad, cache)
    errors = probe_gradients(lambda: batch_triplet_loss(forward()[0], labels).loss,
                             enc.params, grads, 120, np.random.default_rng(1), step=1e-6)
    assert max(errors) <= 1e-3


def tiny_set(n_works=6, covers=3, seed=0, prefix="w"):
    rng = np.random.default_rng(seed)
    x = rng.random((n_works * covers, 1024, 36)).astype(np.float32)
    works = np.repeat([f"{prefix}{i}" for i in range(n_works)], covers)
    return TrackSet(x, works, [f"{w}_{i}" for i, w in enumerate(works)])


class TestSampling:
    def test_default_composition(self):
        rng = np.random.default_rng(0)
        works = np.repeat(np.arange(30), 6)
        ts = TrackSet(np.zeros((180, 1, 1)), works)
        _, labels, idx = sample_batch(ts, TripletConfig(), rng)
        counts = np.unique(labels, return_counts=True)[1]
        assert len(counts) == 20 and np.all(counts == 5) and len(set(idx.tolist())) == 100

    def test_small_batch(self):
        cfg = TripletConfig(batch_size=4, works_per_batch=2, covers_per_work=2)
        x, labels, _ = sample_batch(tiny_set(), cfg, np.random.default_rng(1))
        assert x.shape[0] == 4 and len(set(labels.tolist())) == 2

    def test_seeded(self):
        cfg = TripletConfig(batch_size=4, works_per_batch=2, covers_per_work=2)
        a = sample_batch(tiny_set(), cfg, np.random.default_rng(5))[2]
        b = sample_batch(tiny_set(), cfg, np.random.default_rng(5))[2]
        np.testing.assert_array_equal(a, b)

    def test_insufficient_data(self):
        cfg = TripletConfig(batch_size=20, works_per_batch=10, covers_per_work=2)
        with pytest.raises(ConfigError):
            sample_batch(tiny_set(), cfg, np.random.default_rng(0))

    def test_config_product(self):
        with pytest.raises(ConfigError):
            TripletConfig(batch_size=40, works_per_batch=8, covers_per_work=4)


TINY = EncoderConfig(k_kernels=1, embed_dim=4)


def small_config(**kw):
    base = dict(batch_size=4, works_per_batch=2, covers_per_work=2, max_steps=10, eval_every=1,
                eval_batches=1, initial_lr=1e-3)
    base.update(kw)
    return TripletConfig(**base)


class TestTrainLoop:
    def test_log_and_checkpoint(self, tmp_path):
        res = training.train(tiny_set(), tiny_set(prefix="e", seed=1), TINY, small_config(eval_every=4),
                             log_path=tmp_path / "log.csv", checkpoint_path=tmp_path / "m.cvnw")
        rows = list(csv.DictReader((tmp_path / "log.csv").open()))
        assert len(rows) == 10 and list(rows[0]) == training.LOG_FIELDS
        assert [r["step"] for r in rows] == [str(i) for i in range(1, 11)]
        evaluated = [int(r["step"]) for r in rows if r["eval_loss"]]
        assert evaluated == [4, 8, 10]
        assert (tmp_path / "m.cvnw").exists() and res.best_step in evaluated

    def test_plateau_halves_lr(self, monkeypatch):
        monkeypatch.setattr(training, "evaluation_loss", lambda *a, **k: 1.0)
        res = training.train(tiny_set(), tiny_set(prefix="e", seed=1), TINY,
                             small_config(plateau_window=3, max_steps=8))
        lrs = [r["lr"] for r in res.log]
        # best at step 1; no improvement by step 4, then again by step 7
        assert lrs[:4] == [1e-3] * 4
        assert lrs[4:7] == [5e-4] * 3
        assert lrs[7] == 2.5e-4

    def test_min_lr_stops_early(self, monkeypatch):
        monkeypatch.setattr(training, "evaluation_loss", lambda *a, **k: 1.0)
        res = training.train(tiny_set(), tiny_set(prefix="e", seed=1), TINY,
                             small_config(initial_lr=4e-7, plateau_window=1, max_steps=100))
        assert res.stop_reason == "min_lr" and len(res.log) == 4

    def test_overlapping_splits(self):
        with pytest.raises(ConfigError):
            training.train(tiny_set(), tiny_set(), TINY, small_config())

    def test_non_finite_input_aborts(self):
        bad = tiny_set()
        bad.inputs[:] = np.nan
        with pytest.raises(CoverEmbedError):
            training.train(bad, tiny_set(prefix="e", seed=1), TINY, small_config())

    def test_deterministic(self):
        runs = [training.train(tiny_set(), tiny_set(prefix="e", seed=1), TINY, small_config(max_steps=3))
                for _ in range(2)]
        assert runs[0].encoder.fingerprint() == runs[1].encoder.fingerprint()
        assert [r["train_loss"] for r in runs[0].log] == [r["train_loss"] for r in runs[1].log]
