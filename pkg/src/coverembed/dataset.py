"""Track/work manifests, filtering, and work-disjoint splits.

Manifests are JSON Lines with the keys ``track_id``, ``work_id``,
``duration_sec``, ``f0_path`` and optionally ``audio_path``.
"""

from __future__ import annotations

import hashlib
import json
import logging
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError

logger = logging.getLogger(__name__)


@dataclass
class TrackRecord:
    track_id: str
    work_id: str
    duration_sec: float
    f0_path: str | None = None
    audio_path: str | None = None

    def to_json(self) -> dict:
        out = {"track_id": self.track_id, "work_id": self.work_id,
               "duration_sec": self.duration_sec, "f0_path": self.f0_path}
        if self.audio_path is not None:
            out["audio_path"] = self.audio_path
        return out


@dataclass
class Manifest:
    records: list[TrackRecord] = field(default_factory=list)
    root: Path | None = None

    def __post_init__(self):
        seen = set()
        for r in self.records:
            if r.track_id in seen:
                raise DataError(f"duplicate track_id {r.track_id!r}")
            seen.add(r.track_id)

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def by_work(self) -> dict[str, list[TrackRecord]]:
        groups: dict[str, list[TrackRecord]] = defaultdict(list)
        for r in self.records:
            groups[r.work_id].append(r)
        return dict(groups)

    def by_track(self) -> dict[str, TrackRecord]:
        return {r.track_id: r for r in self.records}

    def subset(self, track_ids) -> "Manifest":
        keep = set(track_ids)
        return Manifest([r for r in self.records if r.track_id in keep], self.root)

    def resolve(self, rel: str | None) -> Path | None:
        if rel is None:
            return None
        p = Path(rel)
        return p if p.is_absolute() or self.root is None else self.root / p

    def check_resolvable(self) -> list[str]:
        """Track ids whose input file is missing."""
        bad = []
        for r in self.records:
            paths = [self.resolve(r.f0_path), self.resolve(r.audio_path)]
            if not any(p is not None and p.exists() for p in paths):
                bad.append(r.track_id)
        return bad

    def digest(self) -> str:
        h = hashlib.sha256()
        for r in sorted(self.records, key=lambda r: r.track_id):
            h.update(json.dumps(r.to_json(), sort_keys=True).encode())
        return h.hexdigest()


def load_manifest(path) -> Manifest:
    path = Path(path)
    records = []
    with path.open() as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                records.append(TrackRecord(str(obj["track_id"]), str(obj["work_id"]),
                                           float(obj["duration_sec"]), obj.get("f0_path"),
                                           obj.get("audio_path")))
            except (KeyError, ValueError, TypeError) as exc:
                raise DataError(f"{path}:{lineno}: bad manifest record ({exc})") from exc
    return Manifest(records, path.parent)


def save_manifest(manifest: Manifest, path) -> None:
    with Path(path).open("w") as fh:
        for r in manifest.records:
            fh.write(json.dumps(r.to_json()) + "\n")


def filter_manifest(manifest: Manifest, min_covers: int = 5, max_covers: int = 15,
                    min_dur: float = 60.0, max_dur: float = 300.0) -> Manifest:
    """Drop tracks outside [min_dur, max_dur], then works whose surviving count is outside [min_covers, max_covers]."""
    timed = [r for r in manifest.records if min_dur <= r.duration_sec <= max_dur]
    counts: dict[str, int] = defaultdict(int)
    for r in timed:
        counts[r.work_id] += 1
    kept = [r for r in timed if min_covers <= counts[r.work_id] <= max_covers]
    return Manifest(kept, manifest.root)


@dataclass
class Split:
    name: str
    seed: int
    work_ids: list[str]
    track_ids: list[str]

    def to_json(self) -> dict:
        return asdict(self)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1))

    @classmethod
    def load(cls, path) -> "Split":
        obj = json.loads(Path(path).read_text())
        return cls(obj["name"], int(obj["seed"]), list(obj["work_ids"]), list(obj["track_ids"]))


def _sorted_groups(manifest: Manifest) -> tuple[list[str], dict[str, list[str]]]:
    groups = {w: sorted(r.track_id for r in recs) for w, recs in manifest.by_work().items()}
    return sorted(groups), groups


def split_by_work(manifest: Manifest, eval_fraction: float, covers_per_work: int = 5,
                  seed: int = 42) -> tuple[Split, Split]:
    """Partition works into train/eval and keep ``covers_per_work`` random tracks of each."""
    if not 0 < eval_fraction < 1:
        raise ConfigError("eval_fraction must lie in (0, 1)")
    rng = np.random.default_rng(seed)
    works, groups = _sorted_groups(manifest)
    eligible = []
    for w in works:
        if len(groups[w]) < covers_per_work:
            logger.warning("work %s has %d tracks (< %d); skipped", w, len(groups[w]), covers_per_work)
        else:
            eligible.append(w)
    n_eval = int(round(len(eligible) * eval_fraction))
    if n_eval < 1 or n_eval >= len(eligible):
        raise ConfigError(f"{len(eligible)} eligible works cannot be split with eval_fraction={eval_fraction}")
    order = rng.permutation(len(eligible))
    eval_works = sorted(eligible[i] for i in order[:n_eval])
    train_works = sorted(eligible[i] for i in order[n_eval:])

    def pick(ws):
        tracks = []
        for w in ws:
            members = groups[w]
            tracks.extend(members[i] for i in sorted(rng.choice(len(members), covers_per_work, replace=False)))
        return tracks

    return (Split("train", seed, train_works, pick(train_works)),
            Split("eval", seed, eval_works, pick(eval_works)))


def build_query_reference(manifest: Manifest, mode: str = "pushing", seed: int = 42, *,
                          n_query_works: int = 1244, query_covers: int = 5,
                          P: int = 5, N: int = 5, ratio: tuple[int, int] = (1, 5)) -> tuple[Split, Split]:
    """Query/reference sets for lookup experiments.

    ``pushing`` and ``pulling`` build the same construction (they differ only
    in which of N or P a sweep varies): ``n_query_works`` works contribute
    ``query_covers`` tracks to the query set and ``P`` other tracks to the
    reference set; every other work with at least ``N`` tracks contributes
    ``N`` tracks to the reference set.  ``ratio`` splits all tracks at random
    in the proportion ``q:r``.
    """
    rng = np.random.default_rng(seed)
    works, groups = _sorted_groups(manifest)

    if mode == "ratio":
        q, r = ratio
        if q <= 0 or r <= 0:
            raise ConfigError("ratio terms must be positive")
        tracks = sorted(t for w in works for t in groups[w])
        n_query = int(round(len(tracks) * q / (q + r)))
        if n_query < 1 or n_query >= len(tracks):
            raise ConfigError(f"ratio {q}:{r} leaves an empty set for {len(tracks)} tracks")
        order = rng.permutation(len(tracks))
        query = sorted(tracks[i] for i in order[:n_query])
        ref = sorted(tracks[i] for i in order[n_query:])
        owner = {t: w for w in works for t in groups[w]}
        return (Split("query", seed, sorted({owner[t] for t in query}), query),
                Split("reference", seed, sorted({owner[t] for t in ref}), ref))

    if mode not in ("pushing", "pulling"):
        raise ConfigError(f"unknown mode {mode!r}")
    if min(P, N) < 0 or query_covers < 1 or n_query_works < 1:
        raise ConfigError("P and N must be >= 0; query_covers and n_query_works >= 1")
    need = query_covers + P
    eligible = [w for w in works if len(groups[w]) >= need]
    if len(eligible) < n_query_works:
        raise ConfigError(f"only {len(eligible)} works have >= {need} tracks; "
                          f"{n_query_works} query works requested")
    chosen = set(eligible[i] for i in rng.choice(len(eligible), n_query_works, replace=False))
    query, ref, ref_works = [], [], []
    skipped = 0
    for w in works:
        members = groups[w]
        order = rng.permutation(len(members))
        if w in chosen:
            query.extend(members[i] for i in order[:query_covers])
            ref.extend(members[i] for i in order[query_covers:need])
            if P:
                ref_works.append(w)
        elif len(members) >= N:
            if N:
                ref.extend(members[i] for i in order[:N])
                ref_works.append(w)
        else:
            skipped += 1
    if skipped:
        logger.info("%d non-query works have fewer than N=%d tracks; left out of the reference set", skipped, N)
    return (Split("query", seed, sorted(chosen), sorted(query)),
            Split("reference", seed, sorted(ref_works), sorted(ref)))
