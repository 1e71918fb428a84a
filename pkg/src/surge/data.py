"""Interaction logs -> padded training instances.

Item index 0 is reserved for padding; real items are 1..V. Sequences are
left-padded so the most recent behaviour sits at the end of the array.
"""
from __future__ import annotations

import csv
import hashlib
import logging
import zlib
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

logger = logging.getLogger(__name__)

PAD = 0
BEHAVIORS = ("click", "like", "follow", "forward")
SPLITS = ("train", "validation", "test")


class DataError(Exception):
    """Unusable input data (missing file, nothing left after filtering, ...)."""


@dataclass(frozen=True)
class InteractionEvent:
    user_id: str
    item_id: str
    timestamp: int
    behavior: str = "click"

    def __post_init__(self):
        if not self.user_id or not self.item_id:
            raise ValueError("user_id and item_id must be non-empty")
        if self.timestamp < 0:
            raise ValueError(f"negative timestamp {self.timestamp}")


@dataclass(frozen=True)
class TrainingInstance:
    item_seq: tuple[int, ...]
    valid_len: int
    target_item: int
    label: int
    user: int
    group: int


@dataclass
class InstanceSet:
    """Column-oriented collection of instances.

    ``group`` ties a positive instance to the negatives sampled for the same
    event; a group is the candidate list used by the ranking metrics.
    """

    item_seq: np.ndarray  # (N, max_len) int64
    valid_len: np.ndarray  # (N,)
    target: np.ndarray  # (N,)
    label: np.ndarray  # (N,)
    user: np.ndarray  # (N,)
    group: np.ndarray  # (N,)

    def __len__(self) -> int:
        return len(self.label)

    def __iter__(self) -> Iterator[TrainingInstance]:
        for k in range(len(self)):
            yield self[k]

    def __getitem__(self, k: int) -> TrainingInstance:
        return TrainingInstance(
            tuple(int(v) for v in self.item_seq[k]),
            int(self.valid_len[k]),
            int(self.target[k]),
            int(self.label[k]),
            int(self.user[k]),
            int(self.group[k]),
        )

    @property
    def max_len(self) -> int:
        return self.item_seq.shape[1]

    def subset(self, idx) -> "InstanceSet":
        return InstanceSet(
            self.item_seq[idx], self.valid_len[idx], self.target[idx],
            self.label[idx], self.user[idx], self.group[idx],
        )

    @classmethod
    def empty(cls, max_len: int) -> "InstanceSet":
        z = np.zeros(0, dtype=np.int64)
        return cls(np.zeros((0, max_len), dtype=np.int64), z, z.copy(), z.copy(), z.copy(), z.copy())

    @classmethod
    def from_rows(cls, rows: Sequence[tuple], max_len: int) -> "InstanceSet":
        """rows: (seq, valid_len, target, label, user, group) with seq already padded."""
        if not rows:
            return cls.empty(max_len)
        cols = list(zip(*rows))
        return cls(
            np.asarray(cols[0], dtype=np.int64).reshape(len(rows), max_len),
            *(np.asarray(c, dtype=np.int64) for c in cols[1:]),
        )

    # -- line format ---------------------------------------------------------
    # One record per line, tab separated, fixed field order:
    #   item_seq (space separated)  valid_len  target  label  user  group
    def to_lines(self) -> list[str]:
        lines = []
        for k in range(len(self)):
            seq = " ".join(str(int(v)) for v in self.item_seq[k])
            lines.append(
                f"{seq}\t{self.valid_len[k]}\t{self.target[k]}\t{self.label[k]}"
                f"\t{self.user[k]}\t{self.group[k]}"
            )
        return lines

    def save(self, path: str | Path) -> None:
        text = "".join(line + "\n" for line in self.to_lines())
        Path(path).write_text(text, encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path, max_len: int) -> "InstanceSet":
        rows = []
        with open(path, encoding="utf-8") as f:
            for line in f:
                if not line.strip():
                    continue
                seq, vl, tgt, lab, usr, grp = line.rstrip("\n").split("\t")
                rows.append(([int(v) for v in seq.split()], int(vl), int(tgt), int(lab), int(usr), int(grp)))
        return cls.from_rows(rows, max_len)

    def digest(self) -> str:
        h = hashlib.sha256()
        for line in self.to_lines():
            h.update(line.encode())
            h.update(b"\n")
        return h.hexdigest()


@dataclass
class DatasetSplit:
    train: InstanceSet
    validation: InstanceSet
    test: InstanceSet
    item_vocab_size: int  # number of real items; embedding table needs V + 1 rows
    user_index: dict[str, int]
    item_index: dict[str, int] = field(default_factory=dict)
    info: dict = field(default_factory=dict)

    @property
    def max_len(self) -> int:
        return self.train.max_len

    def split(self, name: str) -> InstanceSet:
        return {"train": self.train, "validation": self.validation, "test": self.test}[name]

    def digest(self) -> str:
        h = hashlib.sha256()
        for name in SPLITS:
            h.update(name.encode())
            h.update(self.split(name).digest().encode())
        h.update(str(self.item_vocab_size).encode())
        return h.hexdigest()


# ---------------------------------------------------------------------------
# Ingestion


@dataclass
class LogFormat:
    delimiter: str = ","
    user_col: int = 0
    item_col: int = 1
    time_col: int = 2
    behavior_col: int | None = 3
    has_header: bool = False


def parse_log(path: str | Path, fmt: LogFormat | None = None) -> tuple[list[InteractionEvent], int]:
    """Read a delimited interaction log.

    Returns ``(events, n_malformed)``; events keep file order. A behaviour
    column that is absent on a row defaults to ``click``.
    """
    fmt = fmt or LogFormat()
    path = Path(path)
    if not path.is_file():
        raise DataError(f"log file not found: {path}")

    events: list[InteractionEvent] = []
    bad = 0
    needed = max(fmt.user_col, fmt.item_col, fmt.time_col)
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.reader(f, delimiter=fmt.delimiter)
        if fmt.has_header:
            next(reader, None)
        for lineno, row in enumerate(reader, start=1):
            if not row or all(not c.strip() for c in row):
                continue
            try:
                if len(row) <= needed:
                    raise ValueError("too few columns")
                behavior = "click"
                if fmt.behavior_col is not None and len(row) > fmt.behavior_col:
                    behavior = row[fmt.behavior_col].strip() or "click"
                    if behavior not in BEHAVIORS:
                        raise ValueError(f"unknown behavior {behavior!r}")
                events.append(InteractionEvent(
                    row[fmt.user_col].strip(), row[fmt.item_col].strip(),
                    int(row[fmt.time_col].strip()), behavior,
                ))
            except ValueError as e:
                bad += 1
                logger.debug("skipping line %d of %s: %s", lineno, path, e)
    if bad:
        logger.warning("%s: skipped %d malformed rows", path, bad)
    if not events:
        raise DataError(f"{path}: no valid rows")
    return events, bad


def k_core_filter(events: Sequence[InteractionEvent], k: int) -> list[InteractionEvent]:
    """Drop users and items with fewer than ``k`` interactions, repeated to a fixpoint."""
    if k < 1:
        raise ValueError("k must be >= 1")
    kept = list(events)
    while True:
        users = Counter(e.user_id for e in kept)
        items = Counter(e.item_id for e in kept)
        nxt = [e for e in kept if users[e.user_id] >= k and items[e.item_id] >= k]
        if len(nxt) == len(kept):
            break
        kept = nxt
    if not kept:
        raise DataError(
            f"{k}-core filter removed every event "
            f"({len(events)} in, {len({e.user_id for e in events})} users)"
        )
    return kept


# ---------------------------------------------------------------------------
# Instance construction


def user_rng(user_key: str, seed: int, stream: int = 0) -> np.random.Generator:
    # stable across processes (no PYTHONHASHSEED dependence)
    return np.random.default_rng(np.random.SeedSequence([seed, zlib.crc32(user_key.encode()), stream]))


def sample_negatives(rng: np.random.Generator, exclude: set[int], num_items: int, count: int) -> list[int]:
    """Uniform draws from 1..num_items that avoid ``exclude``."""
    if len(exclude) >= num_items:
        return []
    out = []
    while len(out) < count:
        cand = int(rng.integers(1, num_items + 1))
        if cand not in exclude:
            out.append(cand)
    return out


def pad_left(history: Sequence[int], max_len: int) -> tuple[list[int], int]:
    window = list(history[-max_len:])
    return [PAD] * (max_len - len(window)) + window, len(window)


def build_instances(
    events: Iterable[InteractionEvent],
    max_len: int,
    boundaries: tuple[int, int],
    neg_ratio: int = 1,
    seed: int = 0,
    behaviors: Sequence[str] | None = ("click",),
) -> DatasetSplit:
    """Time-split CTR instances with ``neg_ratio`` sampled negatives per positive.

    An event with timestamp <= train_end lands in train, <= val_end in
    validation, later in test. The history window always spans the user's
    full prior timeline, so test instances see train-period behaviour.
    Events without any prior behaviour produce no instance.
    """
    if neg_ratio < 1:
        raise ValueError("neg_ratio must be >= 1")
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    train_end, val_end = boundaries
    if train_end >= val_end:
        raise ValueError("train_end must precede val_end")

    events = [e for e in events if behaviors is None or e.behavior in behaviors]
    if not events:
        raise DataError("no events left after behaviour filter")

    item_index = {it: k + 1 for k, it in enumerate(sorted({e.item_id for e in events}))}
    user_index = {u: k for k, u in enumerate(sorted({e.user_id for e in events}))}
    timelines: dict[str, list[InteractionEvent]] = defaultdict(list)
    for e in events:
        timelines[e.user_id].append(e)

    rows: dict[str, list[tuple]] = {s: [] for s in SPLITS}
    group = 0
    num_items = len(item_index)
    for user in sorted(timelines):
        tl = sorted(timelines[user], key=lambda e: e.timestamp)  # stable: ties keep file order
        items = [item_index[e.item_id] for e in tl]
        seen = set(items)
        rngs = {s: user_rng(user, seed, k) for k, s in enumerate(SPLITS)}
        uid = user_index[user]
        for pos in range(1, len(tl)):
            ts = tl[pos].timestamp
            split = "train" if ts <= train_end else "validation" if ts <= val_end else "test"
            seq, vl = pad_left(items[:pos], max_len)
            rows[split].append((seq, vl, items[pos], 1, uid, group))
            for neg in sample_negatives(rngs[split], seen, num_items, neg_ratio):
                rows[split].append((seq, vl, neg, 0, uid, group))
            group += 1

    return DatasetSplit(
        *(InstanceSet.from_rows(rows[s], max_len) for s in SPLITS),
        item_vocab_size=num_items,
        user_index=user_index,
        item_index=item_index,
    )


# ---------------------------------------------------------------------------
# Synthetic data


@dataclass
class SyntheticUser:
    history: list[int]
    noise_mask: list[bool]
    active_clusters: list[int]
    final_cluster: int
    targets: list[int]  # train targets followed by one validation and one test target


def item_cluster(item: int, num_items: int, num_clusters: int) -> int:
    return (item - 1) // (num_items // num_clusters)


def synthetic_users(
    num_users: int,
    num_items: int,
    num_clusters: int,
    seq_len: int,
    noise_rate: float,
    seed: int,
    train_targets: int = 3,
    block_len: tuple[int, int] = (4, 12),
) -> list[SyntheticUser]:
    if num_clusters > num_items:
        raise DataError(f"num_clusters={num_clusters} exceeds num_items={num_items}")
    if num_clusters < 1 or num_items % num_clusters:
        raise DataError("num_items must be divisible by num_clusters")
    if not 0 <= noise_rate < 1:
        raise DataError("noise_rate must lie in [0, 1)")
    size = num_items // num_clusters
    users = []
    for u in range(num_users):
        rng = user_rng(f"synthetic-{u}", seed)
        n_active = int(rng.integers(2, 5))
        active = sorted(int(c) for c in rng.choice(num_clusters, size=min(n_active, num_clusters), replace=False))
        history: list[int] = []
        cluster = int(rng.choice(active))
        while len(history) < seq_len:
            span = int(rng.integers(block_len[0], block_len[1] + 1))
            base = cluster * size + 1
            history.extend(int(v) for v in rng.integers(base, base + size, size=span))
            if len(active) > 1:
                cluster = int(rng.choice([c for c in active if c != cluster]))
        history = history[:seq_len]
        final = item_cluster(history[-1], num_items, num_clusters)
        noise = rng.random(seq_len) < noise_rate
        noise_items = rng.integers(1, num_items + 1, size=seq_len)
        history = [int(noise_items[k]) if noise[k] else history[k] for k in range(seq_len)]
        base = final * size + 1
        targets = [int(v) for v in rng.integers(base, base + size, size=train_targets + 2)]
        users.append(SyntheticUser(history, noise.tolist(), active, final, targets))
    return users


def generate_synthetic(
    num_users: int,
    num_items: int,
    num_clusters: int,
    seq_len: int,
    noise_rate: float,
    seed: int,
    neg_ratio: int = 1,
    train_targets: int = 3,
    max_len: int | None = None,
) -> DatasetSplit:
    """Cluster-structured sequences for desk-scale experiments.

    Each user owns 2-4 latent item clusters and a history of ``seq_len``
    items made of alternating single-cluster blocks; a ``noise_rate``
    fraction of positions is replaced by uniform random items. Positive
    targets (``train_targets`` for training, then one validation and one
    test target) come from the cluster of the final block.
    """
    max_len = max_len or seq_len
    users = synthetic_users(num_users, num_items, num_clusters, seq_len, noise_rate, seed, train_targets)
    rows: dict[str, list[tuple]] = {s: [] for s in SPLITS}
    group = 0
    for uid, su in enumerate(users):
        timeline = su.history + su.targets
        seen = set(timeline)
        rngs = {s: user_rng(f"synthetic-neg-{uid}", seed, k) for k, s in enumerate(SPLITS)}
        for t in range(len(su.targets)):
            pos = seq_len + t
            split = "train" if t < train_targets else "validation" if t == train_targets else "test"
            seq, vl = pad_left(timeline[:pos], max_len)
            rows[split].append((seq, vl, timeline[pos], 1, uid, group))
            for neg in sample_negatives(rngs[split], seen, num_items, neg_ratio):
                rows[split].append((seq, vl, neg, 0, uid, group))
            group += 1
    return DatasetSplit(
        *(InstanceSet.from_rows(rows[s], max_len) for s in SPLITS),
        item_vocab_size=num_items,
        user_index={f"u{k}": k for k in range(num_users)},
        info={
            "num_clusters": num_clusters,
            "noise_counts": [sum(u.noise_mask) for u in users],
            "active_clusters": [u.active_clusters for u in users],
        },
    )
