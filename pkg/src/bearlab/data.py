"""Synthetic interaction data, ingestion, and training-instance construction.

The generator builds a catalog whose titles share heavy prefixes on purpose
(a controllable collision rate over a handful of popular prefixes), so that a
trained model exhibits the early-pruning phenomenon this lab measures, and an
interaction log drawn from a seeded first-order item-transition process with
genre-sticky transitions. Prompts serialize a 10-item history as
BOS item-tokens SEP ... item-tokens SEP; targets are the next item's tokens
plus EOS.
"""

import csv
import json
import string
from dataclasses import dataclass

import numpy as np

from .catalog import BOS_ID, SEP_ID, Item
from .errors import ValidationError

SPLITS = ("train", "val", "test")


@dataclass(frozen=True)
class SyntheticConfig:
    catalog_size: int = 200
    users: int = 2000
    seq_length: int = 11
    markov_order: int = 1
    title_length: tuple = (4, 9)
    prefix_collision_rate: float = 0.75
    prefix_groups: int = 6
    genres: int = 4
    genre_stickiness: float = 0.85
    popularity_exponent: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.catalog_size < 10:
            raise ValidationError("catalog_size must be >= 10")
        if self.seq_length < 11:
            raise ValidationError("seq_length must be >= 11 (one full window)")
        if self.users < 1:
            raise ValidationError("users must be >= 1")
        if not 0.0 <= self.prefix_collision_rate <= 1.0:
            raise ValidationError("prefix_collision_rate must be in [0, 1]")
        if self.markov_order not in (0, 1):
            raise ValidationError("markov_order must be 0 or 1")
        lo, hi = self.title_length
        if lo < 1 or hi < lo:
            raise ValidationError("title_length must be (lo, hi) with 1 <= lo <= hi")
        if self.prefix_groups < 1 or self.genres < 1:
            raise ValidationError("prefix_groups and genres must be >= 1")
        if not 0.0 <= self.genre_stickiness <= 1.0:
            raise ValidationError("genre_stickiness must be in [0, 1]")
        if self.popularity_exponent <= 0:
            raise ValidationError("popularity_exponent must be > 0")


def _head_pool() -> list[str]:
    """Distinct single characters for unique title heads; large enough that
    every item can start with its own character at collision rate 0."""
    pool = list(string.ascii_uppercase + string.digits)
    pool += [chr(c) for c in range(0x00C0, 0x0100) if chr(c).isalpha()]
    pool += [chr(c) for c in range(0x0100, 0x0250) if chr(c).isalpha()]
    return pool


def _encode_tail(i: int) -> str:
    return string.ascii_lowercase[i // 26] + string.ascii_lowercase[i % 26]


def generate_titles(cfg: SyntheticConfig, rng: np.random.Generator) -> list[str]:
    """Titles with shared popular prefixes for a `prefix_collision_rate`
    fraction of items and unique first characters for the rest. A base-26
    tail keeps every title distinct.

    Unique-head titles sit at the short end of the length range and grouped
    titles at the long end: a rare first character followed by a short,
    learnable suffix is exactly the shape that ends up with a high overall
    probability but a weak prefix, the pruning case this lab studies."""
    letters = list(string.ascii_lowercase)
    group_prefixes = []
    seen = set()
    while len(group_prefixes) < cfg.prefix_groups:
        size = int(rng.integers(2, 4))
        prefix = "".join(rng.choice(letters, size=size))
        if prefix not in seen:
            seen.add(prefix)
            group_prefixes.append(prefix)
    group_heads = {p[0] for p in group_prefixes}
    heads = [h for h in _head_pool() if h not in group_heads]
    if cfg.catalog_size > len(heads):
        raise ValidationError(
            f"catalog_size {cfg.catalog_size} exceeds the unique-head pool "
            f"({len(heads)} characters)"
        )

    n_collide = int(round(cfg.prefix_collision_rate * cfg.catalog_size))
    collide = np.zeros(cfg.catalog_size, dtype=bool)
    collide[rng.choice(cfg.catalog_size, size=n_collide, replace=False)] = True
    # popular groups get more members: geometric-ish assignment
    group_weights = 1.0 / (np.arange(cfg.prefix_groups) + 1.5)
    group_weights /= group_weights.sum()

    lo, hi = cfg.title_length
    mid = (lo + hi + 1) // 2
    titles = []
    for i in range(cfg.catalog_size):
        tail = _encode_tail(i)
        if collide[i]:
            start = group_prefixes[int(rng.choice(cfg.prefix_groups, p=group_weights))]
            length = int(rng.integers(mid, hi + 1))
        else:
            start = heads[i]
            length = int(rng.integers(lo, mid + 1))
        # at least one body character so grouped titles branch over the full
        # alphabet right after the shared prefix
        body_len = max(1, length - len(start) - len(tail))
        body = "".join(rng.choice(letters, size=body_len))
        titles.append(start + body + tail)
    return titles


def _popularity(n: int, rng: np.random.Generator, exponent: float = 1.0) -> np.ndarray:
    ranks = rng.permutation(n)
    weights = 1.0 / (ranks + 1.0) ** exponent
    return weights / weights.sum()


def build_transitions(cfg: SyntheticConfig, rng: np.random.Generator):
    """(start distribution, per-item successor distributions). Transitions
    stay inside the current item's genre with probability genre_stickiness,
    otherwise fall back to global popularity; order 0 drops the conditioning."""
    n = cfg.catalog_size
    global_pop = _popularity(n, rng, cfg.popularity_exponent)
    if cfg.markov_order == 0:
        return global_pop, np.tile(global_pop, (n, 1))
    genre_of = rng.permutation(n) % cfg.genres
    rows = np.empty((n, n))
    for g in range(cfg.genres):
        members = np.flatnonzero(genre_of == g)
        within = np.zeros(n)
        member_pop = _popularity(len(members), rng, cfg.popularity_exponent)
        within[members] = member_pop
        rows[members] = (cfg.genre_stickiness * within
                         + (1.0 - cfg.genre_stickiness) * global_pop)
    rows /= rows.sum(axis=1, keepdims=True)
    return global_pop, rows


def generate_synthetic(cfg: SyntheticConfig, catalog_path: str, log_path: str) -> None:
    """Write catalog and interaction-log CSVs; byte-identical for one seed."""
    rng = np.random.default_rng(cfg.seed)
    titles = generate_titles(cfg, rng)
    start, transitions = build_transitions(cfg, rng)

    with open(catalog_path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["item_id", "title"])
        for i, title in enumerate(titles):
            writer.writerow([i, title])

    with open(log_path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["user_id", "item_id", "timestamp"])
        for user in range(cfg.users):
            item = int(rng.choice(cfg.catalog_size, p=start))
            for t in range(cfg.seq_length):
                writer.writerow([user, item, t * cfg.users + user])
                item = int(rng.choice(cfg.catalog_size, p=transitions[item]))


def load_interactions_csv(path: str) -> list[tuple[int, int, int]]:
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["user_id", "item_id", "timestamp"]:
            raise ValidationError(
                f"interaction log {path} has header {header}, "
                "expected ['user_id', 'item_id', 'timestamp']"
            )
        rows = []
        for row in reader:
            if len(row) != 3:
                raise ValidationError(f"interaction row {row!r} is malformed")
            rows.append((int(row[0]), int(row[1]), int(row[2])))
    return rows


class InteractionLog:
    """Per-user interaction sequences, strictly ordered by timestamp."""

    def __init__(self, rows):
        per_user: dict[int, list[tuple[int, int]]] = {}
        for user, item, ts in rows:
            per_user.setdefault(user, []).append((ts, item))
        for user, seq in per_user.items():
            seq.sort()
            for (a, _), (b, _) in zip(seq, seq[1:]):
                if a == b:
                    raise ValidationError(
                        f"user {user} has two interactions at timestamp {a}"
                    )
        self.per_user = per_user

    def n_rows(self) -> int:
        return sum(len(s) for s in self.per_user.values())

    def items(self) -> set:
        return {item for seq in self.per_user.values() for _, item in seq}


def five_core_filter(log: InteractionLog) -> InteractionLog:
    """Repeatedly drop users and items with fewer than 5 interactions."""
    rows = [(user, item, ts) for user, seq in log.per_user.items()
            for ts, item in seq]
    while True:
        user_counts: dict[int, int] = {}
        item_counts: dict[int, int] = {}
        for user, item, _ in rows:
            user_counts[user] = user_counts.get(user, 0) + 1
            item_counts[item] = item_counts.get(item, 0) + 1
        keep = [(u, i, t) for u, i, t in rows
                if user_counts[u] >= 5 and item_counts[i] >= 5]
        if len(keep) == len(rows):
            break
        rows = keep
    return InteractionLog(rows)


@dataclass(frozen=True)
class TrainingInstance:
    user_id: int
    prompt: tuple
    target: tuple
    positive_item: int
    target_ts: int
    split: str

    def to_json(self) -> dict:
        return {"user_id": self.user_id, "prompt": list(self.prompt),
                "target": list(self.target), "positive_item": self.positive_item,
                "target_ts": self.target_ts, "split": self.split}

    @classmethod
    def from_json(cls, payload: dict) -> "TrainingInstance":
        return cls(user_id=payload["user_id"], prompt=tuple(payload["prompt"]),
                   target=tuple(payload["target"]),
                   positive_item=payload["positive_item"],
                   target_ts=payload["target_ts"], split=payload["split"])


def make_prompt(history_items: list[Item]) -> tuple:
    out = [BOS_ID]
    for item in history_items:
        out.extend(item.token_ids[:-1])  # content tokens, EOS stripped
        out.append(SEP_ID)
    return tuple(out)


def make_instances(log: InteractionLog, items: list[Item],
                   window: int = 11) -> list[TrainingInstance]:
    """Sliding windows of `window` items (history = window-1, target = last),
    split 8:1:1 chronologically by target timestamp, remainders to train."""
    if window < 2:
        raise ValidationError("window must be >= 2")
    by_id = {item.item_id: item for item in items}
    raw = []
    for user, seq in sorted(log.per_user.items()):
        for start in range(0, len(seq) - window + 1):
            chunk = seq[start:start + window]
            history = [by_id[item] for _, item in chunk[:-1]]
            target_ts, target_item = chunk[-1]
            raw.append((target_ts, user, make_prompt(history),
                        by_id[target_item].token_ids, target_item))
    if not raw:
        raise ValidationError("no instances; the filtered log has no full window")
    raw.sort(key=lambda r: (r[0], r[1]))
    n = len(raw)
    n_val = n // 10
    n_test = n // 10
    n_train = n - n_val - n_test
    instances = []
    for pos, (ts, user, prompt, target, positive) in enumerate(raw):
        split = ("train" if pos < n_train
                 else "val" if pos < n_train + n_val else "test")
        instances.append(TrainingInstance(user_id=user, prompt=prompt, target=target,
                                          positive_item=positive, target_ts=ts,
                                          split=split))
    return instances


def required_context(instances, max_item_len: int) -> int:
    """Context length needed to train and decode: the longest prompt plus the
    longest item path (its EOS included) with one step of slack."""
    longest_prompt = max(len(inst.prompt) for inst in instances)
    return longest_prompt + max_item_len + 1


def save_instances(path: str, instances) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump({"instances": [inst.to_json() for inst in instances]},
                  fh, sort_keys=True)
        fh.write("\n")


def load_instances(path: str) -> list[TrainingInstance]:
    with open(path, "r", encoding="utf-8") as fh:
        payload = json.load(fh)
    return [TrainingInstance.from_json(p) for p in payload["instances"]]
