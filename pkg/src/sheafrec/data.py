"""Rating files, bipartite interaction graphs, and per-user splits."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

FORMATS = ("movielens-1m", "tsv")


class ParseError(ValueError):
    """A rating file line could not be understood."""


@dataclass(frozen=True, eq=False)
class InteractionSet:
    """Densely indexed (user, item, rating) triples.

    Ids are contiguous and 0-based; the raw-id mapping tables from parsing
    are kept for reporting.  Ratings are carried along but training treats
    interactions as implicit feedback (edge presence only).
    """

    n_users: int
    n_items: int
    users: np.ndarray
    items: np.ndarray
    ratings: np.ndarray
    user_raw_ids: tuple[str, ...] = ()
    item_raw_ids: tuple[str, ...] = ()
    duplicates_dropped: int = 0

    def __post_init__(self):
        if not (len(self.users) == len(self.items) == len(self.ratings)):
            raise ValueError("users, items and ratings must have equal length")
        if len(self.users):
            if self.users.min() < 0 or self.users.max() >= self.n_users:
                raise ValueError("user id outside [0, n_users)")
            if self.items.min() < 0 or self.items.max() >= self.n_items:
                raise ValueError("item id outside [0, n_items)")
            pairs = self.users.astype(np.int64) * max(self.n_items, 1) + self.items
            if len(np.unique(pairs)) != len(pairs):
                raise ValueError("duplicate (user, item) pairs are not allowed")
        for arr in (self.users, self.items, self.ratings):
            arr.setflags(write=False)

    @property
    def n_records(self) -> int:
        return len(self.users)

    def records(self):
        """Iterate (user, item, rating) tuples in storage order."""
        for u, i, r in zip(self.users, self.items, self.ratings):
            yield int(u), int(i), float(r)

    @classmethod
    def from_records(cls, n_users: int, n_items: int, records) -> "InteractionSet":
        records = list(records)
        return cls(
            n_users=n_users,
            n_items=n_items,
            users=np.asarray([r[0] for r in records], dtype=np.int64),
            items=np.asarray([r[1] for r in records], dtype=np.int64),
            ratings=np.asarray([r[2] for r in records], dtype=float),
        )


def _split_line(line: str, fmt: str, lineno: int, path: str) -> tuple[str, str, str]:
    if fmt == "movielens-1m":
        parts = line.split("::")
        if len(parts) != 4:
            raise ParseError(f"{path}:{lineno}: expected UserID::MovieID::Rating::Timestamp, got {line!r}")
        return parts[0], parts[1], parts[2]
    parts = line.split("\t")
    if len(parts) != 3:
        raise ParseError(f"{path}:{lineno}: expected user<TAB>item<TAB>rating, got {line!r}")
    return parts[0], parts[1], parts[2]


def _is_number(s: str) -> bool:
    try:
        float(s)
        return True
    except ValueError:
        return False


def parse_ratings(path, format: str = "tsv") -> InteractionSet:
    """Parse a rating file into a densely re-indexed interaction set.

    Raw ids map to contiguous 0-based ids in order of first appearance and
    the mapping tables are retained.  Duplicate (user, item) lines keep the
    first occurrence; the number dropped is reported on the result.  A tsv
    header line is detected by a non-numeric first field and skipped.
    """
    if format not in FORMATS:
        raise ValueError(f"unknown format {format!r}; choose from {FORMATS}")
    path = Path(path)
    user_index: dict[str, int] = {}
    item_index: dict[str, int] = {}
    users: list[int] = []
    items: list[int] = []
    ratings: list[float] = []
    seen: set[tuple[int, int]] = set()
    duplicates = 0
    with path.open("r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n").rstrip("\r")
            if not line.strip():
                continue
            if lineno == 1 and format == "tsv" and not _is_number(line.split("\t")[0]):
                continue  # header
            u_raw, i_raw, r_raw = _split_line(line, format, lineno, str(path))
            if not _is_number(r_raw):
                raise ParseError(f"{path}:{lineno}: rating {r_raw!r} is not a number")
            u = user_index.setdefault(u_raw, len(user_index))
            i = item_index.setdefault(i_raw, len(item_index))
            if (u, i) in seen:
                duplicates += 1
                continue
            seen.add((u, i))
            users.append(u)
            items.append(i)
            ratings.append(float(r_raw))
    return InteractionSet(
        n_users=len(user_index),
        n_items=len(item_index),
        users=np.asarray(users, dtype=np.int64),
        items=np.asarray(items, dtype=np.int64),
        ratings=np.asarray(ratings, dtype=float),
        user_raw_ids=tuple(user_index),
        item_raw_ids=tuple(item_index),
        duplicates_dropped=duplicates,
    )


def write_tsv(interactions: InteractionSet, path) -> None:
    """Write as user<TAB>item<TAB>rating lines, dense ids as-is."""
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        for u, i, r in interactions.records():
            fh.write(f"{u}\t{i}\t{r}\n")


@dataclass(frozen=True, eq=False)
class BipartiteGraph:
    """User and item vertices joined by interaction edges.

    Items live at ``n_users + item`` in the unified vertex index.  The base
    edge set is strictly bipartite; ``extra_edges`` holds user-user pairs
    added by the optional co-engagement projection, already in unified ids.
    """

    n_users: int
    n_items: int
    edge_users: np.ndarray
    edge_items: np.ndarray
    edge_ratings: np.ndarray
    extra_edges: np.ndarray = None  # (k, 2)

    def __post_init__(self):
        if self.extra_edges is None:
            object.__setattr__(self, "extra_edges", np.zeros((0, 2), dtype=np.int64))
        if len(self.edge_users) != len(self.edge_items):
            raise ValueError("edge arrays must have equal length")
        if len(self.edge_users):
            if self.edge_users.max() >= self.n_users or self.edge_items.max() >= self.n_items:
                raise ValueError("edge endpoint outside the vertex range")

    @property
    def n_vertices(self) -> int:
        return self.n_users + self.n_items

    @property
    def n_edges(self) -> int:
        return len(self.edge_users) + len(self.extra_edges)

    def oriented_edges(self) -> tuple[np.ndarray, np.ndarray]:
        """(tails, heads) in unified vertex ids; user -> item, then extras."""
        tails = np.concatenate([self.edge_users, self.extra_edges[:, 0]])
        heads = np.concatenate([self.edge_items + self.n_users, self.extra_edges[:, 1]])
        return tails.astype(np.int64), heads.astype(np.int64)


def build_bipartite(interactions: InteractionSet) -> BipartiteGraph:
    """One edge per interaction record, order preserved."""
    return BipartiteGraph(
        n_users=interactions.n_users,
        n_items=interactions.n_items,
        edge_users=interactions.users.copy(),
        edge_items=interactions.items.copy(),
        edge_ratings=interactions.ratings.copy(),
    )


def adapt_bipartite(
    graph: BipartiteGraph,
    projection: str = "off",
    min_shared_items: int = 1,
) -> BipartiteGraph:
    """Prepare the graph for sheaf assembly over the unified vertex set.

    The default adaptation leaves the edge set untouched: users and items
    already share one vertex index and equal stalk sizes, which is all the
    operators need.  ``projection="co-engagement"`` additionally links every
    user pair sharing at least ``min_shared_items`` items.
    """
    if projection not in ("off", "co-engagement"):
        raise ValueError(f"unknown projection {projection!r}")
    if projection == "off":
        return graph
    by_item: dict[int, list[int]] = {}
    for u, i in zip(graph.edge_users, graph.edge_items):
        by_item.setdefault(int(i), []).append(int(u))
    counts: dict[tuple[int, int], int] = {}
    for users in by_item.values():
        users = sorted(set(users))
        for a in range(len(users)):
            for b in range(a + 1, len(users)):
                key = (users[a], users[b])
                counts[key] = counts.get(key, 0) + 1
    pairs = sorted(k for k, c in counts.items() if c >= min_shared_items)
    extra = np.asarray(pairs, dtype=np.int64).reshape(len(pairs), 2)
    return BipartiteGraph(
        n_users=graph.n_users,
        n_items=graph.n_items,
        edge_users=graph.edge_users.copy(),
        edge_items=graph.edge_items.copy(),
        edge_ratings=graph.edge_ratings.copy(),
        extra_edges=extra,
    )


@dataclass(frozen=True, eq=False)
class SplitSet:
    """Disjoint train/validation/test partition of an interaction set."""

    train: InteractionSet
    validation: InteractionSet
    test: InteractionSet
    seed: int


def split_interactions(interactions: InteractionSet, seed: int) -> SplitSet:
    """Per-user 80/10/10 split with deterministic rounding.

    Each user's records are shuffled by a stream seeded with (seed, user);
    floor(0.8 k) go to train, the remainder splits ceil/floor between
    validation and test.  Users with fewer than 3 records keep everything in
    train.
    """
    parts: dict[str, list[int]] = {"train": [], "validation": [], "test": []}
    order = np.argsort(interactions.users, kind="stable")
    bounds = np.searchsorted(interactions.users[order], np.arange(interactions.n_users + 1))
    for u in range(interactions.n_users):
        idx = order[bounds[u]:bounds[u + 1]]
        k = len(idx)
        if k == 0:
            continue
        if k < 3:
            parts["train"].extend(idx.tolist())
            continue
        rng = np.random.default_rng([seed, u])
        shuffled = idx[rng.permutation(k)]
        n_train = int(np.floor(0.8 * k))
        n_val = int(np.ceil((k - n_train) / 2))
        parts["train"].extend(shuffled[:n_train].tolist())
        parts["validation"].extend(shuffled[n_train:n_train + n_val].tolist())
        parts["test"].extend(shuffled[n_train + n_val:].tolist())

    def subset(idx: list[int]) -> InteractionSet:
        sel = np.asarray(sorted(idx), dtype=np.int64)
        return InteractionSet(
            n_users=interactions.n_users,
            n_items=interactions.n_items,
            users=interactions.users[sel].copy(),
            items=interactions.items[sel].copy(),
            ratings=interactions.ratings[sel].copy(),
            user_raw_ids=interactions.user_raw_ids,
            item_raw_ids=interactions.item_raw_ids,
        )

    return SplitSet(
        train=subset(parts["train"]),
        validation=subset(parts["validation"]),
        test=subset(parts["test"]),
        seed=seed,
    )


def write_split_manifest(split: SplitSet, path) -> None:
    """Audit file listing the part every record landed in."""
    assignments = []
    for name in ("train", "validation", "test"):
        part: InteractionSet = getattr(split, name)
        for u, i, _ in part.records():
            assignments.append({"user": u, "item": i, "part": name})
    assignments.sort(key=lambda a: (a["user"], a["item"]))
    payload = {"seed": split.seed, "assignments": assignments}
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def items_by_user(interactions: InteractionSet, n_users: int | None = None) -> list[np.ndarray]:
    """Item ids grouped per user, ascending within each user."""
    n = interactions.n_users if n_users is None else n_users
    order = np.lexsort((interactions.items, interactions.users))
    users = interactions.users[order]
    items = interactions.items[order]
    bounds = np.searchsorted(users, np.arange(n + 1))
    return [items[bounds[u]:bounds[u + 1]].copy() for u in range(n)]
