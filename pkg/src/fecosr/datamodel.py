"""Domain types, file ingestion and the leave-one-out split.

Interactions are TSV records ``market<TAB>user<TAB>item<TAB>timestamp``.
Embeddings are either TSV (``item<TAB>v1..vd``) or the ``FECOEMB1`` binary
layout. All loaded structures are treated as immutable.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

logger = logging.getLogger(__name__)

EMB_MAGIC = b"FECOEMB1"
NORM_TOL = 1e-6


class DataError(Exception):
    """Base class for ingestion failures."""


class ParseError(DataError):
    def __init__(self, path, lineno: int, msg: str):
        super().__init__(f"{path}:{lineno}: {msg}")
        self.lineno = lineno


class UnknownReferenceError(DataError):
    """An interaction names a market or item the catalog does not know."""


class CoverageError(DataError):
    def __init__(self, missing: list[str]):
        super().__init__(f"embeddings missing for {len(missing)} item(s): {', '.join(missing[:20])}")
        self.missing = missing


class FormatError(DataError):
    pass


class NormalizationError(DataError):
    pass


@dataclass(frozen=True)
class ItemCatalog:
    """Per-market item lists over a global union, plus the frozen embedding table.

    ``market_items[m]`` lists item ids in catalog order; ``global_items`` is the
    deduplicated union in (market order, catalog order). ``embeddings`` is
    ``None`` until :func:`load_embeddings` (or the generator) attaches it.
    """

    markets: tuple[str, ...]
    market_items: dict[str, tuple[str, ...]]
    global_items: tuple[str, ...]
    embeddings: np.ndarray | None = None
    _global_index: dict[str, int] = field(default_factory=dict, repr=False, compare=False)
    _item_sets: dict[str, frozenset] = field(default_factory=dict, repr=False, compare=False)

    @classmethod
    def build(cls, market_items: dict[str, Iterable[str]], embeddings: np.ndarray | None = None):
        markets = tuple(market_items)
        per_market = {m: tuple(dict.fromkeys(market_items[m])) for m in markets}
        union: dict[str, int] = {}
        for m in markets:
            for it in per_market[m]:
                if it not in union:
                    union[it] = len(union)
        cat = cls(markets, per_market, tuple(union), None, union)
        if embeddings is not None:
            cat = cat.with_embeddings(embeddings)
        return cat

    def with_embeddings(self, table: np.ndarray) -> "ItemCatalog":
        table = np.asarray(table, dtype=np.float32)
        if table.ndim != 2 or table.shape[0] != len(self.global_items):
            raise FormatError(f"embedding table shape {table.shape} does not match {len(self.global_items)} items")
        table = normalize_rows(table)
        table.setflags(write=False)
        return ItemCatalog(self.markets, self.market_items, self.global_items, table, self._global_index)

    @property
    def dim(self) -> int:
        if self.embeddings is None:
            raise DataError("catalog has no embeddings attached")
        return int(self.embeddings.shape[1])

    def has_item(self, market: str, item: str) -> bool:
        if market not in self._item_sets:
            self._item_sets[market] = frozenset(self.market_items[market])
        return item in self._item_sets[market]

    def global_index(self, item: str) -> int:
        return self._global_index[item]

    def market_global_indices(self, market: str) -> np.ndarray:
        return np.array([self._global_index[i] for i in self.market_items[market]], dtype=np.int64)

    def market_index(self, market: str) -> dict[str, int]:
        return {it: k for k, it in enumerate(self.market_items[market])}

    def market_embeddings(self, market: str) -> np.ndarray:
        """Row view E^m of the frozen table, in market catalog order."""
        if self.embeddings is None:
            raise DataError("catalog has no embeddings attached")
        out = self.embeddings[self.market_global_indices(market)]
        out.setflags(write=False)
        return out


def normalize_rows(table: np.ndarray) -> np.ndarray:
    # float64 norm so the float32 result is within 1e-6 of unit length
    t64 = table.astype(np.float64)
    norms = np.linalg.norm(t64, axis=1, keepdims=True)
    if np.any(norms == 0) or not np.all(np.isfinite(norms)):
        bad = np.flatnonzero((norms[:, 0] == 0) | ~np.isfinite(norms[:, 0]))
        raise NormalizationError(f"cannot normalize rows {bad[:10].tolist()} (zero or non-finite)")
    return (t64 / norms).astype(np.float32)


@dataclass(frozen=True)
class InteractionLog:
    """Per market, per user time-ordered ``(item, timestamp)`` lists.

    Dict insertion order is canonical: markets and users in first-appearance
    order, each sequence stably sorted by timestamp.
    """

    sequences: dict[str, dict[str, tuple[tuple[str, int], ...]]]

    @property
    def markets(self) -> list[str]:
        return list(self.sequences)

    def stats(self) -> dict[str, dict[str, int]]:
        out = {}
        for m, users in self.sequences.items():
            items = {it for seq in users.values() for it, _ in seq}
            out[m] = {
                "users": len(users),
                "items": len(items),
                "interactions": sum(len(s) for s in users.values()),
            }
        return out

    def items_by_market(self) -> dict[str, list[str]]:
        out = {}
        for m, users in self.sequences.items():
            seen: dict[str, None] = {}
            for seq in users.values():
                for it, _ in seq:
                    seen.setdefault(it)
            out[m] = list(seen)
        return out


def _build_log(rows: Iterable[tuple[str, str, str, int]]) -> InteractionLog:
    raw: dict[str, dict[str, list[tuple[str, int]]]] = {}
    owner: dict[str, str] = {}
    for market, user, item, ts in rows:
        prev = owner.setdefault(user, market)
        if prev != market:
            raise DataError(f"user {user!r} appears in markets {prev!r} and {market!r}")
        raw.setdefault(market, {}).setdefault(user, []).append((item, ts))
    seqs = {
        m: {u: tuple(sorted(s, key=lambda r: r[1])) for u, s in users.items()}
        for m, users in raw.items()
    }
    return InteractionLog(seqs)


def load_interactions(path, catalog: ItemCatalog | None = None) -> InteractionLog:
    path = Path(path)
    rows = []
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n").rstrip("\r")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 4:
                raise ParseError(path, lineno, f"expected 4 columns, got {len(parts)}")
            market, user, item, ts_s = parts
            try:
                ts = int(ts_s)
            except ValueError:
                raise ParseError(path, lineno, f"non-integer timestamp {ts_s!r}") from None
            if ts < 0:
                raise ParseError(path, lineno, f"negative timestamp {ts}")
            if catalog is not None:
                if market not in catalog.market_items:
                    raise UnknownReferenceError(f"{path}:{lineno}: unknown market {market!r}")
                if not catalog.has_item(market, item):
                    raise UnknownReferenceError(f"{path}:{lineno}: item {item!r} not in catalog of {market!r}")
            rows.append((market, user, item, ts))
    return _build_log(rows)


def write_interactions(log: InteractionLog, path) -> None:
    with Path(path).open("w", encoding="utf-8", newline="\n") as fh:
        for m, users in log.sequences.items():
            for u, seq in users.items():
                for it, ts in seq:
                    fh.write(f"{m}\t{u}\t{it}\t{ts}\n")


def load_catalog(path) -> ItemCatalog:
    """Read a ``market<TAB>item`` catalog listing (order is catalog order)."""
    path = Path(path)
    items: dict[str, list[str]] = {}
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise ParseError(path, lineno, f"expected 2 columns, got {len(parts)}")
            items.setdefault(parts[0], []).append(parts[1])
    return ItemCatalog.build(items)


def write_catalog(catalog: ItemCatalog, path) -> None:
    with Path(path).open("w", encoding="utf-8", newline="\n") as fh:
        for m in catalog.markets:
            for it in catalog.market_items[m]:
                fh.write(f"{m}\t{it}\n")


def catalog_from_log(log: InteractionLog) -> ItemCatalog:
    return ItemCatalog.build(log.items_by_market())


def _read_embedding_rows(path: Path) -> dict[str, np.ndarray]:
    with path.open("rb") as fh:
        head = fh.read(len(EMB_MAGIC))
    if head == EMB_MAGIC:
        return _read_binary_embeddings(path)
    rows: dict[str, np.ndarray] = {}
    dim = None
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            try:
                vec = np.array([float(v) for v in parts[1:]], dtype=np.float64)
            except ValueError as exc:
                raise ParseError(path, lineno, str(exc)) from None
            if dim is None:
                dim = len(vec)
            if len(vec) != dim or dim == 0:
                raise FormatError(f"{path}:{lineno}: dimension {len(vec)}, expected {dim}")
            rows[parts[0]] = vec
    return rows


def _read_binary_embeddings(path: Path) -> dict[str, np.ndarray]:
    data = path.read_bytes()
    off = len(EMB_MAGIC)
    try:
        count, dim = struct.unpack_from("<II", data, off)
        off += 8
        rows = {}
        for _ in range(count):
            (n,) = struct.unpack_from("<I", data, off)
            off += 4
            item = data[off : off + n].decode("utf-8")
            off += n
            vec = np.frombuffer(data, dtype="<f4", count=dim, offset=off).astype(np.float64)
            off += 4 * dim
            rows[item] = vec
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        raise FormatError(f"{path}: truncated or corrupt binary embedding file ({exc})") from None
    if off != len(data):
        raise FormatError(f"{path}: {len(data) - off} trailing bytes")
    return rows


def load_embeddings(path, catalog: ItemCatalog) -> ItemCatalog:
    """Attach unit-normalized embeddings for every catalog item."""
    rows = _read_embedding_rows(Path(path))
    missing = [it for it in catalog.global_items if it not in rows]
    if missing:
        raise CoverageError(missing)
    table = np.stack([rows[it] for it in catalog.global_items])
    return catalog.with_embeddings(table)


def write_embeddings(catalog: ItemCatalog, path, fmt: str = "binary") -> None:
    table = catalog.embeddings
    if table is None:
        raise DataError("catalog has no embeddings attached")
    if fmt == "binary":
        with Path(path).open("wb") as fh:
            fh.write(EMB_MAGIC)
            fh.write(struct.pack("<II", table.shape[0], table.shape[1]))
            for it, row in zip(catalog.global_items, table):
                raw = it.encode("utf-8")
                fh.write(struct.pack("<I", len(raw)))
                fh.write(raw)
                fh.write(row.astype("<f4").tobytes())
    elif fmt == "tsv":
        with Path(path).open("w", encoding="utf-8", newline="\n") as fh:
            for it, row in zip(catalog.global_items, table):
                fh.write(it + "\t" + "\t".join(repr(float(v)) for v in row) + "\n")
    else:
        raise ValueError(f"unknown embedding format {fmt!r}")


@dataclass(frozen=True)
class UserSplit:
    user: str
    train: tuple[int, ...]
    valid_target: int
    test_target: int
    interacted: frozenset[int]

    @property
    def valid_context(self) -> tuple[int, ...]:
        return self.train

    @property
    def test_context(self) -> tuple[int, ...]:
        return self.train + (self.valid_target,)

    @property
    def full(self) -> tuple[int, ...]:
        return self.train + (self.valid_target, self.test_target)


@dataclass(frozen=True)
class MarketSplit:
    market: str
    num_items: int
    users: tuple[UserSplit, ...]
    dropped: tuple[str, ...] = ()


@dataclass(frozen=True)
class SplitDataset:
    markets: dict[str, MarketSplit]
    min_len: int

    @property
    def dropped(self) -> dict[str, tuple[str, ...]]:
        return {m: s.dropped for m, s in self.markets.items() if s.dropped}


def leave_one_out_split(log: InteractionLog, catalog: ItemCatalog, min_len: int = 3) -> SplitDataset:
    """Last item is the test target, second-to-last the validation target.

    Item indices are dense within each market's catalog.
    """
    if min_len < 3:
        raise ValueError("min_len must be >= 3 for a leave-one-out split")
    out = {}
    for m in catalog.markets:
        users = log.sequences.get(m, {})
        index = catalog.market_index(m)
        kept, dropped = [], []
        for u, seq in users.items():
            if len(seq) < min_len:
                dropped.append(u)
                continue
            idx = tuple(index[it] for it, _ in seq)
            kept.append(UserSplit(u, idx[:-2], idx[-2], idx[-1], frozenset(idx)))
        if dropped:
            logger.info("market %s: dropped %d user(s) shorter than %d", m, len(dropped), min_len)
        out[m] = MarketSplit(m, len(catalog.market_items[m]), tuple(kept), tuple(dropped))
    return SplitDataset(out, min_len)
