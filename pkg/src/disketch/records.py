"""Subepoch records and the indexed record store.

A record is the tuple ``(F, E, S, n, c, h)`` exported by a fragment at the
end of every subepoch. Hash functions travel as seeds; the shared hash
family in :mod:`disketch.sketch` turns them back into functions centrally.

File format: one JSON object per line. The first line is a header
``{"format": "disketch-records", "version": 1}``; every following line is a
record with keys in a fixed order. Counters are decimal integer arrays and
seeds unsigned decimal integers, so round trips are bit exact.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from .sketch import HashSeed, Purpose, SketchKind, hash_index

FORMAT_NAME = "disketch-records"
FORMAT_VERSION = 1


class RecordStoreError(Exception):
    pass


class DuplicateRecordError(RecordStoreError):
    pass


class SchemaError(RecordStoreError):
    pass


class NotReadyError(RecordStoreError):
    pass


class RecordParseError(RecordStoreError):
    def __init__(self, line: int, msg: str):
        super().__init__(f"line {line}: {msg}")
        self.line = line


@dataclass(frozen=True)
class RecordSeeds:
    index: int
    subepoch: int
    sign: int | None = None
    level: int | None = None

    @property
    def index_seed(self) -> HashSeed:
        return HashSeed(self.index, Purpose.INDEX)

    @property
    def subepoch_seed(self) -> HashSeed:
        return HashSeed(self.subepoch, Purpose.SUBEPOCH)

    @property
    def sign_seed(self) -> HashSeed | None:
        return None if self.sign is None else HashSeed(self.sign, Purpose.SIGN)

    @property
    def level_seed(self) -> HashSeed | None:
        return None if self.level is None else HashSeed(self.level, Purpose.LEVEL)

    def to_dict(self) -> dict:
        return {"index": self.index, "sign": self.sign, "subepoch": self.subepoch, "level": self.level}


@dataclass(eq=False)
class SubepochRecord:
    fragment_id: str
    epoch: int
    subepoch: int
    n: int
    width: int
    kind: SketchKind
    seeds: RecordSeeds
    counters: np.ndarray

    def __post_init__(self):
        self.kind = SketchKind(self.kind)
        if self.n < 1 or self.n & (self.n - 1):
            raise SchemaError(f"n must be a power of two, got {self.n}")
        if not 0 <= self.subepoch < self.n:
            raise SchemaError(f"subepoch {self.subepoch} outside [0, {self.n})")
        if self.width < 1:
            raise SchemaError("width must be >= 1")
        shape = np.shape(self.counters)
        if self.kind is SketchKind.UM:
            ok = len(shape) == 2 and shape[1] == self.width
        else:
            ok = shape == (self.width,)
        if not ok:
            raise SchemaError(f"counter shape {shape} does not match width {self.width} for {self.kind.value}")
        if self.kind is not SketchKind.CMS and self.seeds.sign is None:
            raise SchemaError("count-sketch records need a sign seed")
        if self.kind is SketchKind.UM and self.seeds.level is None:
            raise SchemaError("UnivMon records need a level seed")

    @property
    def key(self) -> tuple[str, int, int]:
        return (self.fragment_id, self.epoch, self.subepoch)

    def subepoch_of(self, fingerprint):
        return hash_index(self.seeds.subepoch_seed, fingerprint, self.n)

    def __eq__(self, other):
        if not isinstance(other, SubepochRecord):
            return NotImplemented
        return (
            self.key == other.key
            and self.n == other.n
            and self.width == other.width
            and self.kind == other.kind
            and self.seeds == other.seeds
            and np.array_equal(self.counters, other.counters)
        )

    def to_json(self) -> str:
        obj = {
            "F": self.fragment_id,
            "E": self.epoch,
            "S": self.subepoch,
            "n": self.n,
            "w": self.width,
            "kind": self.kind.value,
            "h": self.seeds.to_dict(),
            "c": np.asarray(self.counters).tolist(),
        }
        return json.dumps(obj, separators=(",", ":"))

    @classmethod
    def from_dict(cls, obj: dict) -> "SubepochRecord":
        h = obj["h"]
        return cls(
            fragment_id=str(obj["F"]),
            epoch=int(obj["E"]),
            subepoch=int(obj["S"]),
            n=int(obj["n"]),
            width=int(obj["w"]),
            kind=SketchKind(obj["kind"]),
            seeds=RecordSeeds(index=int(h["index"]), subepoch=int(h["subepoch"]),
                              sign=h.get("sign"), level=h.get("level")),
            counters=np.asarray(obj["c"], dtype=np.int64),
        )


class RecordStore:
    """In-memory record index keyed by ``(fragment, epoch, subepoch)``."""

    def __init__(self, records: Iterable[SubepochRecord] = ()):
        self._records: dict[tuple[str, int, int], SubepochRecord] = {}
        self._epochs: dict[tuple[str, int], int] = {}
        self._meta: dict[tuple[str, int], tuple] = {}
        self._blocks: dict[tuple[str, int], np.ndarray] = {}
        self._sealed = False
        for r in records:
            self.append(r)

    def append(self, record: SubepochRecord) -> None:
        if self._sealed:
            raise RecordStoreError("store is sealed")
        if record.key in self._records:
            raise DuplicateRecordError(f"duplicate record {record.key}")
        fe = (record.fragment_id, record.epoch)
        shape = (record.n, record.width, record.kind)
        known = self._meta.setdefault(fe, shape)
        if known != shape:
            raise SchemaError(f"record {record.key} disagrees with earlier records of {fe}")
        self._records[record.key] = record
        self._epochs[fe] = record.n
        self._blocks.pop(fe, None)

    def add_block(self, fragment_id: str, epoch: int, kind: SketchKind, seeds: RecordSeeds,
                  block: np.ndarray) -> None:
        """Append all ``n`` records of one fragment epoch from a stacked counter block."""
        n = block.shape[0]
        width = block.shape[-1]
        for s in range(n):
            self.append(SubepochRecord(fragment_id, epoch, s, n, width, kind, seeds, block[s]))
        self._blocks[(fragment_id, epoch)] = block

    def get(self, fragment_id: str, epoch: int, subepoch: int) -> SubepochRecord:
        return self._records[(fragment_id, epoch, subepoch)]

    def __contains__(self, key) -> bool:
        return tuple(key) in self._records

    def __len__(self) -> int:
        return len(self._records)

    def __iter__(self) -> Iterator[SubepochRecord]:
        for k in sorted(self._records):
            yield self._records[k]

    def __eq__(self, other):
        if not isinstance(other, RecordStore):
            return NotImplemented
        return self._records.keys() == other._records.keys() and all(
            self._records[k] == other._records[k] for k in self._records
        )

    def fragments(self) -> list[str]:
        return sorted({f for f, _ in self._epochs})

    def epochs(self, fragment_id: str | None = None) -> list[int]:
        return sorted({e for f, e in self._epochs if fragment_id is None or f == fragment_id})

    def n_of(self, fragment_id: str, epoch: int) -> int:
        try:
            return self._epochs[(fragment_id, epoch)]
        except KeyError:
            raise NotReadyError(f"no records for fragment {fragment_id} epoch {epoch}") from None

    def is_complete(self, fragment_id: str, epoch: int) -> bool:
        n = self._epochs.get((fragment_id, epoch))
        if n is None:
            return False
        return all((fragment_id, epoch, s) in self._records for s in range(n))

    def epoch_records(self, fragment_id: str, epoch: int) -> list[SubepochRecord]:
        n = self.n_of(fragment_id, epoch)
        if not self.is_complete(fragment_id, epoch):
            raise NotReadyError(f"epoch {epoch} of {fragment_id} is incomplete")
        return [self._records[(fragment_id, epoch, s)] for s in range(n)]

    def block(self, fragment_id: str, epoch: int) -> np.ndarray:
        """Counters of all subepochs of a fragment epoch stacked on axis 0."""
        fe = (fragment_id, epoch)
        blk = self._blocks.get(fe)
        if blk is None:
            blk = np.stack([r.counters for r in self.epoch_records(fragment_id, epoch)])
            self._blocks[fe] = blk
        return blk

    def seal(self) -> None:
        """Check completeness of every fragment epoch and freeze the store."""
        for f, e in self._epochs:
            if not self.is_complete(f, e):
                raise NotReadyError(f"cannot seal: epoch {e} of {f} is incomplete")
        self._sealed = True

    @property
    def sealed(self) -> bool:
        return self._sealed

    def lookup_for_key(self, fragment_id: str, epoch: int, fingerprint: int,
                       mitigated: bool = False) -> list[SubepochRecord]:
        """Records of ``(F, E)`` whose subepoch sampled the key."""
        recs = self.epoch_records(fragment_id, epoch)
        n = recs[0].n
        s = recs[0].subepoch_of(fingerprint)
        out = [recs[s]]
        if mitigated and n >= 2:
            out.append(recs[(s + n // 2) % n])
        return out


def write_records(path: str | Path, records: Iterable[SubepochRecord]) -> None:
    with open(path, "w") as fh:
        fh.write(json.dumps({"format": FORMAT_NAME, "version": FORMAT_VERSION}) + "\n")
        for r in records:
            fh.write(r.to_json() + "\n")


def iter_records(path: str | Path) -> Iterator[SubepochRecord]:
    with open(path) as fh:
        header = fh.readline()
        if not header.strip():
            return
        try:
            meta = json.loads(header)
        except json.JSONDecodeError as exc:
            raise RecordParseError(1, f"bad header: {exc}") from None
        if meta.get("format") != FORMAT_NAME or meta.get("version") != FORMAT_VERSION:
            raise RecordParseError(1, f"unsupported header {meta!r}")
        for lineno, line in enumerate(fh, start=2):
            if not line.strip():
                continue
            try:
                yield SubepochRecord.from_dict(json.loads(line))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError, SchemaError) as exc:
                raise RecordParseError(lineno, str(exc)) from None


def save_store(path: str | Path, store: RecordStore) -> None:
    write_records(path, store)


def load_store(path: str | Path, seal: bool = True) -> RecordStore:
    store = RecordStore(iter_records(path))
    if seal:
        store.seal()
    return store
