"""Per-batch training journal: which examples were in which batch, and the
exact parameter delta each batch produced.

File layout (all little-endian)::

    u32  magic 0x414D4E4A ("AMNJ")
    u16  format version (1)
    u8   mode (0 = FULL, 1 = WATCHLIST)
    u64  architecture fingerprint
    u64  parameter count
    u64  record count
    u16  run id length, then run id (utf-8)
    u32  architecture length, then architecture text (utf-8)
    u64  watched id count, then watched ids u64[]
    f32  initial parameters [parameter count]
    records, each:
        u32 epoch, u32 batch, u32 example count, u64 example ids[]
        u8  has_delta, then f32 delta[parameter count] when has_delta == 1

A sidecar ``<path>.index.txt`` lists ``epoch,batch,id,id,...`` per batch.
"""

from __future__ import annotations

import enum
import io
import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, NamedTuple

import numpy as np

from amnesiac.data import Selector
from amnesiac.nn import GRID, GRID_BITS, PARAM_LIMIT, Architecture, Model, ParamDelta, ParamVector

MAGIC = 0x414D4E4A
VERSION = 1


class JournalError(Exception):
    pass


class JournalFormatError(JournalError):
    """Bad magic, unsupported version or otherwise malformed header."""


class JournalTruncatedError(JournalError):
    pass


class FingerprintMismatchError(JournalError):
    pass


class DuplicateBatchError(JournalError):
    pass


class MissingDeltaError(JournalError):
    """Deltas for some requested batches were never stored."""

    def __init__(self, keys):
        self.keys = sorted(keys)
        shown = ", ".join(str(k) for k in self.keys[:20])
        more = f" (+{len(self.keys) - 20} more)" if len(self.keys) > 20 else ""
        super().__init__(f"no stored delta for batches: {shown}{more}")


class Mode(enum.IntEnum):
    FULL = 0
    WATCHLIST = 1


class BatchKey(NamedTuple):
    epoch: int
    batch: int

    def __str__(self) -> str:
        return f"({self.epoch},{self.batch})"


@dataclass
class _Record:
    ids: np.ndarray
    units: np.ndarray | None  # delta in int32 grid units
    peak: int = 0  # max |units|, bounds partial sums


def _to_units(flat: np.ndarray) -> np.ndarray:
    scaled = np.asarray(flat, dtype=np.float64) * 2.0**GRID_BITS
    units = np.rint(scaled)
    if not np.array_equal(units, scaled) or (units.size and np.max(np.abs(units)) >= 2**31):
        raise ValueError("delta is not on the parameter grid")
    return units.astype(np.int32)


def _from_units(units: np.ndarray) -> np.ndarray:
    return (units.astype(np.float64) * GRID).astype(np.float32) + np.float32(0.0)


def _record(ids: np.ndarray, flat: np.ndarray | None) -> _Record:
    if flat is None:
        return _Record(ids, None)
    units = _to_units(flat)
    return _Record(ids, units, int(np.max(np.abs(units), initial=0)))


class Journal:
    """Example-to-batch index plus delta store for one training run.

    In WATCHLIST mode every batch is indexed, but a delta is kept only if
    the batch contains a watched example.
    """

    def __init__(
        self,
        architecture: Architecture,
        initial_params: ParamVector,
        run_id: str = "run",
        mode: Mode = Mode.FULL,
        watched: Iterable[int] = (),
    ):
        if initial_params.layout != architecture.layout():
            raise FingerprintMismatchError("initial parameters do not match architecture")
        self.architecture = architecture
        self.initial_params = initial_params.copy()
        self.run_id = run_id
        self.mode = Mode(mode)
        self.watched = frozenset(int(i) for i in watched)
        if self.mode is Mode.FULL and self.watched:
            raise ValueError("a FULL journal has no watchlist")
        self._records: dict[BatchKey, _Record] = {}
        self._index: dict[int, list[BatchKey]] = {}
        # running sum of every stored delta (grid units) and the sum of the
        # per-record peaks, which bounds any partial sum
        self._total = np.zeros(self.param_count, dtype=np.int64)
        self._peak_sum = 0
        self._watched_arr = np.fromiter(self.watched, dtype=np.uint64, count=len(self.watched))

    @classmethod
    def for_model(cls, model: Model, **kwargs) -> Journal:
        return cls(model.architecture, model.params, **kwargs)

    @property
    def arch_fingerprint(self) -> int:
        return self.architecture.fingerprint()

    @property
    def param_count(self) -> int:
        return self.initial_params.size

    @property
    def example_index(self) -> dict[int, list[BatchKey]]:
        return self._index

    def keys(self) -> list[BatchKey]:
        return sorted(self._records)

    def stored_keys(self) -> list[BatchKey]:
        return sorted(k for k, r in self._records.items() if r.units is not None)

    def __len__(self) -> int:
        return len(self._records)

    def example_ids(self, key: BatchKey) -> np.ndarray:
        return self._records[BatchKey(*key)].ids

    def delta(self, key: BatchKey) -> ParamDelta:
        rec = self._records.get(BatchKey(*key))
        if rec is None or rec.units is None:
            raise MissingDeltaError([BatchKey(*key)])
        return ParamDelta(self.initial_params.layout, _from_units(rec.units))

    def record_batch(self, key, example_ids, delta: ParamVector | None) -> None:
        key = BatchKey(int(key[0]), int(key[1]))
        if key in self._records:
            raise DuplicateBatchError(f"batch {key} already recorded")
        ids = np.array(example_ids, dtype=np.uint64).reshape(-1)
        keep = self.mode is Mode.FULL or bool(np.isin(ids, self._watched_arr).any())
        flat = None
        if keep:
            if delta is None:
                raise ValueError(f"batch {key} needs a delta")
            if delta.layout != self.initial_params.layout:
                raise FingerprintMismatchError("delta layout does not match journal")
            flat = delta.flat
        self._store(key, _record(ids, flat))

    def _store(self, key: BatchKey, rec: _Record) -> None:
        self._records[key] = rec
        if rec.units is not None:
            np.add(self._total, rec.units, out=self._total)
            self._peak_sum += rec.peak
        for i in rec.ids.tolist():
            self._index.setdefault(i, []).append(key)

    def _resolve(self, selector, dataset=None) -> set[int]:
        if selector is None:
            return set()
        if isinstance(selector, (int, np.integer)) and not isinstance(selector, bool):
            selector = Selector.of_class(int(selector))
        if isinstance(selector, Selector):
            if selector.class_label is None and not selector.negate:
                return set(selector.example_ids)
            if dataset is None:
                raise ValueError("this selector needs the dataset to resolve example ids")
            return {int(i) for i in selector.ids_in(dataset)}
        return {int(i) for i in selector}

    def batches_containing(self, selector, dataset=None) -> list[BatchKey]:
        """Sorted, de-duplicated keys of every batch holding a selected example.

        ``selector`` is an id set, a class label (needs ``dataset``) or a
        ``Selector``. Unknown example ids raise KeyError.
        """
        ids = self._resolve(selector, dataset)
        by_id = not isinstance(selector, (int, np.integer)) and not (
            isinstance(selector, Selector) and (selector.class_label is not None or selector.negate)
        )
        unknown = [i for i in ids if i not in self._index]
        if unknown and by_id:
            raise KeyError(f"example ids never seen in training: {sorted(unknown)[:10]}")
        keys = set()
        for i in ids:
            keys.update(self._index.get(i, ()))
        return sorted(keys)

    def sum_deltas(self, keys: Iterable) -> ParamDelta:
        """Element-wise sum of the stored deltas for ``keys``.

        Deltas are held as integer multiples of the parameter grid, so the
        sum is exact and independent of order. When more than half of the
        stored deltas are requested, the complement is subtracted from the
        running total instead, which reads fewer records.
        """
        wanted = {BatchKey(*k) for k in keys}
        missing = [k for k in wanted if k not in self._records or self._records[k].units is None]
        if missing:
            raise MissingDeltaError(missing)
        stored = [k for k, r in self._records.items() if r.units is not None]
        acc = np.int32 if self._peak_sum < 2**31 else np.int64
        if 2 * len(wanted) > len(stored):
            total = self._total.astype(acc)
            for k in stored:
                if k not in wanted:
                    np.subtract(total, self._records[k].units, out=total)
        else:
            total = np.zeros(self.param_count, dtype=acc)
            for k in sorted(wanted):
                np.add(total, self._records[k].units, out=total)
        if total.size and np.max(np.abs(total)) * GRID >= PARAM_LIMIT:
            raise ArithmeticError("delta sum leaves the exactly representable range")
        return ParamDelta(self.initial_params.layout, _from_units(total))

    def __eq__(self, other) -> bool:
        if not isinstance(other, Journal):
            return NotImplemented
        if (
            self.run_id != other.run_id
            or self.mode != other.mode
            or self.watched != other.watched
            or str(self.architecture) != str(other.architecture)
            or self.initial_params != other.initial_params
            or self._records.keys() != other._records.keys()
        ):
            return False
        for k, a in self._records.items():
            b = other._records[k]
            if not np.array_equal(a.ids, b.ids):
                return False
            if (a.units is None) != (b.units is None):
                return False
            if a.units is not None and not np.array_equal(a.units, b.units):
                return False
        return True

    __hash__ = None

    # ------------------------------------------------------------------
    # persistence

    def to_bytes(self) -> bytes:
        buf = io.BytesIO()
        run = self.run_id.encode()
        arch = str(self.architecture).encode()
        watched = np.array(sorted(self.watched), dtype="<u8")
        buf.write(struct.pack("<IHBQQQ", MAGIC, VERSION, int(self.mode), self.arch_fingerprint,
                              self.param_count, len(self._records)))
        buf.write(struct.pack("<H", len(run)) + run)
        buf.write(struct.pack("<I", len(arch)) + arch)
        buf.write(struct.pack("<Q", len(watched)) + watched.tobytes())
        buf.write(self.initial_params.flat.astype("<f4").tobytes())
        for key in sorted(self._records):
            rec = self._records[key]
            buf.write(struct.pack("<III", key.epoch, key.batch, len(rec.ids)))
            buf.write(rec.ids.astype("<u8").tobytes())
            if rec.units is None:
                buf.write(b"\x00")
            else:
                buf.write(b"\x01" + _from_units(rec.units).astype("<f4").tobytes())
        return buf.getvalue()

    def index_text(self) -> str:
        lines = []
        for key in sorted(self._records):
            ids = ",".join(str(i) for i in self._records[key].ids.tolist())
            lines.append(f"{key.epoch},{key.batch}" + (f",{ids}" if ids else ""))
        return "\n".join(lines) + ("\n" if lines else "")

    def save(self, path) -> int:
        """Write atomically; returns the journal file size in bytes."""
        path = Path(path)
        data = self.to_bytes()
        tmp = path.with_name(path.name + ".tmp")
        with open(tmp, "wb") as f:
            f.write(data)
            f.flush()
            os.fsync(f.fileno())
        os.replace(tmp, path)
        Path(str(path) + ".index.txt").write_text(self.index_text())
        return len(data)

    @classmethod
    def from_bytes(cls, data: bytes, expected: Architecture | None = None) -> Journal:
        r = _Reader(data)
        magic, version, mode, fp, pcount, nrec = r.unpack("<IHBQQQ")
        if magic != MAGIC:
            raise JournalFormatError(f"bad magic 0x{magic:08X}")
        if version != VERSION:
            raise JournalFormatError(f"unsupported journal version {version}")
        try:
            mode = Mode(mode)
        except ValueError:
            raise JournalFormatError(f"unknown journal mode {mode}") from None
        (n,) = r.unpack("<H")
        run_id = r.take(n).decode()
        (n,) = r.unpack("<I")
        try:
            arch = Architecture.parse(r.take(n).decode())
        except (ValueError, UnicodeDecodeError) as e:
            raise JournalFormatError(f"unreadable architecture: {e}") from None
        if arch.fingerprint() != fp:
            raise JournalFormatError("architecture text does not match stored fingerprint")
        if expected is not None and expected.fingerprint() != fp:
            raise FingerprintMismatchError(f"journal is for {arch}, not {expected}")
        layout = arch.layout()
        if ParamVector.zeros(layout).size != pcount:
            raise JournalFormatError("parameter count does not match architecture")
        (n,) = r.unpack("<Q")
        watched = r.array("<u8", n)
        initial = ParamVector(layout, r.array("<f4", pcount).astype(np.float32))
        journal = cls(arch, initial, run_id=run_id, mode=mode, watched=watched.tolist())
        for _ in range(nrec):
            epoch, batch, count = r.unpack("<III")
            ids = r.array("<u8", count).astype(np.uint64)
            (flag,) = r.unpack("<B")
            if flag not in (0, 1):
                raise JournalFormatError(f"bad delta flag {flag} in record ({epoch},{batch})")
            delta = r.array("<f4", pcount).astype(np.float32) if flag else None
            key = BatchKey(epoch, batch)
            if key in journal._records:
                raise JournalFormatError(f"duplicate record {key}")
            try:
                rec = _record(ids, delta)
            except ValueError:
                raise JournalFormatError(f"delta of record {key} is off the parameter grid") from None
            journal._store(key, rec)
        if r.remaining():
            raise JournalFormatError(f"{r.remaining()} trailing bytes after last record")
        return journal

    @classmethod
    def load(cls, path, expected: Architecture | None = None) -> Journal:
        return cls.from_bytes(Path(path).read_bytes(), expected)

    def __repr__(self) -> str:
        return f"Journal(run_id={self.run_id!r}, mode={self.mode.name}, batches={len(self)})"


class _Reader:
    def __init__(self, data: bytes):
        self.data = memoryview(data)
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise JournalTruncatedError(f"file ends at byte {len(self.data)}, needed {self.pos + n}")
        out = bytes(self.data[self.pos : self.pos + n])
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def array(self, dtype: str, count: int) -> np.ndarray:
        dt = np.dtype(dtype)
        return np.frombuffer(self.take(dt.itemsize * count), dtype=dt)

    def remaining(self) -> int:
        return len(self.data) - self.pos


def record_batch(journal: Journal, key, example_ids, delta) -> None:
    journal.record_batch(key, example_ids, delta)


def batches_containing(journal: Journal, selector, dataset=None) -> list[BatchKey]:
    return journal.batches_containing(selector, dataset)


def sum_deltas(journal: Journal, keys) -> ParamDelta:
    return journal.sum_deltas(keys)


def save(journal: Journal, path) -> int:
    return journal.save(path)


def load(path, expected: Architecture | None = None) -> Journal:
    return Journal.load(path, expected)
