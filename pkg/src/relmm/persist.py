"""Checkpoint container and metrics CSV.

Container layout, all integers little-endian::

    offset  size  field
    0       8     magic  b"RELMMCK\\x00"
    8       4     format version (uint32), currently 1
    12      8     header length H in bytes (uint64)
    20      H     header, UTF-8 JSON
    20+H    ...   payload: raw array bytes, back to back

The header carries the caller's metadata under ``"meta"`` and an index
``"arrays"`` of ``{name, dtype, shape, offset, nbytes}`` entries, offsets
relative to the payload start, so a reader needs nothing else to enumerate
the arrays. ``"payload_sha256"`` guards against truncated files.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import os
import struct
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

MAGIC = b"RELMMCK\x00"
VERSION = 1
_PREFIX = struct.Struct("<8sIQ")
DTYPES = {"float32": "<f4", "float64": "<f8", "int8": "|i1", "int32": "<i4",
          "int64": "<i8", "uint8": "|u1", "bool": "|b1"}


class CheckpointError(RuntimeError):
    pass


def save_container(path, meta: Mapping[str, Any], arrays: Mapping[str, np.ndarray]) -> None:
    """Write atomically (temp file + rename)."""
    index, chunks, offset = [], [], 0
    for name in sorted(arrays):
        a = np.asarray(arrays[name])
        if a.dtype.name not in DTYPES:
            raise CheckpointError(f"array {name!r} has unsupported dtype {a.dtype}")
        raw = np.ascontiguousarray(a, dtype=np.dtype(DTYPES[a.dtype.name])).tobytes()
        index.append({"name": name, "dtype": a.dtype.name, "shape": list(a.shape),
                      "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)
    header = json.dumps({"meta": meta, "arrays": index,
                         "payload_sha256": hashlib.sha256(payload).hexdigest()},
                        sort_keys=True).encode("utf-8")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(_PREFIX.pack(MAGIC, VERSION, len(header)))
        fh.write(header)
        fh.write(payload)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


def read_header(path) -> dict:
    with open(path, "rb") as fh:
        return _read_header(fh, str(path))


def _read_header(fh, name: str) -> dict:
    prefix = fh.read(_PREFIX.size)
    if len(prefix) != _PREFIX.size:
        raise CheckpointError(f"{name}: file too short for a checkpoint")
    magic, version, hlen = _PREFIX.unpack(prefix)
    if magic != MAGIC:
        raise CheckpointError(f"{name}: not a checkpoint (bad magic)")
    if version != VERSION:
        raise CheckpointError(f"{name}: unsupported checkpoint version {version}")
    raw = fh.read(hlen)
    if len(raw) != hlen:
        raise CheckpointError(f"{name}: truncated header")
    return json.loads(raw.decode("utf-8"))


def load_container(path) -> Tuple[dict, Dict[str, np.ndarray]]:
    """(meta, arrays) with every array in its saved dtype and shape."""
    try:
        fh = open(path, "rb")
    except OSError as exc:
        raise CheckpointError(f"cannot open checkpoint {path}: {exc.strerror}") from None
    with fh:
        header = _read_header(fh, str(path))
        payload = fh.read()
    if hashlib.sha256(payload).hexdigest() != header["payload_sha256"]:
        raise CheckpointError(f"{path}: payload checksum mismatch")
    arrays = {}
    for e in header["arrays"]:
        buf = payload[e["offset"]:e["offset"] + e["nbytes"]]
        a = np.frombuffer(buf, dtype=np.dtype(DTYPES[e["dtype"]])).reshape(e["shape"])
        arrays[e["name"]] = a.astype(e["dtype"])  # native byte order, writable copy
    return header["meta"], arrays


# ---------------------------------------------------------------------------
# metrics CSV

CSV_VERSION = 1
COLUMNS = (
    "run_id", "variant", "seed", "step", "event",
    "r_g", "r_n", "p_grasp", "grasp_attempted", "grasp_attempts", "dg_size", "dn_size",
    "grasp_loss", "critic1", "critic2", "actor", "temperature", "alpha",
    "objects_total", "objects_collected", "percent_failed", "mean_gap", "horizon",
    "wall_time",
)
EVENTS = ("pretrain", "train", "eval")


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


class MetricsCSV:
    """Append-only metrics file with a fixed header.

    Rows are buffered and flushed every ``flush_every`` rows (and on close).
    ``truncate_after`` drops train/eval rows beyond a step when resuming, so
    rows written after the last checkpoint of an interrupted run vanish;
    ``fresh`` discards any existing rows.
    """

    def __init__(self, path, flush_every: int = 100, truncate_after: Optional[int] = None,
                 fresh: bool = False):
        self.path = Path(path)
        self.flush_every = min(int(flush_every), 100)
        self._pending: List[List[str]] = []
        if fresh:
            self._write_all([])
        elif truncate_after is not None and self.path.exists():
            kept = [r for r in read_rows(self.path)
                    if r["event"] == "pretrain" or int(r["step"]) <= truncate_after]
            self._write_all(kept)
        elif not self.path.exists() or self.path.stat().st_size == 0:
            self._write_all([])
        else:
            with open(self.path, newline="") as fh:
                head = next(csv.reader(fh), None)
            if tuple(head or ()) != COLUMNS:
                raise ValueError(f"{self.path}: existing CSV has a different header")

    def _write_all(self, rows: Sequence[Mapping[str, str]]) -> None:
        with open(self.path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(COLUMNS)
            for r in rows:
                w.writerow([r.get(c, "") for c in COLUMNS])

    def write(self, **row) -> None:
        unknown = set(row) - set(COLUMNS)
        if unknown:
            raise KeyError(f"unknown CSV columns {sorted(unknown)}")
        if row.get("event") not in EVENTS:
            raise ValueError(f"event must be one of {EVENTS}")
        self._pending.append([_fmt(row.get(c)) for c in COLUMNS])
        if len(self._pending) >= self.flush_every:
            self.flush()

    def flush(self) -> None:
        if not self._pending:
            return
        with open(self.path, "a", newline="") as fh:
            csv.writer(fh, lineterminator="\n").writerows(self._pending)
        self._pending = []

    def close(self) -> None:
        self.flush()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_rows(path) -> List[Dict[str, str]]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def rows_to_text(rows: Sequence[Mapping[str, Any]]) -> str:
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(COLUMNS)
    for r in rows:
        w.writerow([_fmt(r.get(c)) for c in COLUMNS])
    return out.getvalue()
