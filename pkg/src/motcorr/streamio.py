"""On-disk formats: binary timestamp streams, TSV tables, JSON reports.

Stream file layout (all integers little-endian)::

    magic    8 bytes  b"MOTCSTRM"
    version  u32      1
    flags    u32      bit 0 set for truth (emission) files
    n_chan   u16
    labels   n_chan x (u8 length + utf-8 bytes)
    duration u64      ns
    hash     16 bytes ascii config hash (zero padded)
    n_events u64
    events   n_events x (u64 t_ns, u8 channel, u8 tag)
    sha256   32 bytes over everything above

Events are ordered by (t, channel). For click files tag is 0xFF; for truth
files the channel is the atom index and tag = q + 1.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .detection import ClickStream

MAGIC = b"MOTCSTRM"
VERSION = 1
FLAG_TRUTH = 1
CLICK_TAG = 0xFF
EVENT_DTYPE = np.dtype([("t", "<u8"), ("ch", "u1"), ("tag", "u1")])


class StreamFormatError(ValueError):
    pass


@dataclass
class StreamFile:
    """Decoded stream file contents."""

    labels: tuple
    duration: float
    config_hash: str
    events: np.ndarray
    truth: bool = False

    def to_clickstream(self) -> ClickStream:
        if self.truth:
            raise StreamFormatError("truth file holds emissions, not clicks")
        times = tuple(self.events["t"][self.events["ch"] == c].astype(np.int64)
                      for c in range(len(self.labels)))
        return ClickStream(times, self.labels, self.duration, self.config_hash)


def _encode(labels, duration_ns: int, chash: str, events: np.ndarray, flags: int) -> bytes:
    if len(labels) > 255:
        raise StreamFormatError("at most 255 channels")
    parts = [MAGIC, struct.pack("<II", VERSION, flags), struct.pack("<H", len(labels))]
    for lab in labels:
        raw = str(lab).encode()
        if len(raw) > 255:
            raise StreamFormatError("channel label too long")
        parts += [struct.pack("<B", len(raw)), raw]
    hb = chash.encode("ascii")[:16].ljust(16, b"\0")
    parts += [struct.pack("<Q", duration_ns), hb, struct.pack("<Q", len(events)),
              np.ascontiguousarray(events, dtype=EVENT_DTYPE).tobytes()]
    body = b"".join(parts)
    return body + hashlib.sha256(body).digest()


def encode_clicks(stream: ClickStream) -> bytes:
    n = stream.n_clicks
    ev = np.empty(n, dtype=EVENT_DTYPE)
    ev["t"] = np.concatenate(stream.times) if n else np.zeros(0, np.uint64)
    ev["ch"] = np.concatenate([np.full(len(t), c, np.uint8) for c, t in enumerate(stream.times)]) if n else []
    ev["tag"] = CLICK_TAG
    ev = ev[np.lexsort((ev["ch"], ev["t"]))]
    return _encode(stream.labels, int(round(stream.duration * 1e9)), stream.config_hash, ev, 0)


def encode_truth(record, config_hash: str = "") -> bytes:
    """Emission record: t rounded to ns, channel = atom index, tag = q + 1."""
    n = len(record.t)
    ev = np.empty(n, dtype=EVENT_DTYPE)
    ev["t"] = np.rint(np.asarray(record.t) * 1e9).astype(np.uint64)
    atoms = np.asarray(record.atom, dtype=np.int64)
    if n and atoms.max() > 255:
        raise StreamFormatError("truth files hold at most 256 atoms")
    ev["ch"] = atoms
    ev["tag"] = np.asarray(record.q, dtype=np.int64) + 1
    ev = ev[np.lexsort((ev["ch"], ev["t"]))]
    n_atoms = int(atoms.max()) + 1 if n else 1
    labels = tuple(f"atom{i}" for i in range(n_atoms))
    return _encode(labels, int(round(record.duration * 1e9)), config_hash, ev, FLAG_TRUTH)


def decode(data: bytes) -> StreamFile:
    if len(data) < 16 + 32:
        raise StreamFormatError("file too short")
    body, digest = data[:-32], data[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise StreamFormatError("checksum mismatch")
    if body[:8] != MAGIC:
        raise StreamFormatError("bad magic")
    version, flags = struct.unpack_from("<II", body, 8)
    if version != VERSION:
        raise StreamFormatError(f"unsupported version {version}")
    off = 16
    (nch,) = struct.unpack_from("<H", body, off)
    off += 2
    labels = []
    for _ in range(nch):
        (ln,) = struct.unpack_from("<B", body, off)
        off += 1
        labels.append(body[off:off + ln].decode())
        off += ln
    (dur,) = struct.unpack_from("<Q", body, off)
    off += 8
    chash = body[off:off + 16].rstrip(b"\0").decode("ascii")
    off += 16
    (n,) = struct.unpack_from("<Q", body, off)
    off += 8
    if len(body) - off != n * EVENT_DTYPE.itemsize:
        raise StreamFormatError("event block size does not match header")
    ev = np.frombuffer(body, dtype=EVENT_DTYPE, count=n, offset=off).copy()
    if n > 1 and np.any(np.diff(ev["t"].astype(np.int64)) < 0):
        raise StreamFormatError("timestamp regression")
    truth = bool(flags & FLAG_TRUTH)
    if not truth and n and ev["ch"].max() >= nch:
        raise StreamFormatError("event references unknown channel")
    return StreamFile(tuple(labels), dur * 1e-9, chash, ev, truth)


def write_stream(path, stream: ClickStream) -> None:
    Path(path).write_bytes(encode_clicks(stream))


def write_truth(path, record, config_hash: str = "") -> None:
    Path(path).write_bytes(encode_truth(record, config_hash))


def read_stream(path) -> StreamFile:
    return decode(Path(path).read_bytes())


# ---------------------------------------------------------------- TSV tables


def write_table(path, columns, data, comments=()) -> None:
    """Tab-separated table with '#' comment lines and a header row."""
    data = np.asarray(data, dtype=float)
    lines = [f"# {c}" for c in comments]
    lines.append("\t".join(columns))
    for row in np.atleast_2d(data):
        lines.append("\t".join(repr(float(v)) for v in row))
    Path(path).write_text("\n".join(lines) + "\n")


def read_table(path) -> tuple[list, np.ndarray, list]:
    comments, header, rows = [], None, []
    for line in Path(path).read_text().splitlines():
        if line.startswith("#"):
            comments.append(line[1:].strip())
        elif header is None:
            header = line.split("\t")
        elif line.strip():
            rows.append([float(v) for v in line.split("\t")])
    if header is None:
        raise ValueError(f"{path}: no header row")
    return header, np.array(rows, dtype=float).reshape(-1, len(header)), comments


# ---------------------------------------------------------------- reports


def _plain(obj):
    """Convert numpy containers to JSON-native values."""
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, np.bool_):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    if isinstance(obj, float) and not np.isfinite(obj):
        return {"__float__": repr(obj)}
    return obj


def _revive(obj):
    if isinstance(obj, dict):
        if set(obj) == {"__float__"}:
            return float(obj["__float__"])
        return {k: _revive(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_revive(v) for v in obj]
    return obj


@dataclass
class ReportRecord:
    """Structured run report: config, provenance, tables, fits and checks."""

    kind: str
    config: dict = field(default_factory=dict)
    config_hash: str = ""
    provenance: dict = field(default_factory=dict)
    results: dict = field(default_factory=dict)
    checks: list = field(default_factory=list)

    def add_check(self, name: str, passed: bool, value=None, threshold=None, note: str = "",
                  advisory: bool = False):
        self.checks.append({"name": name, "passed": bool(passed), "value": _plain(value),
                            "threshold": _plain(threshold), "note": note, "advisory": advisory})

    @property
    def passed(self) -> bool:
        """All non-advisory checks passed."""
        return all(c["passed"] for c in self.checks if not c.get("advisory"))

    def to_dict(self) -> dict:
        return _plain({"kind": self.kind, "config": self.config, "config_hash": self.config_hash,
                       "provenance": self.provenance, "results": self.results, "checks": self.checks})

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True, allow_nan=False)

    @classmethod
    def from_json(cls, text: str) -> "ReportRecord":
        d = _revive(json.loads(text))
        return cls(d["kind"], d["config"], d["config_hash"], d["provenance"], d["results"], d["checks"])

    def save(self, path) -> None:
        Path(path).write_text(self.to_json() + "\n")

    @classmethod
    def load(cls, path) -> "ReportRecord":
        return cls.from_json(Path(path).read_text())


def provenance(seed=None, **extra) -> dict:
    import numba
    import scipy
    import sklearn

    from . import __version__

    out = {"motcorr": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
           "sklearn": sklearn.__version__, "numba": numba.__version__, "seed": seed}
    out.update(extra)
    return out
