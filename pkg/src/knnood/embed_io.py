"""Embedding and logit matrices: validation, file formats, feature-space transforms.

Two on-disk formats are supported. The binary format is bit-exact and
streaming-friendly: magic ``EMB1``, little-endian u32 row and column counts,
then row-major IEEE-754 float32 payload, optionally followed by a ``LBL1``
block with one u32 label per row. CSV is comma-separated, one row per line,
with an optional trailing integer label column.

All matrices are held as float64 internally; only the file payload is 32-bit.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, replace

import numpy as np

EMB_MAGIC = b"EMB1"
LBL_MAGIC = b"LBL1"

_HEADER = struct.Struct("<4sII")


def _first_nonfinite(data: np.ndarray) -> tuple[int, int] | None:
    bad = ~np.isfinite(data)
    if bad.any():
        i, j = np.argwhere(bad)[0]
        return int(i), int(j)
    return None


@dataclass(frozen=True)
class EmbeddingSet:
    """An n x m matrix of feature vectors with optional class labels.

    ``normalized`` records whether every row has been projected to the unit
    sphere; it is set by :func:`normalize`, never by the loaders.
    """

    data: np.ndarray
    labels: np.ndarray | None = None
    normalized: bool = False
    source_tag: str = ""

    def __post_init__(self):
        data = np.ascontiguousarray(self.data, dtype=np.float64)
        object.__setattr__(self, "data", data)
        if data.ndim != 2:
            raise ValueError(f"embedding data must be 2-D, got ndim={data.ndim}")
        n, m = data.shape
        if n < 1 or m < 2:
            raise ValueError(f"embedding shape {n}x{m} violates n >= 1, m >= 2")
        bad = _first_nonfinite(data)
        if bad is not None:
            raise ValueError(f"non-finite value at row {bad[0]}, column {bad[1]}")
        if self.labels is not None:
            labels = np.ascontiguousarray(self.labels, dtype=np.int64)
            object.__setattr__(self, "labels", labels)
            if labels.shape != (n,):
                raise ValueError(
                    f"labels length {labels.shape} does not match row count {n}"
                )
            if (labels < 0).any():
                raise ValueError("labels must be nonnegative class ids")
        if self.normalized:
            norms = np.linalg.norm(data, axis=1)
            off = np.abs(norms - 1.0)
            worst = int(np.argmax(off))
            if off[worst] > 1e-6:
                raise ValueError(
                    f"row {worst} has L2 norm {norms[worst]:.9g}, expected 1 "
                    "within 1e-6 for a normalized set"
                )

    @property
    def n(self) -> int:
        return self.data.shape[0]

    @property
    def dim(self) -> int:
        return self.data.shape[1]


@dataclass(frozen=True)
class LogitSet:
    """An n x C matrix of pre-softmax classifier logits, C >= 2."""

    data: np.ndarray

    def __post_init__(self):
        data = np.ascontiguousarray(self.data, dtype=np.float64)
        object.__setattr__(self, "data", data)
        if data.ndim != 2:
            raise ValueError(f"logit data must be 2-D, got ndim={data.ndim}")
        if data.shape[1] < 2:
            raise ValueError(f"logits need C >= 2 classes, got C={data.shape[1]}")
        bad = _first_nonfinite(data)
        if bad is not None:
            raise ValueError(f"non-finite logit at row {bad[0]}, column {bad[1]}")

    @property
    def n(self) -> int:
        return self.data.shape[0]

    @property
    def n_classes(self) -> int:
        return self.data.shape[1]


@dataclass(frozen=True)
class ClampSpec:
    """Activation-rectification cap: either an explicit threshold or a
    percentile of the calibration set that the threshold is computed from.

    Exactly one of ``threshold`` and ``percentile`` must be set.
    """

    threshold: float | None = None
    percentile: float | None = None

    def __post_init__(self):
        if (self.threshold is None) == (self.percentile is None):
            raise ValueError("set exactly one of threshold / percentile")
        if self.threshold is not None and not self.threshold > 0:
            raise ValueError(f"clamp threshold must be positive, got {self.threshold}")
        if self.percentile is not None and not (0 < self.percentile <= 100):
            raise ValueError(
                f"clamp percentile must lie in (0, 100], got {self.percentile}"
            )


# ---------------------------------------------------------------------------
# binary format


def _write_emb1_bytes(data: np.ndarray, labels: np.ndarray | None) -> bytes:
    n, m = data.shape
    parts = [_HEADER.pack(EMB_MAGIC, n, m)]
    parts.append(np.ascontiguousarray(data, dtype="<f4").tobytes())
    if labels is not None:
        parts.append(LBL_MAGIC)
        parts.append(np.ascontiguousarray(labels, dtype="<u4").tobytes())
    return b"".join(parts)


def _read_emb1_bytes(raw: bytes, what: str) -> tuple[np.ndarray, np.ndarray | None]:
    if len(raw) < _HEADER.size:
        raise ValueError(f"{what}: truncated header ({len(raw)} bytes)")
    magic, n, m = _HEADER.unpack_from(raw, 0)
    if magic != EMB_MAGIC:
        raise ValueError(f"{what}: bad magic {magic!r}, expected {EMB_MAGIC!r}")
    off = _HEADER.size
    need = 4 * n * m
    if len(raw) < off + need:
        raise ValueError(
            f"{what}: payload truncated, header says {n}x{m} "
            f"({need} bytes) but only {len(raw) - off} remain"
        )
    data = np.frombuffer(raw, dtype="<f4", count=n * m, offset=off)
    data = data.reshape(n, m).astype(np.float64)
    off += need
    labels = None
    rest = raw[off:]
    if rest:
        if rest[:4] != LBL_MAGIC or len(rest) != 4 + 4 * n:
            raise ValueError(f"{what}: unexpected trailing bytes after payload")
        labels = np.frombuffer(rest, dtype="<u4", count=n, offset=4).astype(np.int64)
    return data, labels


# ---------------------------------------------------------------------------
# CSV


def _parse_csv(path: str, label_column: bool) -> tuple[np.ndarray, np.ndarray | None]:
    rows = []
    labels = [] if label_column else None
    width = None
    with open(path, "r", encoding="ascii") as fh:
        for lineno, line in enumerate(fh):
            line = line.strip()
            if not line:
                continue
            cells = line.split(",")
            if width is None:
                width = len(cells)
            elif len(cells) != width:
                raise ValueError(
                    f"row {lineno} has {len(cells)} columns, expected {width}"
                )
            if label_column:
                try:
                    labels.append(int(cells[-1]))
                except ValueError:
                    raise ValueError(
                        f"row {lineno}: label column value {cells[-1]!r} "
                        "is not an integer"
                    ) from None
                cells = cells[:-1]
            vals = []
            for col, cell in enumerate(cells):
                try:
                    v = float(cell)
                except ValueError:
                    raise ValueError(
                        f"row {lineno}, column {col}: cannot parse {cell!r}"
                    ) from None
                if not math.isfinite(v):
                    raise ValueError(
                        f"non-finite value at row {lineno}, column {col}"
                    )
                vals.append(v)
            rows.append(vals)
    if not rows:
        raise ValueError(f"{path}: no data rows")
    data = np.array(rows, dtype=np.float64)
    lab = np.array(labels, dtype=np.int64) if label_column else None
    return data, lab


def _write_csv(path: str, data: np.ndarray, labels: np.ndarray | None) -> None:
    with open(path, "w", encoding="ascii") as fh:
        for i, row in enumerate(data):
            cells = ["%.17g" % v for v in row]
            if labels is not None:
                cells.append(str(int(labels[i])))
            fh.write(",".join(cells) + "\n")


# ---------------------------------------------------------------------------
# operations


def load_embeddings(
    path: str, format: str = "binary", label_column: bool = False
) -> EmbeddingSet:
    """Read an embedding matrix from disk.

    ``label_column`` selects the trailing CSV label column; the binary format
    carries labels in its own tagged block and detects them automatically.
    The returned set always has ``normalized=False``.
    """
    if format == "binary":
        with open(path, "rb") as fh:
            raw = fh.read()
        data, labels = _read_emb1_bytes(raw, path)
    elif format == "csv":
        data, labels = _parse_csv(path, label_column)
    else:
        raise ValueError(f"unknown format {format!r}, expected 'binary' or 'csv'")
    return EmbeddingSet(data=data, labels=labels, normalized=False, source_tag=path)


def save_embeddings(e: EmbeddingSet, path: str, format: str = "binary") -> None:
    """Write an embedding set; binary round-trips bit-exactly on the payload."""
    if format == "binary":
        with open(path, "wb") as fh:
            fh.write(_write_emb1_bytes(e.data, e.labels))
    elif format == "csv":
        _write_csv(path, e.data, e.labels)
    else:
        raise ValueError(f"unknown format {format!r}, expected 'binary' or 'csv'")


def load_logits(path: str, format: str = "binary") -> LogitSet:
    """Read a logit matrix; same formats and errors as :func:`load_embeddings`."""
    if format == "binary":
        with open(path, "rb") as fh:
            raw = fh.read()
        data, _ = _read_emb1_bytes(raw, path)
    elif format == "csv":
        data, _ = _parse_csv(path, label_column=False)
    else:
        raise ValueError(f"unknown format {format!r}, expected 'binary' or 'csv'")
    return LogitSet(data=data)


def save_logits(l: LogitSet, path: str, format: str = "binary") -> None:
    if format == "binary":
        with open(path, "wb") as fh:
            fh.write(_write_emb1_bytes(l.data, None))
    elif format == "csv":
        _write_csv(path, l.data, None)
    else:
        raise ValueError(f"unknown format {format!r}, expected 'binary' or 'csv'")


def normalize(e: EmbeddingSet) -> EmbeddingSet:
    """Project every row to the unit sphere. Zero rows are a hard error:
    silently dropping them would desynchronize labels."""
    norms = np.linalg.norm(e.data, axis=1)
    if (norms == 0).any():
        idx = int(np.argmax(norms == 0))
        raise ValueError(f"row {idx} has zero norm and cannot be normalized")
    data = e.data / norms[:, None]
    return replace(e, data=data, normalized=True)


def react_threshold(spec: ClampSpec, calib: EmbeddingSet | None) -> float:
    """Resolve the clamp level: an explicit cap, or the percentile-p order
    statistic of the flattened calibration activations (smallest value with
    at least p percent of entries at or below it)."""
    if spec.threshold is not None:
        return float(spec.threshold)
    if calib is None:
        raise ValueError("percentile clamp needs a calibration set")
    flat = np.sort(calib.data, axis=None)
    rank = math.ceil(spec.percentile / 100.0 * flat.size - 1e-9)
    c = float(flat[max(rank, 1) - 1])
    if not c > 0:
        raise ValueError(
            f"computed clamp level {c:.6g} is not positive; "
            "choose a higher percentile or an explicit threshold"
        )
    return c


def clamp_react(
    e: EmbeddingSet, spec: ClampSpec, calib: EmbeddingSet | None = None
) -> EmbeddingSet:
    """Cap every activation at the rectification level c (elementwise min).

    Applied to raw activations, before any normalization.
    """
    if e.normalized:
        raise ValueError("rectification applies to raw activations; "
                         "clamp before normalizing")
    c = react_threshold(spec, calib)
    return replace(e, data=np.minimum(e.data, c))
