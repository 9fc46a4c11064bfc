"""Flight sequences on disk.

Directory layout::

    <dir>/index.csv
    <dir>/frames/000000.pgm
    ...

``index.csv`` is UTF-8 with a header line and one row per record, columns in
this order::

    timestamp, image, drone_x, drone_y, drone_z, drone_yaw,
    subject_x, subject_y, subject_z, subject_yaw, subject_id

Poses are world-frame, meters and radians, written with ``repr`` so they
round-trip exactly. ``image`` is a path relative to the directory pointing at
an 8-bit binary PGM (P5).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image

from ..pose import Pose4, compose, format_pose_fields, invert

COLUMNS = (
    "timestamp",
    "image",
    "drone_x",
    "drone_y",
    "drone_z",
    "drone_yaw",
    "subject_x",
    "subject_y",
    "subject_z",
    "subject_yaw",
    "subject_id",
)


class IngestionError(ValueError):
    def __init__(self, message: str, row: Optional[int] = None):
        self.row = row
        super().__init__(f"row {row}: {message}" if row is not None else message)


@dataclass(frozen=True, eq=False)
class FlightRecord:
    timestamp: float
    image: np.ndarray  # (h, w) uint8
    drone: Pose4
    subject: Pose4
    subject_id: str = "s0"
    image_path: Optional[str] = field(default=None, compare=False)

    @property
    def relative(self) -> Pose4:
        """Subject pose expressed in the drone frame."""
        return compose(invert(self.drone), self.subject)

    def __eq__(self, other) -> bool:
        if not isinstance(other, FlightRecord):
            return NotImplemented
        return (
            self.timestamp == other.timestamp
            and self.drone == other.drone
            and self.subject == other.subject
            and self.subject_id == other.subject_id
            and np.array_equal(self.image, other.image)
        )

    __hash__ = None  # type: ignore[assignment]


def save_sequence(path, records: Sequence[FlightRecord]) -> Path:
    path = Path(path)
    (path / "frames").mkdir(parents=True, exist_ok=True)
    with open(path / "index.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(COLUMNS)
        for k, r in enumerate(records):
            rel = f"frames/{k:06d}.pgm"
            Image.fromarray(np.asarray(r.image, dtype=np.uint8), mode="L").save(path / rel, format="PPM")
            w.writerow([repr(float(r.timestamp)), rel, *format_pose_fields(r.drone), *format_pose_fields(r.subject), r.subject_id])
    return path


def _read_pgm(path: Path, row: int) -> np.ndarray:
    if not path.is_file():
        raise IngestionError(f"missing image {path}", row)
    try:
        with Image.open(path) as im:
            if im.mode != "L":
                raise IngestionError(f"{path} is not 8-bit grayscale (mode {im.mode})", row)
            return np.array(im, dtype=np.uint8)
    except IngestionError:
        raise
    except Exception as exc:  # PIL raises a zoo of types on corrupt files
        raise IngestionError(f"unreadable image {path}: {exc}", row) from None


def load_sequence(path) -> list[FlightRecord]:
    """Load and validate a sequence directory; raises :class:`IngestionError`."""
    path = Path(path)
    index = path / "index.csv"
    if not index.is_file():
        raise IngestionError(f"no index.csv in {path}")
    records: list[FlightRecord] = []
    with open(index, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            return []
        if tuple(h.strip() for h in header) != COLUMNS:
            raise IngestionError(f"unexpected header {header}", 1)
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(COLUMNS):
                raise IngestionError(f"expected {len(COLUMNS)} columns, got {len(row)}", lineno)
            try:
                vals = [float(v) for v in (row[0], *row[2:10])]
            except ValueError as exc:
                raise IngestionError(f"malformed number: {exc}", lineno) from None
            if not all(math.isfinite(v) for v in vals):
                raise IngestionError("non-finite value", lineno)
            ts = vals[0]
            if records and ts <= records[-1].timestamp:
                raise IngestionError(f"timestamp {ts} not after {records[-1].timestamp}", lineno)
            image = _read_pgm(path / row[1], lineno)
            records.append(
                FlightRecord(
                    ts,
                    image,
                    Pose4(*vals[1:5]),
                    Pose4(*vals[5:9]),
                    row[10],
                    image_path=row[1],
                )
            )
    return records


def images_array(records: Sequence[FlightRecord]) -> np.ndarray:
    """Stack record images into ``(n, 1, h, w)`` float32 in [0, 1]."""
    if not records:
        return np.zeros((0, 1, 0, 0), dtype=np.float32)
    return (np.stack([r.image for r in records])[:, None].astype(np.float32) / 255.0)


def relative_array(records: Sequence[FlightRecord]) -> np.ndarray:
    return np.array([r.relative.as_array() for r in records]).reshape(-1, 4)
