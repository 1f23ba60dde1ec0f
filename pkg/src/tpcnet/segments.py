"""Temporal segments, inclusive-frame IoU and the shared line format.

Annotation, proposal and detection files share one CSV layout:
``video_id,start_frame,end_frame,class_id[,confidence]`` with inclusive frame
indices.  Blank lines and lines starting with ``#`` are ignored.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, List


@dataclass(frozen=True, order=True)
class Segment:
    video_id: str
    start: int
    end: int  # inclusive
    class_id: int = 0
    confidence: float = 1.0

    def __post_init__(self):
        if not 0 <= self.start <= self.end:
            raise ValueError(f"invalid segment bounds [{self.start}, {self.end}] in {self.video_id}")

    @property
    def length(self) -> int:
        return self.end - self.start + 1


def iou(a: Segment, b: Segment) -> float:
    """|A n B| / |A u B| over inclusive frame sets."""
    inter = min(a.end, b.end) - max(a.start, b.start) + 1
    if inter <= 0:
        return 0.0
    return inter / (a.length + b.length - inter)


def format_segment(seg: Segment, with_confidence: bool = True) -> str:
    fields = [seg.video_id, str(seg.start), str(seg.end), str(seg.class_id)]
    if with_confidence:
        fields.append(repr(float(seg.confidence)))
    return ",".join(fields)


def parse_segment(line: str) -> Segment:
    fields = [f.strip() for f in line.split(",")]
    if len(fields) not in (4, 5):
        raise ValueError(f"expected 4 or 5 comma-separated fields, got {len(fields)}: {line!r}")
    conf = float(fields[4]) if len(fields) == 5 else 1.0
    return Segment(fields[0], int(fields[1]), int(fields[2]), int(fields[3]), conf)


def read_segments(path) -> List[Segment]:
    out = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        try:
            out.append(parse_segment(line))
        except ValueError as exc:
            raise ValueError(f"{path}:{lineno}: {exc}") from None
    return out


def write_segments(path, segments: Iterable[Segment], with_confidence: bool = True) -> None:
    text = "".join(format_segment(s, with_confidence) + "\n" for s in segments)
    Path(path).write_text(text)
