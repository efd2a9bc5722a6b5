"""Which mixture components are clean enough to count as sub-labels of a digit."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import BadComponentId, IoFailure, LengthMismatch

N_CLASSES = 10


@dataclass(frozen=True)
class SubLabelReport:
    component_id: int
    size: int
    class_counts: tuple  # length 10
    purity: float | None  # None for an empty component
    majority_label: int | None


@dataclass(frozen=True)
class StrongRule:
    min_purity: float = 0.85
    min_size: int = 30
    target_label: int | None = None

    def admits(self, report: SubLabelReport) -> bool:
        if report.size == 0 or report.purity is None:
            return False
        if report.purity < self.min_purity or report.size < self.min_size:
            return False
        return self.target_label is None or report.majority_label == self.target_label


@dataclass(frozen=True)
class StrongSubLabel:
    component_id: int
    majority_label: int
    size: int
    purity: float


@dataclass(frozen=True)
class StrongSubLabelSet:
    entries: tuple
    rule: StrongRule

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)


def hard_assign(gamma) -> np.ndarray:
    # np.argmax returns the first maximal index, which is the lowest-index tie rule
    return np.argmax(np.asarray(gamma), axis=1)


def purity_report(assignment, labels, K: int) -> list[SubLabelReport]:
    """One report per component id in ``range(K)``.

    Empty components are kept (size 0) with purity and majority left as None.
    """
    assignment = np.asarray(assignment, dtype=np.intp)
    labels = np.asarray(getattr(labels, "values", labels), dtype=np.intp)
    if assignment.shape != labels.shape:
        raise LengthMismatch(f"{assignment.size} assignments vs {labels.size} labels")
    if assignment.size and (assignment.min() < 0 or assignment.max() >= K):
        raise BadComponentId(f"assignment outside [0, {K})")
    counts = np.zeros((K, N_CLASSES), dtype=np.int64)
    np.add.at(counts, (assignment, labels), 1)

    reports = []
    for k in range(K):
        row = counts[k]
        size = int(row.sum())
        if size == 0:
            reports.append(SubLabelReport(k, 0, tuple(int(c) for c in row), None, None))
            continue
        majority = int(np.argmax(row))
        reports.append(
            SubLabelReport(k, size, tuple(int(c) for c in row), row[majority] / size, majority)
        )
    return reports


def strong_sublabels(reports, rule: StrongRule | None = None) -> StrongSubLabelSet:
    rule = rule or StrongRule()
    picked = [r for r in reports if rule.admits(r)]
    picked.sort(key=lambda r: (-r.purity, -r.size, r.component_id))
    entries = tuple(
        StrongSubLabel(r.component_id, r.majority_label, r.size, r.purity) for r in picked
    )
    return StrongSubLabelSet(entries, rule)


def centroid_pixels(model, component_id: int) -> np.ndarray:
    if not 0 <= component_id < model.K:
        raise BadComponentId(f"component {component_id} outside [0, {model.K})")
    # round half up: floor(255 p + 0.5)
    return np.floor(255.0 * model.p[component_id] + 0.5).astype(np.uint8)


def export_centroid(model, component_id: int, path, width: int = 28, height: int = 28) -> Path:
    """Write component ``component_id`` as a binary (P5) PGM, pixel = round(255 p)."""
    pixels = centroid_pixels(model, component_id)
    if pixels.size != width * height:
        raise ValueError(f"component has {pixels.size} pixels, not {width}x{height}")
    path = Path(path)
    try:
        path.write_bytes(f"P5\n{width} {height}\n255\n".encode("ascii") + pixels.tobytes())
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc
    return path


def read_pgm(path) -> np.ndarray:
    """Read a binary PGM written by :func:`export_centroid` into a (height, width) array."""
    data = Path(path).read_bytes()
    fields, pos = [], 0
    while len(fields) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        end = pos
        while not data[end:end + 1].isspace():
            end += 1
        fields.append(data[pos:end])
        pos = end
    if fields[0] != b"P5":
        raise ValueError("not a binary PGM")
    width, height, maxval = (int(f) for f in fields[1:])
    if maxval != 255:
        raise ValueError("only 8-bit PGM is supported")
    pos += 1  # single whitespace byte after maxval
    return np.frombuffer(data, dtype=np.uint8, count=width * height, offset=pos).reshape(height, width)
