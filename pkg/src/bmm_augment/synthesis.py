"""Bootstrap pair-averaging inside strong sub-labels, and the Case A/B/C datasets."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dataset import ImageSet, LabelSet
from .errors import LengthMismatch, MissingComponent, TooFewMembers


@dataclass(frozen=True)
class Provenance:
    sub_label_id: int
    parent_a: int
    parent_b: int
    seed: int


@dataclass(frozen=True, eq=False)
class SyntheticBatch:
    rows: np.ndarray  # (M, D) float64, unrounded parent means
    labels: np.ndarray  # (M,)
    provenance: tuple
    width: int = 28
    height: int = 28

    def __len__(self):
        return self.rows.shape[0]

    def rounded(self) -> ImageSet:
        # means of two integers are k or k + 0.5; half-up keeps it exact
        return ImageSet(np.floor(self.rows + 0.5).astype(np.uint8), self.width, self.height)

    def label_set(self) -> LabelSet:
        return LabelSet(self.labels)


@dataclass(frozen=True)
class CaseDataset:
    case_id: str
    images: ImageSet
    labels: LabelSet
    n_real: int
    n_synthetic: int

    @property
    def note(self) -> str:
        return f"{self.n_real} real + {self.n_synthetic} synthetic"


def majority_members(assignment, labels, component_id: int, label: int) -> np.ndarray:
    assignment = np.asarray(assignment)
    labels = np.asarray(getattr(labels, "values", labels))
    return np.flatnonzero((assignment == component_id) & (labels == label))


def bootstrap_synthesize(train_gray: ImageSet, train_labels: LabelSet, assignment, strong,
                         n_per_sublabel: int = 100, seed: int = 0) -> SyntheticBatch:
    """Draw ``n_per_sublabel`` synthetic digits from each strong sub-label.

    Each draw picks two distinct members that carry the sub-label's majority
    label and averages their grayscale pixels. Members are reused freely
    across draws. One RNG stream is consumed sub-label by sub-label in the
    order of ``strong``.
    """
    assignment = np.asarray(assignment)
    if assignment.shape[0] != train_gray.n or train_labels.n != train_gray.n:
        raise LengthMismatch("assignment length must match the image and label counts")
    pools = []
    for entry in strong:
        members = majority_members(assignment, train_labels, entry.component_id,
                                   entry.majority_label)
        if members.size < 2:
            raise TooFewMembers(
                f"sub-label {entry.component_id} has {members.size} members "
                f"with label {entry.majority_label}"
            )
        pools.append((entry, members))

    rng = np.random.default_rng(seed)
    pixels = train_gray.rows.astype(np.float64)
    rows, labels, provenance = [], [], []
    for entry, members in pools:
        for _ in range(n_per_sublabel):
            a, b = rng.choice(members, size=2, replace=False)
            rows.append((pixels[a] + pixels[b]) / 2.0)
            labels.append(entry.majority_label)
            provenance.append(Provenance(entry.component_id, int(a), int(b), seed))

    d = train_gray.d
    return SyntheticBatch(
        np.array(rows, dtype=np.float64).reshape(-1, d),
        np.array(labels, dtype=np.uint8),
        tuple(provenance),
        train_gray.width,
        train_gray.height,
    )


def empty_batch(width: int = 28, height: int = 28) -> SyntheticBatch:
    return SyntheticBatch(np.zeros((0, width * height)), np.zeros(0, dtype=np.uint8), (),
                          width, height)


def assemble_case(case_id: str, real_train, batch: SyntheticBatch | None = None,
                  extra_real=None) -> CaseDataset:
    """Build Case A (real only), B (real + synthetic) or C (real + extra real)."""
    images, labels = real_train
    if case_id == "A":
        return CaseDataset("A", images, labels, images.n, 0)
    if case_id == "B":
        if batch is None:
            raise MissingComponent("case B needs a synthetic batch")
        synth = batch.rounded()
        return CaseDataset(
            "B",
            ImageSet(np.vstack([images.rows, synth.rows]), images.width, images.height),
            LabelSet(np.concatenate([labels.values, batch.labels])),
            images.n,
            len(batch),
        )
    if case_id == "C":
        if extra_real is None:
            raise MissingComponent("case C needs extra real digits")
        extra_images, extra_labels = extra_real
        if batch is not None and extra_images.n != len(batch):
            raise LengthMismatch(
                f"case C extra block has {extra_images.n} digits, batch has {len(batch)}"
            )
        return CaseDataset(
            "C",
            ImageSet(np.vstack([images.rows, extra_images.rows]), images.width, images.height),
            LabelSet(np.concatenate([labels.values, extra_labels.values])),
            images.n + extra_images.n,
            0,
        )
    raise ValueError(f"unknown case {case_id!r}")
