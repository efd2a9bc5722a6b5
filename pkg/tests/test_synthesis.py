import numpy as np
import pytest

from bmm_augment.dataset import ImageSet, LabelSet
from bmm_augment.errors import MissingComponent, TooFewMembers
from bmm_augment.sublabels import StrongRule, StrongSubLabel, StrongSubLabelSet
from bmm_augment.synthesis import assemble_case, bootstrap_synthesize, empty_batch


def _strong(*entries):
    return StrongSubLabelSet(tuple(StrongSubLabel(c, lab, 0, 1.0) for c, lab in entries),
                             StrongRule())


def _data(n=60, seed=0):
    rng = np.random.default_rng(seed)
    images = ImageSet(rng.integers(0, 256, size=(n, 784)))
    labels = LabelSet(rng.integers(0, 10, size=n))
    return images, labels


def test_identical_parents_reproduce_parent():
    row = np.random.default_rng(1).integers(0, 256, size=784)
    images = ImageSet(np.tile(row, (3, 1)))
    labels = LabelSet([8, 8, 8])
    batch = bootstrap_synthesize(images, labels, np.zeros(3, int), _strong((0, 8)), 5, seed=2)
    assert np.array_equal(batch.rows, np.tile(row.astype(float), (5, 1)))


def test_mean_of_black_and_white():
    images = ImageSet(np.vstack([np.zeros(784), np.full(784, 255)]))
    batch = bootstrap_synthesize(images, LabelSet([8, 8]), np.zeros(2, int), _strong((0, 8)), 1)
    assert np.all(batch.rows == 127.5)
    assert np.all(batch.rounded().rows == 128)


def test_contracts_on_random_data():
    images, labels = _data(400)
    assignment = np.random.default_rng(5).integers(0, 7, size=400)
    strong = _strong(*[(k, int(np.bincount(labels.values[assignment == k]).argmax()))
                       for k in range(7)])
    batch = bootstrap_synthesize(images, labels, assignment, strong, 100, seed=9)
    assert len(batch) == 700
    gray = images.rows.astype(float)
    for row, label, prov in zip(batch.rows, batch.labels, batch.provenance):
        a, b = gray[prov.parent_a], gray[prov.parent_b]
        assert prov.parent_a != prov.parent_b
        assert np.all(np.minimum(a, b) <= row) and np.all(row <= np.maximum(a, b))
        assert assignment[prov.parent_a] == assignment[prov.parent_b] == prov.sub_label_id
        assert labels.values[prov.parent_a] == labels.values[prov.parent_b] == label
        assert prov.seed == 9
    again = bootstrap_synthesize(images, labels, assignment, strong, 100, seed=9)
    assert again.rows.tobytes() == batch.rows.tobytes() and again.provenance == batch.provenance


def test_too_few_members():
    images, labels = _data(10)
    assignment = np.zeros(10, int)
    lab = int(labels.values[0])
    assignment[labels.values == lab] = 1
    assignment[np.flatnonzero(labels.values == lab)[1:]] = 0
    with pytest.raises(TooFewMembers):
        bootstrap_synthesize(images, labels, assignment, _strong((1, lab)), 3)


def test_assemble_cases():
    images, labels = _data(50)
    extra = _data(6, seed=3)
    batch = bootstrap_synthesize(images, labels, np.zeros(50, int),
                                 _strong((0, int(np.bincount(labels.values).argmax()))), 6)
    a = assemble_case("A", (images, labels))
    assert (a.images.n, a.n_synthetic) == (50, 0)
    b = assemble_case("B", (images, labels), batch)
    assert b.images.n == 56 and b.note == "50 real + 6 synthetic"
    assert np.array_equal(b.images.rows[50:], batch.rounded().rows)
    c = assemble_case("C", (images, labels), batch, extra)
    assert c.images.n == 56 and c.n_synthetic == 0
    with pytest.raises(MissingComponent):
        assemble_case("B", (images, labels))
    with pytest.raises(MissingComponent):
        assemble_case("C", (images, labels), batch)


def test_empty_batch_case_b_equals_a():
    images, labels = _data(10)
    b = assemble_case("B", (images, labels), empty_batch())
    assert b.images == images and b.labels == labels
