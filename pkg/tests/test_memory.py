import itertools
from fractions import Fraction

import numpy as np
import pytest
from scipy.stats import chisquare

from ocimix import nn
from ocimix.memory import ReplayBuffer, mir_retrieve, random_retrieve, reservoir_update
from ocimix.stream import Example, StreamBatch


def items(n, label=0, dim=2):
    return [Example(np.full(dim, i / max(n, 1)), label, i) for i in range(n)]


class ScriptedRng:
    """Returns pre-chosen values from ``integers`` so every branch can be walked."""

    def __init__(self, values):
        self.values = list(values)

    def integers(self, low, high):
        if np.ndim(high):
            out = np.array(self.values[:len(high)])
            del self.values[:len(high)]
            return out
        return self.values.pop(0)


def test_first_items_fill_the_buffer():
    buf = ReplayBuffer(2)
    for e in items(2):
        buf.add(e, np.random.default_rng(0))
    assert [e.uid for e in buf.items] == [0, 1]


@pytest.mark.parametrize("vectorised", [False, True])
def test_inclusion_probability_by_enumeration(vectorised):
    # M=2, n=4: item 2 draws j in {0,1,2}, item 3 draws j in {0,...,3}
    stream = items(4)
    counts = {e.uid: Fraction(0) for e in stream}
    paths = list(itertools.product(range(3), range(4)))
    for path in paths:
        buf = ReplayBuffer(2)
        rng = ScriptedRng(path)
        if vectorised:
            buf.extend(stream, rng)
        else:
            for e in stream:
                reservoir_update(buf, e, rng)
        for e in buf.items:
            counts[e.uid] += Fraction(1, len(paths))
    assert all(p == Fraction(1, 2) for p in counts.values()), counts


def test_inclusion_chi_square_at_scale():
    M, n, runs, bins = 100, 1000, 100, 20
    rng = np.random.default_rng(12345)
    hits = np.zeros(bins)
    stream = items(n)
    for r in range(runs):
        buf = ReplayBuffer(M)
        for start in range(0, n, 10):
            buf.extend(stream[start:start + 10], rng)
        assert len(buf) == M and buf.seen_count == n
        np.add.at(hits, [e.uid * bins // n for e in buf.items], 1)
    expected = np.full(bins, runs * M / bins)
    assert chisquare(hits, expected).pvalue > 0.01


def test_single_adds_match_inclusion_rate():
    M, n, runs = 5, 50, 400
    rng = np.random.default_rng(2)
    hits = np.zeros(n)
    for _ in range(runs):
        buf = ReplayBuffer(M)
        for e in items(n):
            buf.add(e, rng)
        hits[[e.uid for e in buf.items]] += 1
    assert chisquare(hits.reshape(10, 5).sum(1), np.full(10, runs * M / 10)).pvalue > 0.01


def test_buffer_never_exceeds_capacity_and_freezes():
    buf = ReplayBuffer(3)
    rng = np.random.default_rng(0)
    for start in range(0, 30, 7):
        buf.extend(items(30)[start:start + 7], rng)
        assert len(buf) == min(buf.seen_count, 3)
    buf.frozen = True
    before = list(buf.items)
    buf.extend(items(5), rng)
    buf.add(items(1)[0], rng)
    assert buf.items == before and buf.seen_count == 30
    with pytest.raises(ValueError):
        ReplayBuffer(0)


def test_random_retrieve_edge_cases():
    buf = ReplayBuffer(10)
    rng = np.random.default_rng(0)
    assert random_retrieve(buf, 4, rng) == []
    buf.extend(items(3), rng)
    assert sorted(e.uid for e in random_retrieve(buf, 5, rng)) == [0, 1, 2]
    assert random_retrieve(buf, 0, rng) == []


def test_random_retrieve_uniform():
    buf = ReplayBuffer(20)
    rng = np.random.default_rng(1)
    buf.extend(items(20), rng)
    draws, k = 5000, 4
    freq = np.zeros(20)
    for _ in range(draws):
        picked = [e.uid for e in random_retrieve(buf, k, rng)]
        assert len(set(picked)) == k
        freq[picked] += 1
    p = k / 20
    sigma = np.sqrt(draws * p * (1 - p))
    assert np.abs(freq - draws * p).max() < 3 * sigma + 1


def test_export_histogram(tmp_path):
    buf = ReplayBuffer(10)
    buf.extend(items(3, label=1) + items(2, label=4), np.random.default_rng(0))
    path = tmp_path / "h.csv"
    buf.export_csv(path, {1: 0, 4: 2})
    assert path.read_text().splitlines() == ["task_id,label,count", "0,1,3", "2,4,2"]


def toy_setup():
    rng = np.random.default_rng(3)
    model = nn.Model((), 0.1 * rng.standard_normal((2, 2)))
    mem = ([Example(np.array([1.0, 0.2 * i]), 0, i) for i in range(4)]
           + [Example(np.array([0.2 * i, 1.0]), 1, 4 + i) for i in range(4)])
    buf = ReplayBuffer(8)
    buf.extend(mem, rng)
    batch = StreamBatch(tuple(Example(np.array([1.0, 0.1]), 0, 100 + i) for i in range(3)), 1, 0)
    return model, buf, batch


def test_mir_prefers_classes_absent_from_the_batch():
    model, buf, batch = toy_setup()
    before = [p.copy() for p in model.parameters()]
    picked = mir_retrieve(buf, 3, 8, model, batch, 0.5, np.random.default_rng(0))
    # oracle: full loss before/after a manual virtual step, rank by increase
    y = nn.one_hot(batch.labels, 2)
    virtual = nn.sgd_step(model, nn.backward(model, batch.features, y), 0.5)
    x = np.stack([e.features for e in buf.items])
    lab = nn.one_hot([e.label for e in buf.items], 2)
    inc = (nn.per_sample_ce(nn.forward(virtual, x)[1], lab)
           - nn.per_sample_ce(nn.forward(model, x)[1], lab))
    expected = [buf.items[i].uid for i in np.argsort(-inc, kind="stable")[:3]]
    assert [e.uid for e in picked] == expected
    assert all(e.label == 1 for e in picked)
    for a, b in zip(before, model.parameters()):
        assert a.tobytes() == b.tobytes()


def test_mir_zero_lr_ties_break_by_buffer_index():
    model, buf, batch = toy_setup()
    picked = mir_retrieve(buf, 3, 8, model, batch, 0.0, np.random.default_rng(5))
    assert [e.uid for e in picked] == [0, 1, 2]


def test_mir_with_full_pool_matches_uniform_draw():
    model, buf, batch = toy_setup()
    a = mir_retrieve(buf, 4, 4, model, batch, 0.5, np.random.default_rng(9))
    b = random_retrieve(buf, 4, np.random.default_rng(9))
    assert sorted(e.uid for e in a) == sorted(e.uid for e in b)


def test_mir_empty_batch_falls_back_and_validates():
    model, buf, _ = toy_setup()
    empty = StreamBatch((), 0, 0)
    a = mir_retrieve(buf, 3, 6, model, empty, 0.5, np.random.default_rng(1))
    b = random_retrieve(buf, 3, np.random.default_rng(1))
    assert [e.uid for e in a] == [e.uid for e in b]
    with pytest.raises(ValueError):
        mir_retrieve(buf, 5, 4, model, empty, 0.5, np.random.default_rng(1))
