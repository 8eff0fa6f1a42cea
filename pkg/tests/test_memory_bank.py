import numpy as np
import pytest

from unrn.memory_bank import SOURCE_LABEL, MemoryBank, partition_for_anchor, push_batch


def _push(bank, labels, start=0.0):
    feats = np.arange(len(labels), dtype=float)[:, None] + start
    return push_batch(bank, feats, labels, np.zeros(len(labels)))


class TestPush:
    def test_fifo_eviction(self):
        bank = MemoryBank(4)
        _push(bank, [0, 1, 2, 3, 4, 5])
        assert [e.feature[0] for e in bank.entries] == [2.0, 3.0, 4.0, 5.0]

    def test_empty_batch(self):
        bank = _push(MemoryBank(4), [0, 1])
        before = bank.snapshot()
        push_batch(bank, np.zeros((0, 1)), [], [])
        after = bank.snapshot()
        for a, b in zip(before, after):
            np.testing.assert_array_equal(a, b)

    def test_outlier_rejected(self):
        with pytest.raises(ValueError, match="outlier"):
            _push(MemoryBank(4), [0, -1])

    def test_zero_capacity(self):
        assert len(_push(MemoryBank(0), [0, 1, 2])) == 0

    def test_snapshot_is_frozen(self):
        feats = np.ones((2, 3))
        bank = push_batch(MemoryBank(4), feats, [0, 1], [0.1, 0.2])
        feats[:] = 7.0
        assert np.all(bank.snapshot()[0] == 1.0)

    @pytest.mark.parametrize("capacity", [0, 16, 64, 256])
    def test_never_exceeds_capacity(self, rng, capacity):
        bank = MemoryBank(capacity)
        for _ in range(30):
            n = int(rng.integers(0, 20))
            _push(bank, rng.integers(0, 5, n))
            assert len(bank) <= capacity


class TestPartition:
    def test_empty_bank(self):
        centers = np.eye(3)
        pos, neg = partition_for_anchor(MemoryBank(4, centers), 0)
        assert pos == [] and len(neg) == 3
        assert all(e.label == SOURCE_LABEL and e.u == 0.0 for e in neg)

    def test_counts(self):
        bank = _push(MemoryBank(10, np.eye(5)), [1, 1, 2])
        pos, neg = bank.partition_for_anchor(1)
        assert len(pos) == 2 and len(neg) == 1 + 5

    def test_all_positive(self):
        bank = _push(MemoryBank(10), [3, 3, 3])
        pos, neg = bank.partition_for_anchor(3)
        assert len(pos) == 3 and neg == []

    def test_stable(self):
        bank = _push(MemoryBank(10, np.eye(2)), [0, 1, 0, 2])
        a, b = bank.partition_for_anchor(0), bank.partition_for_anchor(0)
        for x, y in zip(a[0] + a[1], b[0] + b[1]):
            np.testing.assert_array_equal(x.feature, y.feature)
            assert x.label == y.label


def test_randomized_laws(rng):
    """FIFO order against a plain list model and the count identity."""
    for _ in range(1000):
        cap = int(rng.integers(0, 12))
        c_s = int(rng.integers(0, 4))
        bank = MemoryBank(cap, np.eye(c_s, 3) if c_s else None, dim=3)
        model = []
        counter = 0
        for _ in range(int(rng.integers(1, 6))):
            n = int(rng.integers(0, 6))
            labels = rng.integers(0, 4, n)
            feats = np.column_stack([counter + np.arange(n), np.zeros((n, 2))])
            counter += n
            bank.push_batch(feats, labels, rng.uniform(0, 1, n))
            model = (model + list(zip(feats[:, 0], labels)))[-cap:] if cap else []
            assert [(e.feature[0], e.label) for e in bank.entries] == model
            anchor = int(rng.integers(0, 4))
            pos, neg = bank.partition_for_anchor(anchor)
            assert len(pos) + len(neg) == len(bank) + c_s
            assert all(e.label == anchor for e in pos)
