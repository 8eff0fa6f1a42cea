"""FIFO bank of target instance features plus source centers as negatives."""

from __future__ import annotations

from collections import deque
from typing import NamedTuple

import numpy as np

from .clustering import OUTLIER

SOURCE_LABEL = -2


class BankEntry(NamedTuple):
    feature: np.ndarray
    label: int
    u: float


class MemoryBank:
    """Queue of (feature, pseudo label, uncertainty) snapshots.

    Source class centers never enter the queue; they are appended to every
    anchor's negative set with u = 0.
    """

    def __init__(self, capacity: int, source_centers=None, dim: int | None = None):
        if capacity < 0:
            raise ValueError("capacity must be >= 0")
        self.capacity = int(capacity)
        if source_centers is None or np.size(source_centers) == 0:
            d = 0 if dim is None else dim
            self.source_centers = np.zeros((0, d))
        else:
            self.source_centers = np.array(source_centers, dtype=np.float64, ndmin=2)
        self._entries: deque[BankEntry] = deque()

    def __len__(self) -> int:
        return len(self._entries)

    @property
    def n_source(self) -> int:
        return len(self.source_centers)

    @property
    def entries(self) -> list[BankEntry]:
        return list(self._entries)

    def clear(self) -> None:
        self._entries.clear()

    def push_batch(self, features, pseudo_labels, uncertainties) -> "MemoryBank":
        features = np.asarray(features, dtype=np.float64)
        labels = np.asarray(pseudo_labels)
        us = np.asarray(uncertainties, dtype=np.float64)
        if not (len(features) == len(labels) == len(us)):
            raise ValueError("features, labels and uncertainties must have equal length")
        if np.any(labels == OUTLIER) or np.any(labels < 0):
            raise ValueError("outlier samples cannot enter the memory bank")
        if self.capacity == 0:
            return self
        for f, y, u in zip(features, labels, us):
            # stored copies are frozen; later edits to the caller's array do not leak in
            self._entries.append(BankEntry(f.copy(), int(y), float(u)))
            if len(self._entries) > self.capacity:
                self._entries.popleft()
        return self

    def snapshot(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Stacked ``(features, labels, u)`` of the queued entries, oldest first."""
        if not self._entries:
            d = self.source_centers.shape[1] if self.source_centers.size else 0
            return np.zeros((0, d)), np.zeros(0, dtype=np.int64), np.zeros(0)
        feats = np.stack([e.feature for e in self._entries])
        labels = np.array([e.label for e in self._entries], dtype=np.int64)
        us = np.array([e.u for e in self._entries])
        return feats, labels, us

    def partition_for_anchor(self, anchor_label: int) -> tuple[list[BankEntry], list[BankEntry]]:
        positives = [e for e in self._entries if e.label == anchor_label]
        negatives = [e for e in self._entries if e.label != anchor_label]
        negatives += [BankEntry(c.copy(), SOURCE_LABEL, 0.0) for c in self.source_centers]
        return positives, negatives


def push_batch(bank: MemoryBank, features, pseudo_labels, uncertainties) -> MemoryBank:
    return bank.push_batch(features, pseudo_labels, uncertainties)


def partition_for_anchor(bank: MemoryBank, anchor_label: int):
    return bank.partition_for_anchor(anchor_label)
