"""Synthetic source/target domains with a controllable domain shift.

Randomness comes from numpy's Philox-4x64 counter-based generator. Every
(seed, stream, index) triple gets its own Philox key through
``SeedSequence``, so each identity's samples can be drawn independently and
the output never depends on generation order.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.linalg import expm

from .clustering import OUTLIER, PseudoLabeledSet

SOURCE, TARGET = "source", "target"
CORRECT, WRONG, OUTLIER_TAG = "correct", "wrong", "outlier"

_STREAMS = {"src_proto": 1, "tgt_proto": 2, "src_sample": 3, "tgt_sample": 4,
            "shift": 5, "boost": 6, "tgt_test": 7}


def philox(seed: int, stream: str, index: int = 0) -> np.random.Generator:
    ss = np.random.SeedSequence([int(seed), _STREAMS[stream], int(index)])
    return np.random.Generator(np.random.Philox(ss))


@dataclass(frozen=True)
class ScenarioConfig:
    n_source_ids: int = 15
    n_target_ids: int = 20
    samples_per_id: int = 30
    input_dim: int = 16
    intra_class_spread: float = 0.1
    domain_shift: float = 1.5
    noise_boost_fraction: float = 0.3
    seed: int = 0
    test_samples_per_id: int = 15
    prototype_max_cos: float = 0.5
    signal_dim: int = 8
    nuisance_spread: float = 0.4
    offset_ratio: float = 0.25

    def validate(self) -> None:
        counts = (self.n_source_ids, self.n_target_ids, self.samples_per_id, self.input_dim)
        if min(counts) < 1 or self.test_samples_per_id < 0:
            raise ValueError("scenario counts must be >= 1")
        if not self.intra_class_spread > 0:
            raise ValueError("intra_class_spread must be positive")
        if self.domain_shift < 0:
            raise ValueError("domain_shift must be nonnegative")
        if not 1 <= self.signal_dim <= self.input_dim:
            raise ValueError("signal_dim must lie in [1, input_dim]")
        if self.nuisance_spread < 0 or self.offset_ratio < 0:
            raise ValueError("nuisance_spread and offset_ratio must be nonnegative")
        if not -1.0 < self.prototype_max_cos <= 1.0:
            raise ValueError("prototype_max_cos must lie in (-1, 1]")
        if not 0.0 <= self.noise_boost_fraction <= 1.0:
            raise ValueError("noise_boost_fraction must lie in [0, 1]")


@dataclass
class Dataset:
    x: np.ndarray
    true_ids: np.ndarray
    domain: str
    sample_ids: np.ndarray

    def __len__(self) -> int:
        return len(self.x)

    @property
    def n_ids(self) -> int:
        return int(len(np.unique(self.true_ids)))

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.x[idx], self.true_ids[idx], self.domain, self.sample_ids[idx])


def _prototypes(seed: int, stream: str, n: int, dim: int, max_cos: float = 1.0) -> np.ndarray:
    """Unit prototypes; identity i redraws until its cosine to earlier ones is below ``max_cos``."""
    protos = np.empty((n, dim))
    for i in range(n):
        rng = philox(seed, stream, i)
        for _ in range(10_000):
            v = rng.standard_normal(dim)
            v /= np.linalg.norm(v)
            if i == 0 or np.max(protos[:i] @ v) < max_cos:
                break
        protos[i] = v
    return protos


def domain_transform(config: ScenarioConfig) -> tuple[np.ndarray, np.ndarray]:
    """Target-domain rotation and offset.

    The rotation is ``expm(shift * K)`` for a random skew-symmetric K of unit
    spectral norm, so ``shift`` is the largest rotation angle in radians. The
    offset is ``shift * offset_ratio * c`` for a random unit vector c. Both
    reduce exactly to identity and zero at shift 0.
    """
    d = config.input_dim
    rng = philox(config.seed, "shift")
    a = rng.standard_normal((d, d))
    k = a - a.T
    k /= max(np.linalg.norm(k, 2), 1e-12)
    c = rng.standard_normal(d)
    c /= np.linalg.norm(c)
    if config.domain_shift == 0:
        return np.eye(d), np.zeros(d)
    return expm(config.domain_shift * k), config.domain_shift * config.offset_ratio * c


def boosted_identities(config: ScenarioConfig) -> np.ndarray:
    """Target identities given 3x spread; nested as the fraction grows."""
    order = philox(config.seed, "boost").permutation(config.n_target_ids)
    n_boost = int(round(config.noise_boost_fraction * config.n_target_ids))
    return np.sort(order[:n_boost])


def _identity_protos(config: ScenarioConfig, stream: str, n: int) -> np.ndarray:
    """Unit prototypes living in the first ``signal_dim`` coordinates."""
    p = _prototypes(config.seed, stream, n, config.signal_dim, config.prototype_max_cos)
    return np.hstack([p, np.zeros((n, config.input_dim - config.signal_dim))])


def _draw(config: ScenarioConfig, protos, spreads, per_id, stream, transform=None):
    """Samples are prototype + identity noise (signal coords) + nuisance noise (the rest)."""
    k = config.signal_dim
    xs, ids = [], []
    for i, (p, s) in enumerate(zip(protos, spreads)):
        noise = philox(config.seed, stream, i).standard_normal((per_id, config.input_dim))
        scale = np.concatenate([np.full(k, s), np.full(config.input_dim - k, config.nuisance_spread)])
        x = p + noise * scale
        if transform is not None:
            rot, off = transform
            x = x @ rot.T + off
        xs.append(x)
        ids.append(np.full(per_id, i, dtype=np.int64))
    return np.vstack(xs), np.concatenate(ids)


def _target_spreads(config: ScenarioConfig) -> np.ndarray:
    spread = np.full(config.n_target_ids, config.intra_class_spread)
    spread[boosted_identities(config)] *= 3.0
    return spread


def generate_scenario(config: ScenarioConfig) -> tuple[Dataset, Dataset]:
    """Labeled source domain and shifted target domain, deterministic per seed."""
    config.validate()
    src_protos = _identity_protos(config, "src_proto", config.n_source_ids)
    tgt_protos = _identity_protos(config, "tgt_proto", config.n_target_ids)
    src_spread = np.full(config.n_source_ids, config.intra_class_spread)

    xs, ys = _draw(config, src_protos, src_spread, config.samples_per_id, "src_sample")
    xt, yt = _draw(config, tgt_protos, _target_spreads(config), config.samples_per_id, "tgt_sample",
                   domain_transform(config))
    source = Dataset(xs, ys, SOURCE, np.arange(len(xs)))
    target = Dataset(xt, yt, TARGET, np.arange(len(xt)))
    return source, target


def generate_eval_split(config: ScenarioConfig) -> Dataset:
    """Held-out target draws (same identities, fresh samples) for retrieval evaluation."""
    config.validate()
    tgt_protos = _identity_protos(config, "tgt_proto", config.n_target_ids)
    x, y = _draw(config, tgt_protos, _target_spreads(config), config.test_samples_per_id, "tgt_test",
                 domain_transform(config))
    return Dataset(x, y, TARGET, np.arange(len(x)))


def split_query_gallery(data: Dataset) -> tuple[Dataset, Dataset]:
    """Per identity, the lowest third of sample ids (rounded up) become queries."""
    q_idx, g_idx = [], []
    for ident in np.unique(data.true_ids):
        members = np.flatnonzero(data.true_ids == ident)
        members = members[np.argsort(data.sample_ids[members], kind="stable")]
        n_q = -(-len(members) // 3)
        q_idx.extend(members[:n_q])
        g_idx.extend(members[n_q:])
    return data.subset(np.array(q_idx, dtype=np.int64)), data.subset(np.array(g_idx, dtype=np.int64))


def label_pseudo_correctness(true_ids, pseudo: PseudoLabeledSet | np.ndarray) -> np.ndarray:
    """Tag each sample ``correct``, ``wrong`` or ``outlier``.

    A clustered sample is correct when its true identity is the majority
    identity of its cluster (ties go to the lowest identity).
    """
    true_ids = np.asarray(true_ids.true_ids if isinstance(true_ids, Dataset) else true_ids)
    labels = np.asarray(pseudo.labels if isinstance(pseudo, PseudoLabeledSet) else pseudo)
    if len(labels) != len(true_ids):
        raise ValueError("pseudo labels must cover every target sample")
    tags = np.full(len(labels), OUTLIER_TAG, dtype=object)
    for k in np.unique(labels[labels != OUTLIER]):
        members = np.flatnonzero(labels == k)
        ids, counts = np.unique(true_ids[members], return_counts=True)
        majority = ids[np.argmax(counts)]  # np.unique sorts, argmax takes the first max
        tags[members] = np.where(true_ids[members] == majority, CORRECT, WRONG)
    return tags.astype(str)


def write_csv(path, *datasets: Dataset) -> None:
    """``sample_id,domain,true_id,dim_0..dim_{D-1}``, one row per sample."""
    dim = datasets[0].x.shape[1]
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sample_id", "domain", "true_id"] + [f"dim_{j}" for j in range(dim)])
        for ds in datasets:
            for sid, y, x in zip(ds.sample_ids, ds.true_ids, ds.x):
                w.writerow([int(sid), ds.domain, int(y)] + [repr(float(v)) for v in x])


def read_csv(path) -> dict[str, Dataset]:
    rows: dict[str, list] = {}
    with open(Path(path), newline="") as fh:
        for rec in csv.DictReader(fh):
            rows.setdefault(rec["domain"], []).append(rec)
    out = {}
    for domain, recs in rows.items():
        dims = sorted((k for k in recs[0] if k.startswith("dim_")), key=lambda k: int(k[4:]))
        x = np.array([[float(r[k]) for k in dims] for r in recs])
        out[domain] = Dataset(x, np.array([int(r["true_id"]) for r in recs]), domain,
                              np.array([int(r["sample_id"]) for r in recs]))
    return out
