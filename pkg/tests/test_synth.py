import numpy as np
import pytest

from unrn.clustering import OUTLIER, PseudoLabeledSet
from unrn.pipeline import TrainConfig, clustering_stage, pretrain_source
from unrn.synth import (ScenarioConfig, boosted_identities, domain_transform, generate_eval_split,
                        generate_scenario, label_pseudo_correctness, read_csv, split_query_gallery,
                        write_csv)


class TestGenerate:
    def test_deterministic(self):
        a = generate_scenario(ScenarioConfig(seed=5))
        b = generate_scenario(ScenarioConfig(seed=5))
        for x, y in zip(a, b):
            assert x.x.tobytes() == y.x.tobytes()
            assert np.array_equal(x.true_ids, y.true_ids)

    def test_seed_changes_data(self):
        a, _ = generate_scenario(ScenarioConfig(seed=1))
        b, _ = generate_scenario(ScenarioConfig(seed=2))
        assert not np.allclose(a.x, b.x)

    def test_counts(self):
        src, tgt = generate_scenario(ScenarioConfig(n_target_ids=20, samples_per_id=30))
        assert len(tgt) == 600 and len(src) == 15 * 30
        assert tgt.n_ids == 20 and src.n_ids == 15
        assert len(generate_eval_split(ScenarioConfig())) == 20 * 15

    def test_zero_shift_is_exact_identity(self):
        rot, off = domain_transform(ScenarioConfig(domain_shift=0.0))
        assert np.array_equal(rot, np.eye(16)) and not off.any()

    def test_zero_shift_target_means_are_prototypes(self):
        cfg = ScenarioConfig(domain_shift=0.0, noise_boost_fraction=0.0, samples_per_id=4000,
                             n_target_ids=3, n_source_ids=3)
        _, tgt = generate_scenario(cfg)
        means = np.stack([tgt.x[tgt.true_ids == i].mean(0) for i in range(3)])
        np.testing.assert_allclose(np.linalg.norm(means[:, :8], axis=1), 1.0, atol=0.05)
        np.testing.assert_allclose(means[:, 8:], 0.0, atol=0.05)

    def test_rotation_orthogonal(self):
        rot, _ = domain_transform(ScenarioConfig(domain_shift=1.5))
        np.testing.assert_allclose(rot @ rot.T, np.eye(16), atol=1e-10)

    def test_boosted_fraction_and_nesting(self):
        small = boosted_identities(ScenarioConfig(noise_boost_fraction=0.3))
        large = boosted_identities(ScenarioConfig(noise_boost_fraction=0.6))
        assert len(small) == 6 and len(large) == 12
        assert set(small) <= set(large)

    @pytest.mark.parametrize("field, value", [
        ("n_target_ids", 0), ("intra_class_spread", 0.0), ("domain_shift", -1.0),
        ("noise_boost_fraction", 1.5), ("signal_dim", 17),
    ])
    def test_invalid(self, field, value):
        with pytest.raises(ValueError):
            generate_scenario(ScenarioConfig(**{field: value}))


class TestCorrectness:
    def test_pure_clusters(self):
        tags = label_pseudo_correctness([0, 0, 1, 1], [5, 5, 7, 7])
        assert list(tags) == ["correct"] * 4

    def test_majority(self):
        tags = label_pseudo_correctness([3, 3, 8], [0, 0, 0])
        assert list(tags) == ["correct", "correct", "wrong"]

    def test_tie_to_lowest_identity(self):
        tags = label_pseudo_correctness([4, 2], [0, 0])
        assert list(tags) == ["wrong", "correct"]

    def test_all_outliers(self):
        pseudo = PseudoLabeledSet(np.arange(3), np.full(3, OUTLIER), 0)
        tags = label_pseudo_correctness([0, 1, 2], pseudo)
        assert set(tags) == {"outlier"}


def test_query_gallery_split():
    _, tgt = generate_scenario(ScenarioConfig(n_target_ids=3, samples_per_id=7))
    q, g = split_query_gallery(tgt)
    assert len(q) == 9 and len(g) == 12
    for i in range(3):
        assert q.sample_ids[q.true_ids == i].max() < g.sample_ids[g.true_ids == i].min()


def test_csv_roundtrip(tmp_path):
    src, tgt = generate_scenario(ScenarioConfig(n_source_ids=2, n_target_ids=2, samples_per_id=3))
    path = tmp_path / "data.csv"
    write_csv(path, src, tgt)
    header = path.read_text().splitlines()[0]
    assert header == "sample_id,domain,true_id," + ",".join(f"dim_{j}" for j in range(16))
    back = read_csv(path)
    for ds in (src, tgt):
        np.testing.assert_array_equal(back[ds.domain].x, ds.x)
        np.testing.assert_array_equal(back[ds.domain].true_ids, ds.true_ids)


def test_wrong_rate_grows_with_boost():
    """Mean wrong-label rate over 10 seeds from pretrained features and the default clustering."""
    fractions = (0.0, 0.5, 1.0)
    rates = np.zeros((10, len(fractions)))
    for seed in range(10):
        cfg = TrainConfig(seed=seed)
        src, _ = generate_scenario(cfg.scenario())
        student, centers = pretrain_source(cfg, src)
        for j, frac in enumerate(fractions):
            c = cfg.with_overrides(noise_boost_fraction=frac)
            _, tgt = generate_scenario(c.scenario())
            pseudo, _ = clustering_stage(student, tgt, c, centers)
            tags = label_pseudo_correctness(tgt, pseudo)
            rates[seed, j] = np.mean(tags == "wrong") / np.mean(tags != "outlier")
    mean = rates.mean(axis=0)
    assert np.all(np.diff(mean) >= 0), mean
