"""Segmentation scores, Frechet distance, probe and evaluation plumbing."""

import numpy as np
import pytest
import scipy.linalg

from semgan import datagen, metrics, models, trainer
from semgan.metrics import FrechetStats, frechet_distance, frechet_stats, seg_scores

import oracles


def test_seg_scores_perfect():
    pred = np.array([[0, 1], [2, 1]])
    s = seg_scores(pred, pred, 3)
    assert (s.miou, s.pixel_acc, s.class_acc) == (1.0, 1.0, 1.0)


def test_seg_scores_disjoint():
    pred = np.zeros((4, 4), dtype=int)
    true = np.ones((4, 4), dtype=int)
    s = seg_scores(pred, true, 2)
    assert s.miou == 0.0 and s.pixel_acc == 0.0


def test_seg_scores_hand_confusion():
    pred = np.array([[0, 0], [1, 1]])
    true = np.array([[0, 1], [1, 1]])
    s = seg_scores(pred, true, 2)
    np.testing.assert_allclose(s.pixel_acc, 0.75)
    np.testing.assert_allclose(s.miou, (0.5 + 2 / 3) / 2)


def test_seg_scores_label_out_of_range():
    with pytest.raises(ValueError):
        seg_scores(np.array([[5]]), np.array([[0]]), 3)


def test_seg_scores_matches_oracle_100_random():
    rng = np.random.default_rng(0)
    for _ in range(100):
        c = int(rng.integers(2, 6))
        h, w = int(rng.integers(2, 10)), int(rng.integers(2, 10))
        pred = rng.integers(0, c, size=(h, w))
        true = rng.integers(0, c, size=(h, w))
        s = seg_scores(pred, true, c)
        miou, pixel, class_acc = oracles.seg_scores_ref(pred.tolist(), true.tolist(), c)
        assert s.pixel_acc == pixel
        np.testing.assert_allclose(s.miou, miou, rtol=1e-12)
        np.testing.assert_allclose(s.class_acc, class_acc, rtol=1e-12)


def test_frechet_identical_stats_zero():
    rng = np.random.default_rng(1)
    stats = frechet_stats(rng.normal(size=(64, 5)))
    assert frechet_distance(stats, stats) <= 1e-6


def test_frechet_1d_analytic():
    a = FrechetStats(mu=np.array([0.0]), sigma=np.array([[1.0]]))
    b = FrechetStats(mu=np.array([2.0]), sigma=np.array([[1.0]]))
    np.testing.assert_allclose(frechet_distance(a, b, eps=0.0), 4.0, rtol=1e-9)
    rng = np.random.default_rng(2)
    for _ in range(100):
        m1, m2 = rng.normal(size=2)
        s1, s2 = rng.uniform(0.1, 2.0, size=2)
        fa = FrechetStats(mu=np.array([m1]), sigma=np.array([[s1**2]]))
        fb = FrechetStats(mu=np.array([m2]), sigma=np.array([[s2**2]]))
        got = frechet_distance(fa, fb, eps=0.0)
        ref = (m1 - m2) ** 2 + (s1 - s2) ** 2
        np.testing.assert_allclose(got, ref, rtol=1e-9, atol=1e-12)


def test_frechet_matches_scipy_sqrtm_oracle():
    rng = np.random.default_rng(3)
    for _ in range(20):
        d = 4
        a = rng.normal(size=(d, d))
        b = rng.normal(size=(d, d))
        sig_a = a @ a.T + 0.1 * np.eye(d)
        sig_b = b @ b.T + 0.1 * np.eye(d)
        mu_a, mu_b = rng.normal(size=d), rng.normal(size=d)
        got = frechet_distance(FrechetStats(mu_a, sig_a), FrechetStats(mu_b, sig_b), eps=0.0)
        covmean = scipy.linalg.sqrtm(sig_a @ sig_b)
        ref = float(
            (mu_a - mu_b) @ (mu_a - mu_b)
            + np.trace(sig_a + sig_b - 2.0 * covmean.real)
        )
        np.testing.assert_allclose(got, ref, rtol=1e-7, atol=1e-9)


def test_frechet_symmetry_and_dim_check():
    rng = np.random.default_rng(4)
    fa = frechet_stats(rng.normal(size=(32, 6)))
    fb = frechet_stats(rng.normal(size=(32, 6)) + 0.3)
    np.testing.assert_allclose(frechet_distance(fa, fb), frechet_distance(fb, fa), rtol=1e-9)
    with pytest.raises(ValueError):
        frechet_distance(fa, frechet_stats(rng.normal(size=(32, 4))))


def test_frechet_stats_psd():
    rng = np.random.default_rng(5)
    stats = frechet_stats(rng.normal(size=(40, 8)))
    vals = np.linalg.eigvalsh(0.5 * (stats.sigma + stats.sigma.T))
    assert vals.min() >= -1e-12


def _small_scene_sets(n_train=96, n_test=24):
    train = datagen.gen_dataset("scene", n_train, 32, 32, 3, seed=11)
    test = datagen.gen_dataset("scene", n_test, 32, 32, 3, seed=77)
    return train, test


def test_probe_learns_real_scenes():
    train, test = _small_scene_sets()
    probe = metrics.fit_probe(train.examples, 3, holdout=24, min_miou=0.9, seed=0, epochs=6)
    assert probe.frozen
    assert probe.holdout_scores.miou >= 0.9
    real_report = metrics.evaluate_real_reference(test, probe=probe)
    assert real_report["miou"] > 0.8


def test_probe_fit_refuses_when_frozen():
    train, _ = _small_scene_sets(n_train=40, n_test=8)
    probe = metrics.ProbeSegmenter(3, seed=0)
    probe.fit(train.examples[:32], epochs=1)
    with pytest.raises(RuntimeError):
        probe.fit(train.examples[:32], epochs=1)


def test_noise_images_score_near_chance():
    train, test = _small_scene_sets()
    probe = metrics.fit_probe(train.examples, 3, holdout=24, min_miou=0.9, seed=0, epochs=6)
    rng = np.random.default_rng(6)
    noise = [rng.uniform(-1, 1, size=(3, 32, 32)) for _ in test.examples]
    preds = probe.predict(noise)
    conf = np.zeros((3, 3), dtype=np.int64)
    for pred, ex in zip(preds, test.examples):
        conf += metrics.confusion_matrix(pred, ex.semantics.argmax(axis=0), 3)
    s = metrics.scores_from_confusion(conf)
    # noise has no class structure: far below the real-image ceiling
    assert s.miou < 0.45


def test_evaluate_generator_deterministic_and_keypoint_mode():
    ds = datagen.gen_dataset("keypoint", 12, 32, 32, 4, seed=5)
    gen = models.Generator(4, width=4, num_residual=1, seed=0)
    r1 = metrics.evaluate_generator(gen, ds)
    r2 = metrics.evaluate_generator(gen, ds)
    assert r1 == r2
    assert "keypoint_score" in r1 and "miou" not in r1
    assert r1["frechet"] >= 0.0


def test_keypoint_peak_score_on_real_images():
    ds = datagen.gen_dataset("keypoint", 8, 32, 32, 4, seed=9)
    real = [ex.image.astype(np.float64) for ex in ds.examples]
    assert metrics.keypoint_peak_score(real, ds) > 0.9


def test_evaluate_checkpoint_roundtrip(tmp_path):
    ds = datagen.gen_dataset("scene", 16, 32, 32, 3, seed=21)
    gen = models.Generator(3, width=4, num_residual=1, seed=4)
    disc = models.MultiScaleDiscriminator(3, 1, 4, seed=5)
    path = tmp_path / "ck.sdc"
    models.save_checkpoint(path, trainer.named_state(gen, disc))
    train, _ = _small_scene_sets()
    probe = metrics.fit_probe(train.examples, 3, holdout=24, seed=0, epochs=6)
    direct = metrics.evaluate_generator(gen, ds, probe=probe)
    loaded = metrics.evaluate_checkpoint(path, ds, probe=probe, gen_width=4, gen_residual=1)
    assert direct == loaded


def test_grid_summary_and_csv(tmp_path):
    rows = [
        {"variant": "baseline", "seed": 0, "frechet": 2.0, "miou": 0.5},
        {"variant": "baseline", "seed": 1, "frechet": 4.0, "miou": 0.7},
        {"variant": "c2f", "seed": 0, "frechet": 1.0, "miou": 0.8},
    ]
    means = metrics.summarize_grid(rows, "frechet")
    assert means["baseline"] == (3.0, 1.0)
    metrics.write_grid_csv(tmp_path / "grid.csv", rows)
    text = (tmp_path / "grid.csv").read_text().splitlines()
    assert text[0].startswith("variant,seed")
    assert len(text) == 4
