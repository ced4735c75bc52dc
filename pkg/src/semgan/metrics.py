"""Evaluation: segmentation-consistency scores, Frechet feature distance,
and the ablation grid runner.

A small probe segmenter trained only on real pairs stands in for a
pretrained segmentation network: generated images are scored by how well the
probe's predictions on them recover the conditioning class map.  Frechet
statistics come from a frozen random feature extractor (a fixed seed distinct
from the perceptual one), which keeps distances comparable across variants
within a run without any external model assets.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from . import datagen, models, trainer
from .autodiff import Tensor

METRIC_FEATNET_SEED = 202


# ---------------------------------------------------------------------------
# segmentation scores


@dataclass
class SegScores:
    miou: float
    pixel_acc: float
    class_acc: float


def confusion_matrix(pred, true, num_classes):
    p = np.asarray(pred).reshape(-1).astype(np.int64)
    t = np.asarray(true).reshape(-1).astype(np.int64)
    if p.shape != t.shape:
        raise ValueError(f"confusion_matrix: shapes {pred.shape} vs {true.shape}")
    if p.min() < 0 or p.max() >= num_classes or t.min() < 0 or t.max() >= num_classes:
        raise ValueError(f"confusion_matrix: labels outside [0, {num_classes})")
    return np.bincount(t * num_classes + p, minlength=num_classes**2).reshape(
        num_classes, num_classes
    )


def scores_from_confusion(conf):
    total = conf.sum()
    diag = np.diag(conf).astype(np.float64)
    truth_count = conf.sum(axis=1).astype(np.float64)
    pred_count = conf.sum(axis=0).astype(np.float64)
    union = truth_count + pred_count - diag
    pixel = float(diag.sum() / total)
    present_truth = truth_count > 0
    present_any = union > 0  # classes absent from both pred and truth are excluded
    class_acc = float((diag[present_truth] / truth_count[present_truth]).mean()) if present_truth.any() else 0.0
    miou = float((diag[present_any] / union[present_any]).mean()) if present_any.any() else 0.0
    return SegScores(miou=miou, pixel_acc=pixel, class_acc=class_acc)


def seg_scores(pred, true, num_classes):
    """Confusion-matrix scores of an integer class-map prediction."""
    return scores_from_confusion(confusion_matrix(pred, true, num_classes))


# ---------------------------------------------------------------------------
# Frechet feature distance


@dataclass
class FrechetStats:
    mu: np.ndarray
    sigma: np.ndarray


def frechet_stats(features):
    f = np.asarray(features, dtype=np.float64)
    if f.ndim != 2 or f.shape[0] < 2:
        raise ValueError("frechet_stats: need (N, D) features with N >= 2")
    return FrechetStats(mu=f.mean(axis=0), sigma=np.cov(f, rowvar=False).reshape(f.shape[1], f.shape[1]))


def _psd_sqrt(mat):
    vals, vecs = np.linalg.eigh(mat)
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def frechet_distance(stats_a, stats_b, eps=1e-6):
    """|mu_a - mu_b|^2 + Tr(S_a + S_b - 2 (S_a S_b)^{1/2}).

    The cross-term trace is computed through the eigendecomposition of the
    symmetrized product  S_a^{1/2} S_b S_a^{1/2},  which is PSD whenever both
    inputs are; both covariances get an eps ridge first.
    """
    mu_a, mu_b = stats_a.mu, stats_b.mu
    if mu_a.shape != mu_b.shape:
        raise ValueError(f"frechet_distance: feature dims {mu_a.shape} vs {mu_b.shape}")
    d = mu_a.shape[0]
    sig_a = stats_a.sigma + eps * np.eye(d)
    sig_b = stats_b.sigma + eps * np.eye(d)
    root_a = _psd_sqrt(0.5 * (sig_a + sig_a.T))
    inner = root_a @ sig_b @ root_a
    inner = 0.5 * (inner + inner.T)
    vals = np.linalg.eigvalsh(inner)
    if vals.min() < -1e-8 * max(vals.max(), 1.0):
        raise ValueError(f"frechet_distance: product matrix not PSD (min eig {vals.min():.3e})")
    tr_sqrt = np.sqrt(np.clip(vals, 0.0, None)).sum()
    diff = mu_a - mu_b
    val = float(diff @ diff + np.trace(sig_a) + np.trace(sig_b) - 2.0 * tr_sqrt)
    return max(val, 0.0)


def dataset_features(featnet, images, batch=64):
    """Pooled feature descriptors for a stack of (3,H,W) images."""
    feats = []
    for i in range(0, len(images), batch):
        chunk = np.stack(images[i : i + batch]).astype(np.float64)
        feats.append(featnet.pooled(Tensor(chunk)))
    return np.concatenate(feats, axis=0)


# ---------------------------------------------------------------------------
# probe segmenter


class ProbeSegmenter:
    """Small encoder-decoder classifier trained on real pairs only, then
    frozen and used to score how well generated images follow their
    conditioning."""

    def __init__(self, num_classes, width=16, seed=0):
        self.num_classes = num_classes
        self.width = width
        w = width
        self.enc1 = models.ConvBlock("probe.enc1", seed, 3, w, 3, 1, 1, norm=False, act="leaky")
        self.enc2 = models.ConvBlock("probe.enc2", seed, w, 2 * w, 3, 2, 1, act="leaky")
        self.mid = models.ConvBlock("probe.mid", seed, 2 * w, 2 * w, 3, 1, 1, act="leaky")
        self.dec = models.ConvBlock("probe.dec", seed, 2 * w, w, 3, 1, 1, act="leaky")
        # full-resolution skip keeps class boundaries sharp
        self.head = models.Conv2d("probe.head", seed, 2 * w, num_classes, 1)
        self.frozen = False

    def parameters(self):
        ps = []
        for layer in (self.enc1, self.enc2, self.mid, self.dec, self.head):
            ps += layer.parameters()
        return ps

    def logits(self, x):
        t = x if isinstance(x, Tensor) else Tensor(x)
        e1 = self.enc1(t)
        h = self.mid(self.enc2(e1))
        h = self.dec(ad.nearest_upsample(h, 2))
        return self.head(ad.concat([h, e1], axis=1))

    def predict(self, images, batch=64):
        """Argmax class maps for a list/stack of images."""
        preds = []
        for i in range(0, len(images), batch):
            chunk = np.stack(images[i : i + batch]).astype(np.float64)
            with ad.no_grad():
                out = self.logits(Tensor(chunk))
            preds.append(out.data.argmax(axis=1))
        return np.concatenate(preds, axis=0)

    def fit(self, examples, epochs=8, batch_size=16, lr=1e-3, seed=0):
        """Train on real (image, class-map) pairs with softmax cross-entropy."""
        if self.frozen:
            raise RuntimeError("probe is frozen")
        opt = trainer.Adam(self.parameters(), beta1=0.9, beta2=0.999)
        rng = np.random.default_rng((int(seed), 0x9B0BE))
        n = len(examples)
        for _ in range(epochs):
            perm = rng.permutation(n)
            for b in range(n // batch_size):
                idx = perm[b * batch_size : (b + 1) * batch_size]
                y = np.stack([examples[i].image for i in idx]).astype(np.float64)
                cls = np.stack([examples[i].semantics.argmax(axis=0) for i in idx])
                loss = ad.tmean(ad.softmax_cross_entropy(self.logits(Tensor(y)), cls))
                ad.backward(loss)
                opt.step(lr)
                opt.zero_grad()
        self.frozen = True
        return self

    def validate(self, examples):
        """Aggregate scores of the probe itself against the true class maps."""
        images = [ex.image for ex in examples]
        preds = self.predict(images)
        conf = np.zeros((self.num_classes, self.num_classes), dtype=np.int64)
        for pred, ex in zip(preds, examples):
            conf += confusion_matrix(pred, ex.semantics.argmax(axis=0), self.num_classes)
        return scores_from_confusion(conf)


def fit_probe(train_examples, num_classes, holdout=64, min_miou=0.9, seed=0, epochs=8):
    """Train a probe on real pairs and require held-out mIoU >= min_miou."""
    if len(train_examples) <= holdout:
        raise ValueError("fit_probe: not enough examples to hold out a validation split")
    probe = ProbeSegmenter(num_classes, seed=seed)
    probe.fit(train_examples[holdout:], epochs=epochs, seed=seed)
    scores = probe.validate(train_examples[:holdout])
    if scores.miou < min_miou:
        raise RuntimeError(
            f"probe segmenter too weak: held-out mIoU {scores.miou:.3f} < {min_miou}"
        )
    probe.holdout_scores = scores
    return probe


# ---------------------------------------------------------------------------
# keypoint localization (keypoint-mode stand-in for segmentation scores)


def keypoint_peak_score(generated, dataset, radius=3.0):
    """Fraction of joints whose nearest color match in the generated image
    lies within `radius` pixels of the true keypoint."""
    k = dataset.num_channels
    hits, total = 0, 0
    for img, ex in zip(generated, dataset.examples):
        arr = (np.asarray(img, dtype=np.float64) + 1.0) / 2.0
        for j in range(k):
            chan = ex.semantics[j]
            if chan.max() < 1.0:
                continue
            r, c = np.unravel_index(int(chan.argmax()), chan.shape)
            col = datagen._joint_color(j, k)
            dist = ((arr - col[:, None, None]) ** 2).sum(axis=0)
            rr, cc = np.unravel_index(int(dist.argmin()), dist.shape)
            total += 1
            if (rr - r) ** 2 + (cc - c) ** 2 <= radius * radius:
                hits += 1
    return hits / total if total else 0.0


# ---------------------------------------------------------------------------
# checkpoint evaluation


def generate_images(gen, dataset, batch=32):
    outs = []
    for i in range(0, len(dataset), batch):
        s = np.stack([ex.semantics for ex in dataset.examples[i : i + batch]]).astype(np.float64)
        with ad.no_grad():
            outs.append(gen(Tensor(s)).data)
    return np.concatenate(outs, axis=0)


def evaluate_generator(gen, dataset, probe=None, featnet=None):
    """Score generated images against the test set.

    Scene mode: probe segmentation scores plus Frechet distance; keypoint
    mode: keypoint localization plus Frechet distance. Deterministic.
    """
    featnet = featnet or models.FeatureNet(METRIC_FEATNET_SEED)
    generated = generate_images(gen, dataset)
    real = [ex.image for ex in dataset.examples]
    fid = frechet_distance(
        frechet_stats(dataset_features(featnet, real)),
        frechet_stats(dataset_features(featnet, list(generated))),
    )
    report = {"frechet": fid, "num_examples": len(dataset)}
    if dataset.mode == datagen.MODE_SCENE:
        if probe is None:
            raise ValueError("scene-mode evaluation needs a probe segmenter")
        preds = probe.predict(list(generated))
        conf = np.zeros((probe.num_classes, probe.num_classes), dtype=np.int64)
        for pred, ex in zip(preds, dataset.examples):
            conf += confusion_matrix(pred, ex.semantics.argmax(axis=0), probe.num_classes)
        s = scores_from_confusion(conf)
        report.update(miou=s.miou, pixel_acc=s.pixel_acc, class_acc=s.class_acc)
    else:
        report["keypoint_score"] = keypoint_peak_score(generated, dataset)
    return report


def evaluate_checkpoint(ckpt_path, dataset, probe=None, featnet=None, gen_width=32, gen_residual=3):
    state = models.load_checkpoint(ckpt_path)
    gen = models.Generator(dataset.num_channels, width=gen_width, num_residual=gen_residual)
    models.load_into(gen, state, prefix="gen.")
    return evaluate_generator(gen, dataset, probe=probe, featnet=featnet)


def evaluate_real_reference(dataset, probe=None, featnet=None):
    """Upper-bound sanity run: score the real images as if they were outputs."""
    featnet = featnet or models.FeatureNet(METRIC_FEATNET_SEED)
    real = [ex.image for ex in dataset.examples]
    report = {"frechet": 0.0, "num_examples": len(dataset)}
    if dataset.mode == datagen.MODE_SCENE and probe is not None:
        preds = probe.predict(real)
        conf = np.zeros((probe.num_classes, probe.num_classes), dtype=np.int64)
        for pred, ex in zip(preds, dataset.examples):
            conf += confusion_matrix(pred, ex.semantics.argmax(axis=0), probe.num_classes)
        s = scores_from_confusion(conf)
        report.update(miou=s.miou, pixel_acc=s.pixel_acc, class_acc=s.class_acc)
    return report


# ---------------------------------------------------------------------------
# ablation grid


ABLATION_VARIANTS = ("baseline", "baseline+10", "sem", "sem+rec", "c2f", "c2f+sem", "c2f+sem+rec")


def _grid_cell(payload):
    """One (variant, seed) cell: train, evaluate, return the table row.

    Runs in a worker process under parallel grids; datasets and the probe
    come in by path so each cell is self-contained and per-run determinism
    is untouched by scheduling.
    """
    train_path, test_path, variant, seed, base_cfg, probe_path, run_dir = payload
    train_set = datagen.read_dataset(train_path)
    test_set = datagen.read_dataset(test_path)
    cfg = replace(base_cfg, variant=variant, seed=seed)
    probe = None
    if test_set.mode == datagen.MODE_SCENE:
        probe = ProbeSegmenter(test_set.num_channels)
        models.load_into(probe, models.load_checkpoint(probe_path))
        probe.frozen = True
    result = trainer.train(cfg, train_set, out_dir=run_dir)
    report = evaluate_generator(result.gen, test_set, probe=probe)
    return {"variant": variant, "seed": seed, **report}


def ablation_grid(train_path, test_path, variants, seeds, base_cfg, probe_path,
                  out_dir=None, jobs=1, progress=None):
    """Train each variant with shared seeds, evaluate, and tabulate.

    Returns one row dict per (variant, seed); writes ablation.csv under
    out_dir when given.  jobs > 1 trains cells in parallel worker processes
    (each cell is deterministic on its own, so the table is identical either
    way; only wall time changes).
    """
    for variant in variants:
        if variant not in trainer.VARIANTS:
            raise ValueError(f"unknown variant '{variant}'")
    cells = []
    for variant in variants:
        for seed in seeds:
            run_dir = (
                os.path.join(out_dir, f"{variant.replace('+', '_')}_s{seed}") if out_dir else None
            )
            cells.append((train_path, test_path, variant, seed, base_cfg, probe_path, run_dir))

    rows = []
    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=jobs) as pool:
            for row in pool.map(_grid_cell, cells):
                rows.append(row)
                if progress is not None:
                    progress(row)
    else:
        for cell in cells:
            row = _grid_cell(cell)
            rows.append(row)
            if progress is not None:
                progress(row)
    if out_dir is not None:
        write_grid_csv(os.path.join(out_dir, "ablation.csv"), rows)
    return rows


def summarize_grid(rows, key):
    """Per-variant mean and (population) std of a metric column."""
    out = {}
    for row in rows:
        out.setdefault(row["variant"], []).append(row[key])
    return {v: (float(np.mean(xs)), float(np.std(xs))) for v, xs in out.items()}


def write_grid_csv(path, rows):
    cols = sorted({k for r in rows for k in r}, key=lambda c: (c != "variant", c != "seed", c))
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=cols)
        writer.writeheader()
        for r in rows:
            writer.writerow(r)
