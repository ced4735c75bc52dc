"""Alternating adversarial training with the stabilization routing rules.

Per batch: one discriminator step (adversarial on real+fake through every
gated branch; semantic and reconstruction terms from the real batch only),
then one generator step (adversarial plus feature matching and the frozen
perceptual term; the semantic/reconstruction guidance switches on only after
the warmup phase).  Adam everywhere, constant learning rate through warmup,
then linear decay to zero at the final epoch.

The routing rules are enforced structurally: a loss term that must not train
a head is simply never wired into that step's objective, so the untouched
parameters stay bitwise identical.
"""

from __future__ import annotations

import csv
import os
from contextlib import nullcontext
from dataclasses import dataclass, field

import numpy as np

try:
    from threadpoolctl import threadpool_limits
except ImportError:  # pragma: no cover
    threadpool_limits = None

from . import autodiff as ad
from . import datagen, losses, models
from .autodiff import Tensor

PERCEPTUAL_FEATNET_SEED = 101

VARIANTS = {
    # name -> (gated class branches, semantic head, reconstruction head, widened adv head)
    "baseline": dict(c2f=False, sem=False, rec=False, widened=False),
    "baseline+10": dict(c2f=False, sem=False, rec=False, widened=True),
    "sem": dict(c2f=False, sem=True, rec=False, widened=False),
    "sem+rec": dict(c2f=False, sem=True, rec=True, widened=False),
    "c2f": dict(c2f=True, sem=False, rec=False, widened=False),
    "c2f+sem": dict(c2f=True, sem=True, rec=False, widened=False),
    "c2f+sem+rec": dict(c2f=True, sem=True, rec=True, widened=False),
}
VARIANTS["semdisc"] = VARIANTS["c2f+sem+rec"]

LOG_COLUMNS = [
    "step", "epoch", "lr", "l_d", "l_a_disc", "l_s_real", "l_r_real",
    "l_g", "l_a_gen", "l_s_fake", "l_r_fake", "l_fm", "l_perc",
]


@dataclass
class TrainConfig:
    epochs: int = 40
    warmup_epochs: int | None = None  # defaults to epochs // 2
    batch_size: int = 16
    lr0: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    adv_form: str = "hinge"
    num_scales: int = 2
    weights: losses.LossWeights = field(default_factory=losses.LossWeights)
    seed: int = 0
    variant: str = "c2f+sem+rec"
    gen_width: int = 32
    gen_residual: int = 3
    disc_width: int = 32
    gen_rec_on_fake: bool = True   # whether the generator gets the reconstruction-consistency term
    fake_heads_forward: bool = True  # forward (and discard) sem/rec heads on fake batches
    checkpoint_every: int = 10
    sigma: float = 6.0
    sigma_is_variance: bool = False

    def resolved_warmup(self):
        w = self.epochs // 2 if self.warmup_epochs is None else self.warmup_epochs
        if w > self.epochs:
            raise ValueError("warmup_epochs must not exceed epochs")
        return w

    def flags(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant '{self.variant}' (options: {sorted(VARIANTS)})")
        return VARIANTS[self.variant]


def lr_schedule(epoch, cfg):
    """Constant lr0 through warmup, then linear decay to exactly 0 at `epochs`."""
    e = cfg.epochs
    warm = cfg.resolved_warmup()
    if epoch < 0 or epoch > e:
        raise ValueError(f"epoch {epoch} outside [0, {e}]")
    if epoch < warm:
        return cfg.lr0
    return cfg.lr0 * (e - epoch) / (e - warm) if e > warm else 0.0


class Adam:
    """Bias-corrected Adam with one step counter per parameter.

    A parameter that received no gradient in a step is left completely
    untouched (no moment decay), which is what keeps the gated heads
    bitwise frozen on batches that do not train them.
    """

    def __init__(self, named_params, beta1=0.5, beta2=0.999, eps=1e-8):
        self.params = list(named_params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for _, p in self.params]
        self.v = [np.zeros_like(p.data) for _, p in self.params]
        self.t = [0] * len(self.params)

    def step(self, lr):
        for i, (name, p) in enumerate(self.params):
            g = p.grad
            if g is None:
                continue
            if not np.all(np.isfinite(g)):
                raise ad.NumericError(f"non-finite gradient for parameter '{name}'")
            self.t[i] += 1
            t = self.t[i]
            self.m[i] = self.beta1 * self.m[i] + (1 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1 - self.beta2) * (g * g)
            mhat = self.m[i] / (1 - self.beta1**t)
            vhat = self.v[i] / (1 - self.beta2**t)
            p.data = p.data - lr * mhat / (np.sqrt(vhat) + self.eps)

    def zero_grad(self):
        for _, p in self.params:
            p.grad = None


def adam_step(params, grads, state, lr, beta1=0.5, beta2=0.999, eps=1e-8):
    """One functional Adam update used by tests and the probe segmenter.

    params/grads: lists of arrays; state: (m, v, t) or None to initialize.
    Returns (new_params, new_state).
    """
    if state is None:
        state = ([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params], 0)
    m, v, t = state
    t += 1
    new_params, new_m, new_v = [], [], []
    for p, g, mi, vi in zip(params, grads, m, v):
        if not np.all(np.isfinite(g)):
            raise ad.NumericError("non-finite gradient in adam_step")
        mi = beta1 * mi + (1 - beta1) * g
        vi = beta2 * vi + (1 - beta2) * (g * g)
        mhat = mi / (1 - beta1**t)
        vhat = vi / (1 - beta2**t)
        new_params.append(p - lr * mhat / (np.sqrt(vhat) + eps))
        new_m.append(mi)
        new_v.append(vi)
    return new_params, (new_m, new_v, t)


# ---------------------------------------------------------------------------
# model bundle and batches


def build_models(cfg, num_channels):
    """Generator, discriminator and the frozen perceptual net for a config."""
    flags = cfg.flags()
    k = num_channels if flags["c2f"] else 0
    extra = 0
    if flags["widened"]:
        extra = 2 * num_channels + 3  # same head-parameter delta as the full set of heads
    gen = models.Generator(num_channels, width=cfg.gen_width, num_residual=cfg.gen_residual,
                           seed=_mix(cfg.seed, 1))
    disc = models.MultiScaleDiscriminator(
        k,
        num_scales=cfg.num_scales,
        width=cfg.disc_width,
        with_sem=flags["sem"],
        with_rec=flags["rec"],
        extra_adv_channels=extra,
        seed=_mix(cfg.seed, 2),
    )
    featnet = models.FeatureNet(PERCEPTUAL_FEATNET_SEED)
    return gen, disc, featnet


def _mix(seed, salt):
    return (int(seed) * 1000003 + salt) % (2**63)


class BatchSource:
    """Deterministic batch assembly with per-example gating-mask caching."""

    def __init__(self, dataset, cfg):
        self.dataset = dataset
        self.cfg = cfg
        self.mode = dataset.mode
        h, w = dataset.image_hw
        self.k = dataset.num_channels
        self.scale_res = []
        for i in range(cfg.num_scales):
            f = models.SemanticDiscriminator.DOWNSAMPLE * (2**i)
            if h % f or w % f:
                raise ValueError(f"image size {h}x{w} not divisible by discriminator stride {f}")
            self.scale_res.append((h // f, w // f))
        self._mask_cache = {}

    def masks_for(self, idx):
        cached = self._mask_cache.get(idx)
        if cached is None:
            sem = self.dataset.examples[idx].semantics
            cached = [
                datagen.build_masks(self.mode, sem, oh, ow, self.cfg.sigma, self.cfg.sigma_is_variance)
                for (oh, ow) in self.scale_res
            ]
            self._mask_cache[idx] = cached
        return cached

    def assemble(self, indices, branch_count):
        """Returns (y, s, masks_per_scale) as float64 arrays.

        branch_count is the number of adversarial maps; for an ungated head
        (K=0, possibly widened) every branch uses the all-ones coarse mask.
        """
        exs = [self.dataset.examples[i] for i in indices]
        y = np.stack([e.image for e in exs]).astype(np.float64)
        s = np.stack([e.semantics for e in exs]).astype(np.float64)
        masks = []
        for si, (oh, ow) in enumerate(self.scale_res):
            if branch_count == self.k + 1:
                m = np.stack([self.masks_for(i)[si] for i in indices])
            else:
                m = np.ones((len(indices), branch_count, oh, ow))
            masks.append(m)
        return y, s, masks


# ---------------------------------------------------------------------------
# steps


def _mean_over_scales(terms):
    total = terms[0]
    for t in terms[1:]:
        total = ad.add(total, t)
    return ad.mul(total, 1.0 / len(terms)) if len(terms) > 1 else total


def _adv_loss(outs, masks, role, form):
    per_scale = [
        losses.coarse_to_fine_adv(o.adv, m, role, form) for o, m in zip(outs, masks)
    ]
    return _mean_over_scales(per_scale)


def _sem_loss(outs, s, mode):
    terms = [losses.semantic_matching_loss(o.sem, s, mode) for o in outs if o.sem is not None]
    return _mean_over_scales(terms) if terms else None


def _rec_loss(outs, target):
    # scale i reconstructs the 2**i-pooled image it actually saw
    terms = []
    t = target if isinstance(target, Tensor) else Tensor(target)
    for i, o in enumerate(outs):
        if i > 0:
            t = ad.avg_pool(t, 2)
        if o.rec is not None:
            terms.append(losses.reconstruction_loss(o.rec, t))
    return _mean_over_scales(terms) if terms else None


def _forward_disc(disc, x, heads=True):
    """Multi-scale forward; optionally skip the sem/rec heads entirely."""
    if heads:
        return disc(x)
    t = x if isinstance(x, Tensor) else Tensor(x)
    outs = []
    for i, d in enumerate(disc.scales):
        feats = []
        h = t
        for blk in d.blocks:
            h = blk(h)
            feats.append(h)
        outs.append(models.DiscOutputs(adv=d.adv_head(h), sem=None, rec=None, feats=feats))
        if i + 1 < disc.num_scales:
            t = ad.avg_pool(t, 2)
    return outs


def disc_step(gen_out_detached, y, s, masks, disc, opt_d, cfg, mode, lr):
    """One discriminator update; returns the loss components as floats.

    Fake images reach only the adversarial head's objective; the semantic and
    reconstruction heads are trained on the real batch alone.
    """
    yt = Tensor(y)
    outs_real = disc(yt)
    outs_fake = _forward_disc(disc, gen_out_detached, heads=cfg.fake_heads_forward)

    flags = cfg.flags()
    if flags["widened"]:
        l_a = _mean_over_scales(
            [losses.multi_map_coarse_loss(o.adv, "disc_real", cfg.adv_form) for o in outs_real]
            + [losses.multi_map_coarse_loss(o.adv, "disc_fake", cfg.adv_form) for o in outs_fake]
        )
        # the two halves are means; restore the real+fake sum convention
        l_a = ad.mul(l_a, 2.0)
    else:
        l_a = ad.add(
            _adv_loss(outs_real, masks, "disc_real", cfg.adv_form),
            _adv_loss(outs_fake, masks, "disc_fake", cfg.adv_form),
        )
    l_s = _sem_loss(outs_real, s, mode) if cfg.weights.lambda_s > 0 else None
    l_r = _rec_loss(outs_real, yt) if cfg.weights.lambda_r > 0 else None
    total = losses.discriminator_total(l_a, l_s, l_r, cfg.weights)
    ad.backward(total)
    opt_d.step(lr)
    opt_d.zero_grad()
    return {
        "l_d": total.item(),
        "l_a_disc": l_a.item(),
        "l_s_real": l_s.item() if l_s is not None else 0.0,
        "l_r_real": l_r.item() if l_r is not None else 0.0,
    }


def gen_step(gen_out, y, s, masks, gen, disc, featnet, opt_g, opt_d, cfg, mode, phase, lr):
    """One generator update against the frozen discriminator."""
    outs_fake = disc(gen_out)
    with ad.no_grad():
        outs_real_const = disc(Tensor(y))

    flags = cfg.flags()
    if flags["widened"]:
        l_a = _mean_over_scales(
            [losses.multi_map_coarse_loss(o.adv, "gen_fake", cfg.adv_form) for o in outs_fake]
        )
    else:
        l_a = _adv_loss(outs_fake, masks, "gen_fake", cfg.adv_form)
    l_fm = (
        _mean_over_scales(
            [
                losses.feature_matching_loss(f.feats, r.feats)
                for f, r in zip(outs_fake, outs_real_const)
            ]
        )
        if cfg.weights.lambda_fm > 0
        else None
    )
    l_perc = losses.perceptual_loss(gen_out, Tensor(y), featnet) if cfg.weights.lambda_perc > 0 else None
    l_s = None
    l_r = None
    if phase == "full":
        if cfg.weights.lambda_s > 0:
            l_s = _sem_loss(outs_fake, s, mode)
        if cfg.weights.lambda_r > 0 and cfg.gen_rec_on_fake:
            l_r = _rec_loss(outs_fake, gen_out)
    total = losses.generator_total(l_a, l_s, l_r, l_fm, l_perc, cfg.weights, phase)
    ad.backward(total)
    opt_g.step(lr)
    opt_g.zero_grad()
    opt_d.zero_grad()  # discard gradients that flowed through the frozen discriminator
    return {
        "l_g": total.item(),
        "l_a_gen": l_a.item(),
        "l_s_fake": l_s.item() if l_s is not None else 0.0,
        "l_r_fake": l_r.item() if l_r is not None else 0.0,
        "l_fm": l_fm.item() if l_fm is not None else 0.0,
        "l_perc": l_perc.item() if l_perc is not None else 0.0,
    }


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainResult:
    log_rows: list
    checkpoints: list
    gen: models.Generator
    disc: models.MultiScaleDiscriminator
    aborted_at: tuple | None = None


def named_state(gen, disc):
    return [("gen." + n, p) for n, p in gen.parameters()] + [
        ("disc." + n, p) for n, p in disc.parameters()
    ]


def train(cfg, dataset, out_dir=None, step_hook=None):
    """Run the full alternating optimization; deterministic given cfg.seed.

    Writes `loss_log.csv` and `ckpt_epoch*.sdc` under out_dir when given.
    step_hook(step_index, gen, disc) runs after each full step (tests use it
    to snapshot parameters).  BLAS is pinned to one thread for the duration:
    the step matrices are small enough that thread sync costs more than it
    buys, and a fixed thread count keeps runs reproducible.
    """
    limiter = threadpool_limits(limits=1) if threadpool_limits is not None else nullcontext()
    with limiter:
        return _train_inner(cfg, dataset, out_dir, step_hook)


def _train_inner(cfg, dataset, out_dir, step_hook):
    cfg.weights.validate()
    cfg.flags()
    if cfg.adv_form not in losses.ADV_FORMS:
        raise ValueError(f"unknown adversarial form '{cfg.adv_form}'")

    source = BatchSource(dataset, cfg)
    gen, disc, featnet = build_models(cfg, dataset.num_channels)
    branch_count = disc.scales[0].adv_head.w.data.shape[0]
    opt_g = Adam(gen.parameters(), cfg.beta1, cfg.beta2)
    opt_d = Adam(disc.parameters(), cfg.beta1, cfg.beta2)
    rng = np.random.default_rng((_mix(cfg.seed, 3),))

    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
    warm = cfg.resolved_warmup()
    n = len(dataset)
    if n < cfg.batch_size:
        raise ValueError(f"dataset of {n} examples smaller than batch size {cfg.batch_size}")

    rows = []
    checkpoints = []
    step = 0
    aborted = None
    try:
        for epoch in range(cfg.epochs):
            lr = lr_schedule(epoch, cfg)
            phase = "warmup" if epoch < warm else "full"
            perm = rng.permutation(n)
            nbatch = n // cfg.batch_size
            for b in range(nbatch):
                idx = perm[b * cfg.batch_size : (b + 1) * cfg.batch_size]
                y, s, masks = source.assemble(idx, branch_count)
                gen_out = gen(Tensor(s))
                d_diag = disc_step(gen_out.detach(), y, s, masks, disc, opt_d, cfg, dataset.mode, lr)
                g_diag = gen_step(
                    gen_out, y, s, masks, gen, disc, featnet, opt_g, opt_d, cfg, dataset.mode,
                    phase, lr,
                )
                step += 1
                rows.append({"step": step, "epoch": epoch, "lr": lr, **d_diag, **g_diag})
                if step_hook is not None:
                    step_hook(step, gen, disc)
            if out_dir is not None and (
                (epoch + 1) % cfg.checkpoint_every == 0 or epoch + 1 == cfg.epochs
            ):
                path = os.path.join(out_dir, f"ckpt_epoch{epoch + 1:04d}.sdc")
                models.save_checkpoint(path, named_state(gen, disc))
                checkpoints.append(path)
    except ad.NumericError as e:
        aborted = (step, str(e))
        if out_dir is not None:
            with open(os.path.join(out_dir, "ABORTED.txt"), "w") as fh:
                fh.write(f"step {step}: {e}\n")
        raise
    finally:
        if out_dir is not None and rows:
            write_log(os.path.join(out_dir, "loss_log.csv"), rows)

    return TrainResult(log_rows=rows, checkpoints=checkpoints, gen=gen, disc=disc, aborted_at=aborted)


def write_log(path, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=LOG_COLUMNS)
        writer.writeheader()
        for r in rows:
            writer.writerow({k: repr(r[k]) if isinstance(r[k], float) else r[k] for k in LOG_COLUMNS})


def read_log(path):
    with open(path, newline="") as fh:
        return [
            {k: (int(v) if k in ("step", "epoch") else float(v)) for k, v in row.items()}
            for row in csv.DictReader(fh)
        ]
