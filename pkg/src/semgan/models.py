"""Generator and discriminator networks built on the autodiff core.

The discriminator has a PatchGAN-style shared trunk (4 stride-2 conv blocks,
leaky ReLU 0.2, instance norm) and up to three parallel head convolutions on
the same trunk features: K+1 class-gated adversarial maps, K semantic maps
and 3 reconstruction maps, all at 1/16 input resolution.  A baseline
single-map comparator is the same network with K=0 and no extra heads.

Every layer draws its initial weights from an RNG keyed by (model seed,
layer name), so two models sharing a layer name and seed start bitwise
identical regardless of which other layers exist around them.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

CHECKPOINT_MAGIC = b"SDC1"
INIT_STD = 0.02


class CheckpointFormatError(IOError):
    """Malformed, truncated or wrong-version checkpoint file."""


def _layer_rng(seed, name):
    key = int.from_bytes(hashlib.sha256(name.encode()).digest()[:8], "little")
    return np.random.default_rng((int(seed), key))


class Conv2d:
    def __init__(self, name, seed, cin, cout, k, stride=1, pad=0, bias=True):
        rng = _layer_rng(seed, name)
        self.name = name
        self.stride = stride
        self.pad = pad
        self.w = Tensor(rng.normal(0.0, INIT_STD, (cout, cin, k, k)), requires_grad=True)
        self.b = Tensor(np.zeros(cout), requires_grad=True) if bias else None

    def __call__(self, x):
        return ad.conv2d(x, self.w, self.b, stride=self.stride, pad=self.pad)

    def parameters(self):
        ps = [(self.name + ".w", self.w)]
        if self.b is not None:
            ps.append((self.name + ".b", self.b))
        return ps


class InstanceNorm2d:
    """Instance normalization with learnable per-channel gain/shift."""

    def __init__(self, name, channels):
        self.name = name
        self.gain = Tensor(np.ones(channels), requires_grad=True)
        self.bias = Tensor(np.zeros(channels), requires_grad=True)

    def __call__(self, x):
        return ad.instance_norm_affine(x, self.gain, self.bias)

    def parameters(self):
        return [(self.name + ".gain", self.gain), (self.name + ".bias", self.bias)]


class ConvBlock:
    """conv -> optional instance norm -> activation."""

    def __init__(self, name, seed, cin, cout, k, stride, pad, norm=True, act="leaky"):
        self.conv = Conv2d(name + ".conv", seed, cin, cout, k, stride, pad)
        self.norm = InstanceNorm2d(name + ".norm", cout) if norm else None
        self.act = act

    def __call__(self, x):
        h = self.conv(x)
        if self.norm is not None:
            h = self.norm(h)
        if self.act == "leaky":
            return ad.leaky_relu(h, 0.2)
        if self.act == "relu":
            return ad.relu(h)
        return h

    def parameters(self):
        ps = self.conv.parameters()
        if self.norm is not None:
            ps += self.norm.parameters()
        return ps


class ResidualBlock:
    def __init__(self, name, seed, channels):
        self.a = ConvBlock(name + ".a", seed, channels, channels, 3, 1, 1, act="relu")
        self.b = Conv2d(name + ".b.conv", seed, channels, channels, 3, 1, 1)
        self.bnorm = InstanceNorm2d(name + ".b.norm", channels)

    def __call__(self, x):
        return ad.add(x, self.bnorm(self.b(self.a(x))))

    def parameters(self):
        return self.a.parameters() + self.b.parameters() + self.bnorm.parameters()


def _collect(children):
    ps = []
    for c in children:
        ps += c.parameters()
    return ps


class Generator:
    """Encoder / residual / decoder image generator: semantics in, image out.

    Output is tanh-bounded, same spatial size as the input (H, W must be
    divisible by 4 for the two stride-2 stages to invert cleanly).
    """

    def __init__(self, in_channels, width=32, num_residual=3, seed=0):
        self.in_channels = in_channels
        self.width = width
        self.num_residual = num_residual
        self.seed = seed
        w = width
        self.stem = ConvBlock("gen.stem", seed, in_channels, w, 3, 1, 1, act="relu")
        self.down1 = ConvBlock("gen.down1", seed, w, 2 * w, 3, 2, 1, act="relu")
        self.down2 = ConvBlock("gen.down2", seed, 2 * w, 4 * w, 3, 2, 1, act="relu")
        self.res = [ResidualBlock(f"gen.res{i}", seed, 4 * w) for i in range(num_residual)]
        # convolve at the coarse resolution, then upsample: same receptive
        # field as upsample-then-conv at a quarter of the cost
        self.up1 = ConvBlock("gen.up1", seed, 4 * w, 2 * w, 3, 1, 1, act="relu")
        self.up2 = ConvBlock("gen.up2", seed, 2 * w, w, 3, 1, 1, act="relu")
        self.head = Conv2d("gen.head", seed, w, 3, 3, 1, 1)

    def __call__(self, s):
        n, c, h, w = s.data.shape if isinstance(s, Tensor) else np.asarray(s).shape
        if c != self.in_channels:
            raise ad.ShapeError(f"generator: expected {self.in_channels} input channels, got {c}")
        if h % 4 or w % 4:
            raise ad.ShapeError(f"generator: spatial size {h}x{w} not divisible by 4")
        t = self.stem(s if isinstance(s, Tensor) else Tensor(s))
        t = self.down2(self.down1(t))
        for blk in self.res:
            t = blk(t)
        t = ad.nearest_upsample(self.up1(t), 2)
        t = ad.nearest_upsample(self.up2(t), 2)
        return ad.tanh(self.head(t))

    def parameters(self):
        return _collect([self.stem, self.down1, self.down2, *self.res, self.up1, self.up2, self.head])


@dataclass
class DiscOutputs:
    """Per-scale discriminator outputs: adversarial maps, optional semantic
    and reconstruction maps, and the trunk activations for feature matching."""

    adv: Tensor
    sem: Tensor | None
    rec: Tensor | None
    feats: list = field(default_factory=list)


class SemanticDiscriminator:
    """Shared-trunk discriminator with gated-adversarial / semantic /
    reconstruction heads. num_channels=0 with both extra heads disabled is
    exactly the single-map PatchGAN baseline."""

    DOWNSAMPLE = 16  # four stride-2 trunk blocks

    def __init__(
        self,
        num_channels,
        width=32,
        with_sem=True,
        with_rec=True,
        extra_adv_channels=0,
        seed=0,
        name="disc",
    ):
        self.num_channels = num_channels
        self.width = width
        self.with_sem = with_sem and num_channels > 0
        self.with_rec = with_rec
        self.extra_adv_channels = extra_adv_channels
        w = width
        widths = [w, 2 * w, 4 * w, 4 * w]
        self.blocks = []
        cin = 3
        for i, cout in enumerate(widths):
            self.blocks.append(
                ConvBlock(f"{name}.trunk{i}", seed, cin, cout, 4, 2, 1, norm=(i > 0), act="leaky")
            )
            cin = cout
        # heads keep the trunk resolution: 4x4 kernels with asymmetric pad
        same4 = (1, 2, 1, 2)
        self.adv_head = Conv2d(
            f"{name}.adv", seed, cin, num_channels + 1 + extra_adv_channels, 4, 1, same4
        )
        self.sem_head = Conv2d(f"{name}.sem", seed, cin, num_channels, 4, 1, same4) if self.with_sem else None
        self.rec_head = Conv2d(f"{name}.rec", seed, cin, 3, 4, 1, same4) if with_rec else None

    def __call__(self, x):
        t = x if isinstance(x, Tensor) else Tensor(x)
        if t.data.ndim != 4 or t.data.shape[1] != 3:
            raise ad.ShapeError(f"discriminator: expected (N,3,H,W) input, got {t.shape}")
        feats = []
        for blk in self.blocks:
            t = blk(t)
            feats.append(t)
        return DiscOutputs(
            adv=self.adv_head(t),
            sem=self.sem_head(t) if self.sem_head is not None else None,
            rec=self.rec_head(t) if self.rec_head is not None else None,
            feats=feats,
        )

    def parameters(self):
        heads = [h for h in (self.adv_head, self.sem_head, self.rec_head) if h is not None]
        return _collect(self.blocks + heads)

    def head_parameters(self, which):
        head = {"adv": self.adv_head, "sem": self.sem_head, "rec": self.rec_head}[which]
        return head.parameters() if head is not None else []

    def trunk_parameters(self):
        return _collect(self.blocks)


def build_baseline(width=32, seed=0, extra_adv_channels=0, name="disc"):
    """Single-map PatchGAN comparator on the same trunk."""
    return SemanticDiscriminator(
        0,
        width=width,
        with_sem=False,
        with_rec=False,
        extra_adv_channels=extra_adv_channels,
        seed=seed,
        name=name,
    )


class MultiScaleDiscriminator:
    """Independent per-scale discriminators; scale i sees the input average
    pooled by 2**i."""

    def __init__(self, num_channels, num_scales=2, width=32, with_sem=True, with_rec=True,
                 extra_adv_channels=0, seed=0):
        if num_scales < 1:
            raise ValueError("num_scales must be >= 1")
        self.num_scales = num_scales
        self.scales = [
            SemanticDiscriminator(
                num_channels,
                width=width,
                with_sem=with_sem,
                with_rec=with_rec,
                extra_adv_channels=extra_adv_channels,
                seed=seed,
                name=f"disc.scale{i}",
            )
            for i in range(num_scales)
        ]

    def __call__(self, x):
        t = x if isinstance(x, Tensor) else Tensor(x)
        outs = []
        for i, d in enumerate(self.scales):
            outs.append(d(t))
            if i + 1 < self.num_scales:
                t = ad.avg_pool(t, 2)
        return outs

    def parameters(self):
        return _collect(self.scales)


class FeatureNet:
    """Frozen random conv feature extractor (perceptual and Frechet features).

    Never trained: parameters are plain constants from a fixed seed.
    """

    def __init__(self, seed, widths=(8, 16, 32, 64), in_channels=3):
        self.widths = tuple(widths)
        self.convs = []
        cin = in_channels
        rng = np.random.default_rng((int(seed), 0xFEA7))
        for i, cout in enumerate(self.widths):
            w = Tensor(rng.normal(0.0, np.sqrt(2.0 / (cin * 9)), (cout, cin, 3, 3)))
            b = Tensor(np.zeros(cout))
            self.convs.append((w, b))
            cin = cout

    def features(self, x):
        t = x if isinstance(x, Tensor) else Tensor(x)
        feats = []
        for i, (w, b) in enumerate(self.convs):
            t = ad.leaky_relu(ad.conv2d(t, w, b, stride=2 if i > 0 else 1, pad=1), 0.2)
            feats.append(t)
        return feats

    def pooled(self, x):
        """Per-image descriptor: channel means of every layer, concatenated."""
        with ad.no_grad():
            feats = self.features(x)
        return np.concatenate([f.data.mean(axis=(2, 3)) for f in feats], axis=1)


# ---------------------------------------------------------------------------
# capacity accounting


def parameter_count(params):
    return int(sum(p.data.size for _, p in params))


def capacity_report(num_channels, width=32, num_scales=2):
    """Parameter budget of the multi-head discriminator next to the baseline.

    The widened baseline (extra_adv_channels=2K+3) matches the multi-head
    parameter delta exactly, since every head conv has the same kernel size.
    """
    full = MultiScaleDiscriminator(num_channels, num_scales, width)
    base = MultiScaleDiscriminator(0, num_scales, width, with_sem=False, with_rec=False)
    n_full = parameter_count(full.parameters())
    n_base = parameter_count(base.parameters())
    return {
        "baseline_params": n_base,
        "semdisc_params": n_full,
        "delta": n_full - n_base,
        "percent_increase": 100.0 * (n_full - n_base) / n_base,
        "matched_extra_adv_channels": 2 * num_channels + 3,
    }


# ---------------------------------------------------------------------------
# checkpoint format: magic "SDC1", u32 count, then per parameter:
# u16 name length, name utf-8, u8 ndim, u32 dims, f64 payload


def save_checkpoint(path, named_params):
    """named_params: iterable of (name, Tensor or ndarray)."""
    items = [(n, np.asarray(p.data if isinstance(p, Tensor) else p, dtype=np.float64))
             for n, p in named_params]
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(items)))
        for name, arr in items:
            nb = name.encode("utf-8")
            fh.write(struct.pack("<H", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path):
    """Returns an ordered dict name -> float64 ndarray."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 8:
        raise CheckpointFormatError(f"{path}: truncated header")
    if blob[:4] != CHECKPOINT_MAGIC:
        raise CheckpointFormatError(f"{path}: bad magic {blob[:4]!r}")
    (count,) = struct.unpack_from("<I", blob, 4)
    out = {}
    off = 8
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", blob, off)
            off += 2
            name = blob[off : off + nlen].decode("utf-8")
            off += nlen
            (ndim,) = struct.unpack_from("<B", blob, off)
            off += 1
            shape = struct.unpack_from(f"<{ndim}I", blob, off)
            off += 4 * ndim
            n = int(np.prod(shape)) if ndim else 1
            arr = np.frombuffer(blob, dtype="<f8", count=n, offset=off).reshape(shape)
            off += 8 * n
            out[name] = arr.copy()
    except (struct.error, ValueError) as e:
        raise CheckpointFormatError(f"{path}: truncated or corrupt ({e})") from None
    if off != len(blob):
        raise CheckpointFormatError(f"{path}: {len(blob) - off} trailing bytes")
    return out


def load_into(model, state, prefix=""):
    """Copy checkpoint arrays into a model's parameters by name."""
    loaded = 0
    for name, p in model.parameters():
        key = prefix + name
        if key not in state:
            raise CheckpointFormatError(f"missing parameter '{key}' in checkpoint")
        arr = state[key]
        if arr.shape != p.data.shape:
            raise CheckpointFormatError(
                f"parameter '{key}' has shape {arr.shape}, model expects {p.data.shape}"
            )
        p.data = arr.astype(np.float64).copy()
        loaded += 1
    return loaded
