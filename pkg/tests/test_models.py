"""Network shape contracts, head isolation, baseline equivalence, checkpoints."""

import numpy as np
import pytest

from semgan import autodiff as ad
from semgan import models
from semgan.autodiff import Tensor


def _rand_input(shape, seed=0):
    return Tensor(np.random.default_rng(seed).normal(size=shape))


def test_generator_output_shape_and_range():
    g = models.Generator(4, width=8, num_residual=1, seed=0)
    s = _rand_input((2, 4, 32, 32))
    out = g(s)
    assert out.data.shape == (2, 3, 32, 32)
    assert out.data.min() > -1.0 and out.data.max() < 1.0


def test_generator_deterministic_forward():
    g = models.Generator(4, width=8, num_residual=1, seed=1)
    s = _rand_input((1, 4, 32, 32))
    assert np.array_equal(g(s).data, g(s).data)


def test_generator_channel_mismatch():
    g = models.Generator(4, width=8, num_residual=1)
    with pytest.raises(ad.ShapeError):
        g(_rand_input((1, 5, 32, 32)))


def test_generator_gradcheck_on_a_parameter():
    g = models.Generator(3, width=4, num_residual=1, seed=2)
    s = _rand_input((1, 3, 16, 16), seed=3)
    w = g.head.w

    def f(t):
        saved = w.data
        w.data = t.data
        w.requires_grad = t.requires_grad
        try:
            # rebuild graph against the probed tensor
            g.head.w = t
            return ad.tmean(g(s))
        finally:
            g.head.w = w
            w.data = saved

    report = ad.grad_check(f, w.data.copy(), step=1e-5, tolerance=1e-4)
    assert report.passed, report


def test_discriminator_channel_layout():
    d = models.SemanticDiscriminator(4, width=8, seed=0)
    out = d(_rand_input((2, 3, 32, 32)))
    assert out.adv.data.shape == (2, 5, 2, 2)  # K+1 maps at 1/16 resolution
    assert out.sem.data.shape == (2, 4, 2, 2)
    assert out.rec.data.shape == (2, 3, 2, 2)
    assert len(out.feats) == 4


def test_discriminator_halving_input_halves_outputs():
    d = models.SemanticDiscriminator(3, width=8, seed=0)
    big = d(_rand_input((1, 3, 64, 64)))
    small = d(_rand_input((1, 3, 32, 32)))
    assert big.adv.data.shape[2:] == (4, 4)
    assert small.adv.data.shape[2:] == (2, 2)


def test_head_separation_forward():
    d = models.SemanticDiscriminator(4, width=8, seed=0)
    x = _rand_input((1, 3, 32, 32))
    before = d(x)
    d.sem_head.w.data = d.sem_head.w.data + 1.0
    after = d(x)
    assert np.array_equal(before.adv.data, after.adv.data)
    assert np.array_equal(before.rec.data, after.rec.data)
    assert not np.array_equal(before.sem.data, after.sem.data)


def test_head_isolation_gradients():
    d = models.SemanticDiscriminator(4, width=8, seed=0)
    x = _rand_input((1, 3, 32, 32))
    out = d(x)
    ad.backward(ad.tmean(out.sem))
    adv_names = {n for n, _ in d.head_parameters("adv")}
    rec_names = {n for n, _ in d.head_parameters("rec")}
    for name, p in d.parameters():
        if name in adv_names or name in rec_names:
            assert p.grad is None, f"{name} should not receive semantic-head gradient"
    for name, p in d.trunk_parameters():
        assert p.grad is not None, f"trunk {name} must receive gradient from any head"


def test_baseline_single_channel_and_equivalence():
    base = models.build_baseline(width=8, seed=0)
    out = base(_rand_input((1, 3, 32, 32)))
    assert out.adv.data.shape == (1, 1, 2, 2)
    assert out.sem is None and out.rec is None

    # configured-down semantic discriminator shares trunk+adv init bitwise
    k0 = models.SemanticDiscriminator(0, width=8, with_sem=True, with_rec=True, seed=0)
    x = _rand_input((2, 3, 32, 32), seed=5)
    a, b = base(x), k0(x)
    assert np.array_equal(a.adv.data, b.adv.data)
    assert k0.sem_head is None  # no zero-channel head
    assert k0.rec_head is not None


def test_baseline_parameter_count_close_to_trunk():
    base = models.build_baseline(width=8)
    full = models.SemanticDiscriminator(4, width=8)
    n_base = models.parameter_count(base.parameters())
    n_trunk = models.parameter_count(base.trunk_parameters())
    n_head = n_base - n_trunk
    assert n_head == models.parameter_count(base.head_parameters("adv"))
    assert models.parameter_count(full.parameters()) > n_base


def test_capacity_report_widened_matches_delta():
    rep = models.capacity_report(4, width=8, num_scales=2)
    widened = models.MultiScaleDiscriminator(
        0, 2, 8, with_sem=False, with_rec=False, extra_adv_channels=rep["matched_extra_adv_channels"]
    )
    base = models.MultiScaleDiscriminator(0, 2, 8, with_sem=False, with_rec=False)
    got_delta = models.parameter_count(widened.parameters()) - models.parameter_count(base.parameters())
    assert got_delta == rep["delta"]
    assert rep["percent_increase"] > 0


def test_multiscale_resolutions_and_independence():
    ms = models.MultiScaleDiscriminator(3, num_scales=2, width=8, seed=0)
    outs = ms(_rand_input((1, 3, 64, 64)))
    assert [o.adv.data.shape[2:] for o in outs] == [(4, 4), (2, 2)]
    # per-scale parameters are independent draws
    w0 = ms.scales[0].adv_head.w.data
    w1 = ms.scales[1].adv_head.w.data
    assert not np.array_equal(w0, w1)
    # num_scales=1 reduces to the single forward
    one = models.MultiScaleDiscriminator(3, num_scales=1, width=8, seed=0)
    single = one.scales[0]
    x = _rand_input((1, 3, 32, 32), seed=2)
    assert np.array_equal(one(x)[0].adv.data, single(x).adv.data)


def test_featurenet_frozen_and_fixed_seed():
    f1 = models.FeatureNet(seed=7)
    f2 = models.FeatureNet(seed=7)
    x = _rand_input((2, 3, 32, 32))
    assert np.array_equal(f1.pooled(x), f2.pooled(x))
    for w, b in f1.convs:
        assert not w.requires_grad and not b.requires_grad
    assert f1.pooled(x).shape == (2, sum(f1.widths))


def test_checkpoint_roundtrip_bit_exact(tmp_path):
    g = models.Generator(4, width=8, num_residual=2, seed=3)
    path = tmp_path / "g.sdc"
    models.save_checkpoint(path, g.parameters())
    state = models.load_checkpoint(path)
    for name, p in g.parameters():
        assert np.array_equal(state[name], p.data)

    g2 = models.Generator(4, width=8, num_residual=2, seed=99)
    models.load_into(g2, state)
    x = _rand_input((1, 4, 32, 32))
    assert np.array_equal(g(x).data, g2(x).data)


def test_checkpoint_errors(tmp_path):
    path = tmp_path / "bad.sdc"
    path.write_bytes(b"XXXX\x00\x00\x00\x00")
    with pytest.raises(models.CheckpointFormatError, match="magic"):
        models.load_checkpoint(path)

    g = models.Generator(3, width=4, num_residual=1)
    good = tmp_path / "good.sdc"
    models.save_checkpoint(good, g.parameters())
    blob = good.read_bytes()
    (tmp_path / "trunc.sdc").write_bytes(blob[:-9])
    with pytest.raises(models.CheckpointFormatError):
        models.load_checkpoint(tmp_path / "trunc.sdc")
