import numpy as np
import pytest
import torch
from sklearn.base import clone

from helpers import MINI_DISC, MINI_GEN, KinkProbe, gradient_check, mini_phi
from vis2therm.exceptions import ShapeError
from vis2therm.gan import (
    RRDB,
    DenseBlock,
    DiscriminatorConfig,
    GanLossTerms,
    Generator,
    GeneratorConfig,
    MultiScaleDiscriminator,
    adversarial_loss,
    discriminator_loss,
    generator_loss,
    mae_loss,
    normalization_layers,
)
from vis2therm.toy import render_arrays
from vis2therm.translator import (
    GanHyperParams,
    ThermalTranslator,
    fit_pairs,
    init_state,
    load_gan_state,
    save_gan_checkpoint,
)

SMALL_GEN = GeneratorConfig(base_channels=8, num_rrdb=1, growth_rate=4)


def test_dense_block_channel_arithmetic():
    block = DenseBlock(64, growth_rate=32, num_convs=5)
    assert block.layer_input_channels == [64, 96, 128, 160, 192]
    assert block(torch.randn(1, 64, 5, 7)).shape == (1, 64, 5, 7)


def test_dense_block_zero_fusion_gives_zero():
    block = DenseBlock(4, 2, 3)
    with torch.no_grad():
        block.fusion.weight.zero_()
        block.fusion.bias.zero_()
    assert torch.count_nonzero(block(torch.randn(2, 4, 6, 6))) == 0


def test_dense_block_channel_mismatch():
    with pytest.raises(ShapeError):
        DenseBlock(4, 2, 3)(torch.randn(1, 5, 4, 4))


def test_rrdb_beta_zero_is_identity():
    block = RRDB(8, 4, beta=0.0)
    x = torch.randn(2, 8, 9, 11)
    assert torch.equal(block(x), x)


def test_rrdb_default_beta_finite():
    block = RRDB(16, 8)
    y = block(torch.randn(1, 16, 8, 8))
    assert y.shape == (1, 16, 8, 8) and torch.isfinite(y).all()


@pytest.mark.parametrize("size", [(64, 64), (32, 48), (128, 96)])
def test_generator_preserves_shape(size):
    gen = Generator(SMALL_GEN).eval()
    with torch.no_grad():
        out = gen(torch.rand(1, 3, *size))
    assert out.shape == (1, 1, *size)
    assert out.min() >= 0 and out.max() <= 1


def test_generator_full_resolution_shape():
    gen = Generator(GeneratorConfig(base_channels=8, num_rrdb=1, growth_rate=4)).eval()
    with torch.no_grad():
        assert gen(torch.rand(1, 3, 512, 640)).shape == (1, 1, 512, 640)


def test_generator_rejects_indivisible():
    with pytest.raises(ShapeError, match="divisible by 4"):
        Generator(SMALL_GEN)(torch.rand(1, 3, 63, 64))


def test_default_generator_has_no_normalization():
    gen = Generator()
    assert len(gen.trunk) == 5
    assert all(len(rrdb.blocks) == 4 for rrdb in gen.trunk)
    assert normalization_layers(gen) == []
    assert normalization_layers(MultiScaleDiscriminator()) == []
    assert normalization_layers(torch.nn.Sequential(torch.nn.BatchNorm2d(3))) != []


@pytest.mark.parametrize("kwargs", [{"residual_scale": 1.5}, {"downsample_factor": 3}, {"convs_per_dense_block": 0}])
def test_generator_config_validation(kwargs):
    with pytest.raises(ValueError):
        GeneratorConfig(**kwargs)


def test_discriminator_feature_counts():
    cfg = DiscriminatorConfig()
    assert [cfg.features_at(d) for d in range(1, 6)] == [64, 128, 256, 512, 1024]


def test_discriminator_single_scale_map_size():
    disc = MultiScaleDiscriminator(DiscriminatorConfig(num_scales=1))
    (score,) = disc(torch.rand(1, 1, 64, 64))
    assert score.shape == (1, 1, 2, 2)


def test_discriminator_scales_and_determinism():
    disc = MultiScaleDiscriminator(DiscriminatorConfig(base_features=8)).eval()
    x = torch.rand(2, 1, 128, 128)
    a, b = disc(x), disc(x)
    assert [s.shape[-1] for s in a] == [4, 2, 1]
    assert all(torch.equal(p, q) for p, q in zip(a, b))


def test_discriminator_rejects_small_input():
    with pytest.raises(ShapeError):
        MultiScaleDiscriminator(DiscriminatorConfig(base_features=8))(torch.rand(1, 1, 64, 64))


def _maps(value, shapes=((1, 1, 4, 4), (1, 1, 2, 2))):
    return [torch.full(s, float(value)) for s in shapes]


def test_discriminator_loss_examples():
    assert discriminator_loss(_maps(1.0), _maps(0.0)).item() == 0.0
    assert discriminator_loss(_maps(0.5), _maps(0.5)).item() == pytest.approx(0.25, abs=1e-12)
    assert discriminator_loss(_maps(0.0), _maps(1.0)).item() == pytest.approx(1.0, abs=1e-12)


def test_discriminator_loss_structure_mismatch():
    with pytest.raises(ShapeError):
        discriminator_loss(_maps(1.0), _maps(0.0, shapes=((1, 1, 4, 4),)))


def test_generator_loss_identities():
    real = torch.rand(2, 1, 16, 16)
    phi = mini_phi()
    terms = generator_loss(_maps(1.0), real, real.clone(), lambda r, f: phi.distance(r.double(), f.double()))
    assert terms.adversarial.item() == 0.0
    assert terms.mae.item() == 0.0
    assert terms.perceptual.item() == 0.0


def test_generator_loss_total_is_sum():
    torch.manual_seed(0)
    real, fake = torch.rand(2, 1, 16, 16), torch.rand(2, 1, 16, 16)
    phi = mini_phi()
    terms = generator_loss(_maps(0.3), real, fake, lambda r, f: phi.distance(r.double(), f.double()).float())
    parts = np.float32(terms.adversarial.item()) + np.float32(terms.mae.item()) + np.float32(terms.perceptual.item())
    assert abs(np.float32(terms.total.item()) - parts) <= np.spacing(parts)
    assert all(v >= 0 for v in terms.as_floats().values())


def test_adversarial_targets_real_label():
    assert adversarial_loss(_maps(1.0)).item() == 0.0
    assert adversarial_loss(_maps(0.0)).item() == pytest.approx(0.5)


def test_mae_shape_mismatch():
    with pytest.raises(ShapeError):
        mae_loss(torch.zeros(1, 1, 4, 4), torch.zeros(1, 1, 4, 5))


def test_gradient_check_each_term():
    torch.manual_seed(0)
    gen = Generator(MINI_GEN).double()
    disc = MultiScaleDiscriminator(MINI_DISC).double()
    phi = mini_phi(1)
    x = torch.rand(2, 3, 16, 16, dtype=torch.float64)
    y = torch.rand(2, 1, 16, 16, dtype=torch.float64)
    probe = KinkProbe(gen, disc, phi)
    terms = {
        "adversarial": (lambda: adversarial_loss(disc(gen(x))), None),
        "mae": (lambda: mae_loss(y, gen(x)), lambda: y - gen(x)),
        "perceptual": (lambda: phi.distance(y, gen(x)), None),
    }
    params = list(gen.parameters())
    for name, (fn, extra) in terms.items():
        err, checked, skipped = gradient_check(fn, params, probe, extra)
        assert err <= 1e-3, name
        assert checked >= 3 * skipped, name
    probe.close()


def _tiny_state(seed=0, max_steps=6):
    hyper = GanHyperParams(epochs=100, max_steps=max_steps, batch_size=2, seed=seed)
    return init_state(SMALL_GEN, DiscriminatorConfig(base_features=4, num_scales=1), hyper)


def test_training_logs_every_step():
    vis, th, _, _ = render_arrays(4, seed=0, height=32, width=32)
    state = fit_pairs(_tiny_state(), vis, th)
    assert [r["step"] for r in state.loss_history] == list(range(1, 7))
    assert set(state.loss_history[0]) == {"step", "adversarial", "mae", "perceptual", "total", "discriminator"}


def test_resume_matches_uninterrupted(tmp_path):
    vis, th, _, _ = render_arrays(6, seed=0, height=32, width=32)
    full = fit_pairs(_tiny_state(max_steps=8), vis, th)
    part = fit_pairs(_tiny_state(max_steps=5), vis, th)
    save_gan_checkpoint(part, tmp_path / "gan.ckpt")
    resumed = load_gan_state(tmp_path / "gan.ckpt", GanHyperParams(epochs=100, max_steps=8, batch_size=2, seed=0))
    fit_pairs(resumed, vis, th)
    assert resumed.loss_history[5:] == full.loss_history[5:]


def test_translator_estimator_api():
    est = ThermalTranslator(base_channels=8, num_rrdb=1, growth_rate=4, disc_base_features=4, disc_scales=1, max_steps=2)
    assert clone(est).get_params()["base_channels"] == 8
    vis, th, _, _ = render_arrays(2, seed=0, height=32, width=32)
    out = est.fit(vis, th).transform(vis)
    assert out.shape == (2, 1, 32, 32)
    assert len(est.loss_history_) == 2
    with pytest.raises(ShapeError):
        est.fit(vis, th[:, :, :16])


def test_loss_terms_dataclass():
    t = GanLossTerms(torch.tensor(1.0), torch.tensor(2.0), torch.tensor(3.0), torch.tensor(6.0))
    assert t.as_floats() == {"adversarial": 1.0, "mae": 2.0, "perceptual": 3.0, "total": 6.0}
