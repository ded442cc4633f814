"""Model assembly: block composition, identity collapse, shape contracts,
parameter naming and checkpointing."""

import numpy as np
import pytest

from conftest import gradcheck
from vhunet.autodiff import Tensor
from vhunet.errors import ConfigError, DataError
from vhunet.hadamard import iht2d
from vhunet.layers import vgg_block
from vhunet.model import (
    ConvHtBlockParams, IhtrtbParams, VhuNet, VhuNetConfig, conv_ht_block,
    ihtrtb, zero_transformer_weights,
)


def test_presets_resolve():
    desk = VhuNetConfig.preset("desk")
    assert (desk.n_encoder, desk.base_channels, desk.height) == (3, 8, 32)
    full = VhuNetConfig.preset("full")
    assert (full.n_encoder, full.base_channels, full.height) == (6, 16, 256)
    full.validate()
    with pytest.raises(ConfigError):
        VhuNetConfig.preset("huge")


@pytest.mark.parametrize("extent", [256, 64])
def test_six_stage_extents_stay_powers_of_two(extent):
    cfg = VhuNetConfig.preset("full")
    cfg.height = cfg.width = extent
    cfg.validate()
    for i in range(cfg.n_encoder):
        stage = extent >> i
        assert stage >= 2 and (stage & (stage - 1)) == 0


def test_config_rejects_bad_shapes():
    with pytest.raises(ConfigError):
        VhuNetConfig(height=48, width=32).validate()
    with pytest.raises(ConfigError):
        VhuNetConfig(height=2, width=2, n_encoder=3).validate()
    with pytest.raises(ConfigError):
        VhuNetConfig(base_channels=6, heads=8, n_encoder=2).validate()


def test_config_text_round_trip():
    cfg = VhuNetConfig(height=64, width=32, xi=0.25)
    back = VhuNetConfig.from_text(cfg.to_text())
    assert back == cfg
    with pytest.raises(ConfigError):
        VhuNetConfig.from_text("volume = 11\n")


def test_block_with_identity_transform_is_two_vgg_blocks(rng):
    p = ConvHtBlockParams(rng, 1, 4, 8, 8, slope=0.01)
    x = Tensor(rng.normal(size=(1, 8, 8)))
    out = conv_ht_block(x, p, apply_inverse=True)
    expected = vgg_block(vgg_block(x, p.vgg1), p.vgg2)
    assert np.max(np.abs(out.data - expected.data)) <= 1e-9


def test_block_without_inverse_differs_by_exactly_one_inverse_transform(rng):
    p = ConvHtBlockParams(rng, 1, 4, 8, 8, slope=0.01)
    p.scaling.theta.data[...] = rng.uniform(0.5, 1.5, size=(8, 8))
    x = Tensor(rng.normal(size=(1, 8, 8)))
    stay = conv_ht_block(x, p, apply_inverse=False)
    back = conv_ht_block(x, p, apply_inverse=True)
    assert np.max(np.abs(iht2d(stay, p.plan).data - back.data)) <= 1e-9


def test_block_gradients_on_8x8(rng):
    p = ConvHtBlockParams(rng, 1, 2, 8, 8, slope=0.01)
    p.threshold.t_raw.data[...] = 0.05 * rng.uniform(size=(8, 8))
    x = Tensor(rng.normal(size=(1, 8, 8)), requires_grad=True)
    probe = rng.normal(size=(2, 8, 8))
    tensors = [x, p.vgg1.kernel, p.vgg2.gamma, p.scaling.theta]

    def f():
        return (conv_ht_block(x, p, apply_inverse=True) * probe).sum()

    gradcheck(f, tensors, rel=1e-5, max_per_tensor=8)


def test_bottleneck_with_zero_transformers_is_the_inverse_transform(rng):
    p = IhtrtbParams(rng, s=8, heads=2, h=4, w=4, slope=0.01)
    for _, t in p.tb1.named():
        t.data[...] = 0.0
    for _, t in p.tb2.named():
        t.data[...] = 0.0
    y = Tensor(rng.normal(size=(8, 4, 4)))
    out = ihtrtb(y, p)
    expected = iht2d(y, p.plan)
    assert np.max(np.abs(out.data - expected.data)) <= 1e-12


def test_bottleneck_preserves_shape(rng):
    p = IhtrtbParams(rng, s=8, heads=2, h=4, w=4, slope=0.01)
    out = ihtrtb(Tensor(rng.normal(size=(8, 4, 4))), p)
    assert out.shape == (8, 4, 4)
    batched = ihtrtb(Tensor(rng.normal(size=(3, 8, 4, 4))), p)
    assert batched.shape == (3, 8, 4, 4)


# -- the assembled network --------------------------------------------------------


def small_config():
    return VhuNetConfig(height=16, width=16, n_encoder=2, base_channels=4,
                        heads=2, hypernet_hidden=8)


def test_forward_shape_and_positivity(rng):
    model = VhuNet(small_config(), seed=1)
    x = rng.uniform(size=(1, 16, 16))
    field = model.forward(Tensor(x))
    assert field.shape == (1, 16, 16)
    assert np.all(field.data > 0)


def test_untrained_model_estimates_unit_field(rng):
    model = VhuNet(small_config(), seed=2)
    x = rng.uniform(0.1, 1.0, size=(1, 16, 16))
    field = model.forward(Tensor(x))
    # the head starts at zero, so exp(0) = 1 exactly everywhere
    assert np.array_equal(field.data, np.ones((1, 16, 16)))
    corrected, out_field = model.correct(Tensor(x))
    assert np.max(np.abs(corrected.data - x)) <= 1e-12
    assert np.array_equal(out_field.data, np.ones((1, 16, 16)))
    assert np.all(np.isfinite(corrected.data))


def test_forward_latent_shapes(rng):
    model = VhuNet(small_config(), seed=0)
    field, latent = model.forward_with_latent(Tensor(rng.uniform(size=(1, 16, 16))))
    assert field.shape == (1, 16, 16)
    assert latent.shape == (8, 8, 8)
    fields, latents = model.forward_with_latent(Tensor(rng.uniform(size=(3, 1, 16, 16))))
    assert fields.shape == (3, 1, 16, 16)
    assert latents.shape == (3, 8, 8, 8)


def test_batched_forward_matches_single_images(rng):
    model = VhuNet(small_config(), seed=3)
    stack = rng.uniform(0.1, 1.0, size=(3, 1, 16, 16))
    batched = model.forward(Tensor(stack))
    for i in range(3):
        single = model.forward(Tensor(stack[i]))
        assert np.max(np.abs(single.data - batched.data[i])) <= 1e-12


def test_forward_rejects_wrong_shapes(rng):
    model = VhuNet(small_config(), seed=0)
    with pytest.raises(DataError):
        model.forward(Tensor(rng.uniform(size=(1, 8, 8))))
    with pytest.raises(DataError):
        model.forward(Tensor(rng.uniform(size=(2, 16, 16))))


def test_identity_collapse_to_stripped_network(rng):
    model = VhuNet(small_config(), seed=4)
    zero_transformer_weights(model)
    x = Tensor(rng.uniform(size=(1, 16, 16)))
    full = model.forward(x)
    stripped = model.forward_stripped(x)
    assert np.max(np.abs(full.data - stripped.data)) <= 1e-9


def test_correct_round_trips_intensity_scale(rng):
    model = VhuNet(small_config(), seed=5)
    raw = rng.uniform(40.0, 900.0, size=(1, 16, 16))
    corrected, field = model.correct(Tensor(raw))
    lo, hi = raw.min(), raw.max()
    manual = (raw - lo) / (hi - lo) * field.data * (hi - lo) + lo
    assert np.max(np.abs(corrected.data - manual)) <= 1e-12
    with pytest.raises(DataError):
        model.correct(Tensor(np.full((1, 16, 16), 3.0)))


def test_parameter_names_follow_the_documented_namespace():
    model = VhuNet(small_config(), seed=0)
    names = set(model.named_parameters())
    assert "encoder.block1.vgg1.kernel" in names
    assert "encoder.block2.vgg2.gamma" in names
    assert "encoder.block1.ht.theta" in names
    assert "decoder.ihtrtb.tb1.attn.h0.wq" in names
    assert "decoder.ihtrtb.tb2.mlp.w2" in names
    assert "decoder.stage1.upconv.kernel" in names
    assert "decoder.stage1.vgg1.kernel" in names
    assert "hypernet.w3" in names
    assert "head.kernel" in names and "head.bias" in names
    assert model.n_parameters() == sum(p.size for p in model.named_parameters().values())


def test_skip_concatenation_channel_arithmetic():
    cfg = VhuNetConfig(height=32, width=32, n_encoder=3, base_channels=8, heads=4)
    model = VhuNet(cfg, seed=0)
    chans = cfg.stage_channels()
    assert chans == [8, 16, 32]
    for m, stage in enumerate(model.decoder):
        c_out = chans[cfg.n_encoder - 2 - m]
        # upsampled features and the skip tap contribute c_out channels each
        assert stage.block.vgg1.kernel.shape[1] == 2 * c_out
        assert stage.block.vgg1.kernel.shape[0] == c_out
        assert stage.upconv_kernel.shape[0] == c_out


def test_hypernet_vector_covers_two_modulations_per_stage():
    model = VhuNet(small_config(), seed=0)
    mods = model._modulations(model.config.xi)
    assert len(mods) == 2 * len(model.decoder)
    for (gamma, beta), c in zip(mods, model._mod_channels):
        assert gamma.shape == (c,) and beta.shape == (c,)
        assert np.array_equal(gamma.data, np.ones(c))
        assert np.array_equal(beta.data, np.zeros(c))


def test_checkpoint_round_trip(tmp_path, rng):
    model = VhuNet(small_config(), seed=6)
    for p in model.named_parameters().values():
        p.data += 0.01 * rng.normal(size=p.shape)
    path = tmp_path / "model.vhut"
    model.save(path)
    clone = VhuNet.load(path)
    assert clone.config == model.config
    for name, p in model.named_parameters().items():
        assert np.array_equal(clone.named_parameters()[name].data, p.data)
    x = Tensor(rng.uniform(size=(1, 16, 16)))
    assert np.array_equal(model.forward(x).data, clone.forward(x).data)


def test_checkpoint_rejects_missing_sidecar_and_mismatch(tmp_path):
    model = VhuNet(small_config(), seed=0)
    path = tmp_path / "model.vhut"
    model.save(path)
    (tmp_path / "model.vhut.cfg").unlink()
    with pytest.raises(DataError, match="sidecar"):
        VhuNet.load(path)

    other = VhuNet(VhuNetConfig(height=16, width=16, n_encoder=2,
                                base_channels=8, heads=2, hypernet_hidden=8), seed=0)
    other.save(tmp_path / "other.vhut")
    model.save(tmp_path / "model.vhut")
    blob = (tmp_path / "other.vhut.cfg").read_text()
    (tmp_path / "model.vhut.cfg").write_text(blob)
    with pytest.raises(DataError):
        VhuNet.load(tmp_path / "model.vhut")


def test_same_seed_builds_identical_models(rng):
    a = VhuNet(small_config(), seed=9)
    b = VhuNet(small_config(), seed=9)
    for name, p in a.named_parameters().items():
        assert np.array_equal(p.data, b.named_parameters()[name].data)
    x = Tensor(rng.uniform(size=(1, 16, 16)))
    assert np.array_equal(a.forward(x).data, b.forward(x).data)
