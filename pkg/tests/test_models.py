import pytest
import torch
from torch import nn
from pydantic import ValidationError
from tvt_sr.base.models_base import ShapeException, ModelException, to_signed, to_unit, parameter_digest
from tvt_sr.base.specs import VaeSpec, UnetSpec, CeUnetSpec, PipelineSpec, LoraConfig
from tvt_sr.base.catalog import preset, preset_tags, PresetKind, CatalogException
from tvt_sr.base.vae import build_vae, DiagonalGaussian, kl_divergence
from tvt_sr.base.unet import build_unet
from tvt_sr.base.lora import LoraLinear, lora_apply, inject_lora, zero_lora, lora_parameters
from tvt_sr.base.ce_unet import build_ce_unet, parameter_groups, trainable_parameters
from conftest import TINY_D4, TINY_D8, TINY_UNET, TINY_CE, central_differences


def context_for(spec: UnetSpec, batch: int) -> torch.Tensor:
    return torch.randn(batch, spec.context_tokens, spec.context_dim)


#
# Specs and catalog
#
def test_vae_spec_requires_matching_stage_count():
    with pytest.raises(ValidationError, match='downsample_factor'):
        VaeSpec(downsample_factor=4, stage_channels=(8, 16, 16, 16))


def test_vae_spec_rejects_unknown_field():
    with pytest.raises(ValidationError):
        VaeSpec(downsample_factor=4, stage_channels=(8, 16, 16), channel_mult=2)


def test_ce_unet_spec_depth_within_level():
    with pytest.raises(ValidationError, match='replica_depth'):
        CeUnetSpec(base=TINY_UNET, replica_depth=2)


def test_pipeline_spec_requires_single_denoiser():
    with pytest.raises(ValidationError, match='Exactly one'):
        PipelineSpec(vae=TINY_D4, unet=TINY_UNET, ce_unet=TINY_CE)
    with pytest.raises(ValidationError, match='Exactly one'):
        PipelineSpec(vae=TINY_D4)


def test_spec_hash_is_stable_and_sensitive():
    assert TINY_D4.spec_hash() == VaeSpec.model_validate(TINY_D4.model_dump()).spec_hash()
    assert TINY_D4.spec_hash() != TINY_D4.model_copy(update={'blocks_per_stage': 2}).spec_hash()


def test_catalog_presets():
    assert {'d8', 'd4', 'd8-sc', 'toy-d8', 'toy-d4'} <= preset_tags(PresetKind.VAE)
    assert {'s1', 's2', 's3', 's4', 's5', 'tvt', 'toy-tvt'} <= preset_tags(PresetKind.PIPELINE)
    assert {'toy', 'paper'} <= preset_tags(PresetKind.EXPERIMENT)
    assert preset('d4').downsample_factor == 4
    # Every call returns a new instance
    assert preset('tvt') is not preset('tvt')


def test_catalog_rejects_wrong_kind():
    with pytest.raises(CatalogException):
        preset('d4', PresetKind.UNET)
    with pytest.raises(CatalogException):
        preset('no-such-preset')


#
# VAE
#
@pytest.mark.parametrize('spec, factor', [(TINY_D8, 8), (TINY_D4, 4)])
def test_vae_latent_shape(spec, factor):
    vae = build_vae(spec, seed=0)
    image = torch.rand(2, 3, 32, 32) * 2 - 1
    with torch.no_grad():
        latent = vae.encode(image)
        output = vae.decode(latent)

    assert latent.shape == (2, spec.latent_channels, 32 // factor, 32 // factor)
    assert output.shape == image.shape


def test_vae_rejects_indivisible_input(tiny_d4):
    with pytest.raises(ShapeException):
        tiny_d4.encode(torch.zeros(1, 3, 30, 32))
    with pytest.raises(ShapeException):
        tiny_d4.decode(torch.zeros(1, 3, 8, 8))


def test_vae_seeded_build_is_deterministic():
    assert parameter_digest(build_vae(TINY_D4, seed=5)) == parameter_digest(build_vae(TINY_D4, seed=5))
    assert parameter_digest(build_vae(TINY_D4, seed=5)) != parameter_digest(build_vae(TINY_D4, seed=6))


def test_vae_mean_encode_is_deterministic(tiny_d4):
    image = torch.rand(1, 3, 32, 32) * 2 - 1
    with torch.no_grad():
        assert torch.equal(tiny_d4.encode(image), tiny_d4.encode(image))
        sample_a = tiny_d4.encode(image, sample=True, generator=torch.Generator().manual_seed(3))
        sample_b = tiny_d4.encode(image, sample=True, generator=torch.Generator().manual_seed(3))
    assert torch.equal(sample_a, sample_b)


def test_standard_normal_posterior_has_zero_kl():
    gaussian = DiagonalGaussian(torch.zeros(2, 4, 3, 3), torch.zeros(2, 4, 3, 3))
    assert float(kl_divergence(gaussian)) == pytest.approx(0.0, abs=1e-12)


def test_vae_skip_connections_start_closed():
    spec = TINY_D8.model_copy(update={'skip_connections': True})
    vae = build_vae(spec, seed=0)
    image = torch.rand(1, 3, 32, 32) * 2 - 1
    with torch.no_grad():
        # Without encoder features the decoder ignores its skip convs
        plain = vae.decode(vae.encode(image))
        assert len(vae.decoder.skip_convs) == spec.num_stages
        assert torch.allclose(vae(image), plain, atol=1e-6)

        for conv in vae.decoder.skip_convs:
            conv.bias.fill_(0.1)
        assert not torch.allclose(vae(image), plain, atol=1e-3)
        assert torch.equal(vae.decode(vae.encode(image)), plain)

    with pytest.raises(ShapeException, match='skip features'):
        vae.decode(torch.zeros(1, 4, 4, 4), [torch.zeros(1, 8, 32, 32)])


def test_vae_parameter_gradients_match_central_differences():
    spec = VaeSpec(downsample_factor=4, stage_channels=(4, 4, 4), blocks_per_stage=1, base_resolution=8,
                   norm_groups=2)
    vae = build_vae(spec, seed=0).double()
    params = list(vae.parameters())
    assert sum(param.numel() for param in params) <= 5000
    image = torch.rand(1, 3, 8, 8, dtype=torch.float64, generator=torch.Generator().manual_seed(0)) * 2 - 1

    def reconstruction_loss():
        return ((vae.decode(vae.encode(image)) - image) ** 2).mean()

    reconstruction_loss().backward()

    offsets = torch.cumsum(torch.tensor([0] + [param.numel() for param in params]), dim=0)
    picks = torch.randperm(int(offsets[-1]), generator=torch.Generator().manual_seed(1))[:20].tolist()
    for pick in picks:
        index = int(torch.searchsorted(offsets, pick, right=True)) - 1
        param, local = params[index], pick - int(offsets[index])
        numeric = central_differences(reconstruction_loss, param, [local])
        analytic = param.grad.reshape(-1)[local].to(torch.float64)
        assert torch.allclose(analytic, numeric[0], rtol=1e-4, atol=1e-8), f'parameter {index} entry {local}'


def test_signed_unit_mapping():
    image = torch.tensor([0.0, 0.25, 1.0])
    assert torch.allclose(to_signed(image), torch.tensor([-1.0, -0.5, 1.0]))
    assert torch.allclose(to_unit(to_signed(image)), image)
    assert torch.equal(to_unit(torch.tensor([-3.0, 3.0])), torch.tensor([0.0, 1.0]))


#
# UNet
#
def test_unet_preserves_shape(tiny_unet):
    sample = torch.randn(2, 4, 8, 8)
    with torch.no_grad():
        output = tiny_unet(sample, 10, context_for(TINY_UNET, 2))
    assert output.shape == sample.shape


def test_unet_rejects_non_multiple_input(tiny_unet):
    with pytest.raises(ShapeException):
        tiny_unet(torch.randn(1, 4, 6, 6), 10, context_for(TINY_UNET, 1))


#
# LoRA
#
def test_lora_apply_matches_closed_form():
    torch.manual_seed(7)
    base = nn.Linear(6, 5).double()
    lora_a, lora_b = torch.randn(3, 6, dtype=torch.float64), torch.randn(5, 3, dtype=torch.float64)
    x = torch.randn(4, 6, dtype=torch.float64)

    expected = x @ base.weight.T + base.bias + (2.0 / 3) * (x @ lora_a.T @ lora_b.T)
    assert torch.allclose(lora_apply(base, (lora_a, lora_b), x, alpha=2.0), expected, atol=1e-12)


def test_lora_apply_rejects_mismatched_pair():
    base = nn.Linear(6, 5)
    with pytest.raises(ModelException, match='rank mismatch'):
        lora_apply(base, (torch.randn(3, 6), torch.randn(5, 2)), torch.randn(1, 6))
    with pytest.raises(ModelException, match='does not conform'):
        lora_apply(base, (torch.randn(3, 7), torch.randn(5, 3)), torch.randn(1, 6))


def test_lora_linear_starts_as_identity():
    base = nn.Linear(8, 8)
    wrapped = LoraLinear(base, rank=2, alpha=2.0, generator=torch.Generator().manual_seed(0))
    x = torch.randn(3, 8)
    assert torch.equal(wrapped(x), base(x))


def test_inject_lora_targets_attention_projections(tiny_unet):
    names = inject_lora(tiny_unet, LoraConfig(rank=2), torch.Generator().manual_seed(0))

    assert names
    assert all(name.split('.')[-1] in LoraConfig().targets for name in names)
    assert len(list(lora_parameters(tiny_unet))) == 2 * len(names)


def test_zero_lora_restores_base_output(tiny_unet):
    sample, context = torch.randn(1, 4, 8, 8), context_for(TINY_UNET, 1)
    with torch.no_grad():
        reference = tiny_unet(sample, 5, context)
        inject_lora(tiny_unet, LoraConfig(rank=2), torch.Generator().manual_seed(0))
        for _, param in lora_parameters(tiny_unet):
            param.add_(0.1)
        assert not torch.allclose(tiny_unet(sample, 5, context), reference)
        zero_lora(tiny_unet)
        assert torch.allclose(tiny_unet(sample, 5, context), reference)


#
# CE-UNet
#
def test_ce_unet_preserves_shape(tiny_unet):
    model = build_ce_unet(TINY_CE, tiny_unet)
    z = torch.randn(2, 4, 16, 16)
    with torch.no_grad():
        output = model(z, 1, context_for(TINY_UNET, 2))
    assert output.shape == z.shape


@pytest.mark.parametrize('size', [12, 9])
def test_ce_unet_rejects_bad_input_dims(tiny_unet, size):
    model = build_ce_unet(TINY_CE, tiny_unet)
    with pytest.raises(ShapeException):
        model(torch.randn(1, 4, size, size), 1, context_for(TINY_UNET, 1))


def test_ce_unet_leaves_base_weights_untouched(tiny_unet):
    before = parameter_digest(tiny_unet)
    model = build_ce_unet(TINY_CE, tiny_unet)
    with torch.no_grad():
        for param in model.parameters():
            param.add_(1.0)

    assert parameter_digest(tiny_unet) == before


def test_ce_unet_parameter_groups(tiny_unet):
    model = build_ce_unet(TINY_CE, tiny_unet)
    groups = parameter_groups(model)

    assert sum(len(group) for group in groups.values()) == len(list(model.parameters()))
    assert all(groups[name] for name in ('replicas', 'adapters', 'lora', 'base'))
    assert not any(param.requires_grad for param in groups['base'].values())
    trainable = trainable_parameters(model)
    assert set(trainable) == {'replicas', 'adapters', 'lora'}
    assert all(param.requires_grad for group in trainable.values() for param in group.values())


def test_ce_unet_rejects_incompatible_base():
    other = build_unet(TINY_UNET.model_copy(update={'context_dim': 16}), seed=0)
    with pytest.raises(ModelException, match='incompatible'):
        build_ce_unet(TINY_CE, other)


def test_ce_unet_build_is_deterministic(tiny_unet):
    assert parameter_digest(build_ce_unet(TINY_CE, tiny_unet)) == parameter_digest(build_ce_unet(TINY_CE, tiny_unet))


def test_toy_presets_build():
    vae = build_vae(preset('toy-d4'), seed=0)
    unet = build_unet(preset('toy-unet'), seed=0)
    ce = build_ce_unet(preset('toy-ce'), unet)
    assert vae.factor == 4
    assert ce.spec.input_multiple == 8
    assert TINY_D8.downsample_factor == 8
