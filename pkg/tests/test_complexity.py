import pytest
import torch
from tvt_sr.base.catalog import preset
from tvt_sr.base.specs import Conv2dSpec, PipelineSpec
from tvt_sr.base.vae import build_vae
from tvt_sr.base.unet import build_unet
from tvt_sr.base.ce_unet import build_ce_unet
from tvt_sr.base.complexity import (audit, vae_cost, count_params, count_flops, reduction_report, reduction_pct,
                                    published_crosscheck, MacCounter, CostReport, LayerCost)
from conftest import TINY_D4, TINY_D8, TINY_UNET, TINY_CE


def module_params(model: torch.nn.Module) -> int:
    return sum(param.numel() for param in model.parameters())


def test_single_conv_audit():
    report = audit(Conv2dSpec(in_channels=4, out_channels=8, kernel_size=3), 16)
    assert report.params == 3 * 3 * 4 * 8 + 8
    assert report.macs == 3 * 3 * 4 * 8 * 16 * 16
    assert report.flops == 2 * report.macs


def test_strided_conv_audit():
    report = audit(Conv2dSpec(in_channels=4, out_channels=8, kernel_size=3, stride=2, bias=False), 16)
    assert report.params == 3 * 3 * 4 * 8
    assert report.macs == 3 * 3 * 4 * 8 * 8 * 8


def test_audit_rejects_unknown_types():
    with pytest.raises(TypeError):
        audit(object())


def test_vae_parameter_counts():
    assert count_params(preset('d8')) == 83_653_863
    assert count_params(preset('d4')) == 15_162_343


def test_vae_reductions():
    reduction = reduction_report(audit(preset('d8'), 512), audit(preset('d4'), 512))
    assert reduction.params_pct == pytest.approx(81.875, abs=0.01)
    assert reduction.macs_pct == pytest.approx(37.42, abs=0.05)


def test_denoiser_costs_at_128():
    base = audit(preset('sd21-unet'), 128)
    ce = audit(preset('ce-sd21'), 128)
    assert base.macs / 1e9 == pytest.approx(1350.43, rel=1e-3)
    assert ce.macs / 1e9 == pytest.approx(731.8, rel=1e-3)
    assert reduction_pct(base.macs, ce.macs) > 40.0


def test_tvt_pipeline_cost():
    assert audit(preset('tvt')).macs / 1e9 == pytest.approx(1846.5, rel=1e-3)


def test_pipeline_cost_is_sum_of_parts():
    spec = preset('toy-tvt')
    report = audit(spec)
    parts = (vae_cost(spec.vae, spec.output_resolution, 'encoder').macs
             + audit(spec.ce_unet, spec.latent_resolution).macs
             + vae_cost(spec.vae, spec.output_resolution, 'decoder').macs)
    assert report.macs == parts
    assert vae_cost(spec.vae, 64, 'roundtrip').macs == (vae_cost(spec.vae, 64, 'encoder').macs
                                                        + vae_cost(spec.vae, 64, 'decoder').macs)


def test_flops_scale_with_resolution():
    unet = preset('toy-unet')
    assert count_flops(unet, 16) > 3 * count_flops(unet, 8)


def test_d4_pipeline_beats_d8_pipeline_per_output_pixel():
    assert audit(preset('tvt')).macs < audit(preset('s4')).macs


@pytest.mark.parametrize('spec', [TINY_D4, TINY_D8, TINY_D8.model_copy(update={'skip_connections': True})])
def test_static_vae_audit_matches_instrumented_count(spec):
    vae = build_vae(spec, seed=0)
    with MacCounter(vae) as counter, torch.no_grad():
        vae(torch.zeros(1, 3, 32, 32))
    report = audit(spec, 32)

    assert module_params(vae) == report.params
    assert counter.macs == report.macs
    assert counter.attention_macs == report.attention_macs


def test_static_unet_audit_matches_instrumented_count():
    unet = build_unet(TINY_UNET, seed=0)
    context = torch.zeros(1, TINY_UNET.context_tokens, TINY_UNET.context_dim)
    with MacCounter(unet) as counter, torch.no_grad():
        unet(torch.zeros(1, 4, 8, 8), 1, context)
    report = audit(TINY_UNET, 8)

    assert module_params(unet) == report.params
    assert counter.macs == report.macs


def test_static_ce_unet_audit_matches_instrumented_count():
    model = build_ce_unet(TINY_CE, build_unet(TINY_UNET, seed=0))
    context = torch.zeros(1, TINY_UNET.context_tokens, TINY_UNET.context_dim)
    with MacCounter(model) as counter, torch.no_grad():
        model(torch.zeros(1, 4, 16, 16), 1, context)
    report = audit(TINY_CE, 16)

    assert module_params(model) == report.params
    assert counter.macs == report.macs


def test_mac_counter_detaches_hooks(tiny_d4):
    with MacCounter(tiny_d4) as counter, torch.no_grad():
        tiny_d4(torch.zeros(1, 3, 32, 32))
    macs = counter.macs
    with torch.no_grad():
        tiny_d4(torch.zeros(1, 3, 32, 32))
    assert counter.macs == macs


def test_cost_report_aggregates():
    report = CostReport([LayerCost('a', 'conv', 10, 100), LayerCost('b', 'attention', 0, 0, 50),
                         LayerCost('c', 'conv', 5, 20)])
    assert report.params == 15
    assert report.flops == 2 * 170
    assert report.by_kind() == {'conv': (15, 120), 'attention': (0, 50)}
    assert [layer.name for layer in report.prefixed('x.')] == ['x.a', 'x.b', 'x.c']
    assert report.summary()['flops'] == 340


def test_published_crosscheck_is_close():
    rows = published_crosscheck()
    by_item = {(row.item, row.metric): row for row in rows}

    assert abs(by_item[('VAE-D8', 'params (M)')].delta_pct) < 1.0
    assert abs(by_item[('VAE-D4', 'params (M)')].delta_pct) < 1.0
    assert abs(by_item[('UNet at 128x128 latent', 'MACs (T)')].delta_pct) < 1.0


def test_pipeline_resolution_must_match_vae_factor():
    with pytest.raises(ValueError):
        PipelineSpec(vae=TINY_D4, ce_unet=TINY_CE, output_resolution=30)


def test_skip_connections_add_little_to_the_d8_pipeline():
    s1, s2 = audit(preset('s1')), audit(preset('s2'))
    skip_layers = [layer for layer in s2 if '.skip_convs.' in layer.name]

    assert len(skip_layers) == 4
    assert s2.macs == s1.macs + sum(layer.macs for layer in skip_layers)
    assert s2.macs / 1e12 == pytest.approx(s1.macs / 1e12, rel=0.02)

    rows = {row.item: row for row in published_crosscheck() if row.metric == 'MACs (T)'}
    assert rows['pipeline s2'].published == pytest.approx(2.27)
    assert rows['pipeline s2'].audited == pytest.approx(s2.macs / 1e12)
