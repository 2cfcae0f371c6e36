import pytest
import torch
from tvt_sr.base.degradation import DegradationConfig, make_pairs
from tvt_sr.base.diffusion import default_schedule
from tvt_sr.base.lora import lora_parameters
from tvt_sr.base.metrics import MetricException
from tvt_sr.base.models_base import ShapeException, parameter_digest
from tvt_sr.base.ce_unet import build_ce_unet
from tvt_sr.base.sr import SrPipeline, ConditioningStub, bicubic_baseline, one_step_restore, evaluate_sr
from tvt_sr.training.common import Checkpointer
from tvt_sr.training.common import build_optimizer, frozen_digest, step_generator, TrainingLog, NonFiniteLossException
from tvt_sr.training.sr import (SrConfig, build_sr_models, generator_parameters, sample_pairs, sr_train_step,
                                train_sr, PHASE_SR)
from pydantic import ValidationError
from conftest import TINY_CE, TINY_UNET


@pytest.fixture
def stub():
    return ConditioningStub(TINY_UNET.context_tokens, TINY_UNET.context_dim, seed=3)


@pytest.fixture
def sr_config():
    return SrConfig(batch_size=2, total_steps=2, lambda_2=1e-3)


@pytest.fixture
def pairs(images):
    pairs, _ = make_pairs(images, DegradationConfig(), n=4, seed=0, crop_size=32)
    return pairs


def tiny_pipeline(vae, unet, stub) -> SrPipeline:
    return SrPipeline(vae, build_ce_unet(TINY_CE, unet), stub, default_schedule())


def test_bicubic_baseline_shapes():
    assert bicubic_baseline(torch.rand(3, 8, 8)).shape == (3, 32, 32)
    assert bicubic_baseline(torch.rand(2, 3, 8, 8), scale=2).shape == (2, 3, 16, 16)


def test_pipeline_restores_at_four_times_the_input(tiny_d4, tiny_unet, stub):
    pipeline = tiny_pipeline(tiny_d4, tiny_unet, stub)
    lr = torch.rand(3, 8, 8)
    sr = pipeline(lr)

    assert pipeline.input_multiple == 8
    assert sr.shape == (3, 32, 32)
    assert float(sr.min()) >= 0.0 and float(sr.max()) <= 1.0
    assert torch.equal(sr, pipeline(lr))
    assert pipeline(lr.unsqueeze(0)).shape == (1, 3, 32, 32)


def test_pipeline_rejects_non_multiple_inputs(tiny_d4, tiny_unet, stub):
    pipeline = tiny_pipeline(tiny_d4, tiny_unet, stub)
    with pytest.raises(ShapeException):
        pipeline(torch.rand(3, 12, 8))
    with pytest.raises(ShapeException):
        pipeline.check_lr(torch.rand(2, 1, 8, 8))


def test_one_step_restore_rejects_timestep_outside_schedule(tiny_d4, tiny_unet, stub):
    ce_unet = build_ce_unet(TINY_CE, tiny_unet)
    with pytest.raises(ShapeException):
        one_step_restore(tiny_d4, ce_unet, torch.zeros(1, 3, 32, 32), stub(1), default_schedule(), t=1000)


def test_conditioning_stub_is_shared_across_batch(stub):
    context = stub(3)
    assert context.shape == (3, TINY_UNET.context_tokens, TINY_UNET.context_dim)
    assert torch.equal(context[0], context[2])


def test_sr_config_validation():
    with pytest.raises(ValidationError):
        SrConfig(t=1000)


def test_build_sr_models_copies_the_base(tiny_d4, tiny_unet, stub, sr_config):
    before = parameter_digest(tiny_unet)
    models = build_sr_models(tiny_d4, tiny_unet, TINY_CE, stub, sr_config)

    assert models.eps_pretrained is not tiny_unet and models.eps_lora is not tiny_unet
    assert list(lora_parameters(models.eps_lora))
    assert not list(lora_parameters(models.eps_pretrained))
    with torch.no_grad():
        for param in generator_parameters(models):
            param.add_(1.0)
    assert parameter_digest(tiny_unet) == before


def test_sr_train_step_updates_only_trainable_parts(tiny_d4, tiny_unet, stub, sr_config, pairs, feature_net):
    models = build_sr_models(tiny_d4, tiny_unet, TINY_CE, stub, sr_config)
    frozen_before = frozen_digest(*models.frozen_modules())
    replicas_before = parameter_digest(models.ce_unet.front, models.ce_unet.back)
    stub_before = stub.embedding.detach().clone()
    lora_before = [param.detach().clone() for _, param in lora_parameters(models.eps_lora)]

    optimizer = build_optimizer(generator_parameters(models), sr_config.optimizer)
    reg_optimizer = build_optimizer((param for _, param in lora_parameters(models.eps_lora)), sr_config.optimizer)
    generator = step_generator(0, PHASE_SR, 0)
    lr, hr = sample_pairs(pairs, list(range(4)), 2, generator)
    report = sr_train_step(models, lr, hr, sr_config, feature_net, optimizer, reg_optimizer, generator)

    assert report.l1 > 0.0 and report.reg > 0.0
    assert frozen_digest(*models.frozen_modules()) == frozen_before
    assert parameter_digest(models.ce_unet.front, models.ce_unet.back) != replicas_before
    assert not torch.equal(stub.embedding, stub_before)
    assert any(not torch.equal(param, before)
               for (_, param), before in zip(lora_parameters(models.eps_lora), lora_before))


def test_train_sr_logs_every_step(tiny_d4, tiny_unet, stub, sr_config, pairs, feature_net):
    models = build_sr_models(tiny_d4, tiny_unet, TINY_CE, stub, sr_config)
    log = TrainingLog()
    reports = train_sr(models, pairs, list(range(4)), sr_config, 0, feature_net, log)

    assert len(reports) == 2
    assert [record['step'] for record in log.phase_records(PHASE_SR)] == [0, 1]


def test_train_sr_stops_on_non_finite_score(tiny_d4, tiny_unet, stub, pairs, feature_net, tmp_path):
    config = SrConfig(batch_size=2, total_steps=2, checkpoint_every=1, lambda_2=1e-3)
    models = build_sr_models(tiny_d4, tiny_unet, TINY_CE, stub, config)
    calls = []

    def nan_after_first_step(module, inputs, output):
        calls.append(1)
        return torch.full_like(output, float('nan')) if len(calls) > 1 else output

    models.eps_pretrained.register_forward_hook(nan_after_first_step)
    checkpointer = Checkpointer(tmp_path, PHASE_SR, 'sr', 'h')
    with pytest.raises(NonFiniteLossException) as exc_info:
        train_sr(models, pairs, list(range(4)), config, 0, feature_net, checkpointer=checkpointer)

    assert exc_info.value.last_checkpoint == checkpointer.path(1)
    assert f'{PHASE_SR} step 1' in str(exc_info.value)
    assert 'VSD term' in str(exc_info.value)


def test_evaluate_sr(tiny_d4, tiny_unet, stub, pairs, feature_net):
    pipeline = tiny_pipeline(tiny_d4, tiny_unet, stub)
    evaluation = evaluate_sr(pipeline, pairs[:2], feature_net=feature_net)

    assert evaluation.names == ['000000', '000001']
    assert len(evaluation.per_image) == 2
    assert [record.name for record in evaluation.records] == ['psnr_y', 'ssim_y', 'perceptual']
    assert all(record.count == 2 for record in evaluation.baseline_records)
    with pytest.raises(MetricException):
        evaluate_sr(pipeline, [])
