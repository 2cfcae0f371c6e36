import json
import pytest
import torch
from torch import nn
from tvt_sr.base.checkpoint import load_checkpoint
from tvt_sr.base.losses import LossReport
from tvt_sr.base.models_base import parameter_digest, freeze
from tvt_sr.training.common import (step_generator, LoopConfig, OptimizerConfig, PhaseRunner, Checkpointer,
                                    TrainingLog, FreezeGuard, TrainingException, FrozenParameterException,
                                    NonFiniteLossException, build_optimizer, check_frozen, check_finite)
from tvt_sr.training.tvt import (TvtStage1Config, TvtStage2Config, TvtJointConfig, train_decoder, train_encoder,
                                 train_joint, run_tvt, upsample2x, PHASE_DECODER, PHASE_ENCODER)
from tvt_sr.training.reference import latent_scale


def test_step_generator_depends_on_seed_phase_and_step():
    draw = lambda seed, phase, step: torch.rand(4, generator=step_generator(seed, phase, step))

    assert torch.equal(draw(0, 'a', 3), draw(0, 'a', 3))
    assert not torch.equal(draw(0, 'a', 3), draw(0, 'a', 4))
    assert not torch.equal(draw(0, 'a', 3), draw(0, 'b', 3))
    assert not torch.equal(draw(0, 'a', 3), draw(1, 'a', 3))


def test_build_optimizer_requires_parameters():
    with pytest.raises(TrainingException):
        build_optimizer([], OptimizerConfig())


def test_check_frozen_and_guard():
    module = nn.Linear(3, 3)
    with pytest.raises(FrozenParameterException):
        check_frozen(module)

    freeze(module)
    guard = FreezeGuard(module, label='linear')
    guard.verify()
    with torch.no_grad():
        module.weight.add_(1.0)
    with pytest.raises(FrozenParameterException, match='linear changed'):
        guard.verify()


def test_check_finite():
    assert float(check_finite(torch.tensor(1.0))) == 1.0
    with pytest.raises(NonFiniteLossException):
        check_finite(torch.tensor(float('inf')))


def test_training_log_rewind_and_persistence(tmp_path):
    path = tmp_path / 'train.jsonl'
    log = TrainingLog(path)
    for step in range(3):
        log.append('a', step, LossReport(l1=float(step), total=float(step)), 1e-4)
    log.append('b', 0, LossReport(), 1e-4)

    log.rewind('a', 1)
    assert [(record['phase'], record['step']) for record in log.records] == [('a', 0)]
    assert len(TrainingLog(path).records) == 1
    assert json.loads(path.read_text().splitlines()[0])['phase'] == 'a'


#
# Phase runner
#
def linear_phase(seed: int):
    torch.manual_seed(seed)
    model = nn.Linear(4, 1)
    optimizer = build_optimizer(model.parameters(), OptimizerConfig(lr=1e-2))

    def step_fn(step: int, generator: torch.Generator) -> LossReport:
        x = torch.randn(8, 4, generator=generator)
        loss = ((model(x) - x.sum(dim=1, keepdim=True)) ** 2).mean()
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        return LossReport(l1=float(loss), total=float(loss))

    def state_fn():
        return {'model': model}, {'model': optimizer}

    return model, optimizer, step_fn, state_fn


def test_phase_runner_checkpoints(tmp_path):
    _, _, step_fn, state_fn = linear_phase(0)
    checkpointer = Checkpointer(tmp_path, 'toy', 'linear', 'h')
    reports = PhaseRunner('toy', 0, LoopConfig(total_steps=5, checkpoint_every=2), 1e-2, None,
                          checkpointer).run(step_fn, state_fn)

    assert len(reports) == 5
    assert [path.name for path, _ in checkpointer.saved] == ['toy-00000002.safetensors', 'toy-00000004.safetensors',
                                                           'toy-00000005.safetensors']
    assert load_checkpoint(checkpointer.path(4)).manifest.parent_id == checkpointer.saved[0][1]


def test_phase_runner_resume_matches_uninterrupted_run(tmp_path):
    loop = LoopConfig(total_steps=4, checkpoint_every=2)
    model, _, step_fn, state_fn = linear_phase(0)
    PhaseRunner('toy', 7, loop, 1e-2, None, Checkpointer(tmp_path / 'a', 'toy', 'linear', 'h')).run(step_fn, state_fn)

    checkpoint = load_checkpoint(tmp_path / 'a' / 'toy-00000002.safetensors')
    resumed, resumed_optimizer, resumed_step_fn, resumed_state_fn = linear_phase(1)
    checkpoint.restore('model', resumed)
    checkpoint.restore_optimizer('model', resumed_optimizer)
    log = TrainingLog()
    PhaseRunner('toy', 7, loop, 1e-2, log).run(resumed_step_fn, resumed_state_fn, start_step=checkpoint.step)

    assert [record['step'] for record in log.records] == [2, 3]
    assert torch.equal(resumed.weight, model.weight)
    assert torch.equal(resumed.bias, model.bias)


def test_phase_runner_reports_last_checkpoint_on_non_finite_loss(tmp_path):
    _, _, step_fn, state_fn = linear_phase(0)

    def failing_step(step: int, generator: torch.Generator) -> LossReport:
        if step == 3:
            check_finite(torch.tensor(float('nan')))
        return step_fn(step, generator)

    checkpointer = Checkpointer(tmp_path, 'toy', 'linear', 'h')
    with pytest.raises(NonFiniteLossException) as exc_info:
        PhaseRunner('toy', 0, LoopConfig(total_steps=5, checkpoint_every=2), 1e-2, None,
                    checkpointer).run(failing_step, state_fn)
    assert exc_info.value.last_checkpoint == checkpointer.path(2)
    assert 'toy step 3' in str(exc_info.value)


def test_phase_runner_rejects_out_of_range_start():
    _, _, step_fn, state_fn = linear_phase(0)
    with pytest.raises(TrainingException):
        PhaseRunner('toy', 0, LoopConfig(total_steps=2), 1e-2).run(step_fn, state_fn, start_step=3)


#
# Transfer VAE training
#
def stage1_config(**kwargs) -> TvtStage1Config:
    return TvtStage1Config(batch_size=2, total_steps=2, disc_ndf=8, gan_start_step=1, **kwargs)


def test_upsample2x():
    assert upsample2x(torch.zeros(1, 3, 8, 8)).shape == (1, 3, 16, 16)


def test_stage1_trains_only_the_d4_decoder(tiny_d8, tiny_d4, images, feature_net):
    d8_before = parameter_digest(tiny_d8)
    encoder_before = parameter_digest(tiny_d4.encoder)
    decoder_before = parameter_digest(tiny_d4.decoder)

    reports = train_decoder(tiny_d8, tiny_d4, images, list(range(6)), stage1_config(), 0, feature_net)

    assert len(reports) == 2
    assert reports[0].gan_g == 0.0 and reports[0].lambda_d == 0.0
    assert reports[1].lambda_d > 0.0
    assert parameter_digest(tiny_d8) == d8_before
    assert parameter_digest(tiny_d4.encoder) == encoder_before
    assert parameter_digest(tiny_d4.decoder) != decoder_before


def test_stage2_keeps_the_decoder_frozen(tiny_d4, images, feature_net):
    decoder_before = parameter_digest(tiny_d4.decoder)
    encoder_before = parameter_digest(tiny_d4.encoder)

    reports = train_encoder(tiny_d4, images, list(range(6)), TvtStage2Config(batch_size=2, total_steps=2), 0,
                            feature_net)

    assert len(reports) == 2 and all(report.gan_g == 0.0 for report in reports)
    assert parameter_digest(tiny_d4.decoder) == decoder_before
    assert parameter_digest(tiny_d4.encoder) != encoder_before


def test_run_tvt_chains_stage_checkpoints(tiny_d8, tiny_d4, images, feature_net, tmp_path):
    log = TrainingLog()
    result = run_tvt(tiny_d8, tiny_d4, images, list(range(6)), stage1_config(),
                     TvtStage2Config(batch_size=2, total_steps=2), 0, feature_net, log, str(tmp_path), 'h')

    stage1 = load_checkpoint(tmp_path / f'{PHASE_DECODER}-00000002.safetensors')
    stage2 = load_checkpoint(tmp_path / f'{PHASE_ENCODER}-00000002.safetensors')
    assert stage1.components == {'vae', 'discriminator'}
    assert stage2.manifest.parent_id == stage1.checkpoint_id
    assert len(result.stage1) == len(result.stage2) == 2
    assert {record['phase'] for record in log.records} == {PHASE_DECODER, PHASE_ENCODER}


def test_stage1_resume_reproduces_uninterrupted_run(tiny_d8, images, feature_net, tmp_path):
    from tvt_sr.base.vae import build_vae
    from conftest import TINY_D4

    cfg = TvtStage1Config(batch_size=2, total_steps=2, checkpoint_every=1, disc_ndf=8, gan_start_step=1)
    full = build_vae(TINY_D4, seed=1)
    train_decoder(tiny_d8, full, images, list(range(6)), cfg, 0, feature_net,
                  checkpointer=Checkpointer(tmp_path, PHASE_DECODER, 'vae', 'h'))

    resumed = build_vae(TINY_D4, seed=1)
    train_decoder(tiny_d8, resumed, images, list(range(6)), cfg, 0, feature_net,
                  resume=load_checkpoint(tmp_path / f'{PHASE_DECODER}-00000001.safetensors'))

    assert parameter_digest(resumed) == parameter_digest(full)


def test_joint_training_with_alignment(tiny_d8, tiny_d4, images, feature_net):
    reports = train_joint(tiny_d4, images, list(range(6)),
                          TvtJointConfig(batch_size=2, total_steps=1, align_weight=1.0), 0, feature_net, tiny_d8)
    assert reports[0].align > 0.0


def test_latent_scale_is_deterministic(tiny_d4, images):
    scale = latent_scale(tiny_d4, images, list(range(4)))
    assert scale > 0.0
    assert scale == latent_scale(tiny_d4, images, list(range(4)))
