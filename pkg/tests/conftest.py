import pytest
import torch
from tvt_sr.base.specs import VaeSpec, UnetSpec, CeUnetSpec, LoraConfig
from tvt_sr.base.vae import build_vae
from tvt_sr.base.unet import build_unet
from tvt_sr.base.losses import PerceptualNet
from tvt_sr.base.data import ProceduralImageSource
from tvt_sr.training.experiment import ExperimentConfig


# Smaller than the toy presets, for unit tests that build and run models
TINY_D8 = VaeSpec(downsample_factor=8, stage_channels=(8, 16, 16, 16), blocks_per_stage=1, has_mid_attention=True,
                  base_resolution=32, norm_groups=4)
TINY_D4 = VaeSpec(downsample_factor=4, stage_channels=(8, 16, 16), blocks_per_stage=1, base_resolution=32,
                  norm_groups=4)
TINY_UNET = UnetSpec(block_channels=(16, 32, 32), attention_levels=(True, True, False), layers_per_block=1,
                     head_dim=8, context_dim=8, context_tokens=2, norm_groups=4, toy_scale=True)
TINY_CE = CeUnetSpec(base=TINY_UNET, replica_depth=1, lora=LoraConfig(rank=2, alpha=2.0))


@pytest.fixture(autouse=True)
def deterministic_torch():
    torch.manual_seed(0)
    yield


@pytest.fixture
def tiny_d8():
    return build_vae(TINY_D8, seed=0)


@pytest.fixture
def tiny_d4():
    return build_vae(TINY_D4, seed=1)


@pytest.fixture
def tiny_unet():
    return build_unet(TINY_UNET, seed=2)


@pytest.fixture
def feature_net():
    return PerceptualNet(seed=0)


@pytest.fixture
def images():
    return ProceduralImageSource(count=8, size=32, seed=0)


@pytest.fixture
def generator():
    return torch.Generator().manual_seed(1234)


def tiny_experiment_config(**overrides) -> ExperimentConfig:
    """ Tiny models, a handful of 32x32 procedural images and two steps per training phase """
    loop = {'batch_size': 2, 'total_steps': 2}
    config = {
        'preset': 'toy',
        'seed': 0,
        'models': {
            'vae_d8': TINY_D8.model_dump(mode='json'),
            'vae_d4': TINY_D4.model_dump(mode='json'),
            'ce_unet': TINY_CE.model_dump(mode='json'),
        },
        'data': {'procedural_count': 8, 'image_size': 32, 'holdout': 0.25},
        'pairs': {'train': 4, 'test': 2, 'crop_size': 32},
        'reference_vae': {**loop},
        'reference_unet': {**loop, 'scale_samples': 4},
        'tvt': {
            'stage1': {**loop, 'disc_ndf': 8, 'gan_start_step': 1},
            'stage2': {**loop},
            'joint': {**loop},
        },
        'sr': {**loop, 'lambda_2': 1e-3},
    }
    config.update(overrides)

    return ExperimentConfig.model_validate(config)


@pytest.fixture
def tiny_config():
    return tiny_experiment_config()


@pytest.fixture
def make_tiny_config():
    return tiny_experiment_config


def central_differences(fn, tensor: torch.Tensor, indices, eps: float = 1e-6) -> torch.Tensor:
    """
    Central finite differences of the scalar fn() w.r.t. the entries of tensor at the given flat indices.
    Entries are perturbed in place and restored.
    """
    flat = tensor.data.view(-1)
    estimates = []
    with torch.no_grad():
        for index in indices:
            original = float(flat[index])
            flat[index] = original + eps
            plus = float(fn())
            flat[index] = original - eps
            minus = float(fn())
            flat[index] = original
            estimates.append((plus - minus) / (2.0 * eps))

    return torch.tensor(estimates, dtype=torch.float64)
