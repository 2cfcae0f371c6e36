import json
import pytest
import torch
from pydantic import ValidationError
from tvt_sr.base.degradation import (DegradationConfig, DegradationException, BlurStage, NoiseStage, ResizeStage,
                                     CompressionStage, degrade, jpeg_like, make_pairs, load_pairs, bivariate_gaussian)


def test_degrade_output_is_a_quarter_of_the_input(images):
    lr, record = degrade(images[0], DegradationConfig(), seed=3)

    assert lr.shape == (3, 8, 8)
    assert float(lr.min()) >= 0.0 and float(lr.max()) <= 1.0
    assert [op['op'] for op in record] == ['blur', 'resize', 'noise', 'compression']


def test_degrade_is_a_function_of_the_seed(images):
    config = DegradationConfig()
    lr_a, record_a = degrade(images[0], config, seed=11)
    lr_b, record_b = degrade(images[0], config, seed=11)
    lr_c, _ = degrade(images[0], config, seed=12)

    assert torch.equal(lr_a, lr_b)
    assert record_a == record_b
    assert not torch.equal(lr_a, lr_c)


def test_degrade_uses_config_seed_by_default(images):
    lr_a, _ = degrade(images[1], DegradationConfig(seed=4))
    lr_b, _ = degrade(images[1], DegradationConfig(), seed=4)
    assert torch.equal(lr_a, lr_b)


def test_second_order_repeats_all_but_resize():
    lr, record = degrade(torch.rand(3, 64, 64), DegradationConfig(second_order=True), seed=0)
    assert lr.shape == (3, 16, 16)
    assert [op['op'] for op in record] == ['blur', 'resize', 'noise', 'compression', 'blur', 'noise', 'compression']


def test_blur_kernel_larger_than_image_is_rejected():
    with pytest.raises(DegradationException, match='too large'):
        degrade(torch.rand(3, 32, 32), DegradationConfig(second_order=True), seed=0)


def test_pipeline_without_resize_snaps_to_target(images):
    config = DegradationConfig(stages=(BlurStage(), NoiseStage()))
    lr, record = degrade(images[0], config, seed=0)

    assert lr.shape == (3, 8, 8)
    assert record[0]['op'] == 'snap'


def test_degrade_rejects_indivisible_images():
    with pytest.raises(DegradationException):
        degrade(torch.rand(3, 30, 32), DegradationConfig())
    with pytest.raises(DegradationException):
        degrade(torch.rand(1, 3, 32, 32), DegradationConfig())


def test_stage_validation():
    with pytest.raises(ValidationError):
        BlurStage(kernel_size=20)
    with pytest.raises(ValidationError):
        NoiseStage(sigma_range=(5.0, 1.0))
    with pytest.raises(ValidationError):
        CompressionStage(quality_range=(0, 50))
    with pytest.raises(ValidationError, match='resize'):
        DegradationConfig(stages=(ResizeStage(), ResizeStage()))


def test_stages_parse_from_mappings():
    config = DegradationConfig.model_validate({'stages': [{'op': 'noise', 'gaussian_prob': 1.0}, {'op': 'resize'}]})
    assert isinstance(config.stages[0], NoiseStage) and config.has_resize


def test_blur_kernel_is_normalized():
    kernel = bivariate_gaussian(21, 2.0, 0.5, 0.3)
    assert kernel.shape == (21, 21)
    assert kernel.sum() == pytest.approx(1.0)


def test_jpeg_like_quality_ordering():
    image = torch.rand(1, 3, 16, 16)
    high = jpeg_like(image, 100)
    low = jpeg_like(image, 5)

    assert high.shape == image.shape
    assert float((high - image).abs().mean()) < float((low - image).abs().mean())


def test_make_pairs_writes_a_reloadable_dataset(images, tmp_path):
    pairs, manifest = make_pairs(images, DegradationConfig(), n=3, seed=5, crop_size=16, out_dir=tmp_path)

    assert manifest['count'] == 3 and len(manifest['pairs']) == 3
    assert json.loads((tmp_path / 'manifest.json').read_text())['pairs'] == manifest['pairs']
    assert all(pair.hr.shape == (3, 16, 16) and pair.lr.shape == (3, 4, 4) for pair in pairs)

    loaded = load_pairs(tmp_path)
    assert [pair.record for pair in loaded] == [pair.record for pair in pairs]
    # PNG round trip quantizes to 8 bits
    assert torch.allclose(loaded[0].hr, pairs[0].hr, atol=1 / 255)


def test_make_pairs_is_reproducible(images):
    pairs_a, manifest_a = make_pairs(images, DegradationConfig(), n=2, seed=9, crop_size=16)
    pairs_b, manifest_b = make_pairs(images, DegradationConfig(), n=2, seed=9, crop_size=16)

    assert manifest_a == manifest_b
    assert all(torch.equal(a.lr, b.lr) for a, b in zip(pairs_a, pairs_b))


def test_make_pairs_validation(images):
    with pytest.raises(DegradationException, match='divisible'):
        make_pairs(images, DegradationConfig(), n=1, seed=0, crop_size=18)
    with pytest.raises(DegradationException, match='smaller'):
        make_pairs(images, DegradationConfig(), n=1, seed=0, crop_size=64)
    with pytest.raises(DegradationException, match='empty'):
        make_pairs([], DegradationConfig(), n=1, seed=0, crop_size=16)


def test_load_pairs_without_manifest(tmp_path):
    with pytest.raises(DegradationException, match='manifest'):
        load_pairs(tmp_path)


#
# Closed-form configs
#
@pytest.mark.parametrize('value', [0.0, 0.3, 1.0])
def test_identity_config_keeps_constant_images(value):
    lr, record = degrade(torch.full((3, 32, 32), value), DegradationConfig(stages=()), seed=0)

    assert record == [{'op': 'snap', 'size': [8, 8]}]
    assert torch.allclose(lr, torch.full((3, 8, 8), value), atol=1e-6)


@pytest.mark.parametrize('sigma', [5.0, 10.0])
def test_gaussian_noise_variance_matches_sigma(sigma):
    hr = torch.full((3, 256, 256), 0.5)
    config = DegradationConfig(stages=(NoiseStage(gaussian_prob=1.0, sigma_range=(sigma, sigma), gray_prob=0.0),))
    lr, record = degrade(hr, config, seed=7)
    lr_up = torch.nn.functional.interpolate(lr.unsqueeze(0), scale_factor=4, mode='nearest')[0]

    assert record[-1]['kind'] == 'gaussian' and record[-1]['sigma'] == sigma
    variance = float((lr_up - hr).to(torch.float64).var())
    assert variance == pytest.approx((sigma / 255.0) ** 2, rel=0.1)
