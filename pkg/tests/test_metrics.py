import pytest
import torch
from pydantic import ValidationError
from tvt_sr.base.metrics import (MetricRecord, MetricException, psnr_y, ssim_y, to_y, image_metrics, summarize,
                                 recon_benchmark, PSNR_CAP)


def test_psnr_of_identical_images_is_capped():
    image = torch.rand(3, 16, 16)
    assert psnr_y(image, image) == PSNR_CAP


def test_psnr_of_known_offset():
    # Luma weights sum to one, a uniform 0.1 offset gives a Y MSE of 0.01
    reference = torch.full((3, 16, 16), 0.5, dtype=torch.float64)
    assert psnr_y(reference + 0.1, reference) == pytest.approx(20.0, abs=1e-6)


def test_psnr_averages_over_batch():
    reference = torch.full((2, 3, 16, 16), 0.5, dtype=torch.float64)
    distorted = reference.clone()
    distorted[0] += 0.1
    distorted[1] += 0.01
    assert psnr_y(distorted, reference) == pytest.approx(30.0, abs=1e-6)


def test_to_y_uses_bt601_weights():
    red = torch.zeros(3, 2, 2)
    red[0] = 1.0
    assert torch.allclose(to_y(red), torch.full((1, 1, 2, 2), 0.299, dtype=torch.float64))


def test_ssim_bounds():
    image = torch.rand(3, 32, 32)
    assert ssim_y(image, image) == pytest.approx(1.0, abs=1e-9)
    assert ssim_y(image, 1.0 - image) < 0.5


def test_ssim_requires_window_sized_images():
    with pytest.raises(MetricException, match='at least'):
        ssim_y(torch.rand(3, 10, 10), torch.rand(3, 10, 10))


def test_metrics_reject_shape_mismatch():
    with pytest.raises(MetricException):
        psnr_y(torch.rand(3, 16, 16), torch.rand(3, 16, 12))
    with pytest.raises(MetricException):
        psnr_y(torch.rand(1, 16, 16), torch.rand(1, 16, 16))


def test_metric_record_consistency():
    record = MetricRecord.from_values('psnr_y', [30.0, 32.0])
    assert record.mean == 31.0 and record.count == 2
    with pytest.raises(ValidationError, match='arithmetic mean'):
        MetricRecord(name='psnr_y', values=[1.0, 3.0], mean=2.5, count=2)
    with pytest.raises(ValidationError, match='count'):
        MetricRecord(name='psnr_y', values=[1.0], mean=1.0, count=2)
    with pytest.raises(MetricException):
        MetricRecord.from_values('psnr_y', [])


def test_image_metrics_and_summary(feature_net):
    target = torch.rand(3, 16, 16)
    per_image = [image_metrics(target, target, feature_net), image_metrics(target * 0.9, target, feature_net)]
    assert set(per_image[0]) == {'psnr_y', 'ssim_y', 'perceptual'}

    records = {record.name: record for record in summarize(per_image)}
    assert records['psnr_y'].count == 2
    assert records['perceptual'].values[0] == pytest.approx(0.0, abs=1e-7)
    with pytest.raises(MetricException):
        summarize([])


def test_recon_benchmark(tiny_d4, images, feature_net):
    records = recon_benchmark(tiny_d4, [images[0], images[1]], feature_net)
    assert [record.name for record in records] == ['psnr_y', 'ssim_y', 'perceptual']
    assert all(record.count == 2 for record in records)
