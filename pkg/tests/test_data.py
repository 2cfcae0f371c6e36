import io
import logging
import zipfile
import pytest
import torch
from tvt_sr.base.data import ingest_images, save_image, tensor_to_pil, DataException


def solid(value: float, size: int = 8) -> torch.Tensor:
    return torch.full((3, size, size), value)


def png_bytes(image: torch.Tensor) -> bytes:
    buffer = io.BytesIO()
    tensor_to_pil(image).save(buffer, format='PNG')
    return buffer.getvalue()


def warnings_of(caplog) -> list[str]:
    return [record.getMessage() for record in caplog.records if record.levelno == logging.WARNING]


#
# Directory ingestion
#
def test_empty_directory_gives_empty_source(tmp_path, caplog):
    with caplog.at_level(logging.WARNING):
        source = ingest_images(tmp_path)

    assert len(source) == 0 and source.names == []
    assert any('No images found' in message for message in warnings_of(caplog))


def test_directory_order_is_lexicographic_by_relative_path(tmp_path):
    for name, value in [('b.png', 0.2), ('a/z.png', 0.4), ('a.png', 0.6), ('a/b/c.png', 0.8)]:
        save_image(solid(value), tmp_path / name)

    source = ingest_images(tmp_path)

    assert source.names == ['a.png', 'a/b/c.png', 'a/z.png', 'b.png']
    assert float(source[0].mean()) == pytest.approx(0.6, abs=1 / 255)
    assert float(source[3].mean()) == pytest.approx(0.2, abs=1 / 255)


def test_directory_skips_non_image_files_with_warning(tmp_path, caplog):
    save_image(solid(0.5), tmp_path / 'a.png')
    (tmp_path / 'notes.txt').write_text('not pixels')

    with caplog.at_level(logging.WARNING):
        source = ingest_images(tmp_path)

    assert source.names == ['a.png']
    assert warnings_of(caplog) == ['Skipping notes.txt: not an image file']


def test_directory_skips_undecodable_images_with_warning(tmp_path, caplog):
    save_image(solid(0.5), tmp_path / 'a.png')
    (tmp_path / 'broken.png').write_bytes(b'definitely not a png')

    with caplog.at_level(logging.WARNING):
        source = ingest_images(tmp_path)

    assert source.names == ['a.png']
    assert any(message.startswith('Skipping broken.png') for message in warnings_of(caplog))


#
# Zip ingestion
#
def test_zip_ingestion(tmp_path, caplog):
    archive_path = tmp_path / 'images.zip'
    with zipfile.ZipFile(archive_path, 'w') as archive:
        archive.writestr('set/b.png', png_bytes(solid(0.2)))
        archive.writestr('set/a.png', png_bytes(solid(0.8, size=4)))
        archive.writestr('set/readme.md', 'not pixels')

    with caplog.at_level(logging.WARNING):
        source = ingest_images(archive_path)

    assert source.names == ['set/a.png', 'set/b.png']
    assert source[0].shape == (3, 4, 4) and source[1].shape == (3, 8, 8)
    assert float(source[1].mean()) == pytest.approx(0.2, abs=1 / 255)
    assert warnings_of(caplog) == ['Skipping set/readme.md: not an image file']


#
# Invalid locations
#
def test_missing_location_raises(tmp_path):
    with pytest.raises(FileNotFoundError):
        ingest_images(tmp_path / 'missing')


def test_plain_file_location_raises(tmp_path):
    location = tmp_path / 'images.txt'
    location.write_text('not an archive')
    with pytest.raises(DataException):
        ingest_images(location)
