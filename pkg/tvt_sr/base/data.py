"""
 TVT-SR - Transfer VAE Training toolset for one-step super-resolution

 tvt_sr.base.data
 This module implements image sources (folders, zip archives, procedural images) and raster I/O
"""
import io
import logging
import zipfile
from pathlib import Path, PurePosixPath
from typing import Union
from collections.abc import Sequence
import numpy as np
import torch
from PIL import Image, ImageDraw, UnidentifiedImageError

logger = logging.getLogger(__name__)

IMAGE_EXTENSIONS = ('.png', '.jpg', '.jpeg', '.bmp', '.tif', '.tiff', '.webp')


class DataException(Exception):
    """ Exception for image data errors """
    pass


def pil_to_tensor(image: Image.Image) -> torch.Tensor:
    """ PIL image to CHW float32 RGB tensor in [0, 1] """
    array = np.asarray(image.convert('RGB'), dtype=np.float32) / 255.0
    return torch.from_numpy(array.copy()).permute(2, 0, 1).contiguous()


def tensor_to_pil(image: torch.Tensor) -> Image.Image:
    if image.dim() == 4 and image.shape[0] == 1:
        image = image[0]
    if image.dim() != 3 or image.shape[0] != 3:
        raise DataException(f'Expected a CHW RGB tensor, got shape {tuple(image.shape)}')
    array = (image.detach().cpu().to(torch.float64).clamp(0.0, 1.0) * 255.0).round().to(torch.uint8)
    return Image.fromarray(array.permute(1, 2, 0).numpy())


def load_image(path: Union[str, Path]) -> torch.Tensor:
    try:
        with Image.open(path) as image:
            return pil_to_tensor(image)
    except (OSError, UnidentifiedImageError) as ex:
        raise DataException(f'Unable to decode image {path}: {ex}') from None


def save_image(image: torch.Tensor, path: Union[str, Path]) -> None:
    """ Save a CHW unit-range tensor as an 8-bit PNG """
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    tensor_to_pil(image).save(path, format='PNG')


class ImageSource(Sequence):
    """ Indexable collection of CHW float32 unit-range RGB images """
    def __len__(self) -> int:
        raise NotImplementedError()

    def __getitem__(self, index: int) -> torch.Tensor:
        raise NotImplementedError()


class FolderImageSource(ImageSource):
    def __init__(self, images: list[torch.Tensor], names: list[str]) -> None:
        self.images = images
        self.names = names

    def __len__(self) -> int:
        return len(self.images)

    def __getitem__(self, index: int) -> torch.Tensor:
        return self.images[index]


def is_image_name(name: str) -> bool:
    return PurePosixPath(name).suffix.lower() in IMAGE_EXTENSIONS


def ingest_images(location: Union[str, Path]) -> FolderImageSource:
    """
    Discover and decode raster images under a directory (recursively) or inside a zip archive. Images are ordered
    lexicographically by relative posix path. Non-image files and files that fail to decode are skipped with a warning.
    @param location: Directory or .zip file
    @return: FolderImageSource
    """
    location = Path(location)
    if not location.exists():
        raise FileNotFoundError(f'Image location not found: {location}')

    decoded = []
    if location.is_dir():
        entries = sorted((path.relative_to(location).as_posix(), path)
                         for path in location.rglob('*') if path.is_file())
        for name, path in entries:
            if not is_image_name(name):
                logger.warning('Skipping %s: not an image file', name)
                continue
            try:
                decoded.append((name, load_image(path)))
            except DataException as ex:
                logger.warning('Skipping %s: %s', name, ex)
    elif zipfile.is_zipfile(location):
        with zipfile.ZipFile(location) as archive:
            for name in sorted(info.filename for info in archive.infolist() if not info.is_dir()):
                if not is_image_name(name):
                    logger.warning('Skipping %s: not an image file', name)
                    continue
                try:
                    with Image.open(io.BytesIO(archive.read(name))) as image:
                        decoded.append((name, pil_to_tensor(image)))
                except (OSError, UnidentifiedImageError) as ex:
                    logger.warning('Skipping %s: %s', name, ex)
    else:
        raise DataException(f'{location} is neither a directory nor a zip archive')

    if not decoded:
        logger.warning('No images found in %s', location)

    return FolderImageSource([image for _, image in decoded], [name for name, _ in decoded])


class ProceduralImageSource(ImageSource):
    """
    Deterministic synthetic images: textured color gradients with random glyph-like strokes. Image i is a pure
    function of (seed, i, size).
    """
    def __init__(self, count: int, size: int = 64, seed: int = 0) -> None:
        if count < 0 or size < 8:
            raise DataException(f'Invalid procedural source: count={count}, size={size}')
        self.count = count
        self.size = size
        self.seed = seed
        self.cache: dict[int, torch.Tensor] = {}

    def __len__(self) -> int:
        return self.count

    def __getitem__(self, index: int) -> torch.Tensor:
        if not 0 <= index < self.count:
            raise IndexError(index)
        if index not in self.cache:
            self.cache[index] = self.render(index)
        return self.cache[index]

    def render(self, index: int) -> torch.Tensor:
        rng = np.random.default_rng([self.seed, index])
        size = self.size
        axis = np.linspace(0.0, 1.0, size)
        yy, xx = np.meshgrid(axis, axis, indexing='ij')

        start, end = rng.uniform(0.0, 1.0, size=(2, 3))
        angle = rng.uniform(0.0, 2.0 * np.pi)
        ramp = (np.cos(angle) * xx + np.sin(angle) * yy + 1.0) / 2.0
        background = start[None, None, :] * (1.0 - ramp[..., None]) + end[None, None, :] * ramp[..., None]

        frequency = rng.uniform(2.0, size / 4.0, size=2)
        phase = rng.uniform(0.0, 2.0 * np.pi, size=2)
        texture = np.sin(2 * np.pi * frequency[0] * xx + phase[0]) * np.sin(2 * np.pi * frequency[1] * yy + phase[1])
        background = np.clip(background + rng.uniform(0.03, 0.12) * texture[..., None], 0.0, 1.0)

        canvas = Image.fromarray((background * 255.0).round().astype(np.uint8))
        draw = ImageDraw.Draw(canvas)
        for _ in range(int(rng.integers(3, 9))):
            points = [tuple(int(v) for v in rng.integers(0, size, size=2)) for _ in range(int(rng.integers(2, 5)))]
            color = tuple(int(v) for v in rng.integers(0, 256, size=3))
            draw.line(points, fill=color, width=int(rng.integers(1, max(2, size // 24) + 1)))

        return pil_to_tensor(canvas)


def split_indices(count: int, holdout: float, seed: int) -> tuple[list[int], list[int]]:
    """
    Seeded train / held-out split.
    @return: (train indices, held-out indices), each sorted
    """
    permutation = np.random.default_rng(seed).permutation(count)
    num_holdout = int(round(count * holdout))
    return sorted(permutation[num_holdout:].tolist()), sorted(permutation[:num_holdout].tolist())


def sample_batch(source: Sequence[torch.Tensor], indices: Sequence[int], batch_size: int,
                 generator: torch.Generator) -> torch.Tensor:
    """ Draw batch_size images (with replacement) from source restricted to indices """
    if not indices:
        raise DataException('Cannot sample from an empty index set')
    picks = torch.randint(len(indices), (batch_size,), generator=generator).tolist()
    return torch.stack([source[indices[pick]] for pick in picks])
