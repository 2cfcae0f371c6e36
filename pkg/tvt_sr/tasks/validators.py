import re
from pathlib import Path
from zipfile import is_zipfile
from ..base.models_base import filename_safe, DATA_DIR


def validate_regex(regex: str) -> str:
    if regex is not None:
        try:
            re.compile(regex)
        except (re.error, TypeError):
            raise ValueError(f'"{regex}" is not a valid regular expression.') from None

    return regex


def validate_workdir(workdir: str) -> str:
    if not Path(DATA_DIR, workdir).exists():
        raise ValueError(f'Work directory "{workdir}" not found.')

    return workdir


def validate_filename(filename: str) -> str:
    """ Validate file name. If filename is a path containing a directory, validate whether it exists.
    """
    file_path = Path(filename)
    if not file_path.parent.exists():
        raise ValueError(f'Directory for "{filename}" does not exist')

    # Also allow . on filename, on top of what's allowed by filename_safe
    if file_path.name.replace('.', '_') != filename_safe(file_path.name):
        raise ValueError(
            f'Invalid name "{file_path.name}". Only alphanumeric characters, "-", "_", and "." are allowed.'
        )

    return filename


def validate_existing_file(filename: str) -> str:
    """ Validate whether filename exists
    """
    if filename is not None and not Path(filename).is_file():
        raise ValueError(f'File "{filename}" not found.')

    return filename


def validate_image_source(location: str) -> str:
    """ A directory of images or a zip archive of images, relative paths anchored at the data directory
    """
    if location is None:
        return location

    path = Path(DATA_DIR, location)
    if not (path.is_dir() or (path.is_file() and is_zipfile(path))):
        raise ValueError(f'"{location}" is neither a directory nor a valid zip archive.')

    return location


def validate_checkpoint_file(filename: str) -> str:
    validate_existing_file(filename)
    if Path(filename).suffix != '.safetensors':
        raise ValueError(f'"{filename}" is not a .safetensors checkpoint.')

    return filename


def validate_resolution(resolution_str: str) -> tuple[int, int]:
    """ '512', '512x512' or '512X768' -> (height, width)
    """
    match = re.fullmatch(r'(\d+)(?:[xX](\d+))?', resolution_str.strip())
    if match is None:
        raise ValueError(f'"{resolution_str}" is not a valid resolution. Use <size> or <height>x<width>.')

    height = int(match.group(1))
    width = int(match.group(2)) if match.group(2) is not None else height
    if height <= 0 or width <= 0:
        raise ValueError(f'"{resolution_str}" is not a valid resolution, dimensions must be positive.')

    return height, width


def validate_pairs_dir(pairs_dir: str) -> str:
    """ A pair dataset written by degrade, relative paths anchored at the data directory
    """
    if pairs_dir is not None and not Path(DATA_DIR, pairs_dir, 'manifest.json').is_file():
        raise ValueError(f'"{pairs_dir}" is not a pair dataset, manifest.json not found.')

    return pairs_dir
