"""
 TVT-SR - Transfer VAE Training toolset for one-step super-resolution

 tvt_sr.base.catalog
 This module implements the catalog of named presets (architecture specs and experiment configs)
"""
from typing import NamedTuple, Optional
from collections.abc import Callable, Iterator
from enum import Enum
from .models_base import SpecModel


class PresetKind(Enum):
    VAE = 'vae'
    UNET = 'unet'
    CE_UNET = 'ce_unet'
    PIPELINE = 'pipeline'
    EXPERIMENT = 'experiment'


class CatalogItem(NamedTuple):
    tag: str
    info: str
    kind: PresetKind
    factory: Callable[[], SpecModel]


_catalog: dict[str, CatalogItem] = dict()  # {<tag>: (<tag>, <info>, <kind>, <factory>), ...}


def register(tag: str, info: str, kind: PresetKind) -> Callable:
    """
    Decorator used for registering preset factories with the catalog.
    The function being decorated takes no arguments and returns a new spec instance on every call.
    @param tag: Preset name, as referenced by config files and the command line
    @param info: Human-readable description
    @param kind: Which family of specs this preset belongs to
    @return: decorator
    """
    def decorator(factory_fn: Callable[[], SpecModel]) -> Callable[[], SpecModel]:
        if tag in _catalog:
            raise CatalogException(f'Duplicate preset registration: {tag}')

        _catalog[tag] = CatalogItem(tag, info, kind, factory_fn)
        return factory_fn

    return decorator


def preset(tag: str, kind: Optional[PresetKind] = None) -> SpecModel:
    """
    Return a new instance of a registered preset
    @param tag: Preset name
    @param kind: If provided, the preset must be of this kind
    @return: spec instance
    """
    item = _catalog.get(tag)
    if item is None or (kind is not None and item.kind != kind):
        raise CatalogException(f'Unknown {kind.value if kind else ""} preset "{tag}". '
                               f'Options are: {", ".join(sorted(preset_tags(kind)))}')

    return item.factory()


def preset_tags(kind: Optional[PresetKind] = None) -> set[str]:
    return {item.tag for item in _catalog.values() if kind is None or item.kind == kind}


def preset_iter(*kinds: PresetKind) -> Iterator[tuple[str, str, PresetKind, SpecModel]]:
    """
    Return an iterator over registered presets, in registration order.
    @param kinds: Zero or more preset kinds to select. If none, all presets are returned.
    @return: Iterator of (<tag>, <info>, <kind>, <spec instance>) tuples
    """
    return (
        (item.tag, item.info, item.kind, item.factory())
        for item in _catalog.values() if not kinds or item.kind in kinds
    )


def catalog_size() -> int:
    return len(_catalog)


class CatalogException(Exception):
    """ Exception for preset catalog errors """
    pass
