"""Procedural dataset generation: scenes, domain shift, splits, disk layout."""

from .generator import (
    DegenerateSceneError,
    DomainShift,
    LabeledPair,
    LayerSpec,
    SceneSpec,
    apply_shift,
    gen_pair,
    random_scene,
    texture,
)
from .splits import (
    SPLIT_NAMES,
    DatasetSplits,
    GenConfig,
    build_splits,
    load_dataset,
    make_pair,
    split_seeds,
    write_dataset,
)

__all__ = [
    "DegenerateSceneError",
    "DomainShift",
    "LabeledPair",
    "LayerSpec",
    "SceneSpec",
    "apply_shift",
    "gen_pair",
    "random_scene",
    "texture",
    "SPLIT_NAMES",
    "DatasetSplits",
    "GenConfig",
    "build_splits",
    "load_dataset",
    "make_pair",
    "split_seeds",
    "write_dataset",
]
