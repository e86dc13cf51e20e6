"""Dataset split construction and on-disk layout.

Four splits: source (clean-domain labeled), target_train (small labeled,
shifted domain), target_unlabeled (large, labels withheld), target_test
(held-out labeled, shifted). Scene seeds are allocated from disjoint
blocks of the root seed's space, so splits can never share a scene.

On disk: <root>/<split>/NNNNNN_img1.png, _img2.png, _flow.bin, _mask.png,
plus <root>/manifest.json recording the config and per-split seeds.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from ..flowcore import io as fio
from .generator import DomainShift, LabeledPair, apply_shift, gen_pair, random_scene

SPLIT_NAMES = ("source", "target_train", "target_unlabeled", "target_test")
_SEED_BLOCK = 1_000_000


@dataclass(frozen=True)
class GenConfig:
    root_seed: int = 0
    height: int = 64
    width: int = 64
    max_disp: float = 8.0
    n_source: int = 500
    n_target_train: int = 50
    n_target_unlabeled: int = 500
    n_target_test: int = 100
    shift: DomainShift = field(default_factory=lambda: DomainShift(
        noise_sigma=0.05, gamma=1.3))

    def __post_init__(self):
        for name in ("n_source", "n_target_train", "n_target_unlabeled",
                     "n_target_test"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be > 0")

    def sizes(self) -> dict:
        return {
            "source": self.n_source,
            "target_train": self.n_target_train,
            "target_unlabeled": self.n_target_unlabeled,
            "target_test": self.n_target_test,
        }


def split_seeds(cfg: GenConfig) -> dict:
    """Disjoint per-split scene seeds derived from the root seed."""
    base = cfg.root_seed * 10_000_000
    out = {}
    for block, name in enumerate(SPLIT_NAMES):
        n = cfg.sizes()[name]
        if n > _SEED_BLOCK:
            raise ValueError(f"split {name} size {n} exceeds seed block")
        out[name] = [base + block * _SEED_BLOCK + i for i in range(n)]
    return out


def make_pair(cfg: GenConfig, split: str, seed: int) -> LabeledPair:
    """Generate (and, for target splits, domain-shift) one pair."""
    spec = random_scene(seed, height=cfg.height, width=cfg.width,
                        max_disp=cfg.max_disp)
    pair = gen_pair(spec)
    if split != "source":
        pair = apply_shift(pair, cfg.shift, seed=seed)
    return pair


@dataclass
class DatasetSplits:
    """In-memory realization of the four splits."""
    config: GenConfig
    pairs: dict  # split name -> list[LabeledPair]

    def __getitem__(self, name: str):
        return self.pairs[name]


def build_splits(cfg: GenConfig, splits=SPLIT_NAMES, threads: int = 1) -> DatasetSplits:
    seeds = split_seeds(cfg)
    pairs = {}
    for name in splits:
        jobs = [(name, s) for s in seeds[name]]
        if threads > 1:
            from ..parallel import run_parallel
            results = run_parallel(_pair_job, [(cfg, n, s) for n, s in jobs],
                                   threads)
        else:
            results = [make_pair(cfg, n, s) for n, s in jobs]
        pairs[name] = results
    return DatasetSplits(config=cfg, pairs=pairs)


def _pair_job(args):
    cfg, name, seed = args
    return make_pair(cfg, name, seed)


# ---------------------------------------------------------------------------
# disk layout


def _pair_paths(split_dir: str, index: int) -> dict:
    stem = os.path.join(split_dir, f"{index:06d}")
    return {
        "img1": stem + "_img1.png",
        "img2": stem + "_img2.png",
        "flow": stem + "_flow.bin",
        "mask": stem + "_mask.png",
    }


def write_dataset(cfg: GenConfig, out_root: str, threads: int = 1) -> None:
    """Materialize all four splits under out_root, plus a manifest."""
    seeds = split_seeds(cfg)
    os.makedirs(out_root, exist_ok=True)
    for name in SPLIT_NAMES:
        split_dir = os.path.join(out_root, name)
        os.makedirs(split_dir, exist_ok=True)
        if threads > 1:
            from ..parallel import run_parallel
            run_parallel(_write_job,
                         [(cfg, name, i, s, split_dir)
                          for i, s in enumerate(seeds[name])], threads)
        else:
            for i, s in enumerate(seeds[name]):
                _write_job((cfg, name, i, s, split_dir))
    manifest = {
        "config": _cfg_dict(cfg),
        "seeds": seeds,
        "splits": {name: len(seeds[name]) for name in SPLIT_NAMES},
    }
    with open(os.path.join(out_root, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _write_job(args):
    cfg, name, index, seed, split_dir = args
    pair = make_pair(cfg, name, seed)
    paths = _pair_paths(split_dir, index)
    fio.write_image(pair.img1, paths["img1"])
    fio.write_image(pair.img2, paths["img2"])
    fio.write_flow_raw(pair.flow.astype(np.float32), paths["flow"])
    fio.write_mask(pair.mask, paths["mask"])


def _cfg_dict(cfg: GenConfig) -> dict:
    d = asdict(cfg)
    d["shift"] = asdict(cfg.shift)
    return d


def load_dataset(root: str, splits=SPLIT_NAMES) -> DatasetSplits:
    """Read a materialized dataset back into memory."""
    with open(os.path.join(root, "manifest.json")) as fh:
        manifest = json.load(fh)
    cd = dict(manifest["config"])
    cd["shift"] = DomainShift(**cd["shift"])
    cfg = GenConfig(**cd)
    pairs = {}
    for name in splits:
        n = manifest["splits"][name]
        split_dir = os.path.join(root, name)
        items = []
        for i in range(n):
            paths = _pair_paths(split_dir, i)
            items.append(LabeledPair(
                img1=fio.read_image(paths["img1"]),
                img2=fio.read_image(paths["img2"]),
                flow=fio.read_flow_raw(paths["flow"]).astype(np.float64),
                mask=fio.read_mask(paths["mask"]),
                seed=manifest["seeds"][name][i],
            ))
        pairs[name] = items
    return DatasetSplits(config=cfg, pairs=pairs)


__all__ = [
    "SPLIT_NAMES",
    "DatasetSplits",
    "GenConfig",
    "build_splits",
    "load_dataset",
    "make_pair",
    "split_seeds",
    "write_dataset",
]
