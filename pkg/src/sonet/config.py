"""Flat ``key = value`` run configuration files."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

from .errors import ConfigError

SUBCOMMAND_REQUIRED = {
    "som": ("dataset",),
    "train-ae": ("dataset",),
    "train-cls": ("dataset",),
    "train-seg": ("dataset",),
    "eval": ("dataset",),
    "retrieve": ("dataset",),
    "robustness": ("dataset",),
    "export-fig": ("dataset",),
}


@dataclass
class RunConfig:
    # dataset
    dataset: str = ""  # synth | mnist | dir
    shapes: tuple = ("sphere", "cube", "cylinder", "torus")
    n_per_class: int = 200
    test_per_class: int = 50
    points: int = 512
    with_parts: bool = False
    data_dir: str = ""
    test_dir: str = ""
    mnist_path: str = ""
    mnist_train: int = 2000
    mnist_test: int = 500
    # SOM
    som_size: int = 8
    som_iters: int = 60
    # encoder
    k: int = 3
    use_normals: bool = False
    point_widths: tuple = (64, 64, 128)
    node_widths: tuple = (256, 512)
    global_dim: int = 512
    hierarchical: bool = False
    k_prime: int = 9
    hier_widths: tuple = (512,)
    # heads
    head_hidden: tuple = (256, 128)
    keep: float = 0.4
    seg_pre: tuple = (256, 128)
    seg_post: tuple = (128,)
    # decoder
    fc_points: int = 64
    grid: int = 4
    stages: int = 2
    channels: tuple = (128, 64, 32)
    coarse_supervision: bool = True
    # optimization
    epochs: int = 20
    batch_size: int = 8
    lr: float = 0.001
    decay_every: int = 0  # 0: chosen from cloud size
    augment: bool = True
    # run
    seed: int = 0
    workers: int = 1
    out: str = "runs"


def _convert(name: str, raw: str, default):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low not in ("1", "0", "true", "false", "yes", "no"):
                raise ValueError(raw)
            return low in ("1", "true", "yes")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            items = [t.strip() for t in raw.split(",") if t.strip()]
            if default and isinstance(default[0], int):
                return tuple(int(t) for t in items)
            return tuple(items)
    except ValueError as exc:
        raise ConfigError(f"{name}: cannot parse {raw!r}") from exc
    return raw


def parse_config(text: str, source: str = "<config>") -> tuple[RunConfig, set]:
    """Parse config text; returns the config and the set of keys that were given."""
    defaults = RunConfig()
    known = {f.name: getattr(defaults, f.name) for f in fields(RunConfig)}
    values, seen = {}, set()
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key = value")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in known:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        if key in seen:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        values[key] = _convert(key, raw, known[key])
        seen.add(key)
    return dataclasses.replace(defaults, **values), seen


def load_config(path, subcommand: str | None = None) -> RunConfig:
    path = Path(path)
    cfg, seen = parse_config(path.read_text(), str(path))
    if subcommand is not None:
        missing = [k for k in SUBCOMMAND_REQUIRED.get(subcommand, ()) if k not in seen]
        if missing:
            raise ConfigError(f"{path}: {subcommand} requires keys: {', '.join(missing)}")
    if cfg.dataset not in ("synth", "mnist", "dir"):
        raise ConfigError(f"{path}: dataset must be synth, mnist or dir, not {cfg.dataset!r}")
    if cfg.dataset == "dir" and not cfg.data_dir:
        raise ConfigError(f"{path}: dataset = dir needs data_dir")
    return cfg
