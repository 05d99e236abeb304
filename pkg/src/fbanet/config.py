"""Run configuration: one TOML file, validated completely before any compute."""

from __future__ import annotations

import hashlib
import json
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import tomli

from .attention import ADDITIVE_BETAS, MODES, MULTIPLICATIVE_BETAS, RECTIFICATIONS
from .classify import IMAGESETS, FoldPlan
from .shapes import SHAPES


class ConfigError(ValueError):
    pass


@dataclass
class PoolConfig:
    source: str = ""  # directory of labeled images; empty for the built-in synthetic shapes
    categories: list = field(default_factory=lambda: list(SHAPES[:6]))
    per_category: int = 400
    train_fraction: float = 0.625


@dataclass
class BackboneConfig:
    width: int = 32
    final_pool: int = 8
    lr: float = 0.01
    momentum: float = 0.9
    epochs: int = 25
    batch: int = 32
    weight_decay: float = 0.0


@dataclass
class ImagesetConfig:
    array_count: int = 600
    merged_count: int = 600
    merged_weight: float = 0.5


@dataclass
class SweepConfig:
    options: list = field(default_factory=lambda: [f"{m}-{r}" for m in MODES for r in RECTIFICATIONS])
    layer_sets: list = field(default_factory=lambda: [[l] for l in range(1, 7)])
    additive_betas: list = field(default_factory=lambda: list(ADDITIVE_BETAS))
    multiplicative_betas: list = field(default_factory=lambda: list(MULTIPLICATIVE_BETAS))
    imagesets: list = field(default_factory=lambda: list(IMAGESETS))
    control: str = "shuffle"  # "shuffle", a noise scale such as "0.5", or "" to skip
    control_options: list = field(default_factory=lambda: ["multiplicative-bidirectional"])


@dataclass
class FoldConfig:
    n_pos: int = 40
    n_neg: int = 40
    n_folds: int = 20
    n_test_pos: int = 40
    n_test_neg: int = 40
    reg: float = 1.0


@dataclass
class RunConfig:
    seed: int
    out: Path
    weights: Path
    patterns: Path
    pool: PoolConfig = field(default_factory=PoolConfig)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    imagesets: ImagesetConfig = field(default_factory=ImagesetConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)
    folds: FoldConfig = field(default_factory=FoldConfig)
    workers: int = 1

    def fold_plan(self) -> FoldPlan:
        f = self.folds
        return FoldPlan(f.n_pos, f.n_neg, f.n_folds, self.seed, f.n_test_pos, f.n_test_neg)

    def derived_seed(self, purpose: str) -> int:
        """Independent stream for one pipeline stage, fixed by the master seed."""
        return int(np.random.SeedSequence([self.seed, zlib.crc32(purpose.encode())]).generate_state(1)[0])

    def betas(self, mode: str) -> list[float]:
        return list(self.sweep.additive_betas if mode == "additive" else self.sweep.multiplicative_betas)

    def sweep_hash(self) -> str:
        """Hash of everything that shapes evaluation records apart from the artifacts."""
        body = {"seed": self.seed, "sweep": asdict(self.sweep), "folds": asdict(self.folds),
                "imagesets": asdict(self.imagesets)}
        return hashlib.sha256(json.dumps(body, sort_keys=True).encode()).hexdigest()


_SECTIONS = {"pool": PoolConfig, "backbone": BackboneConfig, "imagesets": ImagesetConfig,
             "sweep": SweepConfig, "folds": FoldConfig}


def _section(cls, raw, name):
    if not isinstance(raw, dict):
        raise ConfigError(f"[{name}] must be a table")
    defaults = cls()
    known = set(asdict(defaults))
    extra = set(raw) - known
    if extra:
        raise ConfigError(f"[{name}] has unknown keys {sorted(extra)}; allowed: {sorted(known)}")
    values = {}
    for key in known:
        default = getattr(defaults, key)
        v = raw.get(key, default)
        if isinstance(default, bool) or isinstance(v, bool):
            raise ConfigError(f"[{name}] {key} has the wrong type")
        if isinstance(default, int) and not isinstance(v, int):
            raise ConfigError(f"[{name}] {key} must be an integer, got {v!r}")
        if isinstance(default, float) and not isinstance(v, (int, float)):
            raise ConfigError(f"[{name}] {key} must be a number, got {v!r}")
        if isinstance(default, str) and not isinstance(v, str):
            raise ConfigError(f"[{name}] {key} must be a string, got {v!r}")
        if isinstance(default, list) and not isinstance(v, list):
            raise ConfigError(f"[{name}] {key} must be a list, got {v!r}")
        values[key] = float(v) if isinstance(default, float) else v
    return cls(**values)


def parse_config(raw: dict, base_dir: Path, seed: int | None = None, out: str | None = None,
                 workers: int | None = None) -> RunConfig:
    allowed = {"seed", "paths", "workers", *_SECTIONS}
    extra = set(raw) - allowed
    if extra:
        raise ConfigError(f"unknown top-level keys {sorted(extra)}")
    if seed is None:
        if "seed" not in raw:
            raise ConfigError("config needs a master seed (top-level 'seed' or --seed)")
        seed = raw["seed"]
    if not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
        raise ConfigError(f"seed must be a nonnegative integer, got {seed!r}")
    paths = raw.get("paths", {})
    if not isinstance(paths, dict) or set(paths) - {"out", "weights", "patterns"}:
        raise ConfigError("[paths] accepts only out, weights, patterns")
    if workers is None:
        workers = raw.get("workers", 1)
    if not isinstance(workers, int) or isinstance(workers, bool):
        raise ConfigError(f"workers must be an integer, got {workers!r}")
    out_dir = Path(out) if out is not None else base_dir / paths.get("out", "run")
    sections = {name: _section(cls, raw.get(name, {}), name) for name, cls in _SECTIONS.items()}
    cfg = RunConfig(
        seed=seed,
        out=out_dir,
        weights=(base_dir / paths["weights"]) if "weights" in paths else out_dir / "weights.bin",
        patterns=(base_dir / paths["patterns"]) if "patterns" in paths else out_dir / "patterns.txt",
        workers=workers,
        **sections,
    )
    if cfg.pool.source:
        cfg.pool.source = str(base_dir / cfg.pool.source)
    validate(cfg)
    return cfg


def load_config(path, **overrides) -> RunConfig:
    path = Path(path)
    try:
        raw = tomli.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except tomli.TOMLDecodeError as e:
        raise ConfigError(f"{path}: {e}") from None
    return parse_config(raw, path.parent, **overrides)


NUM_RELU = 6  # relu layers of the desk backbone


def validate(cfg: RunConfig) -> None:
    p, b, s, f = cfg.pool, cfg.backbone, cfg.sweep, cfg.folds
    if p.source and not Path(p.source).is_dir():
        raise ConfigError(f"image pool directory does not exist: {p.source}")
    if not p.source:
        unknown = [c for c in p.categories if c not in SHAPES]
        if unknown:
            raise ConfigError(f"unknown synthetic categories {unknown}; available: {list(SHAPES)}")
        if len(p.categories) < 2:
            raise ConfigError("need at least two categories")
        if p.per_category < 2:
            raise ConfigError("per_category must be at least 2")
    if not 0 < p.train_fraction < 1:
        raise ConfigError(f"train_fraction must lie in (0, 1), got {p.train_fraction}")
    if b.width < 1 or b.epochs < 0 or b.batch < 1 or not b.lr > 0:
        raise ConfigError("backbone width, batch and lr must be positive; epochs nonnegative")
    if b.final_pool < 1 or 8 % b.final_pool:
        raise ConfigError(f"final_pool {b.final_pool} must divide the 8x8 map of the last conv block")
    if cfg.imagesets.array_count < 1 or cfg.imagesets.merged_count < 1:
        raise ConfigError("imageset counts must be positive")
    if not 0 < cfg.imagesets.merged_weight < 1:
        raise ConfigError(f"merged_weight must lie in (0, 1), got {cfg.imagesets.merged_weight}")
    for opt in list(s.options) + list(s.control_options):
        mode, _, rect = str(opt).partition("-")
        if mode not in MODES or rect not in RECTIFICATIONS:
            raise ConfigError(f"unknown option {opt!r}; use mode-rectification such as 'multiplicative-bidirectional'")
    if not s.layer_sets:
        raise ConfigError("layer_sets must be nonempty")
    for ls in s.layer_sets:
        if not isinstance(ls, list) or not ls or any(not isinstance(l, int) or not 1 <= l <= NUM_RELU for l in ls):
            raise ConfigError(f"layer set {ls!r} must be a nonempty list of relu indices 1..{NUM_RELU}")
        if len(set(ls)) != len(ls):
            raise ConfigError(f"layer set {ls!r} repeats a layer")
    for name in ("additive_betas", "multiplicative_betas"):
        grid = getattr(s, name)
        if not grid:
            raise ConfigError(f"{name} must be nonempty")
        if any(not isinstance(x, (int, float)) or isinstance(x, bool) or not x > 0 for x in grid):
            raise ConfigError(f"{name} must hold positive numbers, got {grid}")
        setattr(s, name, sorted(float(x) for x in grid))
    bad = [i for i in s.imagesets if i not in IMAGESETS]
    if bad or not s.imagesets:
        raise ConfigError(f"sweep imagesets must be drawn from {list(IMAGESETS)}, got {s.imagesets}")
    if s.control not in ("", "shuffle"):
        try:
            if float(s.control) < 0:
                raise ValueError
        except ValueError:
            raise ConfigError(f"control must be 'shuffle', a nonnegative noise scale, or empty; got {s.control!r}") from None
    if min(f.n_pos, f.n_neg, f.n_test_pos, f.n_test_neg) < 1 or f.n_folds < 1 or not f.reg > 0:
        raise ConfigError("fold sizes and n_folds must be positive, reg > 0")
    if cfg.workers < 1:
        raise ConfigError(f"workers must be at least 1, got {cfg.workers}")
