"""Category feature patterns and the attention modulation built from them.

A feature pattern for layer ``l`` and category ``c`` holds one value per
feature map: the category's mean spatially averaged activity minus the mean
over all training images, divided by the per-map standard deviation over all
training images (population convention). Maps with zero spread get 0.

Attention to ``c`` at layer ``l`` then either adds ``beta * f`` to the input
of the ReLU (additive) or scales the ReLU output by ``1 + beta * f``
(multiplicative), identically at every spatial position of a map.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T

MODES = ("additive", "multiplicative")
RECTIFICATIONS = ("bidirectional", "positive")

ADDITIVE_BETAS = (4.0, 8.0, 12.0, 16.0, 20.0, 24.0)
MULTIPLICATIVE_BETAS = (0.2, 0.4, 0.6, 0.8, 1.0, 1.2)


def spatial_average(trace, layer: int) -> np.ndarray:
    """Mean activity of each feature map of ReLU layer ``layer``.

    Works on a single-sample trace (``[C, H, W]`` -> ``[C]``) or a batched one
    (``[N, C, H, W]`` -> ``[N, C]``). Fully connected layers have no spatial
    extent, so their node activities are returned as they are.
    """
    x = np.asarray(trace.relu[layer], dtype=np.float64)
    if x.ndim <= 2:  # fc: [D] or [N, D]
        return x
    return x.mean(axis=(-2, -1))


@dataclass
class _Moments:
    n: int
    mean: np.ndarray
    m2: np.ndarray

    def merge(self, other: "_Moments") -> "_Moments":
        n = self.n + other.n
        delta = other.mean - self.mean
        mean = self.mean + delta * (other.n / n)
        m2 = self.m2 + other.m2 + delta**2 * (self.n * other.n / n)
        return _Moments(n, mean, m2)

    @classmethod
    def of(cls, rows: np.ndarray) -> "_Moments":
        rows = np.asarray(rows, dtype=np.float64)
        mean = rows.mean(axis=0)
        return cls(len(rows), mean, ((rows - mean) ** 2).sum(axis=0))


@dataclass
class ActivitySummary:
    """Per-layer, per-category moments of spatially averaged activity.

    Summaries over disjoint image sets combine with :meth:`merge`; the result
    does not depend on merge order beyond floating-point reassociation.
    """

    categories: list[str]
    layers: list[int]
    moments: dict[tuple[int, str], _Moments] = field(default_factory=dict)

    def add(self, category: str, activity: dict[int, np.ndarray]) -> None:
        """Add a batch of images of one category: ``activity[l]`` is ``[n, C_l]``."""
        if category not in self.categories:
            raise ValueError(f"unknown category {category!r}")
        for l in self.layers:
            m = _Moments.of(np.atleast_2d(activity[l]))
            key = (l, category)
            self.moments[key] = self.moments[key].merge(m) if key in self.moments else m

    def merge(self, other: "ActivitySummary") -> "ActivitySummary":
        if other.categories != self.categories or other.layers != self.layers:
            raise ValueError("summaries cover different categories or layers")
        out = ActivitySummary(list(self.categories), list(self.layers), dict(self.moments))
        for key, m in other.moments.items():
            out.moments[key] = out.moments[key].merge(m) if key in out.moments else m
        return out

    def count(self, category: str) -> int:
        m = self.moments.get((self.layers[0], category))
        return 0 if m is None else m.n

    @property
    def total(self) -> int:
        return sum(self.count(c) for c in self.categories)

    def _grand(self, layer: int) -> _Moments:
        if self.total == 0:
            raise ValueError("activity summary holds no images")
        parts = [self.moments[(layer, c)] for c in self.categories if (layer, c) in self.moments]
        acc = parts[0]
        for m in parts[1:]:
            acc = acc.merge(m)
        return acc

    def mean(self, layer: int) -> np.ndarray:
        return self._grand(layer).mean

    def std(self, layer: int) -> np.ndarray:
        g = self._grand(layer)
        return np.sqrt(g.m2 / g.n)

    def category_mean(self, layer: int, category: str) -> np.ndarray:
        if category not in self.categories:
            raise ValueError(f"unknown category {category!r}")
        return self.moments[(layer, category)].mean


def accumulate(batches, categories, layers) -> ActivitySummary:
    """Summarize ``(category, {layer: [n, C_l]})`` batches over a training set."""
    summary = ActivitySummary(list(categories), sorted(layers))
    for category, activity in batches:
        summary.add(category, activity)
    if summary.total == 0:
        raise ValueError("cannot summarize an empty training set (N == 0)")
    return summary


@dataclass
class FeaturePatternSet:
    categories: list[str]
    layers: list[int]
    patterns: dict[tuple[int, str], np.ndarray]
    counts: dict[str, int]
    rectification: str = "bidirectional"
    network_hash: str = ""

    def get(self, layer: int, category: str) -> np.ndarray:
        try:
            return self.patterns[(layer, category)]
        except KeyError:
            raise KeyError(f"no feature pattern for layer {layer}, category {category!r}") from None

    def rectified(self, rectification: str) -> "FeaturePatternSet":
        if rectification not in RECTIFICATIONS:
            raise ValueError(f"unknown rectification {rectification!r}")
        if rectification == self.rectification:
            return self
        if self.rectification == "positive":
            raise ValueError("positive patterns cannot be turned back into bidirectional ones")
        clamped = {k: np.maximum(v, 0).astype(T.DTYPE) for k, v in self.patterns.items()}
        return FeaturePatternSet(
            list(self.categories), list(self.layers), clamped, dict(self.counts), "positive", self.network_hash
        )

    def replace(self, patterns: dict) -> "FeaturePatternSet":
        return FeaturePatternSet(
            list(self.categories), list(self.layers), patterns, dict(self.counts), self.rectification, self.network_hash
        )


def build_patterns(summary: ActivitySummary, rectification: str = "bidirectional", network_hash: str = "") -> FeaturePatternSet:
    patterns = {}
    for l in summary.layers:
        grand = summary.mean(l)
        sigma = summary.std(l)
        live = sigma > 0
        for c in summary.categories:
            if summary.count(c) == 0:
                raise ValueError(f"category {c!r} has no training images")
            f = np.zeros_like(grand)
            f[live] = (summary.category_mean(l, c)[live] - grand[live]) / sigma[live]
            patterns[(l, c)] = f.astype(T.DTYPE)
    out = FeaturePatternSet(
        list(summary.categories),
        list(summary.layers),
        patterns,
        {c: summary.count(c) for c in summary.categories},
        "bidirectional",
        network_hash,
    )
    return out.rectified(rectification)


# -- pattern files ------------------------------------------------------------

PATTERN_HEADER = "fba-patterns 1"


def patterns_text(ps: FeaturePatternSet) -> str:
    lines = [
        PATTERN_HEADER,
        f"network_sha256 {ps.network_hash or '-'}",
        f"rectification {ps.rectification}",
        f"layers {' '.join(str(l) for l in ps.layers)}",
    ]
    for c in ps.categories:
        if not c or any(ch.isspace() for ch in c):
            raise ValueError(f"category names must be non-empty without whitespace: {c!r}")
        lines.append(f"category {c} {ps.counts.get(c, 0)}")
    for l in ps.layers:
        for c in ps.categories:
            v = np.asarray(ps.get(l, c), dtype=T.DTYPE)
            lines.append(f"pattern {l} {c} {len(v)} " + " ".join("%.9g" % x for x in v.tolist()))
    return "\n".join(lines) + "\n"


def save_patterns(ps: FeaturePatternSet, path) -> None:
    Path(path).write_text(patterns_text(ps), encoding="utf-8")


def parse_patterns(text: str) -> FeaturePatternSet:
    lines = text.splitlines()
    if not lines or lines[0].strip() != PATTERN_HEADER:
        raise ValueError("not a feature pattern file (bad header line)")
    net_hash, rect, layers = "", "bidirectional", []
    categories, counts, patterns = [], {}, {}
    for no, line in enumerate(lines[1:], start=2):
        parts = line.split()
        if not parts:
            continue
        tag = parts[0]
        if tag == "network_sha256":
            net_hash = "" if parts[1] == "-" else parts[1]
        elif tag == "rectification":
            rect = parts[1]
        elif tag == "layers":
            layers = [int(p) for p in parts[1:]]
        elif tag == "category":
            categories.append(parts[1])
            counts[parts[1]] = int(parts[2])
        elif tag == "pattern":
            l, c, n = int(parts[1]), parts[2], int(parts[3])
            vals = parts[4:]
            if len(vals) != n:
                raise ValueError(f"line {no}: pattern {l}/{c} declares {n} values, has {len(vals)}")
            patterns[(l, c)] = np.array([float(v) for v in vals], dtype=T.DTYPE)
        else:
            raise ValueError(f"line {no}: unknown record {tag!r}")
    missing = [(l, c) for l in layers for c in categories if (l, c) not in patterns]
    if missing:
        raise ValueError(f"pattern file lacks entries for {missing[:3]}")
    return FeaturePatternSet(categories, layers, patterns, counts, rect, net_hash)


def load_patterns(path) -> FeaturePatternSet:
    return parse_patterns(Path(path).read_text(encoding="utf-8"))


# -- modulation ---------------------------------------------------------------

@dataclass(frozen=True)
class AttentionConfig:
    mode: str
    rectification: str
    layers: frozenset
    beta: float
    multi_layer_scale: float | None = None  # None: 0.5 for several layers, else 1.0
    clamp_slope: bool = False  # floor multiplicative slopes at zero

    def __post_init__(self):
        object.__setattr__(self, "layers", frozenset(int(l) for l in self.layers))
        if self.mode not in MODES:
            raise ValueError(f"unknown attention mode {self.mode!r}")
        if self.rectification not in RECTIFICATIONS:
            raise ValueError(f"unknown rectification {self.rectification!r}")
        if not self.layers:
            raise ValueError("attention needs at least one target layer")
        if not self.beta >= 0:
            raise ValueError(f"beta must be nonnegative, got {self.beta}")

    @property
    def effective_beta(self) -> float:
        if len(self.layers) == 1:
            return self.beta
        scale = 0.5 if self.multi_layer_scale is None else self.multi_layer_scale
        return self.beta * scale


def modulation_terms(config: AttentionConfig, patterns: FeaturePatternSet, layer: int, category: str) -> np.ndarray:
    """Per-map term: ``beta_eff * f`` (additive) or ``1 + beta_eff * f`` (multiplicative)."""
    f = patterns.rectified(config.rectification).get(layer, category).astype(np.float64)
    scaled = config.effective_beta * f
    if config.mode == "additive":
        return scaled
    slope = 1.0 + scaled
    return np.maximum(slope, 0.0) if config.clamp_slope else slope


class Attention:
    """Category-specific modulation applied at the ReLU layers in ``config.layers``."""

    def __init__(self, config: AttentionConfig, patterns: FeaturePatternSet, category: str):
        if category not in patterns.categories:
            raise ValueError(f"unknown category {category!r}")
        self.config = config
        self.category = category
        self.layers = config.layers
        missing = [l for l in sorted(config.layers) if (l, category) not in patterns.patterns]
        if missing:
            raise ValueError(f"no feature pattern for category {category!r} at relu layers {missing}")
        self.terms = {l: modulation_terms(config, patterns, l, category) for l in config.layers}
        self.active = config.effective_beta != 0.0

    def validate(self, spec) -> None:
        for l, t in self.terms.items():
            if len(t) != spec.relu_channels(l):
                raise ValueError(
                    f"pattern for relu layer {l} has {len(t)} entries, layer has {spec.relu_channels(l)} maps"
                )

    def apply(self, layer: int, pre: np.ndarray):
        """Return ``(relu input, relu output)`` for one targeted layer."""
        if not self.active:
            return pre, T.relu(pre)
        t = self.terms[layer].reshape((-1,) + (1,) * (pre.ndim - 2))
        if self.config.mode == "additive":
            pre = (pre.astype(np.float64) + t).astype(T.DTYPE)
            return pre, T.relu(pre)
        return pre, (np.maximum(pre, 0).astype(np.float64) * t).astype(T.DTYPE)
