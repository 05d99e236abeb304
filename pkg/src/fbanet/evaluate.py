"""Analyses over EvalRecord tables.

Everything here is a pure function of its inputs. Accuracies are reported in
percentage points; rates are fractions.
"""

from __future__ import annotations

import csv
import io
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import wilcoxon

from .attention import FeaturePatternSet
from .records import EvalRecord

ALPHA = 0.05
TEST_NAME = "wilcoxon signed-rank, paired over folds, two-sided"
AXES = ("layers", "options", "mode-within-rectification", "rectification-within-mode")


def _condition(r: EvalRecord) -> tuple:
    return (r.category, r.imageset, r.mode, r.rectification, r.layers, float(r.beta))


def _by_fold(records) -> dict[tuple, dict[int, EvalRecord]]:
    out: dict[tuple, dict[int, EvalRecord]] = defaultdict(dict)
    for r in records:
        folds = out[_condition(r)]
        if r.fold in folds:
            raise ValueError(f"duplicate record for fold {r.fold} of {_condition(r)}")
        folds[r.fold] = r
    return out


def _mean_accuracy(folds: dict[int, EvalRecord]) -> float:
    return float(np.mean([folds[k].accuracy for k in sorted(folds)]))


@dataclass(frozen=True)
class DeltaRow:
    category: str
    imageset: str
    mode: str
    rectification: str
    layers: str
    beta: float
    baseline: float
    attended: float
    delta: float
    folds: int


def accuracy_delta(records) -> list[DeltaRow]:
    """Mean fold accuracy with attention minus the matched no-attention baseline, in points.

    Baselines match on (category, imageset). Deltas are taken over the folds
    both conditions share, so the comparison stays paired.
    """
    table = _by_fold(records)
    base = {(k[0], k[1]): v for k, v in table.items() if k[2] == "none"}
    rows = []
    for key in sorted(k for k in table if k[2] != "none"):
        b = base.get((key[0], key[1]))
        if b is None:
            raise ValueError(f"no baseline records for category {key[0]!r} on imageset {key[1]!r}")
        att = table[key]
        if set(att) != set(b):
            raise ValueError(f"folds of {key} do not match its baseline folds")
        a_mean, b_mean = _mean_accuracy(att), _mean_accuracy(b)
        rows.append(DeltaRow(*key, 100 * b_mean, 100 * a_mean, 100 * a_mean - 100 * b_mean, len(att)))
    return rows


def best_beta(rows) -> list[DeltaRow]:
    """Best-strength row per (category, imageset, mode, rectification, layers); ties go to the smaller beta."""
    best: dict[tuple, DeltaRow] = {}
    for r in sorted(rows, key=lambda r: (r.category, r.imageset, r.mode, r.rectification, r.layers, r.beta)):
        k = (r.category, r.imageset, r.mode, r.rectification, r.layers)
        if k not in best or r.attended > best[k].attended:
            best[k] = r
    return [best[k] for k in sorted(best)]


def _rates(folds: dict[int, EvalRecord]) -> tuple[float, float]:
    fpr = [r.fp / (r.fp + r.tn) for r in folds.values()]
    tpr = [r.tp / (r.tp + r.fn) for r in folds.values()]
    return float(np.mean(fpr)), float(np.mean(tpr))


def _strength_series(records, category, imageset, mode, rectification, layers):
    table = _by_fold(records)
    base = table.get((category, imageset, "none", "none", "", 0.0))
    if base is None:
        raise ValueError(f"no baseline records for category {category!r} on imageset {imageset!r}")
    series = {0.0: base}
    for k, v in table.items():
        if k[:5] == (category, imageset, mode, rectification, layers) and k[5] != 0.0:
            series[k[5]] = v
    if len(series) < 2:
        raise ValueError("a strength curve needs at least two beta values")
    return series


def roc_by_strength(records, category, imageset, mode, rectification, layers) -> list[tuple[float, float, float]]:
    """``(beta, FPR, TPR)`` per strength, fold-averaged; beta 0 is the no-attention baseline."""
    series = _strength_series(records, category, imageset, mode, rectification, layers)
    return [(b, *_rates(series[b])) for b in sorted(series)]


def rate_trajectory(records, category, imageset, mode, rectification, layers) -> list[tuple[float, float, float]]:
    """``(beta, change in FP rate, change in FN rate)`` relative to the baseline."""
    series = _strength_series(records, category, imageset, mode, rectification, layers)
    fpr0, tpr0 = _rates(series[0.0])
    out = []
    for b in sorted(series):
        fpr, tpr = _rates(series[b])
        out.append((b, fpr - fpr0, (1 - tpr) - (1 - tpr0)))
    return out


def topk_merged_error(probs, sources, class_names, k: int) -> float:
    """Fraction of merged images where neither source category is among the top ``k`` classes."""
    probs = np.asarray(probs, dtype=np.float64)
    names = list(class_names)
    if probs.ndim != 2 or probs.shape[1] != len(names):
        raise ValueError(f"softmax table has shape {probs.shape}, expected [N, {len(names)}]")
    if len(sources) != len(probs):
        raise ValueError(f"{len(sources)} manifest entries for {len(probs)} softmax rows")
    if not 1 <= k <= len(names):
        raise ValueError(f"k must be in [1, {len(names)}], got {k}")
    # stable sort so equal probabilities rank by class order
    top = np.argsort(-probs, axis=1, kind="stable")[:, :k]
    wrong = 0
    for row, cats in zip(top, sources):
        unknown = [c for c in cats if c not in names]
        if unknown:
            raise ValueError(f"manifest category {unknown[0]!r} is not a softmax class")
        wanted = {names.index(c) for c in cats}
        wrong += not wanted.intersection(row.tolist())
    return wrong / len(probs)


def paired_test(a, b) -> float:
    """Two-sided p-value of the Wilcoxon signed-rank test on paired fold accuracies."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("paired test needs two equal-length sequences")
    if len(a) < 2:
        raise ValueError("significance testing needs at least 2 folds")
    d = a - b
    if not d.any():
        return 1.0
    return float(wilcoxon(d, zero_method="wilcox", alternative="two-sided").pvalue)


@dataclass
class CellResult:
    cell: tuple
    means: dict
    winner: str | None
    p_value: float
    significant: bool


@dataclass
class ComparisonResult:
    axis: str
    options: list
    wins: dict
    significant_wins: dict
    p_values: dict
    test: str = TEST_NAME
    cells: list = field(default_factory=list)

    def wins_by_category(self) -> dict[str, dict[str, int]]:
        out: dict[str, dict[str, int]] = defaultdict(lambda: dict.fromkeys(self.options, 0))
        for c in self.cells:
            if c.winner is not None:
                out[c.cell[0]][c.winner] += 1
        return dict(out)


def _best_beta_folds(table, cond5) -> dict[int, EvalRecord] | None:
    """Fold records at the best strength of a (category, imageset, mode, rect, layers) condition."""
    cands = sorted((k[5], v) for k, v in table.items() if k[:5] == cond5 and k[5] != 0.0)
    if not cands:
        return None
    best = None
    for beta, folds in cands:
        if best is None or _mean_accuracy(folds) > _mean_accuracy(best):
            best = folds
    return best


def _axis_split(axis: str, cond5: tuple) -> tuple[tuple, str]:
    """Map a condition to (cell key, compared option) for the given axis."""
    category, imageset, mode, rect, layers = cond5
    if axis == "layers":
        return (category, imageset, f"{mode}-{rect}"), layers
    if axis == "options":
        return (category, imageset, layers), f"{mode}-{rect}"
    if axis == "mode-within-rectification":
        return (category, imageset, layers, rect), mode
    if axis == "rectification-within-mode":
        return (category, imageset, layers, mode), rect
    raise ValueError(f"unknown comparison axis {axis!r}; expected one of {AXES}")


def win_histograms(records, axis: str) -> ComparisonResult:
    """Count per-cell winners along ``axis`` using best-strength fold accuracies.

    A cell's winner has the highest mean fold accuracy; exact ties have no
    winner. A win is significant when the winner beats every other option in
    the cell at p < ALPHA. Reported p-values per option are the median over
    the cells it won, using the largest p against its competitors.
    """
    if axis not in AXES:
        raise ValueError(f"unknown comparison axis {axis!r}; expected one of {AXES}")
    table = _by_fold([r for r in records if r.has_attention])
    conds = sorted({k[:5] for k in table})
    cells: dict[tuple, dict[str, dict[int, EvalRecord]]] = defaultdict(dict)
    for cond in conds:
        folds = _best_beta_folds(table, cond)
        if folds is None:
            continue
        cell, option = _axis_split(axis, cond)
        cells[cell][option] = folds
    options = sorted({o for c in cells.values() for o in c})
    wins = dict.fromkeys(options, 0)
    sig = dict.fromkeys(options, 0)
    won_p: dict[str, list[float]] = {o: [] for o in options}
    results = []
    for cell in sorted(cells):
        entries = cells[cell]
        if len(entries) < 2:
            continue
        fold_sets = {tuple(sorted(f)) for f in entries.values()}
        if len(fold_sets) != 1:
            raise ValueError(f"unbalanced fold sets in cell {cell}: {sorted(len(f) for f in fold_sets)} folds")
        fold_ids = fold_sets.pop()
        acc = {o: np.array([entries[o][i].accuracy for i in fold_ids]) for o in entries}
        means = {o: float(acc[o].mean()) for o in sorted(acc)}
        top = max(means.values())
        leaders = [o for o in means if means[o] == top]
        if len(leaders) > 1:
            results.append(CellResult(cell, means, None, 1.0, False))
            continue
        winner = leaders[0]
        p = max(paired_test(acc[winner], acc[o]) for o in acc if o != winner)
        wins[winner] += 1
        won_p[winner].append(p)
        if p < ALPHA:
            sig[winner] += 1
        results.append(CellResult(cell, means, winner, p, p < ALPHA))
    p_values = {o: (float(np.median(won_p[o])) if won_p[o] else float("nan")) for o in options}
    return ComparisonResult(axis, options, wins, sig, p_values, cells=results)


def perturb_patterns(patterns: FeaturePatternSet, scale, seed: int) -> FeaturePatternSet:
    """Seeded Gaussian noise of standard deviation ``scale``, or ``"shuffle"`` to permute each vector."""
    shuffle = isinstance(scale, str)
    if shuffle and scale != "shuffle":
        raise ValueError(f"noise scale must be a number or 'shuffle', got {scale!r}")
    if not shuffle and not scale >= 0:
        raise ValueError(f"noise scale must be nonnegative, got {scale}")
    out = {}
    for (layer, cat), vec in sorted(patterns.patterns.items()):
        rng = np.random.default_rng([seed, layer, patterns.categories.index(cat)])
        if shuffle:
            out[(layer, cat)] = rng.permutation(vec).astype(vec.dtype)
        elif scale == 0:
            out[(layer, cat)] = vec.copy()
        else:
            out[(layer, cat)] = (vec.astype(np.float64) + rng.normal(0.0, scale, vec.shape)).astype(vec.dtype)
    return patterns.replace(out)


def control_comparison(true_records, control_records, imageset: str = "array") -> list[tuple]:
    """Per category: best true-pattern gain, best perturbed-pattern gain, and whether true wins.

    Gains are best-strength deltas maximized over the layer sets both
    tables cover.
    """
    def best_gain(records):
        out: dict[tuple, float] = {}
        for r in best_beta(accuracy_delta(records)):
            if r.imageset != imageset:
                continue
            out[(r.category, r.mode, r.rectification, r.layers)] = r.delta
        return out

    t, c = best_gain(true_records), best_gain(control_records)
    shared = sorted(set(t) & set(c))
    if not shared:
        raise ValueError("true and control records share no attention conditions")
    rows = []
    for cat in sorted({k[0] for k in shared}):
        keys = [k for k in shared if k[0] == cat]
        tg, cg = max(t[k] for k in keys), max(c[k] for k in keys)
        rows.append((cat, tg, cg, tg > cg))
    return rows


def csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([repr(v) if isinstance(v, float) else v for v in row])
    return buf.getvalue()


def delta_csv(rows) -> str:
    return csv_text(("category", "imageset", "mode", "rectification", "layers", "beta",
                     "baseline", "attended", "delta", "folds"),
                    [(r.category, r.imageset, r.mode, r.rectification, r.layers, r.beta,
                      r.baseline, r.attended, r.delta, r.folds) for r in rows])


def histogram_csv(result: ComparisonResult) -> str:
    return csv_text(("option", "wins", "significant_wins", "p_value"),
                    [(o, result.wins[o], result.significant_wins[o], result.p_values[o]) for o in result.options])


def cells_csv(result: ComparisonResult) -> str:
    rows = []
    for c in result.cells:
        rows.append(("/".join(c.cell), c.winner or "", c.p_value, int(c.significant),
                     ";".join(f"{o}={m!r}" for o, m in c.means.items())))
    return csv_text(("cell", "winner", "p_value", "significant", "mean_accuracy"), rows)
