"""Pipeline stages behind the command-line interface.

Each stage reads its inputs from disk, checks their provenance hashes and
writes outputs that record the hashes they were built from. A stage's output
depends only on its config and input artifacts; the master seed is part of
the config.
"""

from __future__ import annotations

import hashlib
import logging
import multiprocessing as mp
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import evaluate as E
from .attention import Attention, AttentionConfig, accumulate, build_patterns, load_patterns, save_patterns, spatial_average
from .classify import IMAGESETS, score_folds, train_fold_classifiers
from .config import RunConfig
from .imagesets import ImageRecord, load_pool_dir, make_array, make_merged, read_imageset, rebuild, write_imageset
from .network import ForwardTrace, desk_backbone, forward, load_weights, network_hash, read_weights_header, save_weights
from .records import COLUMNS, EvalRecord, layer_key, read_records, records_csv, rows_csv
from .shapes import synthetic_pool
from .train import TrainConfig, train_backbone

log = logging.getLogger(__name__)


class PipelineError(RuntimeError):
    """A stage cannot run on the artifacts it was given."""


def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def pool_hash(pool) -> str:
    h = hashlib.sha256()
    for r in sorted(pool, key=lambda r: r.id):
        h.update(f"{r.id}\0{r.category}\0{r.pixels.shape}\0".encode())
        h.update(np.ascontiguousarray(r.pixels, dtype="<f4").tobytes())
    return h.hexdigest()


@dataclass
class Pool:
    categories: list
    train: list
    sources: list

    @property
    def all(self) -> list:
        return self.train + self.sources


def load_pool(cfg: RunConfig) -> Pool:
    """Labeled pool split per category: the first part trains, the rest feeds test sets and composites."""
    p = cfg.pool
    records = load_pool_dir(p.source) if p.source else synthetic_pool(tuple(p.categories), p.per_category, cfg.seed)
    by_cat: dict[str, list[ImageRecord]] = {}
    if p.source:
        for d in sorted(Path(p.source).iterdir()):
            if d.is_dir():
                by_cat[d.name] = []
    for r in records:
        by_cat.setdefault(r.category, []).append(r)
    cats = sorted(by_cat)
    empty = [c for c in cats if not by_cat[c]]
    if empty:
        raise PipelineError(f"category {empty[0]!r} has no images in the pool")
    if len(cats) < 2:
        raise PipelineError(f"the image pool has {len(cats)} categories; need at least 2")
    shapes = {r.pixels.shape for r in records}
    if len(shapes) != 1:
        raise PipelineError(f"pool images differ in shape: {sorted(shapes)}")
    train, sources = [], []
    for c in cats:
        items = sorted(by_cat[c], key=lambda r: r.id)
        n_train = int(round(p.train_fraction * len(items)))
        if n_train < 1 or n_train >= len(items):
            raise PipelineError(f"category {c!r} has {len(items)} images, too few to split at {p.train_fraction}")
        train += items[:n_train]
        sources += items[n_train:]
    return Pool(cats, train, sources)


def _write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")


# -- train ----------------------------------------------------------------------

def cmd_train(cfg: RunConfig) -> Path:
    pool = load_pool(cfg)
    b = cfg.backbone
    x = np.stack([r.pixels for r in pool.train])
    y = np.array([pool.categories.index(r.category) for r in pool.train])
    spec = desk_backbone(len(pool.categories), x.shape[1:], b.width, b.final_pool)
    result = train_backbone(x, y, spec, TrainConfig(b.lr, b.momentum, b.epochs, b.batch, cfg.seed, b.weight_decay))
    provenance = {"pool_sha256": pool_hash(pool.all), "categories": pool.categories, "seed": cfg.seed}
    cfg.weights.parent.mkdir(parents=True, exist_ok=True)
    save_weights(result.net, cfg.weights, provenance)
    rows = [(h["epoch"], h["loss"], h["accuracy"]) for h in result.history]
    _write_text(cfg.out / "train_log.csv", E.csv_text(("epoch", "loss", "accuracy"), rows))
    return cfg.weights


def _load_net(cfg: RunConfig):
    if not cfg.weights.is_file():
        raise PipelineError(f"weight file not found: {cfg.weights} (run 'train' first)")
    return load_weights(cfg.weights)


def _weight_categories(cfg: RunConfig) -> list:
    return read_weights_header(cfg.weights).get("provenance", {}).get("categories", [])


# -- patterns -------------------------------------------------------------------

BATCH = 256


def batched_forward(net, images, attention=None, resume=None, keep=None) -> ForwardTrace:
    """Forward in fixed-size chunks; results do not depend on the chunk size."""
    parts = []
    for i in range(0, len(images), BATCH):
        chunk = slice(i, i + BATCH)
        parts.append(forward(net, images[chunk], attention, None if resume is None else resume.sample(chunk), keep))
    if len(parts) == 1:
        return parts[0]
    join = lambda arrays: np.concatenate(list(arrays))
    return ForwardTrace(
        {l: join(p.pre_relu[l] for p in parts) for l in parts[0].pre_relu},
        {l: join(p.relu[l] for p in parts) for l in parts[0].relu},
        join(p.features for p in parts),
        join(p.logits for p in parts),
        None if parts[0].probs is None else join(p.probs for p in parts),
    )


def cmd_extract_patterns(cfg: RunConfig):
    net = _load_net(cfg)
    pool = load_pool(cfg)
    layers = list(range(1, net.spec.num_relu + 1))
    summary_batches = []
    for c in pool.categories:
        imgs = [r.pixels for r in pool.train if r.category == c]
        if not imgs:
            raise PipelineError(f"category {c!r} has no training images")
        trace = batched_forward(net, np.stack(imgs))
        summary_batches.append((c, {l: spatial_average(trace, l) for l in layers}))
    summary = accumulate(summary_batches, pool.categories, layers)
    patterns = build_patterns(summary, "bidirectional", network_hash(net))
    cfg.patterns.parent.mkdir(parents=True, exist_ok=True)
    save_patterns(patterns, cfg.patterns)
    return patterns


def _checked_patterns(cfg: RunConfig, net):
    if not cfg.patterns.is_file():
        raise PipelineError(f"pattern file not found: {cfg.patterns} (run 'extract-patterns' first)")
    patterns = load_patterns(cfg.patterns)
    if patterns.network_hash != network_hash(net):
        raise PipelineError(
            f"stale patterns: {cfg.patterns} was extracted from network {patterns.network_hash[:12] or 'unknown'}, "
            f"but {cfg.weights} now holds network {network_hash(net)[:12]}; rerun 'extract-patterns'"
        )
    return patterns


# -- imagesets ------------------------------------------------------------------

COMPOSITES = ("array", "merged")


def cmd_make_imagesets(cfg: RunConfig) -> dict:
    pool = load_pool(cfg)
    size = pool.sources[0].pixels.shape[-1]
    ph = pool_hash(pool.all)
    out = {}
    for kind in COMPOSITES:
        seed = cfg.derived_seed(kind)
        if kind == "array":
            recs = make_array(pool.sources, cfg.imagesets.array_count, seed, size)
        else:
            recs = make_merged(pool.sources, cfg.imagesets.merged_count, seed, cfg.imagesets.merged_weight)
        header = {"kind": kind, "seed": seed, "pool_sha256": ph, "count": len(recs)}
        out[kind] = write_imageset(recs, cfg.out / "imagesets" / kind, header)
    return out


def _load_composites(cfg: RunConfig, pool: Pool, kind: str):
    manifest = cfg.out / "imagesets" / kind / "manifest.jsonl"
    if not manifest.is_file():
        raise PipelineError(f"imageset manifest not found: {manifest} (run 'make-imagesets' first)")
    header, recs = read_imageset(manifest.parent)
    if header.get("pool_sha256") != pool_hash(pool.all):
        raise PipelineError(f"stale imageset: {manifest} was built from a different image pool; rerun 'make-imagesets'")
    by_id = {r.id: r for r in pool.sources}
    size = pool.sources[0].pixels.shape[-1]
    # pixels are rebuilt from provenance, so evaluation never sees PNM quantization
    pixels = np.stack([rebuild(r.manifest_entry(), by_id, size) for r in recs])
    return pixels, [list(r.categories) for r in recs], sha256_file(manifest)


# -- evaluate -------------------------------------------------------------------

@dataclass(frozen=True)
class Cell:
    """One sweep condition for one category; all folds are computed together."""

    category: str
    imageset: str
    mode: str
    rectification: str
    layers: str
    beta: float

    @property
    def key(self) -> tuple:
        return (self.category, self.imageset, self.mode, self.rectification, self.layers, self.beta)


def sweep_cells(cfg: RunConfig, categories, control: bool = False) -> list[Cell]:
    options = cfg.sweep.control_options if control else cfg.sweep.options
    cells = []
    for cat in categories:
        if not control:
            cells += [Cell(cat, i, "none", "none", "", 0.0) for i in IMAGESETS]
        for imageset in cfg.sweep.imagesets:
            for opt in options:
                mode, rect = opt.split("-")
                for ls in cfg.sweep.layer_sets:
                    for beta in cfg.betas(mode):
                        cells.append(Cell(cat, imageset, mode, rect, layer_key(ls), float(beta)))
    return sorted(set(cells), key=lambda c: c.key)


_STATE: dict = {}


def _run_cell(cell: Cell) -> list[EvalRecord]:
    st = _STATE
    ci = st["categories"].index(cell.category)
    base = st["base"][cell.imageset]
    if cell.mode == "none":
        feats = base.features
    else:
        layers = [int(l) for l in cell.layers.split("+")]
        att = Attention(AttentionConfig(cell.mode, cell.rectification, layers, cell.beta), st["patterns"], cell.category)
        feats = batched_forward(st["net"], st["pixels"][cell.imageset], att, base, keep=()).features
    present = np.array([cell.category in cats for cats in st["labels"][cell.imageset]])
    key = dict(imageset=cell.imageset, mode=cell.mode, rectification=cell.rectification,
               layers=cell.layers, beta=cell.beta)
    return score_folds(st["plan"], cell.category, ci, st["classifiers"][cell.category], [(key, feats, present)])


def _init_worker(state):
    _STATE.clear()
    _STATE.update(state)


def _existing(path: Path, provenance: dict, resume: bool, n_folds: int):
    """Cells already complete in ``path``; a mismatched provenance is refused."""
    if not path.exists():
        return set(), []
    if not resume:
        raise PipelineError(f"{path} already exists; pass --resume to continue it or choose another --out")
    text = path.read_text()
    if text and not text.endswith("\n"):
        text = text[: text.rfind("\n") + 1]
        path.write_text(text)
    old, records = read_records(path)
    if old != provenance:
        changed = sorted(k for k in set(old) | set(provenance) if old.get(k) != provenance.get(k))
        raise PipelineError(f"cannot resume {path}: its inputs changed ({', '.join(changed)}); remove it to start over")
    folds: dict[tuple, set] = {}
    for r in records:
        folds.setdefault((r.category, r.imageset, r.mode, r.rectification, r.layers, float(r.beta)), set()).add(r.fold)
    done = {k for k, f in folds.items() if f == set(range(n_folds))}
    kept = [r for r in records if (r.category, r.imageset, r.mode, r.rectification, r.layers, float(r.beta)) in done]
    if len(kept) != len(records):
        log.warning("%s: dropping %d rows of incomplete cells", path, len(records) - len(kept))
        path.write_text(records_csv(kept, provenance))
    return done, kept


def _sweep(path: Path, cells, provenance: dict, resume: bool, workers: int, state: dict, n_folds: int) -> list:
    done, records = _existing(path, provenance, resume, n_folds)
    todo = [c for c in cells if c.key not in done]
    if not path.exists():
        _write_text(path, records_csv([], provenance))
    log.info("%s: %d cells to run, %d already done", path.name, len(todo), len(done))
    with path.open("a", encoding="utf-8") as fh:
        if workers > 1 and len(todo) > 1:
            ctx = mp.get_context("fork")
            with ctx.Pool(workers, initializer=_init_worker, initargs=(state,)) as pool:
                results = pool.imap(_run_cell, todo)
                for recs in results:
                    fh.write(rows_csv(recs))
                    fh.flush()
                    records += recs
        else:
            _init_worker(state)
            for cell in todo:
                recs = _run_cell(cell)
                fh.write(rows_csv(recs))
                fh.flush()
                records += recs
    # cells land in sweep order, so a resumed file ends up identical to a fresh one
    order = {c.key: i for i, c in enumerate(cells)}
    records.sort(key=lambda r: (order[(r.category, r.imageset, r.mode, r.rectification, r.layers, float(r.beta))], r.fold))
    path.write_text(records_csv(records, provenance))
    return records


def cmd_evaluate(cfg: RunConfig, resume: bool = False, workers: int | None = None) -> Path:
    net = _load_net(cfg)
    patterns = _checked_patterns(cfg, net)
    pool = load_pool(cfg)
    if patterns.categories != pool.categories:
        raise PipelineError(f"pattern categories {patterns.categories} do not match pool categories {pool.categories}")
    for ls in cfg.sweep.layer_sets:
        if max(ls) > net.spec.num_relu:
            raise PipelineError(f"layer set {ls} exceeds the network's {net.spec.num_relu} relu layers")
    pixels = {"normal": np.stack([r.pixels for r in pool.sources])}
    labels = {"normal": [[r.category] for r in pool.sources]}
    provenance = {"network_sha256": network_hash(net), "patterns_sha256": sha256_file(cfg.patterns),
                  "pool_sha256": pool_hash(pool.all), "sweep_sha256": cfg.sweep_hash()}
    for kind in COMPOSITES:
        pixels[kind], labels[kind], provenance[f"{kind}_manifest_sha256"] = _load_composites(cfg, pool, kind)
    firsts = {min(ls) for ls in cfg.sweep.layer_sets}
    base = {k: batched_forward(net, v, keep=firsts) for k, v in pixels.items()}

    plan = cfg.fold_plan()
    train_feats = batched_forward(net, np.stack([r.pixels for r in pool.train]), keep=()).features
    train_cats = np.array([r.category for r in pool.train])
    classifiers = {c: train_fold_classifiers(plan, c, i, train_feats, train_cats == c, cfg.folds.reg)
                   for i, c in enumerate(pool.categories)}
    state = dict(net=net, patterns=patterns, categories=pool.categories, base=base, pixels=pixels,
                 labels=labels, plan=plan, classifiers=classifiers)
    workers = cfg.workers if workers is None else workers
    _sweep(cfg.out / "results.csv", sweep_cells(cfg, pool.categories), provenance, resume, workers, state,
           plan.n_folds)

    if cfg.sweep.control:
        scale = cfg.sweep.control if cfg.sweep.control == "shuffle" else float(cfg.sweep.control)
        state["patterns"] = E.perturb_patterns(patterns, scale, cfg.derived_seed("control"))
        ctrl_prov = dict(provenance, control=cfg.sweep.control)
        _sweep(cfg.out / "control.csv", sweep_cells(cfg, pool.categories, control=True), ctrl_prov, resume,
               workers, state, plan.n_folds)

    names = _weight_categories(cfg) or pool.categories
    rows = [(k, E.topk_merged_error(base["merged"].probs, labels["merged"], names, k)) for k in range(1, len(names) + 1)]
    _write_text(cfg.out / "topk_merged.csv", E.csv_text(("k", "error"), rows))
    return cfg.out / "results.csv"


# -- analyze --------------------------------------------------------------------

def cmd_analyze(results: Path, out_dir: Path, control: Path | None = None) -> list[Path]:
    if not results.is_file():
        raise PipelineError(f"results file not found: {results}")
    _, records = read_records(results)
    if not records:
        raise PipelineError(f"{results}: no records")
    written = []

    def emit(name, text):
        _write_text(out_dir / name, text)
        written.append(out_dir / name)

    deltas = E.accuracy_delta(records)
    emit("deltas.csv", E.delta_csv(deltas))
    emit("best_beta.csv", E.delta_csv(E.best_beta(deltas)))
    roc_rows, traj_rows = [], []
    for cond in sorted({(d.category, d.imageset, d.mode, d.rectification, d.layers) for d in deltas}):
        for beta, fpr, tpr in E.roc_by_strength(records, *cond):
            roc_rows.append((*cond, beta, fpr, tpr))
        for beta, dfp, dfn in E.rate_trajectory(records, *cond):
            traj_rows.append((*cond, beta, dfp, dfn))
    head = ("category", "imageset", "mode", "rectification", "layers", "beta")
    emit("roc.csv", E.csv_text(head + ("fpr", "tpr"), roc_rows))
    emit("trajectory.csv", E.csv_text(head + ("fp_rate_change", "fn_rate_change"), traj_rows))
    baseline = sorted({(r.category, r.imageset) for r in records if not r.has_attention})
    base_rows = []
    for cat, imageset in baseline:
        accs = [r.accuracy for r in records if not r.has_attention and r.category == cat and r.imageset == imageset]
        base_rows.append((cat, imageset, 100 * float(np.mean(accs))))
    emit("baseline.csv", E.csv_text(("category", "imageset", "accuracy"), base_rows))
    for axis in E.AXES:
        res = E.win_histograms(records, axis)
        if len(res.options) < 2:
            continue
        emit(f"hist_{axis}.csv", E.histogram_csv(res))
        emit(f"cells_{axis}.csv", E.cells_csv(res))
    if control is not None and control.is_file():
        _, ctrl = read_records(control)
        if ctrl:
            rows = E.control_comparison(records, ctrl + [r for r in records if not r.has_attention])
            emit("control_comparison.csv",
                 E.csv_text(("category", "true_gain", "control_gain", "true_better"), [(*r[:3], int(r[3])) for r in rows]))
    return written


__all__ = ["COLUMNS", "PipelineError", "cmd_analyze", "cmd_evaluate", "cmd_extract_patterns",
           "cmd_make_imagesets", "cmd_train", "load_pool", "sweep_cells"]
