"""Array (2x2 grid) and merged (pixel blend) composites built from a labeled pool.

Every composite draws its randomness from ``default_rng([seed, index])``, so
composite ``i`` is the same no matter how many are generated or in what order.
Provenance (source ids, grid cells, blend weights) is enough to rebuild the
pixels exactly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


@dataclass
class ImageRecord:
    id: str
    pixels: np.ndarray  # [C, H, W] in [0, 1]
    category: str


@dataclass
class CompositeRecord:
    id: str
    kind: str  # "array" | "merged"
    pixels: np.ndarray
    categories: list[str]
    sources: list[str]
    positions: list[int] = field(default_factory=list)  # array: grid cell 0..3, row-major
    weights: list[float] = field(default_factory=list)  # merged: blend weight per source
    seed: int = 0

    def manifest_entry(self) -> dict:
        d = {
            "id": self.id,
            "kind": self.kind,
            "sources": self.sources,
            "categories": self.categories,
            "seed": self.seed,
        }
        if self.kind == "array":
            d["positions"] = self.positions
        else:
            d["weights"] = self.weights
        return d


def resize(image, new_h: int, new_w: int) -> np.ndarray:
    """Bilinear resize of ``[C, H, W]`` with half-pixel centres and edge clamping."""
    img = np.asarray(image)
    if new_h < 1 or new_w < 1:
        raise ValueError(f"target size must be positive, got {new_h}x{new_w}")
    c, h, w = img.shape
    if (h, w) == (new_h, new_w):
        return img.copy()
    rows = _interp_matrix(h, new_h)
    cols = _interp_matrix(w, new_w)
    out = np.einsum("ih,chw,jw->cij", rows, img.astype(np.float64), cols)
    return out.astype(img.dtype)


def _interp_matrix(n_in: int, n_out: int) -> np.ndarray:
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0, n_in - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    m = np.zeros((n_out, n_in))
    m[np.arange(n_out), lo] += 1 - frac
    m[np.arange(n_out), hi] += frac
    return m


def _usable(pool, exclude) -> list[ImageRecord]:
    banned = set(exclude)
    return [r for r in pool if r.id not in banned]


def tile(images, positions, target_size: int) -> np.ndarray:
    half = target_size // 2
    c = images[0].shape[0]
    out = np.zeros((c, target_size, target_size), dtype=np.float32)
    for img, cell in zip(images, positions):
        r, q = divmod(cell, 2)
        out[:, r * half:(r + 1) * half, q * half:(q + 1) * half] = resize(img, half, half)
    return out


def make_array(pool, count: int, seed: int, target_size: int = 32, exclude=(), exactly_one: str | None = None):
    """2x2 grids of four distinct pool images, each resized to half the target side.

    With ``exactly_one`` set, every composite holds exactly one image of that
    category; otherwise categories may repeat.
    """
    recs = _usable(pool, exclude)
    if len(recs) < 4:
        raise ValueError(f"array composites need at least 4 pool images, got {len(recs)}")
    if target_size % 2:
        raise ValueError(f"target_size must be even, got {target_size}")
    if exactly_one is not None:
        pos_idx = [i for i, r in enumerate(recs) if r.category == exactly_one]
        neg_idx = [i for i, r in enumerate(recs) if r.category != exactly_one]
        if not pos_idx or len(neg_idx) < 3:
            raise ValueError(f"pool cannot supply one {exactly_one!r} image plus three others")
    out = []
    for i in range(count):
        rng = np.random.default_rng([seed, i])
        if exactly_one is None:
            picks = rng.choice(len(recs), size=4, replace=False)
        else:
            picks = np.concatenate([rng.choice(pos_idx, 1), rng.choice(neg_idx, 3, replace=False)])
            picks = picks[rng.permutation(4)]
        cells = rng.permutation(4)
        chosen = [recs[p] for p in picks]
        pix = tile([r.pixels for r in chosen], cells, target_size)
        out.append(CompositeRecord(
            f"array-{i:05d}", "array", pix,
            [r.category for r in chosen], [r.id for r in chosen],
            positions=[int(c) for c in cells], seed=seed,
        ))
    return out


def blend(a, b, weight: float) -> np.ndarray:
    return (weight * np.asarray(a, dtype=np.float64) + (1 - weight) * np.asarray(b, dtype=np.float64)).astype(np.float32)


def make_merged(pool, count: int, seed: int, weight: float = 0.5, exclude=()):
    """Pixel blends ``weight * A + (1 - weight) * B`` of two images from different categories."""
    if not 0 < weight < 1:
        raise ValueError(f"blend weight must lie in (0, 1), got {weight}")
    recs = _usable(pool, exclude)
    if len(recs) < 2 or len({r.category for r in recs}) < 2:
        raise ValueError("merged composites need at least 2 pool images from different categories")
    cats = np.array([r.category for r in recs])
    out = []
    for i in range(count):
        rng = np.random.default_rng([seed, i])
        a = int(rng.integers(len(recs)))
        others = np.flatnonzero(cats != cats[a])
        b = int(others[rng.integers(len(others))])
        ra, rb = recs[a], recs[b]
        out.append(CompositeRecord(
            f"merged-{i:05d}", "merged", blend(ra.pixels, rb.pixels, weight),
            [ra.category, rb.category], [ra.id, rb.id],
            weights=[float(weight), float(1 - weight)], seed=seed,
        ))
    return out


def rebuild(entry: dict, pool_by_id: dict, target_size: int = 32) -> np.ndarray:
    """Recompute a composite's pixels from its manifest entry."""
    imgs = [pool_by_id[s].pixels for s in entry["sources"]]
    if entry["kind"] == "array":
        return tile(imgs, entry["positions"], target_size)
    return blend(imgs[0], imgs[1], entry["weights"][0])


# -- files ------------------------------------------------------------------

def write_pnm(path, pixels) -> None:
    """Binary P6 (3 channels) or P5 (1 channel), 8 bits per sample."""
    pix = np.asarray(pixels)
    c, h, w = pix.shape
    if c not in (1, 3):
        raise ValueError(f"PNM needs 1 or 3 channels, got {c}")
    data = np.round(np.clip(pix, 0, 1) * 255).astype(np.uint8).transpose(1, 2, 0)
    magic = b"P6" if c == 3 else b"P5"
    Path(path).write_bytes(magic + f"\n{w} {h}\n255\n".encode() + data.tobytes())


def read_pnm(path) -> np.ndarray:
    blob = Path(path).read_bytes()
    fields = []
    pos = 0
    while len(fields) < 4:
        while blob[pos:pos + 1].isspace():
            pos += 1
        if blob[pos:pos + 1] == b"#":
            pos = blob.index(b"\n", pos) + 1
            continue
        end = pos
        while not blob[end:end + 1].isspace():
            end += 1
        fields.append(blob[pos:end])
        pos = end
    magic, w, h, maxval = fields[0], int(fields[1]), int(fields[2]), int(fields[3])
    if magic not in (b"P5", b"P6") or maxval != 255:
        raise ValueError(f"{path}: only 8-bit binary P5/P6 images are supported")
    c = 3 if magic == b"P6" else 1
    raw = np.frombuffer(blob[pos + 1:pos + 1 + w * h * c], dtype=np.uint8)
    if raw.size != w * h * c:
        raise ValueError(f"{path}: truncated pixel data")
    return (raw.reshape(h, w, c).transpose(2, 0, 1) / 255.0).astype(np.float32)


def load_pool_dir(root) -> list[ImageRecord]:
    """Labeled images laid out as ``root/<category>/<name>.ppm`` (or ``.pgm``)."""
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"image pool directory not found: {root}")
    pool = []
    for cat_dir in sorted(p for p in root.iterdir() if p.is_dir()):
        for f in sorted(cat_dir.iterdir()):
            if f.suffix.lower() in (".ppm", ".pgm", ".pnm"):
                pool.append(ImageRecord(f"{cat_dir.name}/{f.stem}", read_pnm(f), cat_dir.name))
    return pool


def write_pool_dir(pool, root) -> None:
    root = Path(root)
    for rec in pool:
        d = root / rec.category
        d.mkdir(parents=True, exist_ok=True)
        write_pnm(d / f"{rec.id.split('/')[-1]}.ppm", rec.pixels)


def write_imageset(records, out_dir, extra: dict | None = None) -> Path:
    """Write composites as PNM files plus ``manifest.jsonl``; returns the manifest path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    lines = []
    if extra:
        lines.append(json.dumps({"header": extra}, sort_keys=True))
    for rec in records:
        write_pnm(out_dir / f"{rec.id}.ppm", rec.pixels)
        lines.append(json.dumps(rec.manifest_entry(), sort_keys=True))
    manifest = out_dir / "manifest.jsonl"
    manifest.write_text("\n".join(lines) + "\n")
    return manifest


def read_imageset(out_dir):
    """Return ``(header, records)`` from a directory written by :func:`write_imageset`."""
    out_dir = Path(out_dir)
    header, records = {}, []
    for line in (out_dir / "manifest.jsonl").read_text().splitlines():
        if not line.strip():
            continue
        entry = json.loads(line)
        if "header" in entry:
            header = entry["header"]
            continue
        records.append(CompositeRecord(
            entry["id"], entry["kind"], read_pnm(out_dir / f"{entry['id']}.ppm"),
            entry["categories"], entry["sources"],
            positions=entry.get("positions", []), weights=entry.get("weights", []),
            seed=entry["seed"],
        ))
    return header, records
