"""EvalRecord and the results CSV schema shared by ``classify``, ``evaluate`` and the CLI."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass
from pathlib import Path

COLUMNS = ("category", "imageset", "mode", "rectification", "layers", "beta", "fold", "tp", "fp", "tn", "fn", "accuracy")
NO_ATTENTION = "none"


@dataclass(frozen=True)
class EvalRecord:
    category: str
    imageset: str  # normal | array | merged
    mode: str  # additive | multiplicative | none
    rectification: str  # bidirectional | positive | none
    layers: str  # "5", "4+5"; "" without attention
    beta: float
    fold: int
    tp: int
    fp: int
    tn: int
    fn: int

    def __post_init__(self):
        if min(self.tp, self.fp, self.tn, self.fn) < 0:
            raise ValueError("confusion counts must be nonnegative")

    @property
    def accuracy(self) -> float:
        return (self.tp + self.tn) / (self.tp + self.fp + self.tn + self.fn)

    @property
    def option(self) -> str:
        return f"{self.mode}-{self.rectification}"

    @property
    def has_attention(self) -> bool:
        return self.mode != NO_ATTENTION

    def row(self) -> list:
        return [self.category, self.imageset, self.mode, self.rectification, self.layers,
                repr(float(self.beta)), self.fold, self.tp, self.fp, self.tn, self.fn, repr(self.accuracy)]


def layer_key(layers) -> str:
    return "+".join(str(l) for l in sorted(layers))


def parse_layer_key(key: str) -> tuple[int, ...]:
    return tuple(int(p) for p in key.split("+")) if key else ()


def records_csv(records, provenance: dict | None = None) -> str:
    buf = io.StringIO()
    if provenance is not None:
        buf.write("# provenance " + json.dumps(provenance, sort_keys=True) + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(COLUMNS)
    for r in records:
        w.writerow(r.row())
    return buf.getvalue()


def rows_csv(records) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    for r in records:
        w.writerow(r.row())
    return buf.getvalue()


def read_records(path):
    """Return ``(provenance, records)``; provenance is ``{}`` when absent."""
    text = Path(path).read_text()
    provenance = {}
    lines = text.splitlines()
    body = []
    for line in lines:
        if line.startswith("# provenance "):
            provenance = json.loads(line[len("# provenance "):])
        elif line.strip() and not line.startswith("#"):
            body.append(line)
    if not body:
        return provenance, []
    reader = csv.DictReader(body)
    if tuple(reader.fieldnames or ()) != COLUMNS:
        raise ValueError(f"{path}: unexpected columns {reader.fieldnames}, expected {list(COLUMNS)}")
    out = []
    for row in reader:
        rec = EvalRecord(
            row["category"], row["imageset"], row["mode"], row["rectification"], row["layers"],
            float(row["beta"]), int(row["fold"]),
            int(row["tp"]), int(row["fp"]), int(row["tn"]), int(row["fn"]),
        )
        if abs(rec.accuracy - float(row["accuracy"])) > 1e-12:
            raise ValueError(f"{path}: accuracy column disagrees with counts for {rec}")
        out.append(rec)
    return provenance, out
