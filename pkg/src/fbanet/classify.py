"""Binary presence detectors on final-layer features.

Detectors are L2-regularized logistic regression fit by full-batch gradient
descent on standardized features. They are always trained on features of
normal images without attention; attention only changes the test features.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .records import EvalRecord

IMAGESETS = ("normal", "array", "merged")


@dataclass
class BinaryClassifier:
    weights: np.ndarray
    bias: float
    mean: np.ndarray
    scale: np.ndarray
    reg: float
    category: str = ""
    fold: int = -1
    seed: int = 0
    iterations: int = 0
    grad_norm: float = float("nan")
    loss: float = float("nan")

    def scores(self, features) -> np.ndarray:
        x = np.atleast_2d(np.asarray(features, dtype=np.float64))
        if x.shape[1] != len(self.weights):
            raise ValueError(f"feature dimension {x.shape[1]} does not match classifier dimension {len(self.weights)}")
        return ((x - self.mean) / self.scale) @ self.weights + self.bias


def predict(clf: BinaryClassifier, feature) -> tuple[float, bool]:
    """Score and presence label of one feature vector; a score of exactly 0 means absent."""
    x = np.asarray(feature, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError(f"expected a single feature vector, got shape {x.shape}")
    score = float(clf.scores(x)[0])
    return score, score > 0


def _objective(w, b, z, y, reg):
    """Sum of logistic losses plus ``reg/2 * |w|^2``, and its gradient."""
    s = z @ w + b
    margin = np.where(y, s, -s)
    loss = np.logaddexp(0.0, -margin).sum() + 0.5 * reg * (w @ w)
    # d loss / d s = sigmoid(s) - y
    p = 0.5 * (1 + np.tanh(0.5 * s))
    r = p - y
    return loss, z.T @ r + reg * w, r.sum()


def train_binary(features, labels, reg: float = 1.0, seed: int = 0, tol: float = 1e-6, max_iter: int = 100_000,
                 category: str = "", fold: int = -1) -> BinaryClassifier:
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=bool)
    if y.all() or not y.any():
        raise ValueError("binary training needs both present and absent examples")
    if not reg > 0:
        raise ValueError(f"regularization must be positive, got {reg}")
    mean = x.mean(axis=0)
    scale = x.std(axis=0)
    scale[scale == 0] = 1.0
    z = (x - mean) / scale
    rng = np.random.default_rng(seed)
    w = rng.normal(0, 0.01, z.shape[1])
    b = 0.0
    # z has centred columns, so the Hessian is bounded by the block-diagonal
    # diag(|z|^2/4 + reg, n/4); one step size per block keeps the bias moving
    # even when reg dominates the weights
    step_w = 1.0 / (np.linalg.norm(z, 2) ** 2 / 4 + reg)
    step_b = 4.0 / len(z)
    loss, gw, gb = _objective(w, b, z, y, reg)
    it = 0
    gnorm = np.sqrt(gw @ gw + gb * gb)
    while gnorm >= tol and it < max_iter:
        w = w - step_w * gw
        b = b - step_b * gb
        loss, gw, gb = _objective(w, b, z, y, reg)
        gnorm = np.sqrt(gw @ gw + gb * gb)
        it += 1
    return BinaryClassifier(w, float(b), mean, scale, reg, category, fold, seed, it, float(gnorm), float(loss))


@dataclass(frozen=True)
class FoldPlan:
    """Per-fold sampling of training and test images for one category."""

    n_pos: int = 40
    n_neg: int = 40
    n_folds: int = 20
    seed: int = 0
    n_test_pos: int = 40
    n_test_neg: int = 40

    def fold_rng(self, category_index: int, fold: int, stream: int) -> np.random.Generator:
        return np.random.default_rng([self.seed, category_index, fold, stream])


def _sample(rng, pos_idx, neg_idx, n_pos, n_neg, what):
    if len(pos_idx) < n_pos or len(neg_idx) < n_neg:
        raise ValueError(
            f"not enough {what} images: need {n_pos} present + {n_neg} absent, "
            f"have {len(pos_idx)} + {len(neg_idx)} (short by {max(0, n_pos - len(pos_idx))} + {max(0, n_neg - len(neg_idx))})"
        )
    p = np.sort(rng.choice(pos_idx, n_pos, replace=False))
    n = np.sort(rng.choice(neg_idx, n_neg, replace=False))
    return np.concatenate([p, n]), np.concatenate([np.ones(n_pos, bool), np.zeros(n_neg, bool)])


def confusion(pred, truth) -> tuple[int, int, int, int]:
    pred = np.asarray(pred, bool)
    truth = np.asarray(truth, bool)
    return (int((pred & truth).sum()), int((pred & ~truth).sum()),
            int((~pred & ~truth).sum()), int((~pred & truth).sum()))


def train_fold_classifiers(plan: FoldPlan, category: str, category_index: int, train_features, train_present,
                           reg: float = 1.0) -> list[BinaryClassifier]:
    """One detector per fold, each on its own seeded draw of present and absent training images."""
    train_present = np.asarray(train_present, bool)
    feats = np.asarray(train_features)
    pos_idx, neg_idx = np.flatnonzero(train_present), np.flatnonzero(~train_present)
    out = []
    for fold in range(plan.n_folds):
        idx, y = _sample(plan.fold_rng(category_index, fold, 0), pos_idx, neg_idx, plan.n_pos, plan.n_neg, "training")
        out.append(train_binary(feats[idx], y, reg=reg, seed=plan.seed * 7919 + fold, category=category, fold=fold))
    return out


def _stream(imageset: str) -> int:
    return 1 + IMAGESETS.index(imageset) if imageset in IMAGESETS else 1 + len(IMAGESETS)


def score_folds(plan: FoldPlan, category: str, category_index: int, classifiers, test_sets) -> list[EvalRecord]:
    """Score fold detectors on test feature sets.

    ``test_sets`` is a list of ``(key, features, present)`` where ``key`` is a
    dict of EvalRecord fields naming the imageset and attention condition.
    All conditions sharing an imageset see the same sampled test images in a
    given fold, so their records pair up fold by fold.
    """
    records = []
    for fold, clf in enumerate(classifiers):
        picks = {}
        for key, feats, present in test_sets:
            imageset = key["imageset"]
            if imageset not in picks:
                present = np.asarray(present, bool)
                picks[imageset] = _sample(plan.fold_rng(category_index, fold, _stream(imageset)),
                                          np.flatnonzero(present), np.flatnonzero(~present),
                                          plan.n_test_pos, plan.n_test_neg, f"{imageset} test")
            tidx, truth = picks[imageset]
            pred = clf.scores(np.asarray(feats)[tidx]) > 0
            tp, fp, tn, fn = confusion(pred, truth)
            records.append(EvalRecord(category=category, fold=fold, tp=tp, fp=fp, tn=tn, fn=fn, **key))
    return records


def run_folds(plan: FoldPlan, category: str, category_index: int, train_features, train_present,
              test_sets, reg: float = 1.0, classifiers: list | None = None) -> list[EvalRecord]:
    """Train the fold detectors and score them; see :func:`score_folds`."""
    clfs = train_fold_classifiers(plan, category, category_index, train_features, train_present, reg)
    if classifiers is not None:
        classifiers.extend(clfs)
    return score_folds(plan, category, category_index, clfs, test_sets)
