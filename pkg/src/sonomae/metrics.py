"""Classification metrics, ROC / PR curves and the k-fold harness.

Conventions pinned here: zero denominators yield 0 with a `degenerate`
flag; multi-class headline numbers are reported both macro-averaged
(unweighted class mean) and micro-averaged (pooled counts, where
precision = recall = F1 = accuracy); PR-curve area is average precision
(right-step interpolation), never the trapezoid.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .rng import Rng


class MetricsError(ValueError):
    pass


class LengthMismatch(MetricsError):
    pass


class LabelOutOfRange(MetricsError):
    pass


class SingleClassOnly(MetricsError):
    pass


class NoPositives(MetricsError):
    pass


class MissingFoldIds(MetricsError):
    pass


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


def confusion(preds, labels, n_classes: int) -> list[ConfusionCounts]:
    """One-vs-rest counts per class."""
    preds = np.asarray(preds, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if preds.shape != labels.shape:
        raise LengthMismatch(f"preds {preds.shape} vs labels {labels.shape}")
    for name, arr in (("preds", preds), ("labels", labels)):
        if arr.size and (arr.min() < 0 or arr.max() >= n_classes):
            raise LabelOutOfRange(f"{name} outside [0, {n_classes})")
    out = []
    for c in range(n_classes):
        p = preds == c
        t = labels == c
        out.append(
            ConfusionCounts(
                tp=int(np.sum(p & t)),
                fp=int(np.sum(p & ~t)),
                fn=int(np.sum(~p & t)),
                tn=int(np.sum(~p & ~t)),
            )
        )
    return out


def prf1(c: ConfusionCounts) -> tuple[float, float, float]:
    """Precision, recall and their harmonic mean, all in [0, 1]; zero
    denominators give 0 by convention."""
    precision = c.tp / (c.tp + c.fp) if c.tp + c.fp else 0.0
    recall = c.tp / (c.tp + c.fn) if c.tp + c.fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return precision, recall, f1


@dataclass
class MetricsReport:
    per_class: list[dict]  # {class, precision, recall, f1, support, degenerate}
    macro: dict
    micro: dict
    accuracy: float
    n_samples: int

    def to_json(self) -> str:
        return json.dumps(
            {
                "n_samples": self.n_samples,
                "accuracy": self.accuracy,
                "macro": self.macro,
                "micro": self.micro,
                "per_class": self.per_class,
            },
            indent=2,
        )


def metrics_report(preds, labels, n_classes: int) -> MetricsReport:
    counts = confusion(preds, labels, n_classes)
    per_class = []
    for c, cc in enumerate(counts):
        p, r, f = prf1(cc)
        per_class.append(
            {
                "class": c,
                "precision": p,
                "recall": r,
                "f1": f,
                "support": cc.tp + cc.fn,
                "degenerate": (cc.tp + cc.fp == 0) or (cc.tp + cc.fn == 0),
            }
        )
    macro = {
        "precision": float(np.mean([pc["precision"] for pc in per_class])),
        "recall": float(np.mean([pc["recall"] for pc in per_class])),
        "f1": float(np.mean([pc["f1"] for pc in per_class])),
    }
    pooled = ConfusionCounts(
        tp=sum(c.tp for c in counts),
        fp=sum(c.fp for c in counts),
        fn=sum(c.fn for c in counts),
        tn=sum(c.tn for c in counts),
    )
    mp, mr, mf = prf1(pooled)
    micro = {"precision": mp, "recall": mr, "f1": mf}
    n = len(np.asarray(labels))
    acc = float(np.mean(np.asarray(preds) == np.asarray(labels))) if n else 0.0
    return MetricsReport(per_class=per_class, macro=macro, micro=micro, accuracy=acc, n_samples=n)


# ---------------------------------------------------------------------------
# curves


@dataclass
class CurveSeries:
    kind: str  # "roc" or "pr"
    points: list[tuple[float, float, float]]  # (threshold, x, y)
    auc: float
    class_id: int | None = None


def _binary_check(scores, labels):
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels, dtype=np.int64)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise LengthMismatch(f"scores {scores.shape} vs labels {labels.shape}")
    if not np.isin(labels, (0, 1)).all():
        raise LabelOutOfRange("labels must be binary {0, 1}")
    return scores, labels


def roc_curve(scores, labels) -> CurveSeries:
    """Receiver operating characteristic with thresholds at the distinct
    scores, descending; ties are grouped. AUC by trapezoid, which equals
    the probability a random positive outranks a random negative (ties
    counting one half)."""
    scores, labels = _binary_check(scores, labels)
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise SingleClassOnly("ROC needs at least one positive and one negative")
    order = np.argsort(-scores, kind="stable")
    s = scores[order]
    y = labels[order]
    distinct = np.nonzero(np.diff(s))[0]
    cut = np.concatenate([distinct, [len(s) - 1]])  # last index of each tie group
    tps = np.cumsum(y)[cut]
    fps = (cut + 1) - tps
    points = [(float("inf"), 0.0, 0.0)]
    for i, c in enumerate(cut):
        points.append((float(s[c]), fps[i] / n_neg, tps[i] / n_pos))
    xs = np.array([p[1] for p in points])
    ys = np.array([p[2] for p in points])
    auc = float(np.trapezoid(ys, xs))
    return CurveSeries(kind="roc", points=points, auc=auc)


def pr_curve(scores, labels) -> CurveSeries:
    """Precision-recall over descending thresholds; area is average
    precision, i.e. sum over threshold groups of (delta recall) times the
    precision at that cut (right-step interpolation)."""
    scores, labels = _binary_check(scores, labels)
    n_pos = int(labels.sum())
    if n_pos == 0:
        raise NoPositives("PR curve needs at least one positive")
    order = np.argsort(-scores, kind="stable")
    s = scores[order]
    y = labels[order]
    distinct = np.nonzero(np.diff(s))[0]
    cut = np.concatenate([distinct, [len(s) - 1]])
    tps = np.cumsum(y)[cut]
    predicted = cut + 1
    points = []
    ap = 0.0
    prev_recall = 0.0
    for i, c in enumerate(cut):
        precision = tps[i] / predicted[i]
        recall = tps[i] / n_pos
        points.append((float(s[c]), float(recall), float(precision)))
        ap += (recall - prev_recall) * precision
        prev_recall = recall
    return CurveSeries(kind="pr", points=points, auc=float(ap))


def auc_mann_whitney(scores, labels) -> float:
    """Brute-force pairwise oracle: fraction of (positive, negative) pairs
    ranked correctly, ties counting one half. Quadratic; for tests."""
    scores, labels = _binary_check(scores, labels)
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    if len(pos) == 0 or len(neg) == 0:
        raise SingleClassOnly("need both classes")
    wins = (pos[:, None] > neg[None, :]).sum()
    ties = (pos[:, None] == neg[None, :]).sum()
    return float((wins + 0.5 * ties) / (len(pos) * len(neg)))


def one_vs_rest_curves(probabilities, labels, kind: str = "roc") -> list[CurveSeries]:
    """Per-class curves from a (B, C) probability matrix whose rows sum
    to 1 (within 1e-5)."""
    probs = np.asarray(probabilities, dtype=float)
    labels = np.asarray(labels, dtype=np.int64)
    if probs.ndim != 2 or probs.shape[0] != labels.shape[0]:
        raise LengthMismatch(f"probabilities {probs.shape} vs labels {labels.shape}")
    if not np.allclose(probs.sum(axis=1), 1.0, atol=1e-5):
        raise MetricsError("probability rows must sum to 1")
    out = []
    for c in range(probs.shape[1]):
        binary = (labels == c).astype(np.int64)
        try:
            curve = roc_curve(probs[:, c], binary) if kind == "roc" else pr_curve(probs[:, c], binary)
        except (SingleClassOnly, NoPositives) as exc:
            raise type(exc)(f"class {c}: {exc}") from exc
        curve.class_id = c
        out.append(curve)
    return out


def write_curve_csv(curve: CurveSeries, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("threshold,x,y\n")
        for t, x, y in curve.points:
            fh.write(f"{t!r},{x!r},{y!r}\n")


def curve_svg(curves: list[CurveSeries], title: str = "", size: int = 360) -> str:
    """Minimal static SVG rendering of one or more curves."""
    pad = 40
    span = size - 2 * pad
    colors = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#7f7f7f"]
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" viewBox="0 0 {size} {size}">',
        f'<rect width="{size}" height="{size}" fill="white"/>',
        f'<rect x="{pad}" y="{pad}" width="{span}" height="{span}" fill="none" stroke="#333"/>',
        f'<text x="{size / 2:.0f}" y="20" text-anchor="middle" font-size="13">{title}</text>',
    ]
    for i, curve in enumerate(curves):
        if curve.kind == "roc":
            xy = [(p[1], p[2]) for p in curve.points]
        else:  # PR: x = recall, y = precision
            xy = [(p[1], p[2]) for p in curve.points]
        pts = " ".join(f"{pad + x * span:.1f},{pad + (1 - y) * span:.1f}" for x, y in xy)
        color = colors[i % len(colors)]
        label = f"class {curve.class_id}" if curve.class_id is not None else curve.kind
        parts.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{pts}"/>')
        parts.append(
            f'<text x="{pad + 4}" y="{pad + 14 + 14 * i}" font-size="11" fill="{color}">'
            f"{label} AUC={curve.auc:.3f}</text>"
        )
    parts.append("</svg>")
    return "\n".join(parts)


# ---------------------------------------------------------------------------
# k-fold harness


@dataclass
class FoldSummary:
    per_fold: list[MetricsReport]
    mean: dict
    std: dict


def assign_folds(n: int, k: int, rng: Rng) -> np.ndarray:
    """Balanced random fold ids 0..k-1 for n records."""
    ids = np.tile(np.arange(k), n // k + 1)[:n]
    return ids[rng.permutation(n)]


def kfold_run(records, k: int, train_fn, eval_fn, fold_seed: int | None = None) -> FoldSummary:
    """Cross-validation driver.

    `records` is any sequence whose items carry a `fold` attribute (or
    dict key); when folds are missing, `fold_seed` requests a balanced
    random assignment instead of an error. For each fold f, `train_fn`
    receives every record outside f and `eval_fn(model, records_f)` must
    return (preds, labels, n_classes).
    """
    if k < 2:
        raise MetricsError(f"k-fold needs k >= 2, got {k}")
    records = list(records)

    def fold_of(r):
        return r.get("fold") if isinstance(r, dict) else getattr(r, "fold", None)

    folds = [fold_of(r) for r in records]
    if any(f is None for f in folds):
        if fold_seed is None:
            raise MissingFoldIds("records lack fold ids and no fold_seed was given")
        folds = list(assign_folds(len(records), k, Rng(fold_seed)))
    folds = [int(f) for f in folds]
    present = sorted(set(folds))
    if present != list(range(k)):
        raise MissingFoldIds(f"fold ids must cover 0..{k - 1}, got {present}")

    reports = []
    for f in range(k):
        train_records = [r for r, ff in zip(records, folds) if ff != f]
        test_records = [r for r, ff in zip(records, folds) if ff == f]
        model = train_fn(train_records)
        preds, labels, n_classes = eval_fn(model, test_records)
        reports.append(metrics_report(preds, labels, n_classes))
    keys = ("precision", "recall", "f1")
    mean = {m: float(np.mean([r.macro[m] for r in reports])) for m in keys}
    std = {m: float(np.std([r.macro[m] for r in reports])) for m in keys}
    return FoldSummary(per_fold=reports, mean=mean, std=std)
