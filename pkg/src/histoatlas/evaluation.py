"""Search results scored as a classifier: top-n / majority-n decisions and reports."""

from __future__ import annotations

import csv
import json
import warnings
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .atlas_index import Atlas, SearchHit, knn_batch
from .embedding_io import EmbeddingSet

__all__ = [
    "ClassMetrics",
    "EvalReport",
    "EvaluationError",
    "Top3Entry",
    "VoteResult",
    "classification_metrics",
    "evaluate",
    "evaluate_hits",
    "majority_vote",
    "top3_at_topn",
    "top3_from_predictions",
    "topn_correct",
]

DEFAULT_N = (1, 3, 5, 7)


class EvaluationError(ValueError):
    pass


@dataclass(frozen=True)
class VoteResult:
    n: int
    predicted_label: int
    votes: dict[int, int]
    tie_broken: bool

    def to_json(self) -> dict:
        return {"n": self.n, "predicted_label": self.predicted_label,
                "votes": {str(k): v for k, v in sorted(self.votes.items())}}


def _check_n(hits: Sequence[SearchHit], n: int) -> None:
    if not 1 <= n <= len(hits):
        raise EvaluationError(f"n out of range: {n} (have {len(hits)} hits)")


def majority_vote(hits: Sequence[SearchHit], n: int) -> VoteResult:
    """Mode label among the first n hits.

    A tie between labels is resolved by the smaller summed distance of the
    tied labels' hits, then by the smaller label id.
    """
    _check_n(hits, n)
    head = hits[:n]
    votes = Counter(h.label_id for h in head)
    top = max(votes.values())
    tied = [label for label, c in votes.items() if c == top]
    if len(tied) == 1:
        return VoteResult(n, tied[0], dict(votes), False)
    summed = {label: sum(h.distance for h in head if h.label_id == label) for label in tied}
    winner = min(tied, key=lambda label: (summed[label], label))
    return VoteResult(n, winner, dict(votes), True)


def topn_correct(hits: Sequence[SearchHit], n: int, true_label: int) -> bool:
    _check_n(hits, n)
    return any(h.label_id == true_label for h in hits[:n])


@dataclass(frozen=True)
class ClassMetrics:
    precision: float
    recall: float
    f1: float
    support: int


def classification_metrics(
    true_labels: Sequence[int],
    predicted: Sequence[int],
) -> tuple[dict[int, ClassMetrics], float]:
    """Per-class precision/recall/F1 and overall accuracy.

    Classes appearing only among predictions get recall 0 and support 0; a
    class never predicted gets precision 0 (with a warning).
    """
    t = np.asarray(true_labels, dtype=np.int64)
    p = np.asarray(predicted, dtype=np.int64)
    if t.shape != p.shape:
        raise EvaluationError("true and predicted labels differ in length")
    if t.size == 0:
        raise EvaluationError("no predictions to score")
    out: dict[int, ClassMetrics] = {}
    for label in sorted(set(t.tolist()) | set(p.tolist())):
        tp = int(np.count_nonzero((t == label) & (p == label)))
        n_pred = int(np.count_nonzero(p == label))
        support = int(np.count_nonzero(t == label))
        if n_pred == 0:
            warnings.warn(f"class {label} was never predicted; precision and F1 set to 0", stacklevel=2)
            precision = 0.0
        else:
            precision = tp / n_pred
        recall = tp / support if support else 0.0
        f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
        out[label] = ClassMetrics(precision, recall, f1, support)
    return out, float(np.count_nonzero(t == p)) / t.size


@dataclass(frozen=True)
class Top3Entry:
    label_id: int
    count: int
    percent: float

    def __str__(self) -> str:
        return f"{self.label_id} / {self.count} / {self.percent:.2f}%"


def top3_from_predictions(predicted: Sequence[int]) -> list[Top3Entry]:
    """Three most frequent labels, ranked by count then label id."""
    m = len(predicted)
    if m == 0:
        raise EvaluationError("empty test set")
    counts = Counter(int(x) for x in predicted)
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))[:3]
    return [Top3Entry(label, c, round(100.0 * c / m, 2)) for label, c in ranked]


@dataclass
class EvalReport:
    n_values: list[int]
    labels: list[int]
    per_class: dict[int, dict[int, ClassMetrics]]
    accuracy_majority: dict[int, float]
    accuracy_topn: dict[int, float]
    confusion_majority: dict[int, np.ndarray]
    confusion_topn: dict[int, np.ndarray]
    top3_at_topn: dict[str, dict[int, list[Top3Entry]]] = field(default_factory=dict)
    total: int = 0

    @property
    def overall_accuracy(self) -> float:
        """Majority-n accuracy at the smallest evaluated n."""
        return self.accuracy_majority[min(self.n_values)]

    def to_json(self) -> dict:
        return {
            "n_values": self.n_values,
            "labels": self.labels,
            "total": self.total,
            "overall_accuracy": self.overall_accuracy,
            "accuracy_majority": {str(n): a for n, a in self.accuracy_majority.items()},
            "accuracy_topn": {str(n): a for n, a in self.accuracy_topn.items()},
            "per_class": {
                str(n): {str(label): vars(m) for label, m in per.items()}
                for n, per in self.per_class.items()
            },
            "confusion_majority": {str(n): m.tolist() for n, m in self.confusion_majority.items()},
            "confusion_topn": {str(n): m.tolist() for n, m in self.confusion_topn.items()},
            "top3_at_topn": {
                slide: {str(k): [vars(e) for e in entries] for k, entries in table.items()}
                for slide, table in self.top3_at_topn.items()
            },
        }

    def write(self, out_dir: str | Path) -> list[Path]:
        """JSON report, CSV tables and confusion-matrix SVGs."""
        from . import plots

        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        written = [out / "eval_report.json"]
        written[0].write_text(json.dumps(self.to_json(), indent=2, sort_keys=False) + "\n")

        path = out / "accuracy.csv"
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["n", "top_n_accuracy", "majority_n_accuracy"])
            for n in self.n_values:
                w.writerow([n, f"{self.accuracy_topn[n]:.6f}", f"{self.accuracy_majority[n]:.6f}"])
        written.append(path)

        path = out / "per_class.csv"
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["n", "label_id", "precision", "recall", "f1", "support"])
            for n in self.n_values:
                for label, m in self.per_class[n].items():
                    w.writerow([n, label, f"{m.precision:.6f}", f"{m.recall:.6f}", f"{m.f1:.6f}", m.support])
        written.append(path)

        path = out / "top3_at_topn.csv"
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["slide_id", "k", "rank", "label_id", "count", "percent"])
            for slide, table in self.top3_at_topn.items():
                for k, entries in table.items():
                    for rank, e in enumerate(entries, 1):
                        w.writerow([slide, k, rank, e.label_id, e.count, f"{e.percent:.2f}"])
        written.append(path)

        for kind, mats in (("majority", self.confusion_majority), ("topn", self.confusion_topn)):
            for n, mat in mats.items():
                csv_path = out / f"confusion_{kind}_{n}.csv"
                with open(csv_path, "w", newline="") as fh:
                    w = csv.writer(fh, lineterminator="\n")
                    w.writerow(["true\\pred"] + self.labels)
                    for label, row in zip(self.labels, mat):
                        w.writerow([label] + [f"{v:.6g}" for v in row])
                svg_path = out / f"confusion_{kind}_{n}.svg"
                title = f"{'Majority' if kind == 'majority' else 'Top'}-{n}"
                plots.confusion_heatmap(mat, self.labels, svg_path, title=title)
                written += [csv_path, svg_path]
        return written


def evaluate_hits(
    hit_lists: Sequence[Sequence[SearchHit]],
    true_labels: Sequence[int],
    n_values: Sequence[int] = DEFAULT_N,
    labels: Sequence[int] | None = None,
    slide_ids: Sequence[str] | None = None,
) -> EvalReport:
    """Aggregate precomputed hit lists into an :class:`EvalReport`."""
    n_values = sorted(set(int(n) for n in n_values))
    if not n_values or n_values[0] < 1:
        raise EvaluationError(f"invalid n values {n_values}")
    if len(hit_lists) != len(true_labels):
        raise EvaluationError("hit lists and labels differ in length")
    if not hit_lists:
        raise EvaluationError("empty test set")
    truth = [int(t) for t in true_labels]
    if labels is None:
        labels = sorted(set(truth) | {h.label_id for hits in hit_lists for h in hits})
    labels = list(labels)
    index = {label: i for i, label in enumerate(labels)}
    missing = sorted(set(truth) - set(index))
    if missing:
        raise EvaluationError(f"test labels {missing} are not in the label set")
    L = len(labels)

    report = EvalReport(n_values, labels, {}, {}, {}, {}, {}, total=len(truth))
    preds_by_n: dict[int, list[int]] = {}
    for n in n_values:
        preds = [majority_vote(hits, n).predicted_label for hits in hit_lists]
        preds_by_n[n] = preds
        report.per_class[n], report.accuracy_majority[n] = classification_metrics(truth, preds)
        report.accuracy_topn[n] = float(np.mean([topn_correct(h, n, t) for h, t in zip(hit_lists, truth)]))

        cm = np.zeros((L, L), dtype=np.int64)
        ct = np.zeros((L, L), dtype=np.float64)
        for hits, t, p in zip(hit_lists, truth, preds):
            cm[index[t], index[p]] += 1
            for h in hits[:n]:
                ct[index[t], index[h.label_id]] += 1.0 / n
        report.confusion_majority[n] = cm
        report.confusion_topn[n] = ct

    if slide_ids is not None:
        by_slide: dict[str, list[int]] = {}
        for i, s in enumerate(slide_ids):
            by_slide.setdefault(s, []).append(i)
        for slide in sorted(by_slide):
            rows = by_slide[slide]
            report.top3_at_topn[slide] = {
                n: top3_from_predictions([preds_by_n[n][i] for i in rows]) for n in n_values
            }
    return report


def _check_disjoint(atlas: Atlas, test_set: EmbeddingSet) -> None:
    overlap = sorted(set(atlas.embedding_set.patch_ids) & set(test_set.patch_ids))
    if overlap:
        shown = ", ".join(overlap[:10]) + (" ..." if len(overlap) > 10 else "")
        raise EvaluationError(f"test/atlas overlap: {len(overlap)} shared patch ids: {shown}")


def evaluate(atlas: Atlas, test_set: EmbeddingSet, n_values: Iterable[int] = DEFAULT_N) -> EvalReport:
    n_values = sorted(set(int(n) for n in n_values))
    _check_disjoint(atlas, test_set)
    if test_set.count == 0:
        raise EvaluationError("empty test set")
    hits = knn_batch(atlas, test_set, max(n_values))
    return evaluate_hits(
        hits,
        test_set.labels.tolist(),
        n_values,
        labels=atlas.label_table.ids,
        slide_ids=[r.slide_id for r in test_set.records],
    )


def top3_at_topn(
    atlas: Atlas,
    test_slide_set: EmbeddingSet,
    k_values: Iterable[int] = DEFAULT_N,
) -> dict[int, list[Top3Entry]]:
    """Top-3 majority-k predictions for the patches of a single test slide."""
    if test_slide_set.count == 0:
        raise EvaluationError("empty test set")
    slides = {r.slide_id for r in test_slide_set.records}
    if len(slides) != 1:
        raise EvaluationError(f"test set spans {len(slides)} slides; expected exactly one")
    _check_disjoint(atlas, test_slide_set)
    k_values = sorted(set(int(k) for k in k_values))
    hits = knn_batch(atlas, test_slide_set, max(k_values))
    return {
        k: top3_from_predictions([majority_vote(h, k).predicted_label for h in hits])
        for k in k_values
    }


def format_top3(table: Mapping[int, list[Top3Entry]]) -> str:
    lines = []
    for k, entries in table.items():
        lines.append(f"majority-{k}: " + "; ".join(str(e) for e in entries))
    return "\n".join(lines)
