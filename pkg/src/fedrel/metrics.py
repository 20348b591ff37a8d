"""Evaluation metrics and the per-round metrics stream."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

SCHEMA = "fedrel.metrics/1"
RECORD_FIELDS = ("round", "mode", "global_loss", "global_acc", "global_macro_f1", "relevance", "wall_ms",
                 "train_acc", "train_loss")


def confusion_matrix(y_true, y_pred, num_classes: int) -> np.ndarray:
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(y_true), np.asarray(y_pred)), 1)
    return cm


def macro_f1(y_true, y_pred, num_classes: int) -> float:
    """Unweighted mean of per-class F1; a class with 0/0 scores 0."""
    cm = confusion_matrix(y_true, y_pred, num_classes)
    tp = np.diag(cm).astype(np.float64)
    denom = cm.sum(axis=0) + cm.sum(axis=1)        # 2TP + FP + FN
    f1 = np.divide(2 * tp, denom, out=np.zeros(num_classes), where=denom > 0)
    return float(f1.mean())


def classification_report(probs: np.ndarray, labels) -> tuple[float, float, float]:
    """``(accuracy, macro_f1, mean_cross_entropy)`` from class probabilities."""
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if len(labels) == 0:
        raise ValueError("cannot evaluate on an empty test set")
    pred = probs.argmax(axis=-1)
    acc = float((pred == labels).mean())
    f1 = macro_f1(labels, pred, probs.shape[-1])
    p_true = np.maximum(probs[np.arange(len(labels)), labels], 1e-12)
    return acc, f1, float(-np.log(p_true).mean())


@dataclass
class RoundMetrics:
    round: int
    mode: str
    global_loss: float
    global_acc: float
    global_macro_f1: float
    relevance: list[float] = field(default_factory=list)
    wall_ms: float = 0.0
    train_acc: float | None = None
    train_loss: float | None = None     # mean classification loss over local batches

    def to_json(self) -> str:
        return json.dumps(asdict(self))

    @classmethod
    def from_json(cls, line: str) -> "RoundMetrics":
        raw = json.loads(line)
        unknown = set(raw) - set(RECORD_FIELDS)
        if unknown:
            raise ValueError(f"unknown metrics fields: {sorted(unknown)}")
        return cls(**raw)

    def comparable(self) -> tuple:
        """Everything except wall-clock time and mode label."""
        return (self.round, self.global_loss, self.global_acc, self.global_macro_f1,
                tuple(self.relevance), self.train_acc,
                self.train_loss)


class MetricsWriter:
    """Line-delimited JSON: one header line, then one line per round.

    The file is opened in append mode for every record so a crashed run
    still leaves every finished round on disk.
    """

    def __init__(self, path, config: dict, seed: int):
        self.path = Path(path)
        header = {"schema": SCHEMA, "seed": seed, "config": config, "fields": list(RECORD_FIELDS)}
        self.path.write_text(json.dumps(header, sort_keys=True) + "\n")

    def write(self, rec: RoundMetrics) -> None:
        with self.path.open("a") as fh:
            fh.write(rec.to_json() + "\n")

    def write_all(self, recs: Iterable[RoundMetrics]) -> None:
        for r in recs:
            self.write(r)


def read_metrics(path) -> tuple[dict, list[RoundMetrics]]:
    lines = Path(path).read_text().splitlines()
    if not lines:
        raise ValueError(f"{path}: empty metrics file")
    header = json.loads(lines[0])
    if header.get("schema") != SCHEMA:
        raise ValueError(f"{path}: unsupported schema {header.get('schema')!r}")
    return header, [RoundMetrics.from_json(l) for l in lines[1:] if l.strip()]
