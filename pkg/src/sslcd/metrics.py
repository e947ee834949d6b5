"""Confusion counts, percent metrics, layer ranking and JSON reports.

The positive class is "changed". A metric whose denominator is zero is
reported as ``None`` rather than 0, and ``None`` propagates to anything
derived from it.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp, self.tn + other.tn, self.fn + other.fn)

    def to_json(self) -> dict:
        return asdict(self)


def _binary(a, name: str) -> np.ndarray:
    a = np.asarray(getattr(a, "binary", a))
    if a.ndim == 3 and a.shape[0] == 1:
        a = a[0]
    if not np.all((a == 0) | (a == 1)):
        raise ValueError(f"{name} must contain only 0 and 1")
    return a.astype(bool)


def confusion(pred, truth) -> ConfusionCounts:
    """Pixelwise counts; ``pred`` may be a :class:`ChangeMap` or a 0/1 array."""
    p = _binary(pred, "prediction")
    t = _binary(truth, "truth")
    if p.shape != t.shape:
        raise ValueError(f"prediction {p.shape} and truth {t.shape} differ in shape")
    return ConfusionCounts(
        tp=int(np.sum(p & t)), fp=int(np.sum(p & ~t)), tn=int(np.sum(~p & ~t)), fn=int(np.sum(~p & t))
    )


def _ratio(num: int, den: int) -> float | None:
    return None if den == 0 else 100.0 * num / den


def f1_from_rates(precision: float | None, sensitivity: float | None) -> float | None:
    """Harmonic mean of two percentages."""
    if precision is None or sensitivity is None or precision + sensitivity == 0:
        return None
    return 2.0 * precision * sensitivity / (precision + sensitivity)


def metrics(c: ConfusionCounts) -> dict:
    sens = _ratio(c.tp, c.tp + c.fn)
    spec = _ratio(c.tn, c.tn + c.fp)
    prec = _ratio(c.tp, c.tp + c.fp)
    aa = None if sens is None or spec is None else (sens + spec) / 2.0
    return {
        "accuracy": _ratio(c.tp + c.tn, c.total),
        "sensitivity": sens,
        "specificity": spec,
        "precision": prec,
        "f1": f1_from_rates(prec, sens),
        "average_accuracy": aa,
    }


def rank_layers(results: dict[int, float | None]) -> int:
    """Layer with the highest mean AA; ties go to the shallower layer."""
    scored = [(layer, aa) for layer, aa in results.items() if aa is not None]
    if not scored:
        raise ValueError("no evaluated layer to rank")
    best = max(aa for _, aa in scored)
    return min(layer for layer, aa in scored if aa == best)


def build_report(per_pair: dict[str, ConfusionCounts], per_layer: dict[int, float | None] | None = None) -> dict:
    """Metrics per pair and pooled over all pairs (micro-average)."""
    pooled = ConfusionCounts()
    for c in per_pair.values():
        pooled = pooled + c
    report = {
        "metadata": {"aggregation": "micro (confusion counts pooled over pairs before computing metrics)", "units": "percent"},
        "per_pair": {pid: {"counts": c.to_json(), **metrics(c)} for pid, c in sorted(per_pair.items())},
        "aggregate": {"counts": pooled.to_json(), **metrics(pooled)},
    }
    if per_layer is not None:
        report["per_layer"] = {str(k): v for k, v in sorted(per_layer.items())}
    return report
