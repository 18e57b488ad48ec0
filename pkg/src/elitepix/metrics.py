"""Hard-count evaluation of elite-pixel masks.

The elite class is always the positive class.  Percentages are computed
exactly from integer counts and reported to two decimals by truncation
(toward zero); ``rounding="half_up"`` gives conventional rounding.
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from decimal import Decimal
from fractions import Fraction

import numpy as np

from .stack_io import EliteMask

SCORE_NAMES = ("accuracy", "precision", "recall", "f1")
CSV_FIELDS = ("scene", "tp", "fp", "fn", "tn") + SCORE_NAMES + ("density_pred", "density_truth")
_ROUNDING = ("truncate", "half_up")


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    def __post_init__(self):
        if min(self.tp, self.fp, self.fn, self.tn) < 0:
            raise ValueError(f"confusion counts must be non-negative: {self}")

    @property
    def total(self):
        return self.tp + self.fp + self.fn + self.tn

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class Scores:
    """Exact percentages; names in ``undefined`` had a zero denominator and are 0."""

    accuracy: Fraction
    precision: Fraction
    recall: Fraction
    f1: Fraction
    undefined: tuple = field(default_factory=tuple)

    def as_floats(self) -> dict[str, float]:
        return {n: float(getattr(self, n)) for n in SCORE_NAMES}

    def reported(self, rounding: str = "truncate") -> dict[str, str]:
        return {n: format_percent(getattr(self, n), rounding) for n in SCORE_NAMES}


def format_percent(value, rounding: str = "truncate", places: int = 2) -> str:
    """Exact decimal rendering of a percentage, e.g. ``Fraction(93819, 1000) -> '93.81'``."""
    if rounding not in _ROUNDING:
        raise ValueError(f"rounding must be one of {sorted(_ROUNDING)}, got {rounding!r}")
    scaled = Fraction(value) * 10 ** places
    if rounding == "truncate":
        whole = int(scaled)  # toward zero
    else:
        whole = math.floor(abs(scaled) + Fraction(1, 2)) * (1 if scaled >= 0 else -1)
    return str(Decimal(whole).scaleb(-places))


def confusion(pred: EliteMask, truth: EliteMask) -> ConfusionCounts:
    """Counts over pixels valid in both masks."""
    if pred.shape != truth.shape:
        raise ValueError(f"mask shapes differ: {pred.shape} vs {truth.shape}")
    valid = pred.valid & truth.valid
    p, t = pred.elite[valid], truth.elite[valid]
    tp = int(np.count_nonzero(p & t))
    fp = int(np.count_nonzero(p & ~t))
    fn = int(np.count_nonzero(~p & t))
    return ConfusionCounts(tp, fp, fn, int(p.size) - tp - fp - fn)


def _ratio(num: int, den: int, name: str, undefined: list) -> Fraction:
    if den == 0:
        undefined.append(name)
        return Fraction(0)
    return Fraction(100 * num, den)


def scores(c: ConfusionCounts) -> Scores:
    if c.total == 0:
        raise ValueError("cannot score an empty confusion matrix")
    undefined: list[str] = []
    accuracy = Fraction(100 * (c.tp + c.tn), c.total)
    precision = _ratio(c.tp, c.tp + c.fp, "precision", undefined)
    recall = _ratio(c.tp, c.tp + c.fn, "recall", undefined)
    # harmonic mean of precision and recall, in count form
    f1 = _ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn, "f1", undefined)
    return Scores(accuracy, precision, recall, f1, tuple(undefined))


def pixel_density(mask: EliteMask) -> Fraction:
    """Percent of valid pixels that are elite."""
    n_valid = int(np.count_nonzero(mask.valid))
    if n_valid == 0:
        raise ValueError("mask has no valid pixels")
    return Fraction(100 * int(np.count_nonzero(mask.elite & mask.valid)), n_valid)


def density_from_counts(elite: int, total: int) -> Fraction:
    if total <= 0:
        raise ValueError("total pixel count must be positive")
    return Fraction(100 * elite, total)


def report(pred: EliteMask, truth: EliteMask, rounding: str = "truncate") -> dict:
    c = confusion(pred, truth)
    s = scores(c)
    return {
        "counts": c.to_dict(),
        "scores": s.reported(rounding),
        "undefined": list(s.undefined),
        "density": {"pred": format_percent(pixel_density(pred), rounding),
                    "truth": format_percent(pixel_density(truth), rounding)},
        "rounding": rounding,
    }


def report_json(rep: dict) -> str:
    return json.dumps(rep, indent=2, sort_keys=True) + "\n"


def report_csv(rep: dict, scene: str = "scene", header: bool = True) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    if header:
        writer.writerow(CSV_FIELDS)
    c, s, d = rep["counts"], rep["scores"], rep["density"]
    writer.writerow([scene, c["tp"], c["fp"], c["fn"], c["tn"]]
                    + [s[n] for n in SCORE_NAMES] + [d["pred"], d["truth"]])
    return buf.getvalue()
