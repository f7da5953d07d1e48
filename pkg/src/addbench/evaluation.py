"""EER / AUC / F1 per condition and degradation relative to the clean set.

All metric functions take scores in "higher = more bonafide" polarity and
labels as "bonafide"/"fake" (or 0/1 with 1 = fake).
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .corpus import label_to_y
from .errors import MissingScores, OneClassOnly

log = logging.getLogger(__name__)

CONDITIONS = ("C0", "C1", "C2", "C3", "C4", "C5")
METRICS = ("eer", "auc", "f1")


def _split(scores, labels):
    s = np.asarray(scores, dtype=np.float64)
    y = np.array([label_to_y(l) for l in labels], dtype=int)
    if s.shape != y.shape:
        raise ValueError(f"{s.shape[0]} scores vs {y.shape[0]} labels")
    bona, fake = s[y == 0], s[y == 1]
    if bona.size == 0 or fake.size == 0:
        raise OneClassOnly("need at least one bonafide and one fake score")
    return np.sort(bona), np.sort(fake)


def eer(scores, labels):
    """Equal error rate and its threshold.

    Candidate thresholds are the distinct scores. At threshold t a bonafide
    trial is missed when its score < t and a fake is accepted when its
    score >= t. The chosen t minimizes |FNR - FPR|, ties broken by the
    smaller FNR + FPR and then the smaller t; the EER is the mean of the two
    rates there. Comparisons use integer counts, so ties are exact.
    """
    bona, fake = _split(scores, labels)
    nb, nf = bona.size, fake.size
    t = np.unique(np.concatenate([bona, fake]))
    misses = np.searchsorted(bona, t, side="left").astype(np.int64)
    accepts = nf - np.searchsorted(fake, t, side="left").astype(np.int64)
    gap = np.abs(misses * nf - accepts * nb)
    total = misses * nf + accepts * nb
    i = np.lexsort((t, total, gap))[0]
    # one integer division, so the value is the correctly rounded exact rate
    value = int(total[i]) / (2 * nb * nf)
    if value > 0.5:
        log.warning("EER %.3f > 0.5: scores look inverted (expected higher = bonafide)", value)
    return float(value), float(t[i])


def auc(scores, labels) -> float:
    """P(bonafide score > fake score) + 0.5 P(tie), over all pairs."""
    bona, fake = _split(scores, labels)
    below = np.searchsorted(fake, bona, side="left").astype(np.int64)
    ties = np.searchsorted(fake, bona, side="right").astype(np.int64) - below
    return float((2 * below.sum() + ties.sum()) / (2.0 * bona.size * fake.size))


def f1(scores, labels, threshold: float) -> float:
    """F1 with fake as the positive class; score < threshold predicts fake."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.array([label_to_y(l) for l in labels], dtype=int)
    pred = s < threshold
    tp = int(np.sum(pred & (y == 1)))
    fp = int(np.sum(pred & (y == 0)))
    fn = int(np.sum(~pred & (y == 1)))
    if tp == 0:
        return 0.0
    return 2.0 * tp / (2.0 * tp + fp + fn)


def condition_metrics(scores, labels) -> dict:
    e, t = eer(scores, labels)
    ys = [label_to_y(l) for l in labels]
    return {
        "eer": e,
        "auc": auc(scores, labels),
        "f1": f1(scores, labels, t),
        "threshold": t,
        "n_bonafide": ys.count(0),
        "n_fake": ys.count(1),
    }


# -------------------------------------------------------------- score sets

@dataclass(frozen=True)
class ScoreEntry:
    utterance_id: str
    condition: str
    score: float
    label: str


def write_scores(path, entries) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["utterance_id", "condition", "score", "label"])
        for e in entries:
            w.writerow([e.utterance_id, e.condition, repr(float(e.score)), e.label])
    return path


def read_scores(path) -> list[ScoreEntry]:
    with Path(path).open(newline="", encoding="utf-8") as fh:
        return [ScoreEntry(r["utterance_id"], r["condition"], float(r["score"]), r["label"])
                for r in csv.DictReader(fh)]


# ----------------------------------------------------------------- reports

@dataclass
class EvalReport:
    conditions: dict  # tag -> metric dict
    per_codec: dict = field(default_factory=dict)  # tag -> codec -> metric dict
    deltas: dict = field(default_factory=dict)  # metric -> tag -> value(tag) - value(C0)
    degradation: dict = field(default_factory=dict)  # C0 -> C1, positive = worse, percent
    metadata: dict = field(default_factory=dict)

    def value(self, tag: str, metric: str) -> float:
        return self.conditions[tag][metric]

    def eer_spread(self) -> float:
        vals = [c["eer"] for c in self.conditions.values()]
        return max(vals) - min(vals)

    def to_dict(self) -> dict:
        def pct(m):
            out = dict(m)
            for k in METRICS:
                out[k] = 100.0 * m[k]
            return out

        return {
            "unit": "percent",
            "conditions": {t: pct(m) for t, m in self.conditions.items()},
            "per_codec": {t: {c: pct(m) for c, m in cs.items()} for t, cs in self.per_codec.items()},
            "deltas": {k: {t: 100.0 * v for t, v in d.items()} for k, d in self.deltas.items()},
            "degradation_c0_c1": self.degradation,
            "metadata": self.metadata,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def rows(self):
        for tag, m in self.conditions.items():
            yield [tag, "all", m["eer"], m["auc"], m["f1"], m["threshold"], m["n_bonafide"], m["n_fake"]]
            for codec, cm in sorted(self.per_codec.get(tag, {}).items()):
                yield [tag, codec, cm["eer"], cm["auc"], cm["f1"], cm["threshold"],
                       cm["n_bonafide"], cm["n_fake"]]

    def to_text(self) -> str:
        lines = [f"{'cond':<5} {'codec':<9} {'EER%':>8} {'AUC%':>8} {'F1%':>8} {'thresh':>11} {'n_bf':>6} {'n_fk':>6}"]
        for tag, codec, e, a, f, t, nb, nf in self.rows():
            lines.append(f"{tag:<5} {codec:<9} {100 * e:8.3f} {100 * a:8.3f} {100 * f:8.3f} {t:11.5g} {nb:6d} {nf:6d}")
        if self.degradation:
            d = self.degradation
            lines.append(f"C0->C1 degradation (percentage points): EER {d['eer']:+.3f}  "
                         f"AUC {d['auc']:+.3f}  F1 {d['f1']:+.3f}")
        return "\n".join(lines) + "\n"

    def to_csv(self, path) -> Path:
        path = Path(path)
        with path.open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["condition", "codec", "eer_pct", "auc_pct", "f1_pct", "threshold", "n_bonafide", "n_fake"])
            for tag, codec, e, a, f, t, nb, nf in self.rows():
                w.writerow([tag, codec, f"{100 * e:.6f}", f"{100 * a:.6f}", f"{100 * f:.6f}", repr(t), nb, nf])
        return path

    def save(self, stem) -> list[Path]:
        stem = Path(stem)
        stem.parent.mkdir(parents=True, exist_ok=True)
        js = stem.with_suffix(".json")
        js.write_text(self.to_json(), encoding="utf-8")
        txt = stem.with_suffix(".txt")
        txt.write_text(self.to_text(), encoding="utf-8")
        return [js, txt, self.to_csv(stem.with_suffix(".csv"))]


def degradation(c0: dict, c1: dict) -> dict:
    """C0 -> C1 change in percentage points; positive means worse for every metric."""
    return {
        "eer": 100.0 * (c1["eer"] - c0["eer"]),
        "auc": 100.0 * (c0["auc"] - c1["auc"]),
        "f1": 100.0 * (c0["f1"] - c1["f1"]),
    }


def average_degradation(reports) -> dict:
    """Mean C0 -> C1 degradation across several detectors' reports."""
    ds = [r.degradation for r in reports if r.degradation]
    return {k: float(np.mean([d[k] for d in ds])) for k in METRICS} if ds else {}


def evaluate_conditions(scores, condition_set, metadata=None) -> EvalReport:
    """Per-condition metrics for every trial the condition set expects.

    ``scores`` is a path to a score file or an iterable of ScoreEntry.
    ``condition_set`` supplies ``trials()``: (item id, condition, label,
    codec) tuples. Metrics pool all codecs within a condition; a per-codec
    breakdown is included for the degraded conditions.
    """
    if isinstance(scores, (str, Path)):
        scores = read_scores(scores)
    table = {(e.utterance_id, e.condition): e.score for e in scores}
    trials = list(condition_set.trials())
    missing = [(u, c) for u, c, _, _ in trials if (u, c) not in table]
    if missing:
        raise MissingScores(missing)
    grouped: dict = {}
    for uid, cond, label, codec in trials:
        grouped.setdefault(cond, []).append((table[(uid, cond)], label, codec))
    conditions, per_codec = {}, {}
    for tag in sorted(grouped, key=lambda c: (len(c), c)):
        rows = grouped[tag]
        conditions[tag] = condition_metrics([r[0] for r in rows], [r[1] for r in rows])
        codecs = sorted({r[2] for r in rows if r[2]})
        if len(codecs) > 1:
            per_codec[tag] = {}
            for codec in codecs:
                sub = [r for r in rows if r[2] == codec]
                per_codec[tag][codec] = condition_metrics([r[0] for r in sub], [r[1] for r in sub])
    deltas = {}
    if "C0" in conditions:
        base = conditions["C0"]
        deltas = {k: {t: m[k] - base[k] for t, m in conditions.items() if t != "C0"} for k in METRICS}
    deg = degradation(conditions["C0"], conditions["C1"]) if {"C0", "C1"} <= conditions.keys() else {}
    return EvalReport(conditions, per_codec, deltas, deg, dict(metadata or {}))
