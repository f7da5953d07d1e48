"""Condition-set and augmented-corpus construction.

ADD-C: a clean set C0 (``per_dataset`` bonafide + ``per_dataset`` fake from
each source tag) and five degraded sets C1..C5, each holding every C0
utterance passed through all six codecs at that condition's packet loss
rate. C0 utterances are consumed, i.e. excluded from training corpora.

Augmentation: the training corpus is split into six stratified subsets,
subset k goes through codec k, and every subset is rendered at all five
loss rates. Six subsets x five rates gives exactly 5x the corpus size.
"""

from __future__ import annotations

import csv
import json
import logging
import re
from collections import defaultdict
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .channel import BENCHMARK_PLRS, PLR_TABLE, ChannelCondition, LossModel, derive_subseed, transmit
from .codec import CodecSpec, ExternalCodecTemplate, default_registry
from .corpus import (AudioBuffer, Manifest, Utterance, load_audio, load_manifest, write_manifest,
                     write_wav)
from .errors import EmptyCorpus, InsufficientData, StageInputMissing, TooSmall

log = logging.getLogger(__name__)

N_SUBSETS = 6
FULL_CORPUS_SIZE = 130_041 + 240_373
FULL_AUGMENTED_REPORTED = 1_832_070
FULL_C0_SIZE = 4000
ITEM_COLUMNS = ("condition", "codec", "codec_index", "plr", "seed", "source_id")


def safe_name(s: str) -> str:
    return re.sub(r"[^A-Za-z0-9_.-]", "_", s)


@dataclass(frozen=True)
class DegradedItem:
    id: str
    source: Utterance
    codec_index: int
    codec_name: str
    plr: float
    seed: int
    relpath: str
    condition: int | None = None

    @property
    def label(self) -> str:
        return self.source.label

    @property
    def tag(self) -> str:
        return f"C{self.condition}" if self.condition is not None else ""

    def to_utterance(self, root) -> Utterance:
        extra = (("condition", self.tag), ("codec", self.codec_name), ("codec_index", str(self.codec_index)),
                 ("plr", repr(self.plr)), ("seed", str(self.seed)), ("source_id", self.source.id))
        return Utterance(self.id, self.source.label, self.source.source_dataset,
                         Path(root) / self.relpath, self.source.algorithm, extra)


@dataclass
class ChannelSettings:
    """Channel parameters shared by every rendered item."""
    concealment: str = "zero_fill"
    loss_model: str = "bernoulli"
    ge_params: tuple | None = None
    packet_ms: float = 20.0

    def condition(self, spec: CodecSpec, plr: float, seed: int, index: int | None = None) -> ChannelCondition:
        loss = LossModel(plr, self.loss_model, seed, self.ge_params)
        return ChannelCondition(spec, loss, index, self.concealment, self.packet_ms)


# ------------------------------------------------------------------- ADD-C

@dataclass
class ConditionSet:
    c0: list[Utterance]
    conditions: dict  # n -> list[DegradedItem]
    plr_table: dict = field(default_factory=lambda: dict(PLR_TABLE))
    seed: int = 0
    per_dataset: int = 0

    @property
    def consumed(self) -> set:
        return {u.id for u in self.c0}

    def sizes(self) -> dict:
        out = {"C0": len(self.c0)}
        out.update({f"C{n}": len(items) for n, items in sorted(self.conditions.items())})
        return out

    def trials(self):
        """(item id, condition tag, label, codec name) for every expected score."""
        for u in self.c0:
            yield u.id, "C0", u.label, ""
        for n in sorted(self.conditions):
            for it in self.conditions[n]:
                yield it.id, f"C{n}", it.label, it.codec_name


def _c0_relpath(u: Utterance) -> str:
    return f"C0/{safe_name(u.id)}.wav"


def build_addc(manifest: Manifest, per_dataset: int = 500, seed: int = 0,
               registry: list[CodecSpec] | None = None) -> ConditionSet:
    """Select C0 and plan C1..C5; no audio is touched here (see ``render_addc``)."""
    registry = registry or default_registry()
    rng = np.random.default_rng(seed)
    pools = defaultdict(list)
    for u in manifest:
        pools[(u.source_dataset, u.label)].append(u)
    c0 = []
    for source in manifest.sources():
        for label in ("bonafide", "fake"):
            pool = sorted(pools[(source, label)], key=lambda u: u.id)
            if len(pool) < per_dataset:
                raise InsufficientData(source, label, len(pool), per_dataset)
            pick = np.sort(rng.choice(len(pool), per_dataset, replace=False))
            c0.extend(pool[i] for i in pick)
    conditions = {}
    for n, plr in PLR_TABLE.items():
        items = []
        for u in c0:
            for spec in registry:
                iid = f"{u.id}__{spec.slug}__C{n}"
                items.append(DegradedItem(
                    iid, u, spec.index, spec.name, plr, derive_subseed(seed, u.id, spec.index, plr),
                    f"C{n}/{spec.slug}/{safe_name(u.id)}.wav", n))
        conditions[n] = items
    return ConditionSet(c0, conditions, dict(PLR_TABLE), seed, per_dataset)


# ------------------------------------------------------------ augmentation

@dataclass
class AugmentPlan:
    subsets: list  # six lists of Utterance
    codecs: list  # codec spec per subset
    plrs: tuple
    seed: int
    items: list = field(default_factory=list)

    @property
    def original_size(self) -> int:
        return sum(len(s) for s in self.subsets)

    def summary(self) -> dict:
        return {
            "original_size": self.original_size,
            "augmented_size": len(self.items),
            "predicted_size_5n": 5 * self.original_size,
            "full_corpus_size": FULL_CORPUS_SIZE,
            "full_corpus_predicted_5n": 5 * FULL_CORPUS_SIZE,
            # the reported count is 5N once the 4000 C0 selections are removed first
            "full_corpus_predicted_5n_after_c0": 5 * (FULL_CORPUS_SIZE - FULL_C0_SIZE),
            "full_corpus_reported_augmented": FULL_AUGMENTED_REPORTED,
            "subset_sizes": [len(s) for s in self.subsets],
        }


def stratified_partition(entries, n_parts: int, seed: int) -> list[list]:
    """Round-robin deal of each (label, algorithm) stratum after a seeded shuffle.

    The dealing position carries over from one stratum to the next, so both
    per-stratum and overall part sizes differ by at most one.
    """
    rng = np.random.default_rng(seed)
    strata = defaultdict(list)
    for u in entries:
        strata[(u.label, u.algorithm or "")].append(u)
    parts = [[] for _ in range(n_parts)]
    pos = 0
    for key in sorted(strata):
        members = sorted(strata[key], key=lambda u: u.id)
        for i in rng.permutation(len(members)):
            parts[pos % n_parts].append(members[i])
            pos += 1
    return parts


def build_augmented(manifest: Manifest, seed: int = 0, registry: list[CodecSpec] | None = None,
                    exclude=()) -> AugmentPlan:
    """Plan the augmented corpus from the training pool (``exclude`` = consumed ids)."""
    registry = registry or default_registry()
    if len(registry) != N_SUBSETS:
        raise ValueError(f"augmentation needs {N_SUBSETS} codecs, registry has {len(registry)}")
    exclude = set(exclude)
    pool = [u for u in manifest if u.id not in exclude]
    if not pool:
        raise EmptyCorpus("no utterances left to augment")
    subsets = stratified_partition(pool, N_SUBSETS, seed)
    items = []
    for spec, subset in zip(registry, subsets):
        for plr in BENCHMARK_PLRS:
            ptag = f"p{int(round(plr * 100)):02d}"
            for u in subset:
                items.append(DegradedItem(
                    f"{u.id}__{spec.slug}__{ptag}", u, spec.index, spec.name, plr,
                    derive_subseed(seed, u.id, spec.index, plr),
                    f"{spec.slug}/{ptag}/{safe_name(u.id)}.wav"))
    return AugmentPlan(subsets, list(registry), BENCHMARK_PLRS, seed, items)


# ------------------------------------------------------------------- split

def split_train_val(items, fraction: float = 0.8, seed: int = 0, label_of=lambda u: u.label):
    """Label-stratified seeded split; the validation share of each class is floored."""
    if not 0.0 < fraction < 1.0:
        raise ValueError("fraction must lie in (0, 1)")
    items = list(items)
    by_label = defaultdict(list)
    for i, it in enumerate(items):
        by_label[label_of(it)].append(i)
    if len(by_label) < 2 or min(len(v) for v in by_label.values()) < 2:
        raise TooSmall("need at least two items of each of two classes")
    rng = np.random.default_rng(seed)
    val = set()
    for key in sorted(by_label):
        idx = by_label[key]
        n_val = int(np.floor(len(idx) * (1.0 - fraction) + 1e-9))
        n_val = min(max(n_val, 1), len(idx) - 1)
        val.update(idx[j] for j in rng.permutation(len(idx))[:n_val])
    train = [it for i, it in enumerate(items) if i not in val]
    return train, [it for i, it in enumerate(items) if i in val]


# --------------------------------------------------------------- rendering

def degrade(audio: AudioBuffer, item: DegradedItem, settings: ChannelSettings, codecs: dict,
            tmpl: ExternalCodecTemplate | None = None) -> AudioBuffer:
    """Run one planned item through the codec + channel chain.

    ``tmpl`` may be a single external template or a dict keyed by codec index.
    """
    if isinstance(tmpl, dict):
        tmpl = tmpl.get(item.codec_index)
    cond = settings.condition(codecs[item.codec_index], item.plr, item.seed, item.condition)
    return transmit(audio, cond, tmpl, scratch_key=item.id)


def _render_one(args):
    item, root, settings, codecs, tmpl, force = args
    out = Path(root) / item.relpath
    if out.is_file() and not force:
        return False
    write_wav(out, degrade(load_audio(item.source.path), item, settings, codecs, tmpl))
    return True


def _render(items, root, settings, registry, tmpl, workers, force):
    codecs = {s.index: s for s in registry}
    jobs = [(it, root, settings, codecs, tmpl, force) for it in items]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            return sum(ex.map(_render_one, jobs, chunksize=16))
    return sum(_render_one(j) for j in jobs)


def render_addc(cset: ConditionSet, root, settings: ChannelSettings | None = None,
                registry=None, tmpl=None, workers: int = 1, force: bool = False) -> dict:
    """Write addc/{C0,C1..C5}/... WAVE files, per-condition manifests, conditions.csv, plan.json."""
    root = Path(root)
    settings = settings or ChannelSettings()
    registry = registry or default_registry()
    written = 0
    c0_utts = []
    for u in cset.c0:
        out = root / _c0_relpath(u)
        if force or not out.is_file():
            write_wav(out, load_audio(u.path))
            written += 1
        c0_utts.append(Utterance(u.id, u.label, u.source_dataset, out, u.algorithm,
                                 (("condition", "C0"), ("codec", ""), ("codec_index", "0"), ("plr", ""),
                                  ("seed", ""), ("source_id", u.id))))
    write_manifest(c0_utts, root / "C0" / "manifest.csv", ITEM_COLUMNS)
    all_utts = list(c0_utts)
    for n, items in sorted(cset.conditions.items()):
        written += _render(items, root, settings, registry, tmpl, workers, force)
        utts = [it.to_utterance(root) for it in items]
        write_manifest(utts, root / f"C{n}" / "manifest.csv", ITEM_COLUMNS)
        all_utts.extend(utts)
    write_manifest(all_utts, root / "conditions.csv", ITEM_COLUMNS)
    plan = {
        "kind": "addc",
        "seed": cset.seed,
        "per_dataset": cset.per_dataset,
        "sizes": cset.sizes(),
        "plr_table": {f"C{n}": p for n, p in cset.plr_table.items()},
        "codecs": [_codec_meta(s) for s in registry],
        "channel": _settings_meta(settings),
        "c0_ids": [u.id for u in cset.c0],
        "assumptions": ASSUMPTIONS,
    }
    (root / "plan.json").write_text(json.dumps(plan, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return {"written": written, "sizes": cset.sizes()}


def render_augmented(plan: AugmentPlan, root, settings: ChannelSettings | None = None,
                     tmpl=None, workers: int = 1, force: bool = False) -> dict:
    root = Path(root)
    settings = settings or ChannelSettings()
    written = _render(plan.items, root, settings, plan.codecs, tmpl, workers, force)
    write_manifest([it.to_utterance(root) for it in plan.items], root / "manifest.csv", ITEM_COLUMNS)
    meta = {
        "kind": "augmented",
        "seed": plan.seed,
        "plrs": list(plan.plrs),
        "codecs": [_codec_meta(s) for s in plan.codecs],
        "channel": _settings_meta(settings),
        "subsets": {s.name: [u.id for u in sub] for s, sub in zip(plan.codecs, plan.subsets)},
        "summary": plan.summary(),
        "assumptions": ASSUMPTIONS,
    }
    (root / "plan.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return {"written": written, **plan.summary()}


def load_condition_set(root) -> ConditionSet:
    """Rebuild a ConditionSet from a rendered addc/ directory."""
    root = Path(root)
    path = root / "conditions.csv"
    if not path.is_file():
        raise StageInputMissing(f"{path} not found; run build-addc first")
    m = load_manifest(path)
    plan = json.loads((root / "plan.json").read_text(encoding="utf-8"))
    c0, conditions = [], defaultdict(list)
    originals = {}
    for u in m:
        if u.get("condition") == "C0":
            c0.append(u)
            originals[u.id] = u
    for u in m:
        tag = u.get("condition")
        if tag == "C0":
            continue
        n = int(tag[1:])
        src = originals.get(u.get("source_id"), u)
        conditions[n].append(DegradedItem(u.id, src, int(u.get("codec_index")), u.get("codec"),
                                          float(u.get("plr")), int(u.get("seed")),
                                          str(Path(u.path).relative_to(root.resolve()))
                                          if Path(u.path).is_absolute() else str(u.path), n))
    return ConditionSet(c0, dict(conditions), dict(PLR_TABLE), plan.get("seed", 0), plan.get("per_dataset", 0))


def _codec_meta(s: CodecSpec) -> dict:
    return {"name": s.name, "index": s.index, "backend": s.backend, "bandwidth_hz": s.bandwidth_hz,
            "bitrate_kbps": s.bitrate_kbps, "frame_ms": s.frame_ms}


def _settings_meta(s: ChannelSettings) -> dict:
    return {"concealment": s.concealment, "loss_model": s.loss_model,
            "ge_params": list(s.ge_params) if s.ge_params else None, "packet_ms": s.packet_ms}


ASSUMPTIONS = {
    "truncation": "first 4 s kept, tail zero-padded",
    "codec_operating_points": "midband conversational defaults; builtin backend is a parametric surrogate",
    "packet_loss": "20 ms frames dropped after codec decode, i.i.d. Bernoulli",
    "concealment": "configurable; default zero_fill",
    "augmentation": "6 stratified subsets x 5 PLRs = 5N items",
    "stratification": "label x algorithm only (no speaker ids)",
    "c0_sampling": "seeded uniform per (source, label)",
}
