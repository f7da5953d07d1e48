"""Run configuration and the restartable pipeline stages behind the CLI.

Layout under ``paths.work_dir``::

    addc/                 ADD-C condition set (C0..C5 WAVE files, manifests, plan.json)
    augmented/            augmented training set
    features/<kind>/...   per-utterance feature caches
    models/               trained detectors
    scores/, reports/     score files and evaluation reports
    stamps/<stage>.json   digest of the inputs each stage was built from

A stage whose stamp matches its current input digest is skipped. A stamp
with a different digest means the outputs are stale: the stage refuses to
mix old and new data unless ``force`` is set.
"""

from __future__ import annotations

import configparser
import hashlib
import json
import logging
import platform
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .channel import CONCEALMENTS, LOSS_MODELS, PLR_TABLE
from .codec import ExternalCodecTemplate, codec_from_mapping, default_registry, set_max_subprocesses
from .corpus import load_audio, load_manifest
from .datasetgen import (ASSUMPTIONS, ChannelSettings, build_addc, build_augmented, load_condition_set,
                         render_addc, render_augmented, safe_name)
from .detector import (TrainConfig, gmm_score, load_model, mlp_score, mlp_train, save_model, train_gmm)
from .errors import ConfigError, StageInputMissing, StaleCache
from .evaluation import EvalReport, ScoreEntry, average_degradation, evaluate_conditions, write_scores
from .features import KINDS, extract, load_features, pool_stats, read_feature_header, save_features

log = logging.getLogger(__name__)

MODELS = ("gmm", "mlp")
TRAIN_SETS = ("clean", "augmented")


@dataclass
class RunConfig:
    manifest: Path | None = None
    work_dir: Path = Path("work")
    seed: int | None = None
    workers: int = 1
    per_dataset: int = 500
    codecs: list = field(default_factory=default_registry)
    templates: dict = field(default_factory=dict)  # codec index -> ExternalCodecTemplate
    channel: ChannelSettings = field(default_factory=ChannelSettings)
    feature: str = "lfcc"
    model: str = "gmm"
    train_on: str = "clean"
    gmm_k: int = 64
    gmm_max_frames: int = 50000
    gmm_max_iter: int = 100
    train: TrainConfig = field(default_factory=TrainConfig)
    source: str = ""  # config text the run was loaded from, for digests

    def validate(self, need_manifest: bool = True) -> RunConfig:
        if self.seed is None:
            raise ConfigError("a master seed is required ([run] seed = ...)")
        if need_manifest:
            if self.manifest is None:
                raise ConfigError("no manifest configured ([paths] manifest = ...)")
            if not Path(self.manifest).is_file():
                raise ConfigError(f"manifest {self.manifest} does not exist")
        if self.feature not in KINDS:
            raise ConfigError(f"feature kind must be one of {KINDS}, got {self.feature!r}")
        if self.model not in MODELS:
            raise ConfigError(f"model must be one of {MODELS}, got {self.model!r}")
        if self.model == "gmm" and self.feature == "raw":
            raise ConfigError("the GMM detector needs frame features (lfcc or cqcc)")
        if self.train_on not in TRAIN_SETS:
            raise ConfigError(f"train_on must be one of {TRAIN_SETS}, got {self.train_on!r}")
        if self.channel.concealment not in CONCEALMENTS:
            raise ConfigError(f"concealment must be one of {CONCEALMENTS}")
        if self.channel.loss_model not in LOSS_MODELS:
            raise ConfigError(f"loss_model must be one of {LOSS_MODELS}")
        if self.workers < 1 or self.per_dataset < 1 or self.gmm_k < 1:
            raise ConfigError("workers, per_dataset and K must be positive")
        for spec in self.codecs:
            if spec.backend == "external" and spec.index not in self.templates:
                raise ConfigError(f"codec {spec.name} uses the external backend but has no encode/decode commands")
        return self

    def dir(self, name: str) -> Path:
        return Path(self.work_dir) / name

    def digest(self) -> str:
        return _sha256(json.dumps(self.describe(), sort_keys=True).encode())

    def describe(self) -> dict:
        return {
            "seed": self.seed,
            "per_dataset": self.per_dataset,
            "codecs": [asdict(s) for s in self.codecs],
            "templates": {str(k): [t.encode_cmd, t.decode_cmd] for k, t in sorted(self.templates.items())},
            "channel": asdict(self.channel),
            "feature": self.feature,
            "model": self.model,
            "train_on": self.train_on,
            "gmm": [self.gmm_k, self.gmm_max_frames, self.gmm_max_iter],
            "train": asdict(self.train),
        }


def _getint(sec, key, default):
    try:
        return sec.getint(key, fallback=default)
    except ValueError as e:
        raise ConfigError(f"[{sec.name}] {key}: {e}") from None


def _getfloat(sec, key, default):
    try:
        return sec.getfloat(key, fallback=default)
    except ValueError as e:
        raise ConfigError(f"[{sec.name}] {key}: {e}") from None


def load_config(path) -> RunConfig:
    """Parse an INI-style run configuration; relative paths resolve against the file's directory."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file {path} not found")
    text = path.read_text(encoding="utf-8")
    cp = configparser.ConfigParser(interpolation=None)
    try:
        cp.read_string(text, source=str(path))
    except configparser.Error as e:
        raise ConfigError(str(e)) from None
    base = path.parent
    cfg = RunConfig(source=text)

    def resolve(p):
        p = Path(p).expanduser()
        return p if p.is_absolute() else base / p

    if cp.has_section("paths"):
        sec = cp["paths"]
        if sec.get("manifest"):
            cfg.manifest = resolve(sec["manifest"])
        if sec.get("work_dir"):
            cfg.work_dir = resolve(sec["work_dir"])
    if cp.has_section("run"):
        sec = cp["run"]
        if sec.get("seed", "").strip():
            cfg.seed = _getint(sec, "seed", None)
        cfg.workers = _getint(sec, "workers", cfg.workers)
        cfg.per_dataset = _getint(sec, "per_dataset", cfg.per_dataset)

    codecs = default_registry()
    common = dict(cp["codec"]) if cp.has_section("codec") else {}
    for i, spec in enumerate(codecs):
        over = {k: v for k, v in common.items() if k in ("backend", "frame_ms")}
        for name in (spec.name, spec.slug):
            if cp.has_section(f"codec.{name}"):
                over.update(cp[f"codec.{name}"])
        try:
            codecs[i] = codec_from_mapping(over, spec)
        except (TypeError, ValueError) as e:
            raise ConfigError(f"[codec.{spec.name}]: {e}") from None
        if "encode_cmd" in over or "decode_cmd" in over:
            try:
                cfg.templates[spec.index] = ExternalCodecTemplate(over.get("encode_cmd", ""),
                                                                  over.get("decode_cmd", ""),
                                                                  over.get("work_dir") or None)
            except ValueError as e:
                raise ConfigError(f"[codec.{spec.name}]: {e}") from None
    cfg.codecs = codecs

    if cp.has_section("channel"):
        sec = cp["channel"]
        ge = None
        if sec.get("ge_p") or sec.get("ge_r"):
            ge = (_getfloat(sec, "ge_p", 0.0), _getfloat(sec, "ge_r", 0.5))
        cfg.channel = ChannelSettings(sec.get("concealment", "zero_fill"), sec.get("loss_model", "bernoulli"),
                                      ge, _getfloat(sec, "frame_ms", 20.0))
    if cp.has_section("features"):
        cfg.feature = cp["features"].get("kind", cfg.feature)
    if cp.has_section("detector"):
        sec = cp["detector"]
        cfg.model = sec.get("model", cfg.model)
        cfg.train_on = sec.get("train_on", cfg.train_on)
        cfg.gmm_k = _getint(sec, "k", cfg.gmm_k)
        cfg.gmm_max_frames = _getint(sec, "max_frames", cfg.gmm_max_frames)
        cfg.gmm_max_iter = _getint(sec, "max_iter", cfg.gmm_max_iter)
        t = cfg.train
        cfg.train = replace(t, batch_size=_getint(sec, "batch_size", t.batch_size),
                            epochs=_getint(sec, "epochs", t.epochs), lr=_getfloat(sec, "lr", t.lr),
                            patience=_getint(sec, "patience", t.patience),
                            val_fraction=_getfloat(sec, "val_fraction", t.val_fraction),
                            hidden=_getint(sec, "hidden", t.hidden))
    return cfg


def write_config(path, manifest, work_dir, seed: int = 0, per_dataset: int = 5, extra: str = "") -> Path:
    path = Path(path)
    path.write_text(
        "[paths]\n"
        f"manifest = {manifest}\n"
        f"work_dir = {work_dir}\n\n"
        "[run]\n"
        f"seed = {seed}\n"
        "workers = 1\n"
        f"per_dataset = {per_dataset}\n\n"
        "[channel]\nloss_model = bernoulli\nconcealment = zero_fill\nframe_ms = 20\n\n"
        "[features]\nkind = lfcc\n\n"
        "[detector]\nmodel = gmm\ntrain_on = clean\nk = 8\nmax_frames = 20000\n" + extra,
        encoding="utf-8")
    return path


def toolchain() -> dict:
    return {"addbench": __version__, "python": platform.python_version(),
            "numpy": np.__version__, "scipy": scipy.__version__}


# ------------------------------------------------------------------ stamps

def _sha256(b: bytes) -> str:
    return hashlib.sha256(b).hexdigest()


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _stamp_path(cfg: RunConfig, stage: str) -> Path:
    return cfg.dir("stamps") / f"{stage}.json"


def read_stamp(cfg: RunConfig, stage: str) -> dict | None:
    p = _stamp_path(cfg, stage)
    return json.loads(p.read_text(encoding="utf-8")) if p.is_file() else None


def _require(cfg: RunConfig, stage: str, needed_by: str) -> dict:
    st = read_stamp(cfg, stage)
    if st is None:
        raise StageInputMissing(f"{needed_by} needs the output of '{stage}'; run that stage first")
    return st


def _check(cfg: RunConfig, stage: str, digest: str, force: bool) -> bool:
    """True when the stage is already up to date."""
    st = read_stamp(cfg, stage)
    if st is None or force:
        return False
    if st["digest"] != digest:
        raise StaleCache(f"outputs of '{stage}' were built from different inputs; rerun with --force")
    return True


def _stamp(cfg: RunConfig, stage: str, digest: str, summary: dict):
    p = _stamp_path(cfg, stage)
    p.parent.mkdir(parents=True, exist_ok=True)
    p.write_text(json.dumps({"stage": stage, "digest": digest, "summary": summary},
                            indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _digest(*parts) -> str:
    return _sha256(json.dumps(parts, sort_keys=True, default=str).encode())


# ------------------------------------------------------------------ stages

def stage_build_addc(cfg: RunConfig, force: bool = False) -> dict:
    cfg.validate()
    d = cfg.describe()
    digest = _digest("addc", file_digest(cfg.manifest), d["seed"], d["per_dataset"], d["codecs"],
                     d["templates"], d["channel"])
    if _check(cfg, "addc", digest, force):
        return {"skipped": True, **read_stamp(cfg, "addc")["summary"]}
    set_max_subprocesses(cfg.workers)
    cset = build_addc(load_manifest(cfg.manifest), cfg.per_dataset, cfg.seed, cfg.codecs)
    summary = render_addc(cset, cfg.dir("addc"), cfg.channel, cfg.codecs, cfg.templates or None,
                          cfg.workers, force)
    _stamp(cfg, "addc", digest, summary)
    return {"skipped": False, **summary}


def _consumed(cfg: RunConfig) -> list:
    plan = cfg.dir("addc") / "plan.json"
    if not plan.is_file():
        raise StageInputMissing("ADD-C plan not found; run build-addc first")
    return json.loads(plan.read_text(encoding="utf-8"))["c0_ids"]


def stage_augment(cfg: RunConfig, force: bool = False) -> dict:
    cfg.validate()
    up = _require(cfg, "addc", "augment")
    d = cfg.describe()
    digest = _digest("augmented", up["digest"], d["codecs"], d["templates"], d["channel"])
    if _check(cfg, "augmented", digest, force):
        return {"skipped": True, **read_stamp(cfg, "augmented")["summary"]}
    plan = build_augmented(load_manifest(cfg.manifest), cfg.seed, cfg.codecs, exclude=_consumed(cfg))
    summary = render_augmented(plan, cfg.dir("augmented"), cfg.channel, cfg.templates or None,
                               cfg.workers, force)
    _stamp(cfg, "augmented", digest, summary)
    return {"skipped": False, **summary}


def training_entries(cfg: RunConfig):
    if cfg.train_on == "augmented":
        _require(cfg, "augmented", "training on the augmented set")
        return list(load_manifest(cfg.dir("augmented") / "manifest.csv"))
    return list(load_manifest(cfg.manifest).without(_consumed(cfg)))


def _feature_path(cfg: RunConfig, group: str, uid: str) -> Path:
    return cfg.dir("features") / cfg.feature / group / f"{safe_name(uid)}.feat"


def _valid_cache(path: Path, kind: str) -> bool:
    try:
        k, D, T = read_feature_header(path)
    except (OSError, ValueError):
        return False
    return k == kind and path.stat().st_size == 16 + 4 * D * T


def _extract_group(cfg: RunConfig, group: str, entries, force: bool) -> int:
    written = 0
    for u in entries:
        p = _feature_path(cfg, group, u.id)
        if not force and _valid_cache(p, cfg.feature):
            continue
        save_features(p, extract(load_audio(u.path), cfg.feature))
        written += 1
    return written


def stage_features(cfg: RunConfig, force: bool = False) -> dict:
    cfg.validate()
    addc = _require(cfg, "addc", "features")
    ups = [addc["digest"]]
    if cfg.train_on == "augmented":
        ups.append(_require(cfg, "augmented", "features")["digest"])
    stage = f"features-{cfg.feature}-{cfg.train_on}"
    digest = _digest("features", cfg.feature, cfg.train_on, ups)
    if _check(cfg, stage, digest, force):
        return {"skipped": True, "written": 0}
    train_group = f"train-{cfg.train_on}"
    written = _extract_group(cfg, train_group, training_entries(cfg), force)
    written += _extract_group(cfg, "addc", load_manifest(cfg.dir("addc") / "conditions.csv"), force)
    _stamp(cfg, stage, digest, {"written": written})
    return {"skipped": False, "written": written}


def model_name(cfg: RunConfig) -> str:
    return f"{cfg.model}-{cfg.feature}-{cfg.train_on}"


def stage_train(cfg: RunConfig, force: bool = False) -> dict:
    cfg.validate()
    up = _require(cfg, f"features-{cfg.feature}-{cfg.train_on}", "train")
    d = cfg.describe()
    name = model_name(cfg)
    digest = _digest("train", up["digest"], d["model"], d["gmm"], d["train"], d["seed"])
    if _check(cfg, f"train-{name}", digest, force):
        return {"skipped": True, "model": str(cfg.dir("models") / f"{name}.bin")}
    entries = training_entries(cfg)
    feats = [load_features(_feature_path(cfg, f"train-{cfg.train_on}", u.id)) for u in entries]
    labels = [u.label for u in entries]
    if cfg.model == "gmm":
        model = train_gmm(feats, labels, cfg.gmm_k, cfg.seed, cfg.gmm_max_frames, cfg.gmm_max_iter)
    else:
        tc = replace(cfg.train, seed=cfg.seed)
        samples = [(pool_stats(f), lbl) for f, lbl in zip(feats, labels)]
        model, _ = mlp_train(samples, tc, cfg.feature)
    path = save_model(cfg.dir("models") / f"{name}.bin", model)
    _stamp(cfg, f"train-{name}", digest, {"model": str(path.name), "n_train": len(entries)})
    return {"skipped": False, "model": str(path), "n_train": len(entries)}


def _score(model, f):
    return gmm_score(model, f) if hasattr(model, "bonafide") else mlp_score(model, pool_stats(f))


def report_metadata(cfg: RunConfig) -> dict:
    return {
        "model": cfg.model,
        "feature": cfg.feature,
        "train_on": cfg.train_on,
        "seed": cfg.seed,
        "codecs": {s.name: {"bandwidth_hz": s.bandwidth_hz, "bitrate_kbps": s.bitrate_kbps,
                            "backend": s.backend, "frame_ms": s.frame_ms} for s in cfg.codecs},
        "channel": asdict(cfg.channel),
        "plr_table": {f"C{n}": p for n, p in PLR_TABLE.items()},
        "assumptions": ASSUMPTIONS,
    }


def stage_eval(cfg: RunConfig, force: bool = False, scores_file=None) -> dict:
    """Score ADD-C with the trained model (or ingest an external score file) and write reports."""
    cfg.validate(need_manifest=scores_file is None)
    cset = load_condition_set(cfg.dir("addc")) if (cfg.dir("addc") / "conditions.csv").is_file() else None
    if cset is None:
        raise StageInputMissing("ADD-C condition set not found; run build-addc first")
    if scores_file is not None:
        name = Path(scores_file).stem
        report = evaluate_conditions(scores_file, cset, {"external_scores": Path(scores_file).name})
        files = report.save(cfg.dir("reports") / name)
        return {"report": [str(f) for f in files]}
    name = model_name(cfg)
    up = _require(cfg, f"train-{name}", "eval")
    digest = _digest("eval", up["digest"])
    if _check(cfg, f"eval-{name}", digest, force):
        return {"skipped": True, "report": str(cfg.dir("reports") / f"{name}.json")}
    model = load_model(cfg.dir("models") / f"{name}.bin")
    entries = []
    for uid, cond, label, _ in cset.trials():
        f = load_features(_feature_path(cfg, "addc", uid))
        entries.append(ScoreEntry(uid, cond, _score(model, f), label))
    write_scores(cfg.dir("scores") / f"{name}.csv", entries)
    report = evaluate_conditions(entries, cset, report_metadata(cfg))
    files = report.save(cfg.dir("reports") / name)
    _stamp(cfg, f"eval-{name}", digest, {"report": f"{name}.json"})
    return {"skipped": False, "report": [str(f) for f in files], "eer": {t: m["eer"] for t, m in report.conditions.items()}}


def stage_report(cfg: RunConfig) -> dict:
    """Merge every evaluation report into reports/summary.{json,txt}."""
    rdir = cfg.dir("reports")
    paths = sorted(p for p in rdir.glob("*.json") if p.stem != "summary") if rdir.is_dir() else []
    if not paths:
        raise StageInputMissing("no evaluation reports found; run eval first")
    merged, reports = {}, []
    for p in paths:
        d = json.loads(p.read_text(encoding="utf-8"))
        merged[p.stem] = d
        reports.append(EvalReport({}, degradation={k: v for k, v in d["degradation_c0_c1"].items()}))
    summary = {"reports": merged, "average_degradation_c0_c1": average_degradation(reports)}
    rdir.joinpath("summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n",
                                             encoding="utf-8")
    lines = []
    for name, d in merged.items():
        lines.append(f"== {name}")
        lines.append("cond   " + "  ".join(f"{m.upper():>8}" for m in ("eer", "auc", "f1")))
        for tag, m in d["conditions"].items():
            lines.append(f"{tag:<5}  " + "  ".join(f"{m[k]:8.3f}" for k in ("eer", "auc", "f1")))
        for tag, codecs in d["per_codec"].items():
            for codec, m in sorted(codecs.items()):
                lines.append(f"  {tag} {codec:<8} EER {m['eer']:7.3f}")
    avg = summary["average_degradation_c0_c1"]
    if avg:
        lines.append("average C0->C1 degradation (points): " + "  ".join(f"{k.upper()} {v:+.3f}" for k, v in avg.items()))
    rdir.joinpath("summary.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    return {"reports": list(merged), "summary": str(rdir / "summary.json")}


def run_all(cfg: RunConfig, force: bool = False) -> dict:
    out = {"build-addc": stage_build_addc(cfg, force)}
    if cfg.train_on == "augmented":
        out["augment"] = stage_augment(cfg, force)
    out["features"] = stage_features(cfg, force)
    out["train"] = stage_train(cfg, force)
    out["eval"] = stage_eval(cfg, force)
    out["report"] = stage_report(cfg)
    return out
