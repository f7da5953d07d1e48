"""One test per acceptance criterion; each prints a PASS/FAIL line with its measurements."""

from __future__ import annotations

import time
from pathlib import Path

import numpy as np
import pytest

from addbench.channel import LossModel, draw_loss_mask
from addbench.cli import main
from addbench.codec import default_registry
from addbench.corpus import AudioBuffer, Manifest, Utterance, load_manifest
from addbench.datasetgen import (ChannelSettings, build_addc, build_augmented, degrade, render_addc,
                                 render_augmented)
from addbench.demo import DEMO_ALGORITHMS, DEMO_SOURCES, make_demo_corpus, synth_utterance
from addbench.detector import cross_entropy, gmm_fit, gmm_score, init_mlp, mlp_loss_grad, train_gmm
from addbench.evaluation import auc, eer
from addbench.features import extract

from oracles import brute_force_eer, pairwise_auc, random_instance
from test_detector import max_rel_error, numeric_grad


def verdict(n: int, ok: bool, detail: str):
    print(f"\n{'PASS' if ok else 'FAIL'} criterion {n}: {detail}")
    assert ok, detail


def plan_manifest(per_label, sources=DEMO_SOURCES):
    rows = []
    for s in sources:
        for label in ("bonafide", "fake"):
            for j in range(per_label):
                rows.append(Utterance(f"{s}_{label[:2]}_{j:05d}", label, s, f"/unused/{s}_{j}.wav",
                                      "" if label == "bonafide" else DEMO_ALGORITHMS[j % 3]))
    return Manifest(rows)


# ---------------------------------------------------------------- 1

def test_criterion_1_addc_cardinality(tmp_path):
    full = build_addc(plan_manifest(500), per_dataset=500, seed=0).sizes()
    t0 = time.perf_counter()
    m = load_manifest(make_demo_corpus(tmp_path / "corpus", per_class_per_source=10, seed=0))
    small = render_addc(build_addc(m, per_dataset=10, seed=0), tmp_path / "addc")
    elapsed = time.perf_counter() - t0
    on_disk = {f"C{n}": sum(1 for _ in (tmp_path / "addc" / f"C{n}").rglob("*.wav")) for n in range(6)}
    ok = (full == {"C0": 4000, **{f"C{n}": 24000 for n in range(1, 6)}}
          and small["sizes"] == on_disk == {"C0": 80, **{f"C{n}": 480 for n in range(1, 6)}}
          and elapsed < 60)
    verdict(1, ok, f"default sizes {full}; per_dataset=10 rendered {on_disk} in {elapsed:.1f}s")


# ---------------------------------------------------------------- 2

def test_criterion_2_augmentation_size(tmp_path):
    t0 = time.perf_counter()
    details, ok = [], True
    for n in (60, 120, 1000):
        rows = [Utterance(f"u{i:05d}", "fake" if i % 3 else "bonafide", DEMO_SOURCES[i % 4], f"/x/{i}.wav",
                          "" if i % 3 == 0 else f"alg{i % 7}") for i in range(n)]
        plan = build_augmented(Manifest(rows), seed=0)
        spread = 0
        for key in {(u.label, u.algorithm) for u in rows}:
            counts = [sum((u.label, u.algorithm) == key for u in p) for p in plan.subsets]
            spread = max(spread, max(counts) - min(counts))
        ok &= len(plan.items) == 5 * n and spread <= 1
        details.append(f"N={n}: {len(plan.items)} items, stratum spread {spread}")
    # the small case is rendered for real
    rows = list(load_manifest(make_demo_corpus(tmp_path / "corpus", per_class_per_source=8, seed=0)))[:60]
    out = render_augmented(build_augmented(Manifest(rows), seed=0), tmp_path / "aug")
    files = sum(1 for _ in (tmp_path / "aug").rglob("*.wav"))
    elapsed = time.perf_counter() - t0
    ok &= out["augmented_size"] == files == 300 and elapsed < 120
    details.append(f"rendered N=60 -> {files} files in {elapsed:.1f}s")
    verdict(2, ok, "; ".join(details))


# ---------------------------------------------------------------- 3

def test_criterion_3_feature_geometry():
    rng = np.random.default_rng(0)
    inputs = [np.zeros(64000), rng.standard_normal(64000) * 3000, np.full(64000, 32767),
              np.sin(np.arange(64000) * 0.3) * 20000]
    shapes = set()
    for x in inputs:
        a = AudioBuffer(np.clip(np.rint(x), -32768, 32767).astype(np.int16))
        shapes.add(tuple((k, extract(a, k).shape) for k in ("lfcc", "cqcc", "raw")))
    expected = {(("lfcc", (60, 126)), ("cqcc", (60, 501)), ("raw", (1, 64000)))}
    verdict(3, shapes == expected, f"shapes over {len(inputs)} inputs: {sorted(shapes)}")


# ---------------------------------------------------------------- 4

def test_criterion_4_metric_oracles():
    rng = np.random.default_rng(2024)
    eer_bad = auc_worst = 0
    for _ in range(200):
        bona, fake = random_instance(rng, 1000)
        s = list(bona) + list(fake)
        y = ["bonafide"] * len(bona) + ["fake"] * len(fake)
        eer_bad += eer(s, y) != brute_force_eer(bona, fake)
        auc_worst = max(auc_worst, abs(auc(s, y) - pairwise_auc(bona, fake)))
    s, y = [0.9, 0.2, 0.8, 0.1], ["bonafide", "bonafide", "fake", "fake"]
    worked = eer(s, y)[0] == 0.5 and auc(s, y) == 0.75
    verdict(4, eer_bad == 0 and auc_worst < 1e-12 and worked,
            f"EER mismatches {eer_bad}/200, max |AUC - pair count| {auc_worst:.1e}, worked example {worked}")


# ---------------------------------------------------------------- 5

def test_criterion_5_channel_statistics():
    n = 10000
    details, ok = [], True
    for plr in (0.01, 0.05, 0.10, 0.20):
        bound = 3 * np.sqrt(n * plr * (1 - plr))
        inside = sum(abs(int(draw_loss_mask(n, LossModel(plr, seed=s)).sum()) - n * plr) <= bound
                     for s in range(100))
        ok &= inside >= 99
        details.append(f"PLR {plr}: {inside}/100")
    exact = (not draw_loss_mask(n, LossModel(0.0, seed=1)).any()) and draw_loss_mask(n, LossModel(1.0, seed=1)).all()
    verdict(5, ok and exact, ", ".join(details) + f"; PLR 0/1 exact {exact}")


# ---------------------------------------------------------------- 6, 7

PER_CLASS_PER_SOURCE = 100  # 400 utterances per class
PER_DATASET = 25
K = 16
MAX_FRAMES = 20000
SEED = 0


def _eers(model, scored):
    out = []
    for tag in [f"C{n}" for n in range(6)]:
        s = [gmm_score(model, f) for f, _ in scored[tag]]
        out.append(eer(s, [l for _, l in scored[tag]])[0])
    return np.array(out)


@pytest.fixture(scope="module")
def robustness():
    t0 = time.perf_counter()
    rows, audio = [], {}
    for s_i, source in enumerate(DEMO_SOURCES):
        for label in ("bonafide", "fake"):
            for j in range(PER_CLASS_PER_SOURCE):
                uid = f"{source}_{label[:2]}_{j:05d}"
                rows.append(Utterance(uid, label, source, f"/in-memory/{uid}.wav",
                                      "" if label == "bonafide" else DEMO_ALGORITHMS[j % 3]))
                audio[uid] = synth_utterance(label, SEED, s_i * 1_000_000 + j)
    m = Manifest(rows)
    codecs = {s.index: s for s in default_registry()}
    settings = ChannelSettings()
    cset = build_addc(m, PER_DATASET, SEED)
    scored = {"C0": [(extract(audio[u.id], "lfcc"), u.label) for u in cset.c0]}
    for n, items in cset.conditions.items():
        scored[f"C{n}"] = [(extract(degrade(audio[it.source.id], it, settings, codecs), "lfcc"), it.label)
                           for it in items]
    train = [u for u in m if u.id not in cset.consumed]
    clean = train_gmm([extract(audio[u.id], "lfcc") for u in train], [u.label for u in train],
                      K=K, seed=SEED, max_frames=MAX_FRAMES)
    clean_eer = _eers(clean, scored)
    t_clean = time.perf_counter() - t0

    t1 = time.perf_counter()
    plan = build_augmented(m, SEED, exclude=cset.consumed)
    feats = [extract(degrade(audio[it.source.id], it, settings, codecs), "lfcc") for it in plan.items]
    aug = train_gmm(feats, [it.label for it in plan.items], K=K, seed=SEED, max_frames=MAX_FRAMES)
    aug_eer = _eers(aug, scored)
    t_aug = time.perf_counter() - t1
    return {"clean": clean_eer, "aug": aug_eer, "t_clean": t_clean, "t_aug": t_aug,
            "n_train": len(train), "n_aug": len(plan.items), "sizes": cset.sizes()}


@pytest.mark.slow
def test_criterion_6_directional_robustness(robustness):
    e = robustness["clean"]
    ok = (e[1] >= e[0] and e[3:6].mean() >= e[1:3].mean() and e[5] - e[0] >= 0.02
          and robustness["t_clean"] < 300)
    verdict(6, ok, f"clean-trained EER C0..C5 {np.round(e, 4).tolist()}; C5-C0 {e[5] - e[0]:.4f}; "
                   f"mean C3-5 {e[3:6].mean():.4f} vs C1-2 {e[1:3].mean():.4f}; "
                   f"{robustness['n_train']} training utterances; {robustness['t_clean']:.0f}s")


@pytest.mark.slow
def test_criterion_7_augmentation_mitigates(robustness):
    c, a = robustness["clean"], robustness["aug"]
    spread_c, spread_a = np.ptp(c), np.ptp(a)
    ok = (spread_a <= 0.5 * spread_c and a[1:].mean() < c[1:].mean()
          and robustness["t_clean"] + robustness["t_aug"] < 600)
    verdict(7, ok, f"augmented-trained EER {np.round(a, 4).tolist()}; spread {spread_a:.4f} vs clean "
                   f"{spread_c:.4f}; mean C1-5 {a[1:].mean():.4f} vs {c[1:].mean():.4f}; "
                   f"{robustness['n_aug']} augmented items; {robustness['t_aug']:.0f}s")


# ---------------------------------------------------------------- 8

def test_criterion_8_numerical_soundness():
    rng = np.random.default_rng(8)
    worst = 0.0
    for i in range(100):
        d, h = int(rng.integers(2, 9)), int(rng.integers(2, 7))
        model = init_mlp(d, h, i, mean=rng.standard_normal(d), std=rng.uniform(0.5, 2.0, d))
        X = rng.standard_normal((10, d)) * 2
        y = rng.integers(0, 2, 10)
        _, grads = mlp_loss_grad(model, X, y)
        for name in model.PARAMS:
            worst = max(worst, max_rel_error(grads[name], numeric_grad(model, X, y, name)))
    em_drop = 0.0
    for i in range(20):
        X = rng.standard_normal((300, 4)) * rng.uniform(0.5, 3, 4) + rng.integers(-3, 4, (300, 1))
        tr = gmm_fit(X, int(rng.integers(1, 6)), seed=i).trace
        em_drop = max(em_drop, float(-np.min(np.diff(tr))) if len(tr) > 1 else 0.0)
    ce = abs(cross_entropy([1, 0], [0.5, 0.5]) - np.log(2))
    verdict(8, worst < 1e-4 and em_drop <= 1e-8 and ce <= 1e-12,
            f"max gradient relative error {worst:.2e} over 100 instances; largest EM decrease {em_drop:.1e}; "
            f"|CE - ln2| {ce:.1e}")


# ---------------------------------------------------------------- 9

def _run_pipeline(root: Path):
    assert main(["demo", "--out", str(root), "--per-class", "5", "--seed", "0"]) == 0
    cfg = str(root / "demo.ini")
    assert main(["--config", cfg, "run"]) == 0
    assert main(["--config", cfg, "run", "--train-on", "augmented"]) == 0
    assert main(["--config", cfg, "run", "--model", "mlp"]) == 0


@pytest.mark.slow
def test_criterion_9_determinism(tmp_path, capsys):
    t0 = time.perf_counter()
    a, b = tmp_path / "a", tmp_path / "b"
    _run_pipeline(a)
    _run_pipeline(b)
    capsys.readouterr()
    fa = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file())
    fb = sorted(p.relative_to(b) for p in b.rglob("*") if p.is_file())
    differing = [str(p) for p in fa if (a / p).read_bytes() != (b / p).read_bytes()] if fa == fb else ["<file sets>"]
    kinds = {
        "audio": sum(p.suffix == ".wav" and "work" in p.parts for p in fa),
        "features": sum(p.suffix == ".feat" for p in fa),
        "models": sum(p.suffix == ".bin" for p in fa),
        "reports": sum(p.parent.name == "reports" for p in fa),
    }
    ok = not differing and all(kinds.values())
    verdict(9, ok, f"{len(fa)} files compared ({kinds}); differing {differing[:5]}; "
                   f"{time.perf_counter() - t0:.0f}s")
