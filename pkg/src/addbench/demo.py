"""Synthetic two-family corpus so the whole pipeline runs without external data.

Both families are a pulse-train source shaped by three formant resonators
and a syllabic amplitude envelope. They differ in three ways, chosen so the
benchmark shows the expected robustness pattern:

* bonafide carries broadband high-frequency noise; coarse codec
  quantization buries it, so a detector leaning on it breaks under codecs;
* bonafide has deeper syllabic modulation; zero-filled packet gaps add
  modulation to everything, which hurts more as the loss rate grows;
* the first formant sits lower for bonafide; this survives both.
"""

from __future__ import annotations

import hashlib
from pathlib import Path

import numpy as np
from scipy.signal import lfilter

from .corpus import SAMPLE_RATE, UTTERANCE_SAMPLES, AudioBuffer, Utterance, write_manifest, write_wav

DEMO_SOURCES = ("FoR", "WaveFake", "MLAAD", "ASV")
DEMO_ALGORITHMS = ("vocA", "vocB", "vocC")
# first-formant range per class; survives codec processing
F1_BONAFIDE = (400.0, 600.0)
F1_FAKE = (600.0, 850.0)
# relative level of bonafide broadband high-frequency noise: erased by coarse quantization
HF_BONAFIDE = 0.02
JITTER_BONAFIDE = 0.04
# syllabic modulation depth: packet gaps add spurious modulation
MOD_BONAFIDE = 0.7
MOD_FAKE = 0.35
# shared white noise floor, relative to the voiced peak
WHITE_FLOOR = 1e-4


def _rng(seed: int, *parts) -> np.random.Generator:
    h = hashlib.blake2b(repr((int(seed),) + parts).encode(), digest_size=8)
    return np.random.default_rng(int.from_bytes(h.digest(), "little"))


def _resonator(x, freq, bw, sr=SAMPLE_RATE):
    r = np.exp(-np.pi * bw / sr)
    a = [1.0, -2.0 * r * np.cos(2 * np.pi * freq / sr), r * r]
    return lfilter([1.0 - r], a, x)


def _harmonic_source(rng, n, f0, drift, jitter, tilt):
    """Pulse train at a drifting, jittered pitch, low-passed by a one-pole filter (``tilt``)."""
    t = np.arange(n) / SAMPLE_RATE
    contour = f0 * (1 + drift * np.sin(2 * np.pi * rng.uniform(0.2, 0.6) * t + rng.uniform(0, 6.3)))
    if jitter > 0:
        walk = np.cumsum(rng.standard_normal(n)) / np.sqrt(SAMPLE_RATE)
        contour = contour * (1 + jitter * walk / (np.abs(walk).max() + 1e-9))
    cycles = np.cumsum(contour) / SAMPLE_RATE
    pulses = np.diff(np.floor(cycles), prepend=0.0)
    return lfilter([1.0 - tilt], [1.0, -tilt], pulses - pulses.mean())


def _syllables(rng, n, depth, rate=4.0):
    t = np.arange(n) / SAMPLE_RATE
    return 1.0 - depth + depth * np.clip(np.sin(2 * np.pi * rate * t + rng.uniform(0, 6.3)), 0, None) ** 0.7


def synth_utterance(label: str, seed: int, index: int, n: int = UTTERANCE_SAMPLES) -> AudioBuffer:
    rng = _rng(seed, label, index)
    fake = label == "fake"
    f0 = rng.uniform(95, 210)
    src = _harmonic_source(rng, n, f0, drift=0.05, jitter=0.0 if fake else JITTER_BONAFIDE,
                           tilt=rng.uniform(0.85, 0.95))
    f1 = rng.uniform(*(F1_FAKE if fake else F1_BONAFIDE))
    voiced = _resonator(src, f1, 90)
    for lo, hi, bw in ((1100, 2000, 120), (2300, 3000, 180)):
        voiced += _resonator(src, rng.uniform(lo, hi), bw)
    voiced *= _syllables(rng, n, MOD_FAKE if fake else MOD_BONAFIDE)
    voiced /= np.abs(voiced).max() + 1e-12
    # second difference of white noise: rises steeply toward Nyquist
    hf = np.diff(rng.standard_normal(n + 2), n=2)
    x = voiced + hf / np.abs(hf).max() * (0.0 if fake else HF_BONAFIDE)
    x += WHITE_FLOOR * rng.standard_normal(n)
    return AudioBuffer(np.clip(np.rint(x / np.abs(x).max() * 16000), -32768, 32767).astype(np.int16),
                       SAMPLE_RATE)


def make_demo_corpus(root, per_class_per_source: int = 5, seed: int = 0,
                     sources=DEMO_SOURCES) -> Path:
    """Write WAVE files plus manifest.csv under ``root``; returns the manifest path.

    The defaults give the 40-utterance demo corpus (4 sources x 2 labels x 5).
    """
    root = Path(root)
    entries = []
    for s_i, source in enumerate(sources):
        for label in ("bonafide", "fake"):
            for j in range(per_class_per_source):
                uid = f"{source}_{label[:2]}_{j:05d}"
                path = root / "wav" / f"{uid}.wav"
                alg = "" if label == "bonafide" else DEMO_ALGORITHMS[j % len(DEMO_ALGORITHMS)]
                if not path.is_file():
                    write_wav(path, synth_utterance(label, seed, s_i * 1_000_000 + j))
                entries.append(Utterance(uid, label, source, path, alg))
    return write_manifest(entries, root / "manifest.csv")
