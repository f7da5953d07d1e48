"""Labeled corpus ingestion: manifests, WAVE I/O, format normalization.

Every utterance entering the pipeline is reduced to 16 kHz mono 16-bit PCM
and then cut or zero-padded to a fixed 4 s (64000 samples).
"""

from __future__ import annotations

import csv
import logging
import os
import wave
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import BadLabel, DuplicateId, EmptyAudio, MissingFile, UnsupportedRate

log = logging.getLogger(__name__)

SAMPLE_RATE = 16000
UTTERANCE_SAMPLES = 64000
LABELS = ("bonafide", "fake")
MANIFEST_COLUMNS = ("id", "label", "source_dataset", "algorithm", "path")
RESAMPLE_HALF_WIDTH = 32
_KAISER_BETA = 8.6


@dataclass(frozen=True)
class Utterance:
    id: str
    label: str
    source_dataset: str
    path: Path
    algorithm: str = ""
    # extra manifest columns (condition, codec, plr, seed, ...) pass through untouched
    extra: tuple = ()

    @property
    def is_fake(self) -> bool:
        return self.label == "fake"

    def get(self, key, default=None):
        return dict(self.extra).get(key, default)


@dataclass(eq=False)
class AudioBuffer:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.int16).reshape(-1)

    def __len__(self):
        return self.samples.shape[0]

    def as_float(self) -> np.ndarray:
        """Samples scaled to [-1, 1)."""
        return self.samples.astype(np.float64) / 32768.0

    def equals(self, other: AudioBuffer) -> bool:
        return self.sample_rate == other.sample_rate and np.array_equal(self.samples, other.samples)


@dataclass
class Manifest:
    entries: list[Utterance]
    counts: dict = field(default_factory=dict)

    def __post_init__(self):
        seen = set()
        for u in self.entries:
            if u.id in seen:
                raise DuplicateId(u.id)
            seen.add(u.id)
        self.counts = self.recount()

    def recount(self) -> dict:
        return dict(Counter((u.label, u.source_dataset) for u in self.entries))

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def by_id(self) -> dict:
        return {u.id: u for u in self.entries}

    def sources(self) -> list[str]:
        return sorted({u.source_dataset for u in self.entries})

    def without(self, ids) -> Manifest:
        ids = set(ids)
        return Manifest([u for u in self.entries if u.id not in ids])


def label_to_y(label) -> int:
    """Binary target: 1 for fake, 0 for bonafide."""
    if label in ("fake", 1, True):
        return 1
    if label in ("bonafide", 0, False):
        return 0
    raise BadLabel(label)


def _check_label(row):
    label = (row.get("label") or "").strip()
    if label not in LABELS:
        raise BadLabel(row)
    return label


def load_manifest(path) -> Manifest:
    """Parse a manifest CSV; relative audio paths resolve against its directory."""
    path = Path(path)
    if not path.is_file():
        raise MissingFile(f"manifest not found: {path}")
    root = path.parent
    entries = []
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = {"id", "label", "source_dataset", "path"} - set(reader.fieldnames or ())
        if missing:
            raise BadLabel({"missing_columns": sorted(missing)})
        extra_cols = [c for c in reader.fieldnames if c not in MANIFEST_COLUMNS]
        for row in reader:
            label = _check_label(row)
            p = Path(row["path"])
            entries.append(
                Utterance(
                    id=row["id"],
                    label=label,
                    source_dataset=row["source_dataset"],
                    algorithm=(row.get("algorithm") or "").strip(),
                    path=p if p.is_absolute() else root / p,
                    extra=tuple((c, row[c]) for c in extra_cols),
                )
            )
    return Manifest(entries)


def write_manifest(entries, path, extra_columns=()) -> Path:
    """Write entries as manifest CSV with paths relative to the file's directory."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    root = path.parent.resolve()
    cols = list(MANIFEST_COLUMNS) + list(extra_columns)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for u in entries:
            extra = dict(u.extra)
            rel = os.path.relpath(Path(u.path).resolve(), root)
            row = [u.id, u.label, u.source_dataset, u.algorithm, Path(rel).as_posix()]
            row += [extra.get(c, "") for c in extra_columns]
            w.writerow(row)
    return path


# ---------------------------------------------------------------- WAVE I/O

def read_wav(path):
    """Read integer PCM WAVE.

    Returns ``(data, sample_rate, bit_depth)`` where ``data`` is an int32
    array shaped (n_samples, n_channels) holding the raw signed PCM values.
    """
    path = Path(path)
    if not path.is_file():
        raise MissingFile(f"audio not found: {path}")
    with wave.open(str(path), "rb") as wf:
        ch = wf.getnchannels()
        width = wf.getsampwidth()
        rate = wf.getframerate()
        raw = wf.readframes(wf.getnframes())
    if width == 1:
        data = np.frombuffer(raw, dtype=np.uint8).astype(np.int32) - 128
    elif width == 2:
        data = np.frombuffer(raw, dtype="<i2").astype(np.int32)
    elif width == 3:
        b = np.frombuffer(raw, dtype=np.uint8).reshape(-1, 3).astype(np.int32)
        data = b[:, 0] | (b[:, 1] << 8) | (b[:, 2] << 16)
        data = np.where(data >= 1 << 23, data - (1 << 24), data)
    elif width == 4:
        data = np.frombuffer(raw, dtype="<i4").astype(np.int32)
    else:
        raise UnsupportedRate(f"{path}: unsupported sample width {width}")
    return data.reshape(-1, ch), rate, 8 * width


def write_wav(path, audio: AudioBuffer) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(audio.sample_rate)
        wf.writeframes(audio.samples.astype("<i2").tobytes())
    return path


# ---------------------------------------------------------- normalization

def _kaiser(u):
    u = np.clip(u, -1.0, 1.0)
    return np.i0(_KAISER_BETA * np.sqrt(1.0 - u * u)) / np.i0(_KAISER_BETA)


def resample(x, rate_in: int, rate_out: int, half_width: int = RESAMPLE_HALF_WIDTH) -> np.ndarray:
    """Band-limited interpolation with a Kaiser-windowed sinc.

    Each output sample is a weighted sum over ``2 * half_width`` neighbouring
    input samples; when downsampling the sinc cutoff drops to the output
    Nyquist frequency.
    """
    x = np.asarray(x, dtype=np.float64)
    n_in = x.shape[0]
    n_out = (2 * n_in * rate_out + rate_in) // (2 * rate_in)
    if rate_in == rate_out:
        return x.copy()
    cutoff = min(1.0, rate_out / rate_in)
    offsets = np.arange(-half_width + 1, half_width + 1)
    out = np.empty(n_out)
    block = 16384
    for start in range(0, n_out, block):
        m = np.arange(start, min(start + block, n_out), dtype=np.int64)
        num = m * rate_in
        base = num // rate_out
        frac = (num % rate_out) / rate_out
        idx = base[:, None] + offsets[None, :]
        d = frac[:, None] - offsets[None, :]
        h = cutoff * np.sinc(cutoff * d) * _kaiser(d / half_width)
        valid = (idx >= 0) & (idx < n_in)
        out[m] = np.sum(np.where(valid, x[np.clip(idx, 0, n_in - 1)], 0.0) * h, axis=1)
    return out


def normalize_audio(raw, sample_rate: int, bit_depth: int = 16) -> AudioBuffer:
    """Reduce decoded PCM to 16 kHz mono 16-bit.

    ``raw`` is shaped (n,) or (n, channels) and holds signed integer PCM at
    ``bit_depth`` bits. Channels are averaged, the result resampled when the
    rate differs, then rounded and clamped to the int16 range.
    """
    if sample_rate is None or sample_rate <= 0:
        raise UnsupportedRate(f"sample rate must be positive, got {sample_rate}")
    data = np.asarray(raw)
    if data.size == 0:
        raise EmptyAudio("audio has no samples")
    if data.ndim == 1:
        data = data[:, None]
    x = data.astype(np.float64).mean(axis=1)
    if bit_depth != 16:
        x = x * 2.0 ** (16 - bit_depth)
    if sample_rate != SAMPLE_RATE:
        x = resample(x, sample_rate, SAMPLE_RATE)
    x = np.clip(np.rint(x), -32768, 32767)
    return AudioBuffer(x.astype(np.int16), SAMPLE_RATE)


def fix_length(a: AudioBuffer, length: int = UTTERANCE_SAMPLES) -> AudioBuffer:
    """Keep the first ``length`` samples, right-padding with zeros if short."""
    out = np.zeros(length, dtype=np.int16)
    n = min(len(a), length)
    out[:n] = a.samples[:n]
    return AudioBuffer(out, a.sample_rate)


def load_audio(path, length: int | None = UTTERANCE_SAMPLES) -> AudioBuffer:
    """Read, normalize, and length-fix one file.

    Empty files become silence (with a warning) so that long corpus runs do
    not abort on the occasional broken recording.
    """
    data, rate, bits = read_wav(path)
    try:
        a = normalize_audio(data, rate, bits)
    except EmptyAudio:
        log.warning("empty audio file %s; substituting silence", path)
        a = AudioBuffer(np.zeros(0, dtype=np.int16))
    return fix_length(a, length) if length is not None else a
