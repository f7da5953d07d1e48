"""Codec compression round-trips.

Two backends share one entry point (:func:`apply_codec`):

* ``builtin``: a deterministic parametric surrogate. The signal is low-passed
  at the codec's audio bandwidth, then each codec frame is quantized on a
  mu-law companded grid whose resolution follows the operating bitrate.
* ``external``: real encoder/decoder executables driven through command
  templates, for when licensed reference codecs are installed.

The ``identity`` backend is a pass-through used for clean-channel runs.
"""

from __future__ import annotations

import os
import re
import shlex
import shutil
import subprocess
import tempfile
import threading
import wave
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .corpus import SAMPLE_RATE, AudioBuffer, fix_length, normalize_audio, read_wav, write_wav
from .errors import BadSpec, EmptyAudio, OutputUnreadable, ToolFailed, ToolNotFound

MU = 255.0
FILTER_TAPS = 129
MIN_BITS, MAX_BITS = 2, 15
BACKENDS = ("builtin", "external", "identity")

# name -> (index, sample rates in kHz as listed, bitrate range kbps)
TABLE1 = {
    "AMR-WB": (1, "16", (6.60, 23.85)),
    "EVS": (2, "8,16,32,48", (5.90, 128.0)),
    "IVAS": (3, "8,16,32,48", (13.20, 512.0)),
    "OPUS": (4, "8-48", (6.0, 510.0)),
    "SpeexWB": (5, "8,16,32", (2.0, 44.0)),
    "SILK": (6, "8-24", (6.0, 40.0)),
}

# conversational operating points: (bitrate kbps, audio bandwidth Hz)
DEFAULT_OPERATING_POINTS = {
    "AMR-WB": (12.65, 7000.0),
    "EVS": (13.2, 8000.0),
    "IVAS": (13.2, 8000.0),
    "OPUS": (16.0, 8000.0),
    "SpeexWB": (11.0, 7000.0),
    "SILK": (12.0, 8000.0),
}


@dataclass(frozen=True)
class CodecSpec:
    name: str
    index: int
    bandwidth_hz: float
    bitrate_kbps: float
    frame_ms: float = 20.0
    backend: str = "builtin"

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.backend not in BACKENDS:
            raise BadSpec(f"{self.name}: unknown backend {self.backend!r}")
        if not self.frame_ms > 0:
            raise BadSpec(f"{self.name}: frame_ms must be positive, got {self.frame_ms}")
        if self.bandwidth_hz > SAMPLE_RATE / 2 or self.bandwidth_hz <= 0:
            raise BadSpec(f"{self.name}: bandwidth {self.bandwidth_hz} Hz outside (0, 8000]")
        if self.name in TABLE1:
            lo, hi = TABLE1[self.name][2]
            if not lo <= self.bitrate_kbps <= hi:
                raise BadSpec(f"{self.name}: bitrate {self.bitrate_kbps} kbps outside {lo}-{hi}")
        elif self.backend != "identity" and not self.bitrate_kbps > 0:
            raise BadSpec(f"{self.name}: bitrate must be positive")

    @property
    def bitrate_range(self):
        return TABLE1[self.name][2] if self.name in TABLE1 else None

    @property
    def slug(self) -> str:
        return self.name.lower().replace("-", "")


IDENTITY = CodecSpec("identity", 0, SAMPLE_RATE / 2, 256.0, 20.0, backend="identity")


def default_registry() -> list[CodecSpec]:
    """The six codec presets, ordered by index."""
    specs = []
    for name, (index, _, _) in sorted(TABLE1.items(), key=lambda kv: kv[1][0]):
        rate, bw = DEFAULT_OPERATING_POINTS[name]
        specs.append(CodecSpec(name, index, bw, rate, 20.0))
    return specs


def _key(name: str) -> str:
    return re.sub(r"[^a-z0-9]", "", name.lower())


def lookup_codec(name: str, registry=None) -> CodecSpec:
    """Find a codec by loose name ("amr-wb", "AMRWB", "speex", "identity")."""
    k = _key(name)
    if k in ("identity", "none", "clean"):
        return IDENTITY
    for spec in registry or default_registry():
        sk = _key(spec.name)
        if k == sk or (sk == "speexwb" and k == "speex"):
            return spec
    raise BadSpec(f"unknown codec {name!r}")


def codec_from_mapping(d: dict, base: CodecSpec | None = None) -> CodecSpec:
    """Build a spec from a config section, overriding fields of ``base``."""
    fields = {}
    for key, conv in (("bandwidth_hz", float), ("bitrate_kbps", float), ("frame_ms", float),
                      ("index", int), ("backend", str), ("name", str)):
        if key in d and d[key] not in (None, ""):
            fields[key] = conv(d[key])
    if base is not None:
        return replace(base, **fields)
    return CodecSpec(**fields)


# ----------------------------------------------------------------- builtin

def effective_bits(spec: CodecSpec) -> int:
    """Whole bits per sample granted by the bitrate, clamped to [2, 15]."""
    samples_per_frame = SAMPLE_RATE * spec.frame_ms / 1000.0
    raw = spec.bitrate_kbps * 1000.0 * (spec.frame_ms / 1000.0) / samples_per_frame
    return int(min(max(np.floor(raw + 1e-9), MIN_BITS), MAX_BITS))


def lowpass_taps(bandwidth_hz: float, n_taps: int = FILTER_TAPS) -> np.ndarray:
    """Hamming-windowed sinc, unit DC gain, odd length (linear phase)."""
    fc = bandwidth_hz / SAMPLE_RATE
    n = np.arange(n_taps) - (n_taps - 1) / 2
    h = 2 * fc * np.sinc(2 * fc * n) * np.hamming(n_taps)
    return h / h.sum()


def lowpass(x: np.ndarray, bandwidth_hz: float) -> np.ndarray:
    if bandwidth_hz >= SAMPLE_RATE / 2:
        return np.asarray(x, dtype=np.float64).copy()
    # dropping (taps-1)/2 samples of the full convolution removes the filter delay
    h = lowpass_taps(bandwidth_hz)
    d = (h.size - 1) // 2
    x = np.asarray(x, dtype=np.float64)
    return np.convolve(x, h)[d:d + x.size]


def companded_quantize(x: np.ndarray, frame_len: int, bits: int) -> np.ndarray:
    """Frame-adaptive mu-law quantizer.

    Each frame is normalized by its peak, compressed with mu = 255, and the
    compressed magnitude truncated toward zero on a grid fine enough that the
    coarsest expanded step is ``peak * 2**-bits``. Truncation means
    ``|out| <= |x|`` sample by sample.
    """
    n = x.shape[0]
    n_frames = -(-n // frame_len)
    buf = np.zeros(n_frames * frame_len)
    buf[:n] = x
    frames = buf.reshape(n_frames, frame_len)
    peak = np.abs(frames).max(axis=1, keepdims=True)
    safe = np.where(peak > 0, peak, 1.0)
    u = np.abs(frames) / safe
    log_mu = np.log1p(MU)
    y = np.log1p(MU * u) / log_mu
    step = 2.0 ** -bits / (log_mu * (1 + MU) / MU)
    yq = np.floor(y / step) * step
    mag = np.expm1(yq * log_mu) / MU * safe
    out = np.sign(frames) * np.minimum(mag, np.abs(frames))
    return out.reshape(-1)[:n]


def simulate_codec(a: AudioBuffer, spec: CodecSpec) -> AudioBuffer:
    """Deterministic surrogate round-trip; output has the input's length."""
    spec.validate()
    if spec.backend == "identity":
        return AudioBuffer(a.samples.copy(), a.sample_rate)
    if spec.backend != "builtin":
        raise BadSpec(f"{spec.name}: simulate_codec needs the builtin backend")
    x = lowpass(a.samples.astype(np.float64), spec.bandwidth_hz)
    frame_len = max(1, int(round(SAMPLE_RATE * spec.frame_ms / 1000.0)))
    y = companded_quantize(x, frame_len, effective_bits(spec))
    return AudioBuffer(np.clip(np.rint(y), -32768, 32767).astype(np.int16), a.sample_rate)


# ---------------------------------------------------------------- external

@dataclass(frozen=True)
class ExternalCodecTemplate:
    encode_cmd: str
    decode_cmd: str
    work_dir: str | None = None

    def __post_init__(self):
        for cmd in (self.encode_cmd, self.decode_cmd):
            for ph in ("{in}", "{out}"):
                if cmd.count(ph) != 1:
                    raise BadSpec(f"template {cmd!r} must contain {ph} exactly once")


_subprocess_slots = threading.BoundedSemaphore(4)


def set_max_subprocesses(n: int):
    global _subprocess_slots
    _subprocess_slots = threading.BoundedSemaphore(max(1, int(n)))


def _search_path() -> str:
    extra = os.environ.get("ADDBENCH_CODEC_PATH", "")
    base = os.environ.get("PATH", "")
    return os.pathsep.join(p for p in (extra, base) if p)


def _run(template: str, src: Path, dst: Path, spec: CodecSpec):
    cmd = template.format(**{"in": shlex.quote(str(src)), "out": shlex.quote(str(dst)),
                             "bitrate": f"{spec.bitrate_kbps:g}"})
    argv = shlex.split(cmd)
    search = _search_path()
    exe = shutil.which(argv[0], path=search)
    if exe is None:
        raise ToolNotFound(f"codec tool {argv[0]!r} not found (ADDBENCH_CODEC_PATH + PATH)")
    env = dict(os.environ, PATH=search)
    with _subprocess_slots:
        proc = subprocess.run([exe] + argv[1:], capture_output=True, text=True, env=env)
    if proc.returncode != 0:
        raise ToolFailed(cmd, proc.returncode, proc.stdout + proc.stderr)


def external_codec_roundtrip(a: AudioBuffer, spec: CodecSpec, tmpl: ExternalCodecTemplate,
                             scratch_key: str = "utt") -> AudioBuffer:
    """Encode and decode through external tools, then realign to the input."""
    safe_key = re.sub(r"[^A-Za-z0-9_.-]", "_", scratch_key)
    with tempfile.TemporaryDirectory(prefix=f"addbench-{safe_key}-", dir=tmpl.work_dir) as tmp:
        tmp = Path(tmp)
        src, enc, dec = tmp / f"{safe_key}.in.wav", tmp / f"{safe_key}.enc", tmp / f"{safe_key}.out.wav"
        write_wav(src, a)
        _run(tmpl.encode_cmd, src, enc, spec)
        _run(tmpl.decode_cmd, enc, dec, spec)
        if not dec.is_file():
            raise OutputUnreadable(f"decoder produced no file at {dec}")
        try:
            data, rate, bits = read_wav(dec)
            out = normalize_audio(data, rate, bits)
        except (wave.Error, EOFError, EmptyAudio, ValueError) as exc:
            raise OutputUnreadable(f"cannot read decoder output {dec}: {exc}") from exc
    return fix_length(out, len(a))


def apply_codec(a: AudioBuffer, spec: CodecSpec, tmpl: ExternalCodecTemplate | None = None,
                scratch_key: str = "utt") -> AudioBuffer:
    if spec.backend == "external":
        if tmpl is None:
            raise BadSpec(f"{spec.name}: external backend needs encode/decode templates")
        return external_codec_roundtrip(a, spec, tmpl, scratch_key)
    return simulate_codec(a, spec)
