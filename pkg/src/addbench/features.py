"""Acoustic front-ends: LFCC (60 x 126), CQCC (60 x 501), raw waveform (1 x 64000).

Both cepstral front-ends keep 20 static coefficients (C0 included) and
append first- and second-order regression deltas.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np
from scipy.fft import dct

from .corpus import SAMPLE_RATE, UTTERANCE_SAMPLES, AudioBuffer
from .errors import BadGrid, BadLength, DimMismatch

KINDS = ("lfcc", "cqcc", "raw")
N_STATIC = 20
LOG_FLOOR = 1e-10

LFCC_WINDOW = 1024
LFCC_HOP = 512
LFCC_FILTERS = 40

CQT_HOP = 128
CQT_FMIN = SAMPLE_RATE / 2 / 2**9  # 15.625 Hz, nine octaves below Nyquist
CQT_BINS_PER_OCTAVE = 12
CQT_OCTAVES = 9
CQT_UNIFORM_POINTS = 128
_CQT_SPARSITY = 1e-4

CACHE_MAGIC = b"ADDF"


@dataclass(eq=False)
class FeatureMatrix:
    kind: str
    data: np.ndarray  # (D, T)

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 2:
            raise DimMismatch(f"feature data must be 2-D, got shape {self.data.shape}")

    @property
    def D(self) -> int:
        return self.data.shape[0]

    @property
    def T(self) -> int:
        return self.data.shape[1]

    @property
    def shape(self):
        return self.data.shape

    def frames(self) -> np.ndarray:
        """(T, D) view: one feature vector per time frame."""
        return self.data.T


@dataclass(frozen=True)
class FrameGrid:
    window_len: int
    hop: int
    length: int = UTTERANCE_SAMPLES

    def __post_init__(self):
        if self.hop <= 0 or self.window_len <= 0:
            raise BadGrid(f"hop and window_len must be positive: {self}")

    @property
    def n_frames(self) -> int:
        return 1 + self.length // self.hop


def _check_length(a: AudioBuffer):
    if len(a) != UTTERANCE_SAMPLES:
        raise BadLength(f"expected {UTTERANCE_SAMPLES} samples, got {len(a)}")


def frame_signal(a: AudioBuffer, grid: FrameGrid) -> np.ndarray:
    """Hamming-windowed frames centered on multiples of ``grid.hop``.

    Edges are reflect-padded by half a window. Returns (n_frames, window_len).
    """
    x = a.as_float()
    if len(x) != grid.length:
        raise BadLength(f"grid expects {grid.length} samples, got {len(x)}")
    half = grid.window_len // 2
    padded = np.pad(x, (half, grid.window_len - half), mode="reflect")
    view = np.lib.stride_tricks.sliding_window_view(padded, grid.window_len)
    frames = view[:: grid.hop][: grid.n_frames]
    # periodic Hamming
    return frames * np.hamming(grid.window_len + 1)[:-1]


def deltas(static: np.ndarray, width: int = 2) -> np.ndarray:
    """Stack [static; delta; delta-delta] along the feature axis.

    Regression over +-``width`` frames with edge replication.
    """
    static = np.asarray(static, dtype=np.float64)

    def _delta(m):
        pad = np.pad(m, ((0, 0), (width, width)), mode="edge")
        T = m.shape[1]
        num = np.zeros_like(m)
        for k in range(1, width + 1):
            num += k * (pad[:, width + k: width + k + T] - pad[:, width - k: width - k + T])
        return num / (2 * sum(k * k for k in range(1, width + 1)))

    d1 = _delta(static)
    return np.vstack([static, d1, _delta(d1)])


# -------------------------------------------------------------------- LFCC

@lru_cache(maxsize=None)
def linear_filterbank(n_filters: int = LFCC_FILTERS, n_fft: int = LFCC_WINDOW,
                      sample_rate: int = SAMPLE_RATE) -> np.ndarray:
    """Triangular filters with linearly spaced edges over 0..Nyquist, (n_filters, n_fft//2+1)."""
    edges = np.linspace(0.0, sample_rate / 2, n_filters + 2)
    freqs = np.arange(n_fft // 2 + 1) * sample_rate / n_fft
    fb = np.zeros((n_filters, freqs.size))
    for m in range(n_filters):
        lo, c, hi = edges[m], edges[m + 1], edges[m + 2]
        rise = (freqs - lo) / (c - lo)
        fall = (hi - freqs) / (hi - c)
        fb[m] = np.maximum(0.0, np.minimum(rise, fall))
    fb.flags.writeable = False
    return fb


def filter_centers(n_filters: int = LFCC_FILTERS, sample_rate: int = SAMPLE_RATE) -> np.ndarray:
    return np.linspace(0.0, sample_rate / 2, n_filters + 2)[1:-1]


def lfcc_filterbank_energies(a: AudioBuffer) -> np.ndarray:
    """(T, n_filters) linear-filterbank power, before the log."""
    frames = frame_signal(a, FrameGrid(LFCC_WINDOW, LFCC_HOP))
    power = np.abs(np.fft.rfft(frames, n=LFCC_WINDOW, axis=1)) ** 2
    return power @ linear_filterbank().T


def lfcc(a: AudioBuffer) -> FeatureMatrix:
    _check_length(a)
    energies = lfcc_filterbank_energies(a)
    ceps = dct(np.log(np.maximum(energies, LOG_FLOOR)), type=2, norm="ortho", axis=1)
    return FeatureMatrix("lfcc", deltas(ceps[:, :N_STATIC].T))


# -------------------------------------------------------------------- CQCC

def cqt_frequencies() -> np.ndarray:
    n = CQT_BINS_PER_OCTAVE * CQT_OCTAVES
    return CQT_FMIN * 2.0 ** (np.arange(n) / CQT_BINS_PER_OCTAVE)


@lru_cache(maxsize=None)
def _cqt_kernels():
    """Sparse conjugate spectra of the CQT analysis kernels.

    Kernel k is a Hann-windowed complex exponential at f_k whose length
    ceil(sr * Q / f_k) keeps the ratio f_k / bandwidth constant.
    """
    freqs = cqt_frequencies()
    q = 1.0 / (2.0 ** (1.0 / CQT_BINS_PER_OCTAVE) - 1.0)
    lengths = np.ceil(SAMPLE_RATE * q / freqs).astype(int)
    pad = -(-(lengths.max() // 2 + 1) // CQT_HOP) * CQT_HOP
    n_fft = -(-(UTTERANCE_SAMPLES + 2 * pad) // (CQT_HOP * 64)) * CQT_HOP * 64
    rows, cols, vals = [], [], []
    for k, (f, L) in enumerate(zip(freqs, lengths)):
        n = np.arange(L) - L // 2
        g = np.zeros(n_fft, dtype=complex)
        g[n % n_fft] = np.hanning(L) * np.exp(2j * np.pi * f * n / SAMPLE_RATE) / L
        G = np.conj(np.fft.fft(g))
        keep = np.flatnonzero(np.abs(G) >= _CQT_SPARSITY * np.abs(G).max())
        rows.append(np.full(keep.size, k))
        cols.append(keep)
        vals.append(G[keep])
    return np.concatenate(rows), np.concatenate(cols), np.concatenate(vals), pad, n_fft


def cqt_power(a: AudioBuffer) -> np.ndarray:
    """Constant-Q power spectrogram, (108, 501) for a 64000-sample input.

    Each bin is a circular correlation evaluated via FFT; since only every
    ``CQT_HOP``-th output is needed, the product spectrum is folded to
    n_fft / hop points before a short inverse FFT.
    """
    _check_length(a)
    rows, cols, vals, pad, n_fft = _cqt_kernels()
    x = np.pad(a.as_float(), pad, mode="reflect")
    S = np.fft.fft(x, n=n_fft)
    m = n_fft // CQT_HOP
    n_bins = CQT_BINS_PER_OCTAVE * CQT_OCTAVES
    flat = rows * m + cols % m
    prod = vals * S[cols]
    folded = (np.bincount(flat, weights=prod.real, minlength=n_bins * m)
              + 1j * np.bincount(flat, weights=prod.imag, minlength=n_bins * m)).reshape(n_bins, m)
    coeffs = np.fft.ifft(folded, axis=1) / CQT_HOP
    n_frames = 1 + UTTERANCE_SAMPLES // CQT_HOP
    start = pad // CQT_HOP
    return np.abs(coeffs[:, start:start + n_frames]) ** 2


@lru_cache(maxsize=None)
def _uniform_grid(n_points: int = CQT_UNIFORM_POINTS):
    """Left-neighbour indices and weights placing a uniform frequency grid on the geometric bins."""
    f = cqt_frequencies()
    grid = np.linspace(f[0], f[-1], n_points)
    j = np.minimum(np.searchsorted(f, grid, side="right") - 1, f.size - 2)
    t = (grid - f[j]) / (f[j + 1] - f[j])
    return j, t


def cqcc(a: AudioBuffer) -> FeatureMatrix:
    # (T, bins) layout: every frame goes through identical elementwise ops,
    # so time-constant input gives bit-identical columns
    logp = np.log(np.maximum(cqt_power(a), LOG_FLOOR)).T.copy()
    j, t = _uniform_grid()
    uniform = logp[:, j] * (1.0 - t) + logp[:, j + 1] * t
    ceps = dct(uniform, type=2, norm="ortho", axis=1)
    return FeatureMatrix("cqcc", deltas(ceps[:, :N_STATIC].T))


# --------------------------------------------------------------------- raw

def raw_view(a: AudioBuffer) -> FeatureMatrix:
    _check_length(a)
    return FeatureMatrix("raw", a.as_float()[None, :])


def extract(a: AudioBuffer, kind: str) -> FeatureMatrix:
    try:
        fn = {"lfcc": lfcc, "cqcc": cqcc, "raw": raw_view}[kind]
    except KeyError:
        raise ValueError(f"unknown feature kind {kind!r}; expected one of {KINDS}") from None
    return fn(a)


def pool_stats(f: FeatureMatrix) -> np.ndarray:
    """Per-row mean followed by per-row population std, length 2*D."""
    return np.concatenate([f.data.mean(axis=1), f.data.std(axis=1)])


# ------------------------------------------------------------------- cache

def save_features(path, f: FeatureMatrix) -> Path:
    """Little-endian float32, row-major, behind a 16-byte header."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = struct.pack("<4sIII", CACHE_MAGIC, KINDS.index(f.kind), f.D, f.T)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(header + np.ascontiguousarray(f.data, dtype="<f4").tobytes())
    tmp.replace(path)
    return path


def read_feature_header(path):
    with open(path, "rb") as fh:
        head = fh.read(16)
    if len(head) != 16:
        raise BadLength(f"{path}: truncated feature header")
    magic, kind, D, T = struct.unpack("<4sIII", head)
    if magic != CACHE_MAGIC or kind >= len(KINDS):
        raise BadLength(f"{path}: not a feature cache file")
    return KINDS[kind], D, T


def load_features(path) -> FeatureMatrix:
    kind, D, T = read_feature_header(path)
    body = Path(path).read_bytes()[16:]
    if len(body) != 4 * D * T:
        raise BadLength(f"{path}: expected {D}x{T} floats, found {len(body) // 4}")
    return FeatureMatrix(kind, np.frombuffer(body, dtype="<f4").reshape(D, T).astype(np.float64))
