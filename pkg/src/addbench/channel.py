"""Packet transmission with loss and concealment.

``transmit`` is the full degradation chain for one utterance: codec
round-trip first, then the decoded audio is cut into fixed-duration packets,
some are dropped, and the gaps are concealed.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass

import numpy as np

from .codec import CodecSpec, ExternalCodecTemplate, apply_codec
from .corpus import AudioBuffer
from .errors import BadFrame, BadParams, NoMask

BENCHMARK_PLRS = (0.0, 0.01, 0.05, 0.10, 0.20)
# condition index n -> packet loss rate
PLR_TABLE = {n: p for n, p in zip(range(1, 6), BENCHMARK_PLRS)}
PACKET_MS = 20.0
LOSS_MODELS = ("bernoulli", "gilbert_elliott")
CONCEALMENTS = ("zero_fill", "repeat_previous", "linear_interp")
DEFAULT_GE_RECOVERY = 0.5


@dataclass
class PacketStream:
    packets: np.ndarray  # (n_packets, packet_samples) int16
    packet_samples: int
    tail_pad: int
    sample_rate: int = 16000
    loss_mask: np.ndarray | None = None

    def __post_init__(self):
        if not 0 <= self.tail_pad < max(self.packet_samples, 1):
            raise BadFrame(f"tail_pad {self.tail_pad} outside [0, {self.packet_samples})")
        if self.loss_mask is not None:
            self.loss_mask = np.asarray(self.loss_mask, dtype=bool)
            if self.loss_mask.shape != (len(self.packets),):
                raise BadParams("loss mask length differs from packet count")

    def __len__(self):
        return len(self.packets)

    @property
    def n_samples(self) -> int:
        return len(self.packets) * self.packet_samples - self.tail_pad


@dataclass(frozen=True)
class LossModel:
    plr: float
    kind: str = "bernoulli"
    seed: int = 0
    # (p_good_to_bad, p_bad_to_good)
    ge_params: tuple | None = None

    def __post_init__(self):
        if self.kind not in LOSS_MODELS:
            raise BadParams(f"unknown loss model {self.kind!r}")
        if not 0.0 <= self.plr <= 1.0:
            raise BadParams(f"plr must lie in [0, 1], got {self.plr}")
        if self.ge_params is not None and not all(0.0 <= q <= 1.0 for q in self.ge_params):
            raise BadParams(f"Gilbert-Elliott probabilities must lie in [0, 1]: {self.ge_params}")

    @property
    def is_benchmark_condition(self) -> bool:
        return self.kind == "bernoulli" and self.plr in BENCHMARK_PLRS


@dataclass(frozen=True)
class ChannelCondition:
    codec: CodecSpec
    loss: LossModel
    condition_index: int | None = None
    concealment: str = "zero_fill"
    packet_ms: float = PACKET_MS

    def __post_init__(self):
        if self.concealment not in CONCEALMENTS:
            raise BadParams(f"unknown concealment {self.concealment!r}")
        if self.condition_index is not None and PLR_TABLE.get(self.condition_index) != self.loss.plr:
            raise BadParams(
                f"condition C{self.condition_index} requires PLR {PLR_TABLE.get(self.condition_index)}, "
                f"got {self.loss.plr}"
            )


def derive_subseed(master_seed: int, utterance_id: str, codec_index: int, plr: float) -> int:
    """Stable 64-bit seed for one (utterance, codec, PLR) rendering."""
    h = hashlib.blake2b(digest_size=8)
    h.update(struct.pack("<Q", int(master_seed) & 0xFFFFFFFFFFFFFFFF))
    h.update(utterance_id.encode("utf-8"))
    h.update(struct.pack("<i", int(codec_index)))
    h.update(repr(float(plr)).encode("ascii"))
    return int.from_bytes(h.digest(), "little")


def packetize(a: AudioBuffer, frame_ms: float = PACKET_MS) -> PacketStream:
    if not frame_ms > 0:
        raise BadFrame(f"frame_ms must be positive, got {frame_ms}")
    size = int(round(a.sample_rate * frame_ms / 1000.0))
    if size <= 0:
        raise BadFrame(f"{frame_ms} ms is shorter than one sample")
    n = len(a)
    n_packets = -(-n // size)
    buf = np.zeros(n_packets * size, dtype=np.int16)
    buf[:n] = a.samples
    return PacketStream(buf.reshape(n_packets, size), size, n_packets * size - n, a.sample_rate)


def depacketize(s: PacketStream) -> AudioBuffer:
    flat = s.packets.reshape(-1)
    return AudioBuffer(flat[: s.n_samples].copy(), s.sample_rate)


def _uniforms(seed: int, n: int, stream: int = 0) -> np.ndarray:
    # Philox is counter-based: value i depends only on (key, i)
    bitgen = np.random.Philox(key=np.array([int(seed) & 0xFFFFFFFFFFFFFFFF, stream], dtype=np.uint64))
    return np.random.Generator(bitgen).random(n)


def _gilbert_elliott(n: int, model: LossModel) -> np.ndarray:
    plr = model.plr
    if plr == 0.0:
        return np.zeros(n, dtype=bool)
    if plr == 1.0:
        return np.ones(n, dtype=bool)
    if model.ge_params is None:
        r = DEFAULT_GE_RECOVERY
        p = plr * r / (1.0 - plr)
    else:
        p, r = model.ge_params
    if p + r == 0:
        raise BadParams("Gilbert-Elliott chain with p = r = 0 has no stationary state")
    pi_bad = p / (p + r)
    if pi_bad < plr:
        raise BadParams(f"stationary bad-state probability {pi_bad:.4f} cannot reach plr {plr}")
    loss_in_bad = plr / pi_bad
    u_state = _uniforms(model.seed, n + 1, stream=1)
    u_loss = _uniforms(model.seed, n, stream=2)
    mask = np.zeros(n, dtype=bool)
    bad = u_state[0] < pi_bad
    for i in range(n):
        mask[i] = bad and u_loss[i] < loss_in_bad
        bad = (u_state[i + 1] >= r) if bad else (u_state[i + 1] < p)
    return mask


def draw_loss_mask(n_packets: int, model: LossModel) -> np.ndarray:
    """Boolean mask, True where the packet is lost."""
    if n_packets < 0:
        raise BadParams("n_packets must be non-negative")
    if not 0.0 <= model.plr <= 1.0:
        raise BadParams(f"plr must lie in [0, 1], got {model.plr}")
    if model.kind == "gilbert_elliott":
        return _gilbert_elliott(n_packets, model)
    return _uniforms(model.seed, n_packets) < model.plr


def apply_loss(s: PacketStream, mask) -> PacketStream:
    return PacketStream(s.packets, s.packet_samples, s.tail_pad, s.sample_rate, np.asarray(mask, dtype=bool))


def conceal(s: PacketStream, strategy: str = "zero_fill") -> AudioBuffer:
    """Reconstruct audio, filling lost packets according to ``strategy``."""
    if s.loss_mask is None:
        raise NoMask("packet stream has no loss mask")
    if strategy not in CONCEALMENTS:
        raise BadParams(f"unknown concealment {strategy!r}")
    mask = s.loss_mask
    out = s.packets.copy()
    if not mask.any():
        return depacketize(s)
    if strategy == "zero_fill":
        out[mask] = 0
    elif strategy == "repeat_previous":
        last = np.zeros(s.packet_samples, dtype=np.int16)
        for i, lost in enumerate(mask):
            if lost:
                out[i] = last
            else:
                last = s.packets[i]
    else:
        flat = out.reshape(-1).astype(np.float64)
        size = s.packet_samples
        n = len(mask)
        i = 0
        while i < n:
            if not mask[i]:
                i += 1
                continue
            j = i
            while j < n and mask[j]:
                j += 1
            lo, hi = i * size, j * size
            if i == 0 or j == n:
                flat[lo:hi] = 0.0
            else:
                a, b = flat[lo - 1], flat[hi]
                k = np.arange(1, hi - lo + 1)
                flat[lo:hi] = a + (b - a) * k / (hi - lo + 1)
            i = j
        out = np.clip(np.rint(flat), -32768, 32767).astype(np.int16).reshape(out.shape)
    return depacketize(PacketStream(out, s.packet_samples, s.tail_pad, s.sample_rate))


def transmit_with_mask(a: AudioBuffer, cond: ChannelCondition,
                       tmpl: ExternalCodecTemplate | None = None, scratch_key: str = "utt"):
    """Codec round-trip, packet loss, concealment. Returns (audio, loss_mask)."""
    coded = apply_codec(a, cond.codec, tmpl, scratch_key)
    stream = packetize(coded, cond.packet_ms)
    mask = draw_loss_mask(len(stream), cond.loss)
    return conceal(apply_loss(stream, mask), cond.concealment), mask


def transmit(a: AudioBuffer, cond: ChannelCondition, tmpl: ExternalCodecTemplate | None = None,
             scratch_key: str = "utt") -> AudioBuffer:
    return transmit_with_mask(a, cond, tmpl, scratch_key)[0]


def mask_bits(mask) -> str:
    """Audit form of a loss mask: one character per packet, '1' = lost."""
    return "".join("1" if m else "0" for m in mask)
