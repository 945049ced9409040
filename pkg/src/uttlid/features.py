"""Log mel-filterbank front end: framing, filterbank, energy VAD, sliding mean normalization.

Also reads/writes 16-bit mono WAV and the ``ULFB`` feature archive.
"""
from __future__ import annotations

import io
import struct
import wave
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Optional

import numpy as np

from .errors import EmptyUtteranceError, FormatError

N_MELS = 64
LOG_FLOOR = 1e-10


@dataclass
class FeatureConfig:
    sample_rate: int = 8000
    frame_ms: float = 25.0
    hop_ms: float = 10.0
    n_mels: int = N_MELS
    fmin: float = 20.0
    fmax: Optional[float] = None
    cmn_window_s: float = 3.0
    vad_relative_db: float = 30.0
    vad_floor_db: float = -80.0

    @property
    def frame_len(self) -> int:
        return int(round(self.sample_rate * self.frame_ms / 1000.0))

    @property
    def hop_len(self) -> int:
        return int(round(self.sample_rate * self.hop_ms / 1000.0))

    @property
    def fft_size(self) -> int:
        return 1 << (self.frame_len - 1).bit_length()

    @property
    def cmn_window_frames(self) -> int:
        return int(round(self.cmn_window_s * 1000.0 / self.hop_ms))


@dataclass
class AudioSignal:
    samples: np.ndarray
    sample_rate: int = 8000

    def __post_init__(self):
        if self.sample_rate <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")
        self.samples = np.asarray(self.samples, dtype=np.float64)

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass
class FeatureSequence:
    """``features`` is ``(D, L)`` float32; ``frame_times`` holds frame start times in seconds."""

    features: np.ndarray
    utterance_id: str = ""
    label: Optional[int] = None
    frame_times: np.ndarray = field(default=None)

    def __post_init__(self):
        self.features = np.asarray(self.features)
        if self.frame_times is None:
            self.frame_times = np.arange(self.num_frames) * 0.01

    @property
    def dim(self) -> int:
        return self.features.shape[0]

    @property
    def num_frames(self) -> int:
        return self.features.shape[1]

    def replace(self, features: np.ndarray, frame_times: Optional[np.ndarray] = None) -> "FeatureSequence":
        return FeatureSequence(features, self.utterance_id, self.label,
                               self.frame_times if frame_times is None else frame_times)


# ---------------------------------------------------------------- framing


def _frames_view(samples: np.ndarray, frame_len: int, hop: int) -> np.ndarray:
    n = len(samples)
    if n < frame_len:
        raise EmptyUtteranceError(f"signal of {n} samples is shorter than one {frame_len}-sample frame")
    count = 1 + (n - frame_len) // hop
    idx = np.arange(frame_len)[None, :] + hop * np.arange(count)[:, None]
    return samples[idx]


def frame_signal(signal: AudioSignal, frame_ms: float = 25.0, hop_ms: float = 10.0) -> np.ndarray:
    """Hamming-windowed frames, shape ``(num_frames, frame_len)``."""
    frame_len = int(round(signal.sample_rate * frame_ms / 1000.0))
    hop = int(round(signal.sample_rate * hop_ms / 1000.0))
    frames = _frames_view(signal.samples, frame_len, hop)
    return frames * np.hamming(frame_len)


def frame_log_energy(signal: AudioSignal, frame_ms: float = 25.0, hop_ms: float = 10.0) -> np.ndarray:
    """Per-frame mean power of the unwindowed samples, in dB relative to full scale."""
    frame_len = int(round(signal.sample_rate * frame_ms / 1000.0))
    hop = int(round(signal.sample_rate * hop_ms / 1000.0))
    frames = _frames_view(signal.samples, frame_len, hop)
    return 10.0 * np.log10(np.mean(frames * frames, axis=1) + 1e-20)


# ---------------------------------------------------------------- filterbank


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_centers(n_mels: int, fmin: float, fmax: float) -> np.ndarray:
    """``n_mels + 2`` edge/center frequencies in Hz, equally spaced on the mel scale."""
    return mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))


def mel_filterbank(n_mels: int, fft_size: int, sample_rate: int, fmin: float = 20.0,
                   fmax: Optional[float] = None) -> np.ndarray:
    """Unit-peak triangular filters, shape ``(n_mels, fft_size // 2 + 1)``."""
    fmax = sample_rate / 2.0 if fmax is None else fmax
    points = mel_centers(n_mels, fmin, fmax)
    bins = np.arange(fft_size // 2 + 1) * sample_rate / fft_size
    lo, mid, hi = points[:-2, None], points[1:-1, None], points[2:, None]
    rising = (bins[None, :] - lo) / (mid - lo)
    falling = (hi - bins[None, :]) / (hi - mid)
    return np.maximum(0.0, np.minimum(rising, falling))


def log_mel_filterbank(frames: np.ndarray, sample_rate: int = 8000, n_mels: int = N_MELS,
                       fft_size: Optional[int] = None, fmin: float = 20.0,
                       fmax: Optional[float] = None) -> np.ndarray:
    """Natural-log filterbank energies of the power spectrum, shape ``(n_mels, num_frames)``."""
    frames = np.atleast_2d(frames)
    frame_len = frames.shape[1]
    if fft_size is None:
        fft_size = 1 << (frame_len - 1).bit_length()
    if fft_size < frame_len:
        raise ValueError(f"fft_size {fft_size} is smaller than the frame length {frame_len}")
    power = np.abs(np.fft.rfft(frames, n=fft_size, axis=1)) ** 2
    energies = power @ mel_filterbank(n_mels, fft_size, sample_rate, fmin, fmax).T
    return np.log(np.maximum(energies, LOG_FLOOR)).T


# ---------------------------------------------------------------- VAD and CMN


def energy_vad(seq: FeatureSequence, log_energy: np.ndarray, relative_db: float = 30.0,
               floor_db: float = -80.0) -> FeatureSequence:
    """Keep frames within ``relative_db`` of the loudest frame and above ``floor_db``."""
    log_energy = np.asarray(log_energy, dtype=np.float64)
    if len(log_energy) != seq.num_frames:
        raise ValueError(f"{len(log_energy)} energies for {seq.num_frames} frames")
    keep = (log_energy > log_energy.max() - relative_db) & (log_energy > floor_db)
    if not keep.any():
        raise EmptyUtteranceError(f"VAD removed every frame of utterance {seq.utterance_id!r}")
    return seq.replace(seq.features[:, keep], seq.frame_times[keep])


def cmn_window_bounds(num_frames: int, window: int) -> tuple[np.ndarray, np.ndarray]:
    """Centered window ``[start, end)`` per frame, shifted to stay inside the utterance.

    Windows shrink to the utterance length when it is shorter than ``window``.
    """
    width = min(window, num_frames)
    t = np.arange(num_frames)
    start = np.clip(t - window // 2, 0, num_frames - width)
    return start, start + width


def sliding_cmn(seq: FeatureSequence, window_frames: int = 300) -> FeatureSequence:
    feats = np.asarray(seq.features, dtype=np.float64)
    start, end = cmn_window_bounds(seq.num_frames, window_frames)
    csum = np.concatenate([np.zeros((feats.shape[0], 1)), np.cumsum(feats, axis=1)], axis=1)
    means = (csum[:, end] - csum[:, start]) / (end - start)
    return seq.replace(feats - means)


def extract(signal: AudioSignal, config: Optional[FeatureConfig] = None, utterance_id: str = "",
            label: Optional[int] = None) -> FeatureSequence:
    """Frame, filterbank, VAD, then sliding CMN over the surviving speech frames."""
    cfg = config or FeatureConfig()
    if signal.sample_rate != cfg.sample_rate:
        raise FormatError(f"sample rate {signal.sample_rate} Hz does not match the configured "
                          f"{cfg.sample_rate} Hz; resample first")
    frames = frame_signal(signal, cfg.frame_ms, cfg.hop_ms)
    energy = frame_log_energy(signal, cfg.frame_ms, cfg.hop_ms)
    fbank = log_mel_filterbank(frames, cfg.sample_rate, cfg.n_mels, cfg.fft_size, cfg.fmin, cfg.fmax)
    seq = FeatureSequence(fbank, utterance_id, label, np.arange(fbank.shape[1]) * cfg.hop_ms / 1000.0)
    seq = energy_vad(seq, energy, cfg.vad_relative_db, cfg.vad_floor_db)
    seq = sliding_cmn(seq, cfg.cmn_window_frames)
    # archive precision, so a written-then-read archive matches bit for bit
    return seq.replace(seq.features.astype(np.float32))


# ---------------------------------------------------------------- WAV I/O


def read_wav(path) -> AudioSignal:
    with wave.open(str(path), "rb") as wf:
        if wf.getnchannels() != 1 or wf.getsampwidth() != 2:
            raise FormatError(f"{path}: expected 16-bit mono PCM, got {wf.getnchannels()} channel(s) "
                              f"of {8 * wf.getsampwidth()}-bit samples")
        rate = wf.getframerate()
        raw = wf.readframes(wf.getnframes())
    pcm = np.frombuffer(raw, dtype="<i2")
    return AudioSignal(pcm.astype(np.float64) / 32768.0, rate)


def write_wav(path, signal: AudioSignal) -> None:
    pcm = np.clip(np.round(signal.samples * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(signal.sample_rate)
        wf.writeframes(pcm.tobytes())


# ---------------------------------------------------------------- ULFB archive
#
# magic "ULFB", version byte, 32-byte ASCII config hash, u32 label count and
# (u32 length, utf-8 bytes) per label name, then records until EOF:
# u32 id length, id bytes, i32 label (-1 = none), u32 D, u32 L, D*L float32
# row-major.  All integers little-endian.

ARCHIVE_MAGIC = b"ULFB"
ARCHIVE_VERSION = 1


def write_archive(path, sequences: Iterable[FeatureSequence], labels: Iterable[str] = (),
                  config_hash: str = "") -> int:
    labels = list(labels)
    count = 0
    with open(path, "wb") as f:
        f.write(ARCHIVE_MAGIC + bytes([ARCHIVE_VERSION]))
        f.write(config_hash.encode("ascii").ljust(32, b"0")[:32])
        f.write(struct.pack("<I", len(labels)))
        for name in labels:
            enc = name.encode("utf-8")
            f.write(struct.pack("<I", len(enc)) + enc)
        for seq in sequences:
            uid = seq.utterance_id.encode("utf-8")
            label = -1 if seq.label is None else int(seq.label)
            d, n = seq.features.shape
            f.write(struct.pack("<I", len(uid)) + uid + struct.pack("<iII", label, d, n))
            f.write(np.ascontiguousarray(seq.features, dtype="<f4").tobytes())
            count += 1
    return count


@dataclass
class FeatureArchive:
    labels: list
    config_hash: str
    sequences: list

    def __iter__(self) -> Iterator[FeatureSequence]:
        return iter(self.sequences)

    def __len__(self):
        return len(self.sequences)


def read_archive(path) -> FeatureArchive:
    data = Path(path).read_bytes()
    buf = io.BytesIO(data)

    def take(n):
        chunk = buf.read(n)
        if len(chunk) != n:
            raise FormatError(f"{path}: truncated archive at byte {buf.tell()}")
        return chunk

    if take(4) != ARCHIVE_MAGIC:
        raise FormatError(f"{path}: not a ULFB feature archive")
    version = take(1)[0]
    if version != ARCHIVE_VERSION:
        raise FormatError(f"{path}: unsupported archive version {version}")
    config_hash = take(32).decode("ascii")
    (nlabels,) = struct.unpack("<I", take(4))
    labels = [take(struct.unpack("<I", take(4))[0]).decode("utf-8") for _ in range(nlabels)]
    seqs = []
    while buf.tell() < len(data):
        (idlen,) = struct.unpack("<I", take(4))
        uid = take(idlen).decode("utf-8")
        label, d, n = struct.unpack("<iII", take(12))
        feats = np.frombuffer(take(4 * d * n), dtype="<f4").reshape(d, n).astype(np.float32)
        seqs.append(FeatureSequence(feats, uid, None if label < 0 else label))
    return FeatureArchive(labels, config_hash, seqs)
