"""Feature frontend: WAV I/O, STFT magnitudes, log-mel filterbanks, frame stacking.

All three feature variants consumed by the mask network are produced here,
either in one shot (:func:`extract`) or incrementally from sample chunks
(:class:`StreamingFrontend`).  Both paths share the same framing code, so a
streamed extraction reproduces the batch result.
"""

from __future__ import annotations

import enum
import math
import struct
import wave
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import BinaryIO, Iterator

import numpy as np

from .errors import FormatError, NumericError, TooShortError

DEFAULT_SAMPLE_RATE = 16000


class Variant(enum.IntEnum):
    FFT_MAGNITUDE = 0
    FILTERBANK = 1
    STACKED_FILTERBANK = 2

    @classmethod
    def parse(cls, name: "str | int | Variant") -> "Variant":
        if isinstance(name, (int, Variant)):
            return cls(int(name))
        key = name.strip().lower().replace("-", "_")
        aliases = {
            "fft": cls.FFT_MAGNITUDE,
            "fft_magnitude": cls.FFT_MAGNITUDE,
            "fftmagnitude": cls.FFT_MAGNITUDE,
            "filterbank": cls.FILTERBANK,
            "fbank": cls.FILTERBANK,
            "stacked": cls.STACKED_FILTERBANK,
            "stacked_filterbank": cls.STACKED_FILTERBANK,
            "stackedfilterbank": cls.STACKED_FILTERBANK,
        }
        try:
            return aliases[key]
        except KeyError:
            raise ValueError(f"unknown feature variant {name!r}") from None


@dataclass(frozen=True)
class FeatureConfig:
    variant: Variant = Variant.STACKED_FILTERBANK
    n_fft: int = 1024
    window_ms: float = 25.0
    hop_ms: float = 10.0
    n_mels: int = 128
    stack: int = 4
    stride: int = 4
    mel_fmin_hz: float = 125.0
    mel_fmax_hz: float = 7500.0
    sample_rate_hz: int = DEFAULT_SAMPLE_RATE

    def __post_init__(self):
        object.__setattr__(self, "variant", Variant.parse(self.variant))
        if self.n_fft < 2 or self.n_fft & (self.n_fft - 1):
            raise ValueError(f"n_fft must be a power of two, got {self.n_fft}")
        if self.stack < 1 or self.stride < 1:
            raise ValueError("stack and stride must be >= 1")
        if not 1 <= self.n_mels < self.n_bins:
            raise ValueError(f"n_mels must be in [1, {self.n_bins})")
        if self.win_length > self.n_fft:
            raise ValueError("window longer than n_fft")
        if self.hop_length < 1:
            raise ValueError("hop must be at least one sample")
        if not 0 <= self.mel_fmin_hz < self.mel_fmax_hz <= self.sample_rate_hz / 2:
            raise ValueError("mel range must satisfy 0 <= fmin < fmax <= nyquist")

    @property
    def n_bins(self) -> int:
        return self.n_fft // 2 + 1

    @property
    def win_length(self) -> int:
        return int(round(self.sample_rate_hz * self.window_ms / 1000.0))

    @property
    def hop_length(self) -> int:
        return int(round(self.sample_rate_hz * self.hop_ms / 1000.0))

    @property
    def width(self) -> int:
        """Feature width F of the configured variant."""
        if self.variant == Variant.FFT_MAGNITUDE:
            return self.n_bins
        if self.variant == Variant.FILTERBANK:
            return self.n_mels
        return self.n_mels * self.stack

    @property
    def frame_hop_s(self) -> float:
        hop = self.hop_length / self.sample_rate_hz
        if self.variant == Variant.STACKED_FILTERBANK:
            return hop * self.stride
        return hop

    def with_variant(self, variant) -> "FeatureConfig":
        return replace(self, variant=Variant.parse(variant))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["variant"] = self.variant.name.lower()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureConfig":
        return cls(**d)


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate_hz: int = DEFAULT_SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise ValueError("waveform must be mono (1-D)")
        if self.sample_rate_hz <= 0:
            raise ValueError("sample rate must be positive")
        if not np.all(np.isfinite(self.samples)):
            raise NumericError("waveform contains non-finite samples")

    def __len__(self) -> int:
        return self.samples.shape[0]

    @property
    def duration_s(self) -> float:
        return len(self) / self.sample_rate_hz

    def rms(self) -> float:
        return float(np.sqrt(np.mean(self.samples**2))) if len(self) else 0.0


@dataclass
class FeatureSequence:
    frames: np.ndarray
    variant: Variant
    frame_hop_s: float = field(default=0.01)

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 2:
            raise ValueError("feature frames must be a T x F matrix")
        self.variant = Variant.parse(self.variant)

    @property
    def shape(self) -> tuple[int, int]:
        return self.frames.shape

    def __len__(self) -> int:
        return self.frames.shape[0]


# ---------------------------------------------------------------------------
# primitives


def periodic_hann(length: int) -> np.ndarray:
    n = np.arange(length)
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * n / length)


def num_frames(n_samples: int, cfg: FeatureConfig) -> int:
    """Number of STFT frames for ``n_samples`` (0 if shorter than a window)."""
    if n_samples < cfg.win_length:
        return 0
    return 1 + (n_samples - cfg.win_length) // cfg.hop_length


def num_stacked(n_frames: int, cfg: FeatureConfig) -> int:
    """Number of stacked frames built from ``n_frames`` filterbank frames."""
    if n_frames == 0:
        return 0
    covering = 1 + math.ceil(max(n_frames - cfg.stack, 0) / cfg.stride)
    return min(covering, math.ceil(n_frames / cfg.stride))


def _hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f) / 700.0)


def _mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m) / 2595.0) - 1.0)


def mel_weights(cfg: FeatureConfig) -> np.ndarray:
    """Triangular mel filters (HTK scale, unit peak), shape (n_mels, n_bins).

    A filter narrower than the FFT bin spacing would otherwise be empty; it
    falls back to a single unit weight on the bin nearest its centre.
    """
    bin_hz = np.arange(cfg.n_bins) * cfg.sample_rate_hz / cfg.n_fft
    edges = _mel_to_hz(
        np.linspace(_hz_to_mel(cfg.mel_fmin_hz), _hz_to_mel(cfg.mel_fmax_hz), cfg.n_mels + 2)
    )
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (bin_hz[None, :] - lo) / (mid - lo)
    falling = (hi - bin_hz[None, :]) / (hi - mid)
    w = np.clip(np.minimum(rising, falling), 0.0, None)
    for m in np.flatnonzero(w.sum(axis=1) == 0):
        w[m, int(np.argmin(np.abs(bin_hz - mid[m, 0])))] = 1.0
    return w


def _frame_magnitudes(samples: np.ndarray, cfg: FeatureConfig) -> np.ndarray:
    n = num_frames(samples.shape[0], cfg)
    if n == 0:
        return np.zeros((0, cfg.n_bins))
    win = np.zeros(cfg.n_fft)
    win[: cfg.win_length] = periodic_hann(cfg.win_length)
    idx = np.arange(n)[:, None] * cfg.hop_length + np.arange(cfg.win_length)[None, :]
    frames = np.zeros((n, cfg.n_fft))
    frames[:, : cfg.win_length] = samples[idx]
    return np.abs(np.fft.rfft(frames * win, n=cfg.n_fft, axis=1))


def _log_mel(mags: np.ndarray, weights: np.ndarray) -> np.ndarray:
    return np.log1p((mags**2) @ weights.T)


def _stack(fb: np.ndarray, starts, cfg: FeatureConfig) -> np.ndarray:
    t = fb.shape[0]
    idx = np.asarray(starts)[:, None] + np.arange(cfg.stack)[None, :]
    idx = np.minimum(idx, t - 1)  # pad by repeating the last frame
    return fb[idx].reshape(len(starts), cfg.stack * fb.shape[1])


# ---------------------------------------------------------------------------
# operations


def stft_magnitude(w: Waveform, cfg: FeatureConfig) -> FeatureSequence:
    """Hann-windowed STFT magnitudes, one row of ``n_fft/2+1`` bins per frame."""
    if w.sample_rate_hz != cfg.sample_rate_hz:
        raise ValueError(
            f"waveform rate {w.sample_rate_hz} Hz does not match config {cfg.sample_rate_hz} Hz"
        )
    if len(w) < cfg.win_length:
        raise TooShortError(
            f"waveform too short: {len(w)} samples, need at least {cfg.win_length}"
        )
    mags = _frame_magnitudes(w.samples, cfg)
    return FeatureSequence(mags, Variant.FFT_MAGNITUDE, cfg.hop_length / cfg.sample_rate_hz)


def mel_filterbank(
    s: FeatureSequence, cfg: FeatureConfig, weights: np.ndarray | None = None
) -> FeatureSequence:
    """Project squared magnitudes through mel filters and compress with log(1+x).

    ``weights`` overrides the default filter matrix (shape ``(n_filters, n_bins)``).
    """
    if s.variant != Variant.FFT_MAGNITUDE:
        raise ValueError(f"mel_filterbank needs FFT magnitudes, got {s.variant.name}")
    if weights is None:
        weights = mel_weights(cfg)
    if weights.shape[1] != s.frames.shape[1]:
        raise ValueError("filter matrix does not match the number of FFT bins")
    return FeatureSequence(_log_mel(s.frames, weights), Variant.FILTERBANK, s.frame_hop_s)


def stack_frames(s: FeatureSequence, cfg: FeatureConfig) -> FeatureSequence:
    """Concatenate ``stack`` consecutive frames every ``stride`` frames."""
    if s.variant != Variant.FILTERBANK:
        raise ValueError(f"stack_frames needs filterbank input, got {s.variant.name}")
    t = len(s)
    if t == 0:
        raise TooShortError("cannot stack an empty feature sequence")
    starts = np.arange(num_stacked(t, cfg)) * cfg.stride
    return FeatureSequence(
        _stack(s.frames, starts, cfg), Variant.STACKED_FILTERBANK, s.frame_hop_s * cfg.stride
    )


def extract(w: Waveform, cfg: FeatureConfig) -> FeatureSequence:
    """Waveform to features of ``cfg.variant``."""
    s = stft_magnitude(w, cfg)
    if cfg.variant == Variant.FFT_MAGNITUDE:
        return s
    s = mel_filterbank(s, cfg)
    if cfg.variant == Variant.FILTERBANK:
        return s
    return stack_frames(s, cfg)


class StreamingFrontend:
    """Incremental feature extraction over arbitrary-sized sample chunks.

    ``push`` returns every output frame that became complete; ``flush`` emits
    the trailing padded stacks once the input has ended.  Memory is bounded by
    one window of samples plus one stack of filterbank frames.
    """

    def __init__(self, cfg: FeatureConfig):
        self.cfg = cfg
        self._weights = mel_weights(cfg) if cfg.variant != Variant.FFT_MAGNITUDE else None
        self._buf = np.zeros(0)
        self._fb = np.zeros((0, cfg.n_mels))  # filterbank frames not yet consumed
        self._fb_offset = 0  # absolute index of self._fb[0]
        self._next_start = 0  # absolute index of the next stack start
        self.n_input_frames = 0

    def push(self, samples) -> np.ndarray:
        cfg = self.cfg
        self._buf = np.concatenate([self._buf, np.asarray(samples, dtype=np.float64)])
        n = num_frames(self._buf.shape[0], cfg)
        if n == 0:
            return np.zeros((0, cfg.width))
        mags = _frame_magnitudes(self._buf, cfg)
        self._buf = self._buf[n * cfg.hop_length :]
        self.n_input_frames += n
        if cfg.variant == Variant.FFT_MAGNITUDE:
            return mags
        fb = _log_mel(mags, self._weights)
        if cfg.variant == Variant.FILTERBANK:
            return fb
        self._fb = np.concatenate([self._fb, fb])
        return self._emit_stacks(final=False)

    def flush(self) -> np.ndarray:
        cfg = self.cfg
        if self.n_input_frames == 0:
            raise TooShortError(f"stream ended before one full window ({cfg.win_length} samples)")
        if cfg.variant != Variant.STACKED_FILTERBANK:
            return np.zeros((0, cfg.width))
        return self._emit_stacks(final=True)

    def _emit_stacks(self, final: bool) -> np.ndarray:
        cfg = self.cfg
        total = self.n_input_frames
        limit = num_stacked(total, cfg)
        starts = []
        s = self._next_start
        while s // cfg.stride < limit and (final or s + cfg.stack <= total):
            starts.append(s)
            s += cfg.stride
        self._next_start = s
        if starts:
            out = _stack(self._fb, np.asarray(starts) - self._fb_offset, cfg)
        else:
            out = np.zeros((0, cfg.width))
        # later stacks never look before s; the newest frame is kept for tail padding
        drop = min(s, total - 1) - self._fb_offset
        if drop > 0:
            self._fb = self._fb[drop:]
            self._fb_offset += drop
        return out


# ---------------------------------------------------------------------------
# WAV and VFF1 I/O


def read_wav(path) -> Waveform:
    """Read a 16-bit mono 16 kHz PCM WAV file."""
    with _open_wav(path) as wf:
        raw = wf.readframes(wf.getnframes())
    return Waveform(np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0)


def iter_wav(path, chunk_samples: int = 1600) -> Iterator[np.ndarray]:
    """Yield a WAV file as float chunks without loading it whole."""
    with _open_wav(path) as wf:
        while True:
            raw = wf.readframes(chunk_samples)
            if not raw:
                return
            yield np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0


def wav_num_samples(path) -> int:
    with _open_wav(path) as wf:
        return wf.getnframes()


def _open_wav(path):
    try:
        wf = wave.open(str(path), "rb")
    except (wave.Error, EOFError) as exc:
        raise FormatError(f"{path}: not a RIFF/PCM WAV file ({exc})") from exc
    problems = []
    if wf.getnchannels() != 1:
        problems.append(f"{wf.getnchannels()} channels (need mono)")
    if wf.getsampwidth() != 2:
        problems.append(f"{8 * wf.getsampwidth()}-bit samples (need 16-bit)")
    if wf.getframerate() != DEFAULT_SAMPLE_RATE:
        problems.append(f"{wf.getframerate()} Hz (need {DEFAULT_SAMPLE_RATE} Hz)")
    if wf.getcomptype() != "NONE":
        problems.append(f"compression {wf.getcomptype()!r} (need PCM)")
    if problems:
        wf.close()
        raise FormatError(f"{path}: unsupported WAV format: " + ", ".join(problems))
    return wf


def write_wav(path, w: Waveform | np.ndarray) -> bool:
    """Write 16-bit PCM. Returns True if any sample had to be clipped."""
    samples = w.samples if isinstance(w, Waveform) else np.asarray(w, dtype=np.float64)
    scaled = np.round(samples * 32768.0)
    clipped = bool(np.any((scaled > 32767) | (scaled < -32768)))
    pcm = np.clip(scaled, -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(DEFAULT_SAMPLE_RATE)
        wf.writeframes(pcm.tobytes())
    return clipped


VFF_MAGIC = b"VFF1"
_VFF_HEADER = struct.Struct("<4sIIId")


def write_features(path, s: FeatureSequence) -> None:
    with FeatureWriter(path, s.variant, s.frames.shape[1], s.frame_hop_s) as out:
        out.write(s.frames)


def read_features(path) -> FeatureSequence:
    data = Path(path).read_bytes()
    if len(data) < _VFF_HEADER.size:
        raise FormatError(f"{path}: truncated VFF1 header")
    magic, tag, t, f, hop = _VFF_HEADER.unpack_from(data)
    if magic != VFF_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}, expected {VFF_MAGIC!r}")
    try:
        variant = Variant(tag)
    except ValueError:
        raise FormatError(f"{path}: unknown variant tag {tag}") from None
    body = data[_VFF_HEADER.size :]
    if len(body) != 4 * t * f:
        raise FormatError(f"{path}: expected {t}x{f} float32 values, found {len(body)} bytes")
    frames = np.frombuffer(body, dtype="<f4").reshape(t, f)
    return FeatureSequence(frames.astype(np.float64), variant, hop)


class FeatureWriter:
    """Append frames to a VFF1 file whose frame count is unknown up front."""

    def __init__(self, path, variant, width: int, frame_hop_s: float):
        self.path = path
        self.variant = Variant.parse(variant)
        self.width = width
        self.frame_hop_s = frame_hop_s
        self.count = 0
        self._fh: BinaryIO | None = None

    def __enter__(self) -> "FeatureWriter":
        self._fh = open(self.path, "wb")
        self._fh.write(self._header())
        return self

    def _header(self) -> bytes:
        return _VFF_HEADER.pack(
            VFF_MAGIC, int(self.variant), self.count, self.width, float(self.frame_hop_s)
        )

    def write(self, frames: np.ndarray) -> None:
        frames = np.asarray(frames)
        if frames.size == 0:
            return
        if frames.ndim != 2 or frames.shape[1] != self.width:
            raise ValueError(f"expected frames of width {self.width}")
        self._fh.write(np.ascontiguousarray(frames, dtype="<f4").tobytes())
        self.count += frames.shape[0]

    def __exit__(self, *exc) -> None:
        self._fh.seek(0)
        self._fh.write(self._header())
        self._fh.close()
