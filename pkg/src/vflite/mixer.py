"""Training/eval mixture synthesis: SNR-controlled additive or reverberant noisification."""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.signal import fftconvolve

from .errors import NumericError
from .frontend import (
    FeatureConfig,
    FeatureSequence,
    Variant,
    Waveform,
    extract,
    num_frames,
    num_stacked,
    read_features,
    read_wav,
    write_features,
)
from .speaker import DVector, embed_reference, load_dvector, save_dvector

SNR_RANGE_DB = (1.0, 10.0)
SILENCE_RMS = 1e-4
_LN_1000 = 3.0 * math.log(10.0)  # -60 dB decay constant
_DIRECT_CONV_LIMIT = 2_000_000


class NoiseKind(enum.Enum):
    SPEECH = "speech"
    NONSPEECH = "nonspeech"


class Room(enum.Enum):
    ADDITIVE = "additive"
    REVERB = "reverb"


@dataclass
class MixSpec:
    snr_db: float
    noise_kind: NoiseKind = NoiseKind.SPEECH
    room: Room = Room.ADDITIVE
    rir: np.ndarray | None = None
    seed: int = 0
    reverb_target: bool = False

    def __post_init__(self):
        self.noise_kind = NoiseKind(self.noise_kind)
        self.room = Room(self.room)
        if not math.isfinite(self.snr_db):
            raise ValueError(f"snr_db must be finite, got {self.snr_db}")
        if (self.rir is not None) != (self.room == Room.REVERB):
            raise ValueError("an impulse response is required for, and only for, Reverb mixing")
        if self.rir is not None:
            self.rir = np.asarray(self.rir, dtype=np.float64)

    def to_dict(self) -> dict:
        return {
            "snr_db": self.snr_db,
            "noise_kind": self.noise_kind.value,
            "room": self.room.value,
            "rir_len": None if self.rir is None else int(self.rir.shape[0]),
            "seed": self.seed,
            "reverb_target": self.reverb_target,
        }


@dataclass
class MixtureExample:
    noisy: FeatureSequence
    clean: FeatureSequence
    dvec: DVector
    overlap_labels: np.ndarray
    spec: MixSpec | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.overlap_labels = np.asarray(self.overlap_labels, dtype=np.int8)
        if self.noisy.shape != self.clean.shape or self.noisy.variant != self.clean.variant:
            raise ValueError("noisy and clean features must share shape and variant")
        if self.overlap_labels.shape != (len(self.noisy),):
            raise ValueError("one overlap label per frame is required")

    def __len__(self) -> int:
        return len(self.noisy)


def sample_snr(rng: np.random.Generator, lo_db: float = SNR_RANGE_DB[0], hi_db: float = SNR_RANGE_DB[1]) -> float:
    if lo_db > hi_db:
        raise ValueError(f"empty SNR interval [{lo_db}, {hi_db}]")
    if lo_db == hi_db:
        return float(lo_db)
    return float(rng.uniform(lo_db, hi_db))


def fit_length(noise: np.ndarray, n: int) -> np.ndarray:
    """Loop or truncate ``noise`` to exactly ``n`` samples."""
    reps = -(-n // noise.shape[0])
    return np.tile(noise, reps)[:n]


def _rms(x: np.ndarray) -> float:
    return float(np.sqrt(np.mean(x**2)))


def snr_gain(clean: Waveform, noise: np.ndarray, snr_db: float) -> float:
    """Gain g on ``noise`` that puts it ``snr_db`` below ``clean`` (full-utterance RMS)."""
    if not math.isfinite(snr_db):
        raise ValueError(f"snr_db must be finite, got {snr_db}")
    rc, rn = clean.rms(), _rms(noise)
    if rc == 0.0 or rn == 0.0:
        raise ValueError("cannot set an SNR against a silent signal")
    return (rc / rn) * 10.0 ** (-snr_db / 20.0)


def mix_at_snr(clean: Waveform, noise: Waveform, snr_db: float) -> Waveform:
    """``clean + g * noise``; the result is not renormalised even if it clips."""
    if clean.sample_rate_hz != noise.sample_rate_hz:
        raise ValueError("clean and noise sample rates differ")
    n = fit_length(noise.samples, len(clean))
    g = snr_gain(clean, n, snr_db)
    return Waveform(clean.samples + g * n, clean.sample_rate_hz)


def measured_snr_db(clean: np.ndarray, scaled_noise: np.ndarray) -> float:
    return 20.0 * math.log10(_rms(clean) / _rms(scaled_noise))


def apply_rir(w: Waveform, rir) -> Waveform:
    """Convolve with an impulse response whose largest tap is rescaled to magnitude 1."""
    rir = np.asarray(rir, dtype=np.float64).reshape(-1)
    if rir.size == 0:
        raise ValueError("impulse response is empty")
    if not np.all(np.isfinite(rir)):
        raise NumericError("impulse response contains non-finite taps")
    peak = np.max(np.abs(rir))
    if peak == 0.0:
        raise ValueError("impulse response is all zeros")
    rir = rir / peak
    if rir.size * len(w) <= _DIRECT_CONV_LIMIT:
        out = np.convolve(w.samples, rir)
    else:
        out = fftconvolve(w.samples, rir)
    return Waveform(out[: len(w)], w.sample_rate_hz)


def synth_rir(rt60_s: float, sample_rate_hz: int, rng: np.random.Generator) -> np.ndarray:
    """Exponentially decaying Gaussian noise tail with a unit direct-path tap."""
    if not 0.05 <= rt60_s <= 1.5:
        raise ValueError(f"rt60 must be within [0.05, 1.5] s, got {rt60_s}")
    n = int(round(rt60_s * sample_rate_hz))
    t = np.arange(n) / sample_rate_hz
    taps = rng.standard_normal(n) * np.exp(-_LN_1000 * t / rt60_s)
    taps[0] = 1.0
    return taps


def frame_spans(n_samples: int, fcfg: FeatureConfig) -> list[tuple[int, int]]:
    """Sample range [lo, hi) under each output frame of the configured variant."""
    win, hop = fcfg.win_length, fcfg.hop_length
    t = num_frames(n_samples, fcfg)
    if fcfg.variant != Variant.STACKED_FILTERBANK:
        return [(i * hop, i * hop + win) for i in range(t)]
    spans = []
    for k in range(num_stacked(t, fcfg)):
        first = k * fcfg.stride
        last = min(first + fcfg.stack, t) - 1
        spans.append((first * hop, min(last * hop + win, n_samples)))
    return spans


def overlap_labels(scaled_noise: np.ndarray, kind: NoiseKind, fcfg: FeatureConfig) -> np.ndarray:
    spans = frame_spans(scaled_noise.shape[0], fcfg)
    if kind != NoiseKind.SPEECH:
        return np.zeros(len(spans), dtype=np.int8)
    return np.array(
        [_rms(scaled_noise[lo:hi]) > SILENCE_RMS for lo, hi in spans], dtype=np.int8
    )


def make_example(
    clean: Waveform,
    noise: Waveform,
    ref_audio: Waveform | None,
    spec: MixSpec,
    fcfg: FeatureConfig,
    dvec: DVector | None = None,
    dvec_dim: int = 256,
) -> MixtureExample:
    """Mix one training/eval example and extract aligned noisy/clean features.

    ``dvec`` skips embedding ``ref_audio`` when the caller already has one.
    """
    if dvec is None:
        if ref_audio is None:
            raise ValueError("either ref_audio or dvec is required")
        dvec = embed_reference(ref_audio, fcfg, dvec_dim)
    target = clean
    noise_n = fit_length(noise.samples, len(clean))
    if spec.room == Room.REVERB:
        noise_n = apply_rir(Waveform(noise_n, noise.sample_rate_hz), spec.rir).samples
        if spec.reverb_target:
            target = apply_rir(clean, spec.rir)
    g = snr_gain(target, noise_n, spec.snr_db)
    scaled = g * noise_n
    mixed = Waveform(target.samples + scaled, clean.sample_rate_hz)
    peak = float(np.max(np.abs(mixed.samples)))
    meta = {
        "gain": g,
        "measured_snr_db": measured_snr_db(target.samples, scaled),
        "peak": peak,
        "clipped": peak > 1.0,
    }
    return MixtureExample(
        noisy=extract(mixed, fcfg),
        clean=extract(target, fcfg),
        dvec=dvec,
        overlap_labels=overlap_labels(scaled, spec.noise_kind, fcfg),
        spec=spec,
        meta=meta,
    )


# ---------------------------------------------------------------------------
# corpus manifests and example archives


@dataclass
class ManifestRow:
    clean: Path
    noise: Path
    ref: Path
    kind: NoiseKind


def read_manifest(path) -> list[ManifestRow]:
    """Tab-separated ``clean  noise  ref  speech|nonspeech``; relative paths resolve
    against the manifest's directory."""
    path = Path(path)
    base = path.parent
    rows = []
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 4:
            raise ValueError(f"{path}:{lineno}: expected 4 tab-separated fields, got {len(parts)}")
        try:
            kind = NoiseKind(parts[3].strip().lower())
        except ValueError:
            raise ValueError(f"{path}:{lineno}: noise kind must be speech or nonspeech") from None
        rows.append(ManifestRow(*(base / p.strip() for p in parts[:3]), kind))
    return rows


def write_example(outdir, name: str, ex: MixtureExample, extra: dict | None = None) -> Path:
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    write_features(outdir / f"{name}.noisy.vff", ex.noisy)
    write_features(outdir / f"{name}.clean.vff", ex.clean)
    save_dvector(ex.dvec, outdir / f"{name}.vfd")
    sidecar = {
        "id": name,
        "noisy": f"{name}.noisy.vff",
        "clean": f"{name}.clean.vff",
        "dvector": f"{name}.vfd",
        "spec": ex.spec.to_dict() if ex.spec is not None else None,
        "labels": ex.overlap_labels.tolist(),
        **ex.meta,
        **(extra or {}),
    }
    path = outdir / f"{name}.json"
    path.write_text(json.dumps(sidecar, indent=1, sort_keys=True))
    return path


def read_example(sidecar_path) -> MixtureExample:
    sidecar_path = Path(sidecar_path)
    base = sidecar_path.parent
    meta = json.loads(sidecar_path.read_text())
    return MixtureExample(
        noisy=read_features(base / meta["noisy"]),
        clean=read_features(base / meta["clean"]),
        dvec=load_dvector(base / meta["dvector"]),
        overlap_labels=np.asarray(meta["labels"]),
        spec=None,
        meta=meta,
    )


def load_archive(directory) -> list[MixtureExample]:
    """All examples of an archive directory, in sorted sidecar-name order."""
    paths = sorted(Path(directory).glob("*.json"))
    paths = [p for p in paths if not p.name.startswith("_")]
    return [read_example(p) for p in paths]


def mix_corpus(
    manifest,
    outdir,
    fcfg: FeatureConfig,
    snr_lo: float = SNR_RANGE_DB[0],
    snr_hi: float = SNR_RANGE_DB[1],
    reverb_prob: float = 0.0,
    reverb_target: bool = False,
    seed: int = 0,
    dvec_dim: int = 256,
    workers: int = 1,
) -> list[Path]:
    """Mix every manifest row into ``outdir``.

    Row ``i`` draws from RNG stream ``(seed, i)`` so output does not depend on
    ``workers``.
    """
    rows = read_manifest(manifest)
    dvecs: dict[Path, DVector] = {}
    for row in rows:
        if row.ref not in dvecs:
            dvecs[row.ref] = embed_reference(read_wav(row.ref), fcfg, dvec_dim)

    def one(i: int) -> Path:
        row = rows[i]
        rng = np.random.default_rng([seed, i])
        snr = sample_snr(rng, snr_lo, snr_hi)
        reverb = bool(rng.uniform() < reverb_prob)
        rt60 = float(rng.uniform(0.2, 0.8))
        rir = synth_rir(rt60, fcfg.sample_rate_hz, rng) if reverb else None
        spec = MixSpec(
            snr_db=snr,
            noise_kind=row.kind,
            room=Room.REVERB if reverb else Room.ADDITIVE,
            rir=rir,
            seed=seed,
            reverb_target=reverb_target,
        )
        ex = make_example(read_wav(row.clean), read_wav(row.noise), None, spec, fcfg, dvec=dvecs[row.ref])
        extra = {
            "row": i,
            "clean_wav": str(row.clean),
            "noise_wav": str(row.noise),
            "ref_wav": str(row.ref),
            "rt60_s": rt60 if reverb else None,
            "feature_config": fcfg.to_dict(),
        }
        return write_example(outdir, f"ex{i:05d}", ex, extra)

    if workers <= 1:
        return [one(i) for i in range(len(rows))]
    from concurrent.futures import ThreadPoolExecutor

    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(one, range(len(rows))))
