"""Synthetic band-limited "speakers" and non-speech noise for fixtures and demos.

Each speaker is a harmonic source confined to its own frequency band and
gated by a random syllable envelope, so the statistics embedder can tell
speakers apart and a mask network can learn band-selective suppression.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .frontend import DEFAULT_SAMPLE_RATE, FeatureConfig, Waveform, write_wav
from .mixer import MixSpec, MixtureExample, NoiseKind, Room, make_example, sample_snr, synth_rir
from .speaker import embed_reference


@dataclass(frozen=True)
class SyntheticSpeaker:
    band_lo_hz: float
    band_hi_hz: float
    f0_hz: float


def make_speakers(n: int, rng: np.random.Generator, lo_hz: float = 200.0, hi_hz: float = 6500.0) -> list[SyntheticSpeaker]:
    """``n`` speakers whose bands tile [lo_hz, hi_hz] on a log scale without overlap."""
    edges = np.geomspace(lo_hz, hi_hz, n + 1)
    speakers = []
    for k in range(n):
        width = edges[k + 1] - edges[k]
        speakers.append(
            SyntheticSpeaker(
                band_lo_hz=float(edges[k] + 0.05 * width),
                band_hi_hz=float(edges[k + 1] - 0.05 * width),
                f0_hz=float(rng.uniform(90.0, 220.0)),
            )
        )
    return speakers


def syllable_envelope(n: int, rng: np.random.Generator, sr: int = DEFAULT_SAMPLE_RATE, duty: float = 0.6) -> np.ndarray:
    """Piecewise on/off gate with 10 ms raised-cosine ramps."""
    env = np.zeros(n)
    pos = int(rng.uniform(0.0, 0.1) * sr)
    ramp = int(0.01 * sr)
    while pos < n:
        on = int(rng.uniform(0.08, 0.3) * sr)
        off = int(rng.uniform(0.03, 0.3) * sr * (1.0 - duty) / duty)
        seg = np.ones(on)
        r = min(ramp, on // 2)
        if r:
            taper = 0.5 - 0.5 * np.cos(np.pi * np.arange(r) / r)
            seg[:r] = taper
            seg[-r:] = taper[::-1]
        end = min(n, pos + on)
        env[pos:end] = seg[: end - pos]
        pos += on + off
    return env


def utterance(
    spk: SyntheticSpeaker,
    duration_s: float,
    rng: np.random.Generator,
    level_rms: float = 0.05,
    sr: int = DEFAULT_SAMPLE_RATE,
    gated: bool = True,
) -> Waveform:
    n = int(round(duration_s * sr))
    t = np.arange(n) / sr
    vibrato = 1.0 + 0.02 * np.sin(2 * np.pi * rng.uniform(3.0, 6.0) * t + rng.uniform(0, 2 * np.pi))
    phase = 2 * np.pi * np.cumsum(spk.f0_hz * vibrato) / sr
    x = np.zeros(n)
    h_lo = max(1, int(np.ceil(spk.band_lo_hz / spk.f0_hz)))
    h_hi = int(np.floor(spk.band_hi_hz / spk.f0_hz))
    for h in range(h_lo, h_hi + 1):
        x += rng.uniform(0.3, 1.0) * np.sin(h * phase + rng.uniform(0, 2 * np.pi))
    x += 0.3 * band_noise(n, spk.band_lo_hz, spk.band_hi_hz, rng, sr) * np.sqrt(max(h_hi - h_lo + 1, 1))
    if gated:
        x *= syllable_envelope(n, rng, sr)
    return Waveform(_set_rms(x, level_rms), sr)


def band_noise(n: int, lo_hz: float, hi_hz: float, rng: np.random.Generator, sr: int = DEFAULT_SAMPLE_RATE) -> np.ndarray:
    spec = np.fft.rfft(rng.standard_normal(n))
    f = np.fft.rfftfreq(n, 1.0 / sr)
    spec[(f < lo_hz) | (f > hi_hz)] = 0.0
    return _set_rms(np.fft.irfft(spec, n), 1.0)


def nonspeech_noise(duration_s: float, rng: np.random.Generator, level_rms: float = 0.05, sr: int = DEFAULT_SAMPLE_RATE) -> Waveform:
    """Stationary broadband hum: 1/f-tilted noise plus a few steady tones."""
    n = int(round(duration_s * sr))
    spec = np.fft.rfft(rng.standard_normal(n))
    f = np.fft.rfftfreq(n, 1.0 / sr)
    spec /= np.sqrt(np.maximum(f, 50.0) / 50.0)
    x = _set_rms(np.fft.irfft(spec, n), 1.0)
    t = np.arange(n) / sr
    for _ in range(3):
        x += 0.5 * np.sin(2 * np.pi * rng.uniform(150.0, 4000.0) * t + rng.uniform(0, 2 * np.pi))
    return Waveform(_set_rms(x, level_rms), sr)


def _set_rms(x: np.ndarray, level: float) -> np.ndarray:
    r = np.sqrt(np.mean(x**2))
    return x * (level / r) if r > 0 else x


def fixture_examples(
    n: int,
    fcfg: FeatureConfig,
    seed: int,
    n_speakers: int = 6,
    duration_s: float = 1.0,
    speech_fraction: float = 0.5,
    reverb_fraction: float = 0.0,
    dvec_dim: int | None = None,
    snr_range: tuple[float, float] = (1.0, 10.0),
) -> list[MixtureExample]:
    """In-memory mixtures of synthetic speakers against speech or non-speech interference."""
    rng = np.random.default_rng(seed)
    speakers = make_speakers(n_speakers, np.random.default_rng(seed + 7919))
    dim = dvec_dim or 2 * fcfg.n_mels
    dvecs = [
        embed_reference(utterance(s, 2.0, np.random.default_rng([seed, 99, k])), fcfg, dim)
        for k, s in enumerate(speakers)
    ]
    out = []
    for i in range(n):
        target = int(rng.integers(n_speakers))
        clean = utterance(speakers[target], duration_s, rng)
        if rng.uniform() < speech_fraction:
            other = (target + 1 + int(rng.integers(n_speakers - 1))) % n_speakers
            noise = utterance(speakers[other], duration_s, rng)
            kind = NoiseKind.SPEECH
        else:
            noise = nonspeech_noise(duration_s, rng)
            kind = NoiseKind.NONSPEECH
        reverb = rng.uniform() < reverb_fraction
        rir = synth_rir(float(rng.uniform(0.2, 0.6)), fcfg.sample_rate_hz, rng) if reverb else None
        spec = MixSpec(
            snr_db=sample_snr(rng, *snr_range),
            noise_kind=kind,
            room=Room.REVERB if reverb else Room.ADDITIVE,
            rir=rir,
            seed=seed,
        )
        out.append(make_example(clean, noise, None, spec, fcfg, dvec=dvecs[target]))
    return out


def write_corpus(outdir, n_rows: int, seed: int = 0, n_speakers: int = 6, duration_s: float = 2.0, speech_fraction: float = 0.5) -> Path:
    """Write clean/noise/reference WAVs plus a tab-separated mixing manifest."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    speakers = make_speakers(n_speakers, np.random.default_rng(seed + 7919))
    for k, s in enumerate(speakers):
        write_wav(outdir / f"ref_spk{k}.wav", utterance(s, 2.0, np.random.default_rng([seed, 99, k])))
    lines = []
    for i in range(n_rows):
        target = int(rng.integers(n_speakers))
        write_wav(outdir / f"clean_{i:04d}.wav", utterance(speakers[target], duration_s, rng))
        if rng.uniform() < speech_fraction:
            other = (target + 1 + int(rng.integers(n_speakers - 1))) % n_speakers
            noise, kind = utterance(speakers[other], duration_s, rng), "speech"
        else:
            noise, kind = nonspeech_noise(duration_s, rng), "nonspeech"
        write_wav(outdir / f"noise_{i:04d}.wav", noise)
        lines.append(f"clean_{i:04d}.wav\tnoise_{i:04d}.wav\tref_spk{target}.wav\t{kind}")
    manifest = outdir / "manifest.tsv"
    manifest.write_text("\n".join(lines) + "\n")
    return manifest
