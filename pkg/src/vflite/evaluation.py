"""Streaming enhancement and feature-domain proxy metrics."""

from __future__ import annotations

import csv
import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .frontend import FeatureConfig, FeatureSequence, StreamingFrontend, Waveform, extract
from .masknet import MaskNetConfig, MaskNetParams, StreamState, forward_sequence, forward_step, mask_values
from .mixer import (
    MixtureExample,
    apply_rir,
    fit_length,
    read_manifest,
    sample_snr,
    snr_gain,
    synth_rir,
)
from .quantizer import forward_sequence_quantized, forward_step_quantized
from .speaker import DVector, embed_reference
from .suppression import SuppressionConfig, SuppressionState, compensate, next_strength

DEFAULT_EPSILON = 0.05
ROOMS = ("clean", "additive", "reverb")
KINDS = ("speech", "nonspeech")


class Enhancer:
    """Frame-by-frame enhancement of one stream: mask network plus suppression blend."""

    def __init__(self, params: MaskNetParams, cfg: MaskNetConfig, dvec: DVector, supp: SuppressionConfig | None = None):
        self.params = params
        self.cfg = cfg
        self.dvec = dvec
        self.supp = supp or SuppressionConfig()
        self._step = forward_step_quantized if params.quantized else forward_step
        self.state = StreamState.initial(cfg, self.supp.initial_w())
        self.supp_state = SuppressionState(self.state.w_prev)

    def step(self, frame: np.ndarray):
        """Return ``(s_out, w, mask, noise_score)`` for one input frame."""
        mask, score, self.state = self._step(self.params, self.cfg, self.state, frame, self.dvec)
        s_enh = mask_values(frame, mask, self.cfg.variant, self.cfg.log_domain_mask)
        w = next_strength(self.supp_state, score, self.supp)
        self.state.w_prev = w
        return compensate(s_enh, frame, w), w, mask, score


def enhance_features(params: MaskNetParams, cfg: MaskNetConfig, s_in: FeatureSequence, dvec: DVector, supp: SuppressionConfig | None = None):
    """Whole-sequence enhancement; returns ``(S_out, w_trace)``."""
    supp = supp or SuppressionConfig()
    if params.quantized:
        masks, scores = forward_sequence_quantized(params, cfg, s_in.frames, dvec)
    else:
        masks, scores = forward_sequence(params, cfg, s_in.frames, dvec)
    s_enh = mask_values(s_in.frames, masks, cfg.variant, cfg.log_domain_mask)
    state = SuppressionState(supp.initial_w())
    out = np.empty_like(s_in.frames)
    ws = np.empty(len(s_in))
    for t in range(len(s_in)):
        ws[t] = next_strength(state, float(scores[t]), supp)
        out[t] = compensate(s_enh[t], s_in.frames[t], ws[t])
    return FeatureSequence(out, s_in.variant, s_in.frame_hop_s), ws


def stream_enhance(chunks, fcfg: FeatureConfig, enhancer: Enhancer, sink=None):
    """Run audio chunks through the streaming frontend and enhancer.

    ``sink(frames_in, frames_out, ws)`` receives each completed block; nothing
    proportional to the input length is retained.  Returns the frame count.
    """
    fe = StreamingFrontend(fcfg)
    count = 0

    def run(block):
        nonlocal count
        if block.shape[0] == 0:
            return
        outs = np.empty_like(block)
        ws = np.empty(block.shape[0])
        for i, frame in enumerate(block):
            outs[i], ws[i], _, _ = enhancer.step(frame)
        count += block.shape[0]
        if sink is not None:
            sink(block, outs, ws)

    for chunk in chunks:
        run(fe.push(chunk))
    run(fe.flush())
    return count


def suppression_rates(s_out: np.ndarray, s_cln: np.ndarray, eps: float = DEFAULT_EPSILON):
    """Fractions of cells below ``S_cln - eps`` (over) and above ``S_cln + eps`` (under)."""
    s_out = np.asarray(s_out)
    s_cln = np.asarray(s_cln)
    n = s_cln.size
    return float(np.sum(s_out < s_cln - eps)) / n, float(np.sum(s_out > s_cln + eps)) / n


@dataclass
class ConditionRow:
    condition: str
    mse_enhanced: float
    mse_unenhanced: float
    over_suppression_rate: float
    under_suppression_rate: float
    mean_w: float
    frames: int
    realtime_factor: float
    utterances: int = 0


@dataclass
class EvalReport:
    rows: list[ConditionRow] = field(default_factory=list)
    epsilon: float = DEFAULT_EPSILON
    meta: dict = field(default_factory=dict)

    def row(self, condition: str) -> ConditionRow:
        for r in self.rows:
            if r.condition == condition:
                return r
        raise KeyError(condition)

    def to_dict(self) -> dict:
        return {"epsilon": self.epsilon, "meta": self.meta, "conditions": [asdict(r) for r in self.rows]}

    def write_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))

    def write_tsv(self, path) -> None:
        names = list(ConditionRow.__dataclass_fields__)
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, delimiter="\t", lineterminator="\n")
            writer.writerow(names)
            for r in self.rows:
                writer.writerow([getattr(r, k) for k in names])


REPORT_SCHEMA = {
    "type": "object",
    "required": ["epsilon", "conditions"],
    "properties": {
        "epsilon": {"type": "number", "minimum": 0},
        "meta": {"type": "object"},
        "conditions": {
            "type": "array",
            "items": {
                "type": "object",
                "required": [
                    "condition",
                    "mse_enhanced",
                    "mse_unenhanced",
                    "over_suppression_rate",
                    "under_suppression_rate",
                    "mean_w",
                    "frames",
                    "realtime_factor",
                ],
                "properties": {
                    "condition": {"type": "string"},
                    "mse_enhanced": {"type": "number", "minimum": 0},
                    "mse_unenhanced": {"type": "number", "minimum": 0},
                    "over_suppression_rate": {"type": "number", "minimum": 0, "maximum": 1},
                    "under_suppression_rate": {"type": "number", "minimum": 0, "maximum": 1},
                    "mean_w": {"type": "number", "minimum": 0, "maximum": 1},
                    "frames": {"type": "integer", "minimum": 0},
                    "realtime_factor": {"type": "number", "minimum": 0},
                    "utterances": {"type": "integer", "minimum": 0},
                },
            },
        },
    },
}


def validate_report(doc: dict) -> None:
    import jsonschema

    jsonschema.validate(doc, REPORT_SCHEMA)


class _Accumulator:
    def __init__(self, name: str, eps: float):
        self.name = name
        self.eps = eps
        self.sq_enh = self.sq_in = 0.0
        self.over = self.under = self.cells = 0
        self.w_sum = 0.0
        self.frames = 0
        self.seconds = 0.0
        self.audio_s = 0.0
        self.utts = 0

    def add(self, s_in, s_out, s_cln, ws, seconds, audio_s):
        self.sq_enh += float(np.sum((s_out - s_cln) ** 2))
        self.sq_in += float(np.sum((s_in - s_cln) ** 2))
        self.over += int(np.sum(s_out < s_cln - self.eps))
        self.under += int(np.sum(s_out > s_cln + self.eps))
        self.cells += s_cln.size
        self.w_sum += float(np.sum(ws))
        self.frames += len(ws)
        self.seconds += seconds
        self.audio_s += audio_s
        self.utts += 1

    def row(self) -> ConditionRow:
        cells = max(self.cells, 1)
        return ConditionRow(
            condition=self.name,
            mse_enhanced=self.sq_enh / cells,
            mse_unenhanced=self.sq_in / cells,
            over_suppression_rate=self.over / cells,
            under_suppression_rate=self.under / cells,
            mean_w=self.w_sum / max(self.frames, 1),
            frames=self.frames,
            realtime_factor=self.seconds / self.audio_s if self.audio_s > 0 else 0.0,
            utterances=self.utts,
        )


def evaluate_examples(
    conditions: dict[str, list[MixtureExample]],
    params: MaskNetParams,
    cfg: MaskNetConfig,
    supp: SuppressionConfig | None = None,
    eps: float = DEFAULT_EPSILON,
) -> EvalReport:
    """Score pre-extracted mixtures grouped by condition name (in the given order)."""
    report = EvalReport(epsilon=eps)
    for name, examples in conditions.items():
        acc = _Accumulator(name, eps)
        for ex in examples:
            t0 = time.perf_counter()
            s_out, ws = enhance_features(params, cfg, ex.noisy, ex.dvec, supp)
            elapsed = time.perf_counter() - t0
            acc.add(ex.noisy.frames, s_out.frames, ex.clean.frames, ws, elapsed, len(ex) * ex.noisy.frame_hop_s)
        report.rows.append(acc.row())
    return report


def parse_conditions(text: str) -> list[str]:
    """``clean,additive,reverb`` or explicit names like ``additive-speech``."""
    names = []
    for tok in (t.strip().lower() for t in text.split(",") if t.strip()):
        if tok == "clean":
            names.append("clean")
        elif tok in ("additive", "reverb"):
            names.extend(f"{tok}-{k}" for k in KINDS)
        else:
            room, _, kind = tok.partition("-")
            if room not in ("additive", "reverb") or kind not in KINDS:
                raise ValueError(f"unknown condition {tok!r}")
            names.append(tok)
    return list(dict.fromkeys(names))


def _condition_audio(clean: Waveform, noise: Waveform, condition: str, rng: np.random.Generator, snr_lo: float, snr_hi: float):
    if condition == "clean":
        return clean, clean
    room, kind = condition.split("-")
    n = fit_length(noise.samples, len(clean))
    if room == "reverb":
        n = apply_rir(Waveform(n), synth_rir(float(rng.uniform(0.2, 0.8)), clean.sample_rate_hz, rng)).samples
    snr = sample_snr(rng, snr_lo, snr_hi)
    g = snr_gain(clean, n, snr)
    return Waveform(clean.samples + g * n, clean.sample_rate_hz), clean


def evaluate_manifest(
    manifest,
    params: MaskNetParams,
    cfg: MaskNetConfig,
    fcfg: FeatureConfig,
    conditions: list[str],
    supp: SuppressionConfig | None = None,
    eps: float = DEFAULT_EPSILON,
    seed: int = 0,
    snr_lo: float = 1.0,
    snr_hi: float = 10.0,
    chunk_samples: int = 1600,
) -> EvalReport:
    """Mix each manifest row under each condition and stream it through the enhancer.

    The realtime factor covers feature extraction plus network and suppression
    work, divided by the audio duration.
    """
    from .frontend import read_wav

    rows = read_manifest(manifest)
    dvecs: dict = {}
    report = EvalReport(epsilon=eps, meta={"seed": seed, "manifest": str(manifest)})
    for ci, name in enumerate(conditions):
        acc = _Accumulator(name, eps)
        for ri, row in enumerate(rows):
            if name != "clean" and not name.endswith("-" + row.kind.value):
                continue
            if row.ref not in dvecs:
                dvecs[row.ref] = embed_reference(read_wav(row.ref), fcfg, cfg.dvec_dim)
            clean = read_wav(row.clean)
            rng = np.random.default_rng([seed, ci, ri])
            noisy, target = _condition_audio(clean, read_wav(row.noise), name, rng, snr_lo, snr_hi)
            s_cln = extract(target, fcfg).frames
            enh = Enhancer(params, cfg, dvecs[row.ref], supp)
            ins, outs, ws = [], [], []

            def sink(block_in, block_out, block_w):
                ins.append(block_in)
                outs.append(block_out)
                ws.append(block_w)

            samples = noisy.samples
            chunks = (samples[i : i + chunk_samples] for i in range(0, len(samples), chunk_samples))
            t0 = time.perf_counter()
            stream_enhance(chunks, fcfg, enh, sink)
            elapsed = time.perf_counter() - t0
            acc.add(np.concatenate(ins), np.concatenate(outs), s_cln, np.concatenate(ws), elapsed, noisy.duration_s)
        report.rows.append(acc.row())
    return report


def condition_of(meta: dict) -> str:
    """Condition name for an archived example's sidecar."""
    spec = meta.get("spec") or {}
    room = spec.get("room", "additive")
    kind = spec.get("noise_kind", "speech")
    return f"{room}-{kind}"
