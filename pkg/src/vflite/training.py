"""Losses, reverse-mode gradients through the mask network, and the training loop."""

from __future__ import annotations

import enum
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import NumericError
from .masknet import (
    MaskNetConfig,
    MaskNetParams,
    forward_batch,
    init_params,
    mask_derivative,
    mask_values,
)
from .mixer import MixtureExample


@dataclass(frozen=True)
class LossConfig:
    alpha: float = 10.0
    noise_head_weight: float = 0.1
    kind: str = "asym"  # "asym" or "l2"

    def __post_init__(self):
        if self.alpha < 1.0:
            raise ValueError(f"alpha must be >= 1, got {self.alpha}")
        if self.noise_head_weight < 0.0:
            raise ValueError("noise_head_weight must be >= 0")
        if self.kind not in ("asym", "l2"):
            raise ValueError(f"unknown loss kind {self.kind!r}")


class Optimizer(enum.Enum):
    SGD = "sgd"
    ADAM = "adam"


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    optimizer: Optimizer = Optimizer.ADAM
    batch_size: int = 8
    steps: int = 100
    clip_norm: float = 5.0
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        object.__setattr__(self, "optimizer", Optimizer(self.optimizer))
        if self.learning_rate <= 0 or self.batch_size < 1 or self.steps < 0 or self.clip_norm <= 0:
            raise ValueError("learning rate, batch size and clip norm must be positive, steps >= 0")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["optimizer"] = self.optimizer.value
        return d


# ---------------------------------------------------------------------------
# losses


def g_asym(x, alpha: float):
    """Asymmetric penalty: ``x`` for ``x <= 0``, ``alpha * x`` for ``x > 0``."""
    x = np.asarray(x, dtype=np.float64)
    out = np.where(x > 0, alpha * x, x)
    return float(out) if out.ndim == 0 else out


def _frames(s) -> np.ndarray:
    return np.asarray(getattr(s, "frames", s), dtype=np.float64)


def l2_loss(s_cln, s_enh) -> float:
    a, b = _frames(s_cln), _frames(s_enh)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    d = a - b
    return float(np.sum(d * d))


def asym_l2_loss(s_cln, s_enh, alpha: float) -> float:
    """Sum of squared asymmetric residuals; residual > 0 (enhanced below clean) costs alpha^2."""
    if alpha < 1.0:
        raise ValueError(f"alpha must be >= 1, got {alpha}")
    a, b = _frames(s_cln), _frames(s_enh)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    g = g_asym(a - b, alpha)
    return float(np.sum(g * g))


def hinge_loss(score, label):
    y = 2.0 * np.asarray(label, dtype=np.float64) - 1.0
    out = np.maximum(0.0, 1.0 - y * np.asarray(score, dtype=np.float64))
    return float(out) if out.ndim == 0 else out


def _mask_loss(s_cln, s_enh, lcfg: LossConfig) -> float:
    if lcfg.kind == "l2":
        return l2_loss(s_cln, s_enh)
    return asym_l2_loss(s_cln, s_enh, lcfg.alpha)


def loss_components(example: MixtureExample, masks, scores, lcfg: LossConfig, log_domain: bool = False) -> dict:
    s_enh = mask_values(example.noisy.frames, np.asarray(masks), example.noisy.variant, log_domain)
    mask_part = _mask_loss(example.clean.frames, s_enh, lcfg)
    hinge_part = float(np.sum(hinge_loss(scores, example.overlap_labels)))
    return {
        "mask": mask_part,
        "hinge": hinge_part,
        "total": mask_part + lcfg.noise_head_weight * hinge_part,
    }


def total_loss(example: MixtureExample, masks, scores, lcfg: LossConfig, log_domain: bool = False) -> float:
    """Mask loss plus ``lambda * sum_t hinge(score_t, label_t)``."""
    return loss_components(example, masks, scores, lcfg, log_domain)["total"]


# ---------------------------------------------------------------------------
# gradients


def _residual_grad(d: np.ndarray, lcfg: LossConfig) -> np.ndarray:
    """dL/dS_enh for residual d = S_cln - S_enh. At d == 0 the factor-1 branch is used."""
    if lcfg.kind == "l2":
        return -2.0 * d
    return np.where(d > 0, (-2.0 * lcfg.alpha**2) * d, -2.0 * d)


def batch_loss_and_grads(params: MaskNetParams, cfg: MaskNetConfig, noisy, clean, labels, dvecs, lcfg: LossConfig):
    """Summed loss and exact gradients for a batch of equal-length examples.

    ``noisy``/``clean`` are (B, T, F), ``labels`` (B, T), ``dvecs`` (B, D).
    Returns ``(loss_parts, grads)`` with grads keyed like ``params.tensors``.
    """
    if params.quantized:
        raise TypeError("quantized parameters are not trainable")
    p = params.f64()
    noisy = np.asarray(noisy, dtype=np.float64)
    clean = np.asarray(clean, dtype=np.float64)
    masks, scores, cache = forward_batch(params, cfg, noisy, dvecs, keep_cache=True)

    s_enh = mask_values(noisy, masks, cfg.variant, cfg.log_domain_mask)
    d = clean - s_enh
    mask_part = _mask_loss(clean, s_enh, lcfg)
    y = 2.0 * np.asarray(labels, dtype=np.float64) - 1.0
    margins = 1.0 - y * scores
    hinge_part = float(np.sum(np.maximum(0.0, margins)))
    lam = lcfg.noise_head_weight

    dm = _residual_grad(d, lcfg) * mask_derivative(noisy, masks, cfg.variant, cfg.log_domain_mask)
    dz_mask = dm * masks * (1.0 - masks)
    dscore = np.where(margins > 0, -lam * y, 0.0)

    top = cache["top"]
    grads: dict[str, np.ndarray] = {}
    grads["mask.w"] = np.einsum("btf,bth->fh", dz_mask, top)
    grads["mask.b"] = dz_mask.sum(axis=(0, 1))
    dtop = dz_mask @ p["mask.w"]

    acts = cache["head_acts"]
    n_hidden = len(cfg.head_hidden)
    last = acts[-1] if n_hidden else top
    grads["noise_out.w"] = np.einsum("bt,bth->h", dscore, last)[None, :]
    grads["noise_out.b"] = np.array([dscore.sum()])
    da = dscore[..., None] * p["noise_out.w"][0]
    for j in reversed(range(n_hidden)):
        dz = da * (acts[j] > 0)
        below = acts[j - 1] if j > 0 else top
        grads[f"noise{j}.w"] = np.einsum("btk,bth->kh", dz, below)
        grads[f"noise{j}.b"] = dz.sum(axis=(0, 1))
        da = dz @ p[f"noise{j}.w"]
    dtop = dtop + da

    hu = cfg.lstm_units
    dh_seq = dtop
    for layer in reversed(range(cfg.lstm_layers)):
        lc = cache["layers"][layer]
        w_hh = p[f"lstm{layer}.w_hh"]
        gates, hseq, cseq = lc["gates"], lc["h"], lc["c"]
        b, t, _ = dh_seq.shape
        dz_all = np.zeros((b, t, 4 * hu))
        dh_next = np.zeros((b, hu))
        dc_next = np.zeros((b, hu))
        for step in reversed(range(t)):
            gi = gates[:, step, :hu]
            gf = gates[:, step, hu : 2 * hu]
            gg = gates[:, step, 2 * hu : 3 * hu]
            go = gates[:, step, 3 * hu :]
            c = cseq[:, step + 1]
            tc = np.tanh(c)
            dh = dh_seq[:, step] + dh_next
            dc = dh * go * (1.0 - tc * tc) + dc_next
            dz = np.concatenate(
                [
                    dc * gg * gi * (1.0 - gi),
                    dc * cseq[:, step] * gf * (1.0 - gf),
                    dc * gi * (1.0 - gg * gg),
                    dh * tc * go * (1.0 - go),
                ],
                axis=-1,
            )
            dz_all[:, step] = dz
            dc_next = dc * gf
            dh_next = dz @ w_hh
        grads[f"lstm{layer}.w_ih"] = np.einsum("btz,bti->zi", dz_all, lc["u"])
        grads[f"lstm{layer}.w_hh"] = np.einsum("btz,bth->zh", dz_all, hseq[:, :-1])
        grads[f"lstm{layer}.b"] = dz_all.sum(axis=(0, 1))
        dh_seq = dz_all @ p[f"lstm{layer}.w_ih"]

    if cfg.has_conv:
        cf = cfg.conv_channels * cfg.input_dim
        b, t, _ = dh_seq.shape
        dy = dh_seq[..., :cf].reshape(b, t, cfg.conv_channels, cfg.input_dim)
        dy = dy * (cache["conv_out"].reshape(dy.shape) > 0)
        grads["conv.w"] = np.einsum("btcf,btfk->ck", dy, cache["conv_patches"])
        grads["conv.b"] = dy.sum(axis=(0, 1, 3))

    parts = {"mask": mask_part, "hinge": hinge_part, "total": mask_part + lam * hinge_part}
    return parts, grads


def backward(params: MaskNetParams, cfg: MaskNetConfig, example: MixtureExample, lcfg: LossConfig):
    """Gradients of :func:`total_loss` for one example w.r.t. every parameter tensor."""
    _, grads = batch_loss_and_grads(
        params,
        cfg,
        example.noisy.frames[None],
        example.clean.frames[None],
        example.overlap_labels[None],
        example.dvec.values[None],
        lcfg,
    )
    return grads


# ---------------------------------------------------------------------------
# optimisation


@dataclass
class TrainState:
    params: MaskNetParams
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    history: list = field(default_factory=list)


def _global_norm(grads: dict) -> float:
    return math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))


def _select_batch(n: int, step: int, tcfg: TrainConfig) -> np.ndarray:
    rng = np.random.default_rng([tcfg.seed, step])
    if tcfg.batch_size >= n:
        return rng.permutation(n)
    return np.sort(rng.choice(n, size=tcfg.batch_size, replace=False))


def train_step(state: TrainState, data: list[MixtureExample], cfg: MaskNetConfig, lcfg: LossConfig, tcfg: TrainConfig) -> dict:
    """One optimiser step on a deterministic batch; mutates ``state`` and returns metrics."""
    idx = _select_batch(len(data), state.step, tcfg)
    batch = [data[i] for i in idx]
    grads = {k: np.zeros(v.shape) for k, v in state.params.tensors.items()}
    parts = {"mask": 0.0, "hinge": 0.0, "total": 0.0}
    # equal-length examples share one batched pass; groups are visited in first-appearance order
    groups: dict[int, list[MixtureExample]] = {}
    for ex in batch:
        groups.setdefault(len(ex), []).append(ex)
    for group in groups.values():
        gp, gg = batch_loss_and_grads(
            state.params,
            cfg,
            np.stack([e.noisy.frames for e in group]),
            np.stack([e.clean.frames for e in group]),
            np.stack([e.overlap_labels for e in group]),
            np.stack([e.dvec.values for e in group]),
            lcfg,
        )
        for k in parts:
            parts[k] += gp[k]
        for k in grads:
            grads[k] += gg[k]
    scale = 1.0 / len(batch)
    for k in grads:
        grads[k] *= scale
    for k in parts:
        parts[k] *= scale
    norm = _global_norm(grads)
    if not math.isfinite(norm):
        raise NumericError(f"non-finite gradient at step {state.step}")
    if norm > tcfg.clip_norm:
        for k in grads:
            grads[k] *= tcfg.clip_norm / norm

    state.step += 1
    new = {}
    for k, w in state.params.tensors.items():
        w64 = w.astype(np.float64)
        if tcfg.optimizer == Optimizer.SGD:
            w64 -= tcfg.learning_rate * grads[k]
        else:
            m = tcfg.beta1 * state.m.get(k, np.zeros_like(w64)).astype(np.float64) + (1 - tcfg.beta1) * grads[k]
            v = tcfg.beta2 * state.v.get(k, np.zeros_like(w64)).astype(np.float64) + (1 - tcfg.beta2) * grads[k] ** 2
            m_hat = m / (1 - tcfg.beta1**state.step)
            v_hat = v / (1 - tcfg.beta2**state.step)
            w64 -= tcfg.learning_rate * m_hat / (np.sqrt(v_hat) + tcfg.eps)
            state.m[k] = m.astype(w.dtype)
            state.v[k] = v.astype(w.dtype)
        new[k] = w64.astype(w.dtype)
    state.params = MaskNetParams(new)
    record = {"step": state.step, "loss": parts["total"], "mask_loss": parts["mask"], "hinge_loss": parts["hinge"], "grad_norm": norm}
    state.history.append(record)
    return record


def train(
    data: list[MixtureExample],
    cfg: MaskNetConfig,
    lcfg: LossConfig,
    tcfg: TrainConfig,
    state: TrainState | None = None,
    callback=None,
) -> TrainState:
    """Run ``tcfg.steps`` optimiser steps (continuing ``state`` when resuming).

    The batch at step ``k`` depends only on ``(tcfg.seed, k)``, so a resumed
    run follows the same trajectory as an uninterrupted one.
    """
    if not data:
        raise ValueError("training set is empty")
    if state is None:
        state = TrainState(init_params(cfg, np.random.default_rng(tcfg.seed)))
    state.params.check(cfg)
    target = state.step + tcfg.steps
    while state.step < target:
        rec = train_step(state, data, cfg, lcfg, tcfg)
        if callback is not None:
            callback(rec)
    for k, v in state.params.f64().items():
        if not np.all(np.isfinite(v)):
            raise NumericError(f"parameter {k} became non-finite")
    return state
