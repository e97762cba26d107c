"""Post-training int8 dynamic-range quantization and the quantized inference path.

Weight matrices become symmetric per-tensor int8 with a float32 scale; biases
stay float32.  At inference every activation vector is quantized on the fly
with its own max-abs scale, products are accumulated as integers and rescaled
to float before the nonlinearities.  LSTM cell states stay float.

Integer dot products are evaluated with float64 BLAS on int-valued arrays.
Every partial sum is bounded by ``127 * 127 * fan_in``, far below 2**53, so
the result is exactly the int32 accumulation (see :func:`int_matmul_reference`).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .masknet import (
    MaskNetConfig,
    MaskNetParams,
    StreamState,
    _check_inputs,
    _dvec_values,
    _lstm_cell,
    conv_patches,
    sigmoid,
)

QMAX = 127
_F32_TINY = float(np.finfo(np.float32).tiny)


@dataclass
class QuantTensor:
    values: np.ndarray  # int8
    scale: float  # float32-representable, > 0

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    def dequantize(self) -> np.ndarray:
        return self.values.astype(np.float64) * self.scale


def quantize_tensor(t) -> QuantTensor:
    """Symmetric zero-point-free int8: ``scale = max|t| / 127`` (1.0 for an all-zero tensor)."""
    t = np.asarray(t, dtype=np.float64)
    peak = float(np.max(np.abs(t))) if t.size else 0.0
    # floor at the smallest normal float32 so denormal-scale tensors cannot divide by zero
    scale = max(float(np.float32(peak / QMAX)), _F32_TINY) if peak > 0 else 1.0
    q = np.clip(np.round(t / scale), -QMAX, QMAX).astype(np.int8)
    return QuantTensor(q, scale)


def quantize_vector(x: np.ndarray):
    """Per-row dynamic quantization of activations: ``(int-valued float64, scale)``.

    ``x`` may be (..., n); one scale is taken per trailing vector.
    """
    peak = np.max(np.abs(x), axis=-1, keepdims=True)
    scale = np.where(peak > 0, np.maximum(peak / QMAX, np.finfo(np.float64).tiny), 1.0)
    q = np.clip(np.round(x / scale), -QMAX, QMAX)
    return q, scale


def quantize_model(params: MaskNetParams) -> MaskNetParams:
    """Quantize every 2-D weight tensor; 1-D biases stay float32."""
    if params.quantized:
        raise ValueError("model is already quantized")
    out = {}
    for name, v in params.tensors.items():
        if v.ndim >= 2:
            out[name] = quantize_tensor(v)
        else:
            out[name] = np.asarray(v, dtype=np.float32)
    return MaskNetParams(out)


def dequantize_model(qparams: MaskNetParams) -> MaskNetParams:
    return MaskNetParams(
        {
            k: (v.dequantize().astype(np.float32) if isinstance(v, QuantTensor) else v)
            for k, v in qparams.tensors.items()
        }
    )


def int_matmul_reference(q_act: np.ndarray, q_w: np.ndarray) -> np.ndarray:
    """Plain int32 accumulation of ``q_act @ q_w.T`` (slow oracle for the fast path)."""
    return q_act.astype(np.int32) @ q_w.astype(np.int32).T


class QuantizedModel:
    """Int-valued float64 copies of quantized weights, prepared once per model."""

    def __init__(self, qparams: MaskNetParams, cfg: MaskNetConfig):
        if not qparams.quantized:
            raise ValueError("expected quantized parameters")
        qparams.check(cfg)
        self.cfg = cfg
        self.w: dict[str, tuple[np.ndarray, float]] = {}
        self.b: dict[str, np.ndarray] = {}
        for k, v in qparams.tensors.items():
            if isinstance(v, QuantTensor):
                self.w[k] = (v.values.astype(np.float64), float(v.scale))
            else:
                self.b[k] = np.asarray(v, dtype=np.float64)

    def affine(self, name: str, x: np.ndarray) -> np.ndarray:
        """``W x`` for one weight tensor with dynamically quantized ``x`` (..., in)."""
        qw, sw = self.w[name]
        qx, sx = quantize_vector(x)
        acc = qx @ qw.T
        return acc * (sw * sx)

    def conv(self, x: np.ndarray) -> np.ndarray:
        qw, sw = self.w["conv.w"]
        qx, sx = quantize_vector(x)
        acc = np.einsum("...fk,ck->...cf", conv_patches(qx, self.cfg.conv_kernel), qw)
        y = acc * (sw * sx[..., None]) + self.b["conv.b"][:, None]
        return np.maximum(y, 0.0).reshape(*x.shape[:-1], -1)

    def heads(self, top: np.ndarray):
        cfg = self.cfg
        mask = sigmoid(self.affine("mask.w", top) + self.b["mask.b"])
        a = top
        for j in range(len(cfg.head_hidden)):
            a = np.maximum(self.affine(f"noise{j}.w", a) + self.b[f"noise{j}.b"], 0.0)
        score = (self.affine("noise_out.w", a) + self.b["noise_out.b"])[..., 0]
        return mask, score


def _prepare(qparams, cfg) -> QuantizedModel:
    if isinstance(qparams, QuantizedModel):
        return qparams
    cache = getattr(qparams, "_qmodel", None)
    if cache is None or cache.cfg != cfg:
        cache = QuantizedModel(qparams, cfg)
        qparams._qmodel = cache
    return cache


def forward_step_quantized(qparams, cfg: MaskNetConfig, state: StreamState, frame, dvec):
    """Int8 counterpart of :func:`vflite.masknet.forward_step`; same contract."""
    qm = _prepare(qparams, cfg)
    x = np.asarray(frame, dtype=np.float64)
    d = _dvec_values(dvec)
    _check_inputs(cfg, x, d)
    if cfg.has_conv:
        x = qm.conv(x)
    u = np.concatenate([x, d])
    hs, cs = [], []
    for layer in range(cfg.lstm_layers):
        z = (
            qm.affine(f"lstm{layer}.w_ih", u)
            + qm.affine(f"lstm{layer}.w_hh", state.h[layer])
            + qm.b[f"lstm{layer}.b"]
        )
        h, c, _ = _lstm_cell(z, state.c[layer], cfg.lstm_units)
        hs.append(h)
        cs.append(c)
        u = h
    mask, score = qm.heads(u)
    return mask, float(score), StreamState(hs, cs, state.w_prev, state.frames + 1)


def forward_sequence_quantized(qparams, cfg: MaskNetConfig, frames, dvec):
    """Layer-at-a-time quantized forward over a whole sequence.

    Input projections and heads run as one matrix product over all frames;
    integer accumulation makes this bit-identical to folding
    :func:`forward_step_quantized`.
    """
    qm = _prepare(qparams, cfg)
    x = np.asarray(getattr(frames, "frames", frames), dtype=np.float64)
    d = _dvec_values(dvec)
    _check_inputs(cfg, x, d)
    t = x.shape[0]
    if cfg.has_conv:
        x = qm.conv(x)
    u = np.concatenate([x, np.broadcast_to(d, (t, d.shape[0]))], axis=1)
    hu = cfg.lstm_units
    for layer in range(cfg.lstm_layers):
        zx = qm.affine(f"lstm{layer}.w_ih", u)
        bias = qm.b[f"lstm{layer}.b"]
        h = np.zeros(hu)
        c = np.zeros(hu)
        out = np.zeros((t, hu))
        for step in range(t):
            z = zx[step] + qm.affine(f"lstm{layer}.w_hh", h) + bias
            h, c, _ = _lstm_cell(z, c, hu)
            out[step] = h
        u = out
    return qm.heads(u)
