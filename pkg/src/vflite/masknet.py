"""Streaming mask network: frequency-only conv, d-vector concat, LSTM stack, two heads.

Shapes follow numpy row conventions: weight matrices are ``(out, in)`` and
sequences are time-major ``(T, F)``.  All arithmetic runs in float64 no
matter how the parameters are stored.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .errors import NumericError
from .frontend import FeatureSequence, Variant


@dataclass(frozen=True)
class MaskNetConfig:
    input_dim: int
    dvec_dim: int = 256
    lstm_layers: int = 3
    lstm_units: int = 512
    head_hidden: tuple[int, ...] = (64, 64)
    conv_kernel: int | None = None
    conv_channels: int = 0
    variant: Variant = Variant.STACKED_FILTERBANK
    log_domain_mask: bool = False

    def __post_init__(self):
        object.__setattr__(self, "variant", Variant.parse(self.variant))
        object.__setattr__(self, "head_hidden", tuple(int(h) for h in self.head_hidden))
        if self.lstm_layers < 1:
            raise ValueError("lstm_layers must be >= 1")
        widths = [self.input_dim, self.dvec_dim, self.lstm_units, *self.head_hidden]
        if min(widths) < 1:
            raise ValueError("all widths must be >= 1")
        if self.conv_kernel is not None and (self.conv_kernel < 1 or self.conv_channels < 1):
            raise ValueError("conv needs kernel_width >= 1 and channels >= 1")

    @property
    def has_conv(self) -> bool:
        return self.conv_kernel is not None

    @property
    def lstm_input_dim(self) -> int:
        front = self.conv_channels * self.input_dim if self.has_conv else self.input_dim
        return front + self.dvec_dim

    def to_dict(self) -> dict:
        d = asdict(self)
        d["variant"] = self.variant.name.lower()
        d["head_hidden"] = list(self.head_hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "MaskNetConfig":
        return cls(**d)

    def tensor_shapes(self) -> dict[str, tuple[int, ...]]:
        """Name -> shape of every trainable tensor, in serialization order."""
        shapes: dict[str, tuple[int, ...]] = {}
        if self.has_conv:
            shapes["conv.w"] = (self.conv_channels, self.conv_kernel)
            shapes["conv.b"] = (self.conv_channels,)
        h = self.lstm_units
        in_dim = self.lstm_input_dim
        for layer in range(self.lstm_layers):
            shapes[f"lstm{layer}.w_ih"] = (4 * h, in_dim)
            shapes[f"lstm{layer}.w_hh"] = (4 * h, h)
            shapes[f"lstm{layer}.b"] = (4 * h,)
            in_dim = h
        shapes["mask.w"] = (self.input_dim, h)
        shapes["mask.b"] = (self.input_dim,)
        prev = h
        for j, width in enumerate(self.head_hidden):
            shapes[f"noise{j}.w"] = (width, prev)
            shapes[f"noise{j}.b"] = (width,)
            prev = width
        shapes["noise_out.w"] = (1, prev)
        shapes["noise_out.b"] = (1,)
        return shapes

    def num_parameters(self) -> int:
        return sum(int(np.prod(s)) for s in self.tensor_shapes().values())


def default_config(input_dim: int = 512, dvec_dim: int = 256, small: bool = False) -> MaskNetConfig:
    """3x512 (or 3x256 with ``small``) LSTM stack, no conv."""
    return MaskNetConfig(input_dim=input_dim, dvec_dim=dvec_dim, lstm_units=256 if small else 512)


def toy_config(input_dim: int = 6, dvec_dim: int = 4, **kw) -> MaskNetConfig:
    kw.setdefault("lstm_layers", 2)
    kw.setdefault("lstm_units", 8)
    kw.setdefault("head_hidden", (8, 8))
    kw.setdefault("variant", Variant.FILTERBANK)
    return MaskNetConfig(input_dim=input_dim, dvec_dim=dvec_dim, **kw)


@dataclass
class MaskNetParams:
    """Named network tensors. Values are float arrays, or ``QuantTensor``s once quantized."""

    tensors: dict
    _f64: dict | None = field(default=None, repr=False, compare=False)

    @property
    def quantized(self) -> bool:
        return any(not isinstance(v, np.ndarray) for v in self.tensors.values())

    def __getitem__(self, name):
        return self.tensors[name]

    def f64(self) -> dict[str, np.ndarray]:
        """Float64 views of all float tensors (cached; params are treated as immutable)."""
        if self._f64 is None:
            self._f64 = {
                k: np.asarray(v, dtype=np.float64)
                for k, v in self.tensors.items()
                if isinstance(v, np.ndarray)
            }
        return self._f64

    def astype(self, dtype) -> "MaskNetParams":
        return MaskNetParams({k: np.asarray(v, dtype=dtype).copy() for k, v in self.tensors.items()})

    def check(self, cfg: MaskNetConfig) -> None:
        shapes = cfg.tensor_shapes()
        if set(shapes) != set(self.tensors):
            missing = set(shapes) ^ set(self.tensors)
            raise ValueError(f"parameter names do not match config: {sorted(missing)}")
        for name, shape in shapes.items():
            got = tuple(self.tensors[name].shape)
            if got != shape:
                raise ValueError(f"{name}: shape {got} does not match config {shape}")
            scale = getattr(self.tensors[name], "scale", 1.0)
            if not (np.isfinite(scale) and scale > 0):
                raise NumericError(f"{name}: quantization scale must be positive")
        for name, v in self.f64().items():
            if not np.all(np.isfinite(v)):
                raise NumericError(f"{name} contains non-finite values")


def init_params(cfg: MaskNetConfig, rng: np.random.Generator | int = 0) -> MaskNetParams:
    """Uniform(+-1/sqrt(fan_in)) weights, zero biases, LSTM forget-gate bias 1."""
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    tensors = {}
    for name, shape in cfg.tensor_shapes().items():
        if len(shape) == 2:
            bound = 1.0 / np.sqrt(shape[1])
            tensors[name] = rng.uniform(-bound, bound, size=shape).astype(np.float32)
        else:
            tensors[name] = np.zeros(shape, dtype=np.float32)
    h = cfg.lstm_units
    for layer in range(cfg.lstm_layers):
        tensors[f"lstm{layer}.b"][h : 2 * h] = 1.0
    return MaskNetParams(tensors)


@dataclass
class StreamState:
    h: list[np.ndarray]
    c: list[np.ndarray]
    w_prev: float = 0.0
    frames: int = 0

    @classmethod
    def initial(cls, cfg: MaskNetConfig, w0: float = 0.0) -> "StreamState":
        zeros = [np.zeros(cfg.lstm_units) for _ in range(cfg.lstm_layers)]
        return cls(h=zeros, c=[z.copy() for z in zeros], w_prev=w0)


# ---------------------------------------------------------------------------
# building blocks


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def conv_patches(x: np.ndarray, kernel: int) -> np.ndarray:
    """(..., F) -> (..., F, kernel) zero-padded 'same' windows along frequency."""
    left = (kernel - 1) // 2
    pad = [(0, 0)] * (x.ndim - 1) + [(left, kernel - 1 - left)]
    xp = np.pad(x, pad)
    return np.lib.stride_tricks.sliding_window_view(xp, kernel, axis=-1)


def _conv_forward(p: dict, x: np.ndarray, kernel: int):
    """(..., F) -> relu conv output flattened channel-major (..., C*F), plus patches."""
    patches = conv_patches(x, kernel)
    y = np.einsum("...fk,ck->...cf", patches, p["conv.w"]) + p["conv.b"][:, None]
    y = np.maximum(y, 0.0)
    return y.reshape(*x.shape[:-1], -1), patches


def _lstm_cell(z: np.ndarray, c_prev: np.ndarray, h_units: int):
    i = sigmoid(z[..., :h_units])
    f = sigmoid(z[..., h_units : 2 * h_units])
    g = np.tanh(z[..., 2 * h_units : 3 * h_units])
    o = sigmoid(z[..., 3 * h_units :])
    c = f * c_prev + i * g
    h = o * np.tanh(c)
    return h, c, (i, f, g, o)


def _noise_head(p: dict, cfg: MaskNetConfig, top: np.ndarray):
    acts = []
    a = top
    for j in range(len(cfg.head_hidden)):
        a = np.maximum(a @ p[f"noise{j}.w"].T + p[f"noise{j}.b"], 0.0)
        acts.append(a)
    score = (a @ p["noise_out.w"].T + p["noise_out.b"])[..., 0]
    return score, acts


def _check_inputs(cfg: MaskNetConfig, frames: np.ndarray, dvec: np.ndarray) -> None:
    if frames.shape[-1] != cfg.input_dim:
        raise ValueError(f"frame width {frames.shape[-1]} != model input_dim {cfg.input_dim}")
    if dvec.shape[-1] != cfg.dvec_dim:
        raise ValueError(f"d-vector width {dvec.shape[-1]} != model dvec_dim {cfg.dvec_dim}")


def _dvec_values(dvec) -> np.ndarray:
    return np.asarray(getattr(dvec, "values", dvec), dtype=np.float64)


# ---------------------------------------------------------------------------
# forward passes


def forward_step(params: MaskNetParams, cfg: MaskNetConfig, state: StreamState, frame, dvec):
    """Advance one stream by one frame.

    Returns ``(mask, noise_score, new_state)``; ``state`` is left untouched.
    """
    p = params.f64()
    x = np.asarray(frame, dtype=np.float64)
    d = _dvec_values(dvec)
    _check_inputs(cfg, x, d)
    if len(state.h) != cfg.lstm_layers or state.h[0].shape[0] != cfg.lstm_units:
        raise ValueError("stream state does not match model config")
    if cfg.has_conv:
        x, _ = _conv_forward(p, x, cfg.conv_kernel)
    u = np.concatenate([x, d])
    hs, cs = [], []
    for layer in range(cfg.lstm_layers):
        z = p[f"lstm{layer}.w_ih"] @ u + p[f"lstm{layer}.w_hh"] @ state.h[layer] + p[f"lstm{layer}.b"]
        h, c, _ = _lstm_cell(z, state.c[layer], cfg.lstm_units)
        hs.append(h)
        cs.append(c)
        u = h
    mask = sigmoid(p["mask.w"] @ u + p["mask.b"])
    score, _ = _noise_head(p, cfg, u)
    return mask, float(score), StreamState(hs, cs, state.w_prev, state.frames + 1)


def forward_batch(params: MaskNetParams, cfg: MaskNetConfig, frames: np.ndarray, dvecs: np.ndarray, keep_cache=False):
    """Batched forward from fresh state over ``frames`` (B, T, F) and ``dvecs`` (B, D).

    Returns ``(masks (B,T,F), scores (B,T))`` and, with ``keep_cache``, the
    activations needed by :func:`vflite.training.backward`.
    """
    p = params.f64()
    x = np.asarray(frames, dtype=np.float64)
    d = np.asarray(dvecs, dtype=np.float64)
    _check_inputs(cfg, x, d)
    b, t, _ = x.shape
    hu = cfg.lstm_units
    cache: dict = {"x": x}
    if cfg.has_conv:
        x, patches = _conv_forward(p, x, cfg.conv_kernel)
        cache["conv_patches"] = patches
        cache["conv_out"] = x
    u = np.concatenate([x, np.broadcast_to(d[:, None, :], (b, t, d.shape[1]))], axis=-1)
    layers = []
    for layer in range(cfg.lstm_layers):
        w_hh = p[f"lstm{layer}.w_hh"]
        zx = u @ p[f"lstm{layer}.w_ih"].T + p[f"lstm{layer}.b"]
        hseq = np.zeros((b, t + 1, hu))
        cseq = np.zeros((b, t + 1, hu))
        gates = np.zeros((b, t, 4 * hu))
        for step in range(t):
            z = zx[:, step] + hseq[:, step] @ w_hh.T
            h, c, (gi, gf, gg, go) = _lstm_cell(z, cseq[:, step], hu)
            hseq[:, step + 1] = h
            cseq[:, step + 1] = c
            if keep_cache:
                gates[:, step] = np.concatenate([gi, gf, gg, go], axis=-1)
        layers.append({"u": u, "h": hseq, "c": cseq, "gates": gates})
        u = hseq[:, 1:]
    masks = sigmoid(u @ p["mask.w"].T + p["mask.b"])
    scores, head_acts = _noise_head(p, cfg, u)
    if not keep_cache:
        return masks, scores
    cache.update(layers=layers, top=u, masks=masks, scores=scores, head_acts=head_acts, dvecs=d)
    return masks, scores, cache


def forward_sequence(params: MaskNetParams, cfg: MaskNetConfig, frames, dvec):
    """Whole-sequence forward from fresh state: ``(masks (T,F), noise_scores (T,))``."""
    x = frames.frames if isinstance(frames, FeatureSequence) else np.asarray(frames)
    masks, scores = forward_batch(params, cfg, x[None], _dvec_values(dvec)[None])
    return masks[0], scores[0]


# ---------------------------------------------------------------------------
# masking


def apply_mask(s_in: FeatureSequence, masks, log_domain: bool = False) -> FeatureSequence:
    """Enhanced features from a T x F mask in [0, 1].

    FFT magnitudes are multiplied cellwise.  log(1+x) filterbanks are masked in
    the linear energy domain, ``log(1 + m * (exp(S) - 1))``, unless
    ``log_domain`` asks for the plain cellwise product.
    """
    m = np.asarray(masks, dtype=np.float64)
    if m.shape != s_in.shape:
        raise ValueError(f"mask shape {m.shape} != feature shape {s_in.shape}")
    if np.any(m < 0.0) or np.any(m > 1.0) or not np.all(np.isfinite(m)):
        raise ValueError("mask values must lie in [0, 1]")
    return FeatureSequence(mask_values(s_in.frames, m, s_in.variant, log_domain), s_in.variant, s_in.frame_hop_s)


def mask_values(s: np.ndarray, m: np.ndarray, variant: Variant, log_domain: bool = False) -> np.ndarray:
    """Unchecked array form of :func:`apply_mask`."""
    if variant == Variant.FFT_MAGNITUDE or log_domain:
        return m * s
    return np.log1p(m * np.expm1(s))


def mask_derivative(s: np.ndarray, m: np.ndarray, variant: Variant, log_domain: bool = False) -> np.ndarray:
    """d S_enh / d m, cellwise."""
    if variant == Variant.FFT_MAGNITUDE or log_domain:
        return s
    e = np.expm1(s)
    return e / (1.0 + m * e)


def stream_outputs(params, cfg, frames: Sequence[np.ndarray], dvec):
    """Fold :func:`forward_step` over ``frames`` from fresh state (test helper and oracle)."""
    state = StreamState.initial(cfg)
    masks, scores = [], []
    for fr in frames:
        m, s, state = forward_step(params, cfg, state, fr, dvec)
        masks.append(m)
        scores.append(s)
    return np.array(masks), np.array(scores)
