"""Speaker conditioning vectors (d-vectors).

The embedder here is a fixed statistics summary of the reference audio, not
a trained speaker encoder: per-band mean and standard deviation of log-mel
frames, optionally projected to another width, then L2-normalised.
Externally computed embeddings can be loaded from VFD1 files instead.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError, NumericError, TooShortError
from .frontend import FeatureConfig, Variant, Waveform, extract

DEFAULT_DIM = 256
PROJECTION_SEED = 20200901
NORM_TOLERANCE = 1e-3


@dataclass
class DVector:
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64).reshape(-1)
        if not np.all(np.isfinite(self.values)):
            raise NumericError("d-vector contains non-finite values")
        norm = np.linalg.norm(self.values)
        if abs(norm - 1.0) > 1e-6:
            raise ValueError(f"d-vector must have unit norm, got {norm:.8f}")

    @property
    def dim(self) -> int:
        return self.values.shape[0]

    @classmethod
    def normalized(cls, values) -> "DVector":
        v = np.asarray(values, dtype=np.float64).reshape(-1)
        norm = np.linalg.norm(v)
        if not np.isfinite(norm) or norm == 0.0:
            raise NumericError("cannot normalise a zero or non-finite vector")
        return cls(v / norm)


def projection_matrix(in_dim: int, out_dim: int, seed: int = PROJECTION_SEED) -> np.ndarray:
    """Fixed random projection with orthonormal rows or columns, shape (out_dim, in_dim)."""
    rng = np.random.default_rng(seed)
    g = rng.standard_normal((max(in_dim, out_dim), min(in_dim, out_dim)))
    q, _ = np.linalg.qr(g)
    return q.T if out_dim < in_dim else q


def embed_reference(ref: Waveform, fcfg: FeatureConfig | None = None, dim: int = DEFAULT_DIM) -> DVector:
    """Statistics embedding of a reference recording (at least one second long)."""
    fcfg = (fcfg or FeatureConfig()).with_variant(Variant.FILTERBANK)
    if ref.duration_s < 1.0:
        raise TooShortError(f"reference audio is {ref.duration_s:.3f} s, need at least 1 s")
    fb = extract(ref, fcfg).frames
    stats = np.concatenate([fb.mean(axis=0), fb.std(axis=0)])
    if dim != stats.shape[0]:
        stats = projection_matrix(stats.shape[0], dim) @ stats
    return DVector.normalized(stats)


def cosine(a: DVector, b: DVector) -> float:
    return float(np.dot(a.values, b.values))


VFD_MAGIC = b"VFD1"


def save_dvector(v: DVector, path) -> None:
    payload = np.ascontiguousarray(v.values, dtype="<f4").tobytes()
    Path(path).write_bytes(VFD_MAGIC + struct.pack("<I", v.dim) + payload)


def load_dvector(path, expected_dim: int | None = None) -> DVector:
    """Read a VFD1 file.

    Values are returned exactly as stored when already unit norm to float32
    precision.  A vector within ``1e-3`` of unit norm is renormalised;
    anything further off is rejected.
    """
    data = Path(path).read_bytes()
    if len(data) < 8 or data[:4] != VFD_MAGIC:
        raise FormatError(f"{path}: bad magic, expected {VFD_MAGIC!r}")
    (dim,) = struct.unpack_from("<I", data, 4)
    if len(data) != 8 + 4 * dim:
        raise FormatError(f"{path}: header says D={dim} but payload has {len(data) - 8} bytes")
    if expected_dim is not None and dim != expected_dim:
        raise FormatError(f"{path}: d-vector has D={dim}, expected {expected_dim}")
    values = np.frombuffer(data[8:], dtype="<f4").astype(np.float64)
    if not np.all(np.isfinite(values)):
        raise FormatError(f"{path}: d-vector contains non-finite values")
    norm = float(np.linalg.norm(values))
    if abs(norm - 1.0) > NORM_TOLERANCE:
        raise FormatError(f"{path}: d-vector norm {norm:.6f} is not within {NORM_TOLERANCE} of 1")
    if abs(norm - 1.0) > 1e-6:
        values = values / norm
    return DVector(values)
