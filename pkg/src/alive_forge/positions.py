"""Shared-timeline positions for audio and video latents, plus rotary embedding.

The audio latent grid is the reference coordinate system: audio latents sit at
integer positions 0..L_a-1, and each video latent is mapped to the centroid of
the audio indices its time span covers.  Two latents that overlap in physical
time therefore land on numerically close positions regardless of the rate
mismatch between the modalities.  Reference images get strictly negative
positions so they act as context anchors before the generated timeline.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import AlignmentError, ConfigError

AUDIO_BASIS = "audio-indexed"


@dataclass(frozen=True)
class ModalityTiming:
    """Latent grid of one modality: how many latents, at what rate."""

    latent_count: int
    latents_per_second: float
    start_offset_seconds: float = 0.0

    def __post_init__(self):
        if self.latent_count < 1:
            raise ConfigError(f"latent_count must be >= 1, got {self.latent_count}")
        if self.latents_per_second <= 0:
            raise ConfigError(f"latents_per_second must be > 0, got {self.latents_per_second}")

    @property
    def duration(self):
        return self.latent_count / self.latents_per_second


@dataclass(frozen=True)
class PositionVector:
    """Per-latent positions expressed on the audio-indexed timeline."""

    positions: tuple
    coordinate_basis: str = AUDIO_BASIS

    def __len__(self):
        return len(self.positions)

    def as_array(self):
        return np.asarray(self.positions, dtype=np.float64)

    def validate_increasing(self):
        arr = self.as_array()
        if len(arr) > 1 and not np.all(np.diff(arr) > 0):
            raise AlignmentError("positions are not strictly increasing")
        return self


def audio_positions(t: ModalityTiming) -> PositionVector:
    """Audio latents sit at integer positions 0..L_a-1."""
    return PositionVector(tuple(float(i) for i in range(t.latent_count)))


def video_positions(v: ModalityTiming, a: ModalityTiming) -> PositionVector:
    """Map each video latent to the centroid of the audio indices it covers.

    For an integer rate ratio rho = L_a / L_v this closes to
    (i + 0.5) * rho - 0.5; for non-integer ratios the centroid is the
    time-overlap-weighted mean of the covered audio indices.
    """
    if abs(v.duration - a.duration) > 1e-9:
        raise AlignmentError(
            f"modalities cover different durations: video {v.duration}s vs audio {a.duration}s"
        )
    rho = a.latent_count / v.latent_count
    if abs(rho - round(rho)) < 1e-12:
        rho = float(round(rho))
        pos = tuple((i + 0.5) * rho - 0.5 for i in range(v.latent_count))
    else:
        pos = tuple(_overlap_centroid(i, v, a) for i in range(v.latent_count))
    return PositionVector(pos).validate_increasing()


def _overlap_centroid(i, v: ModalityTiming, a: ModalityTiming):
    """Time-overlap-weighted mean audio index covered by video latent i."""
    t0 = i / v.latents_per_second
    t1 = (i + 1) / v.latents_per_second
    j0 = int(np.floor(t0 * a.latents_per_second))
    j1 = int(np.ceil(t1 * a.latents_per_second))
    total = 0.0
    weighted = 0.0
    for j in range(j0, min(j1, a.latent_count)):
        a0 = j / a.latents_per_second
        a1 = (j + 1) / a.latents_per_second
        w = min(t1, a1) - max(t0, a0)
        if w > 0:
            total += w
            weighted += w * j
    return weighted / total


def reference_positions(k_refs: int, phi: float) -> PositionVector:
    """Temporal indices for reference images: the k-th reference sits at -phi*k.

    Returned in reference order (k = 1..K), so the sequence is decreasing;
    every entry is strictly below any generated-timeline position.
    """
    if k_refs < 1:
        raise ConfigError(f"k_refs must be >= 1, got {k_refs}")
    if phi <= 0:
        raise ConfigError(f"phi must be > 0, got {phi}")
    return PositionVector(tuple(-phi * k for k in range(1, k_refs + 1)))


@dataclass(frozen=True)
class RotaryTable:
    """Precomputed per-pair angle frequencies for one head dimension."""

    half_dim: int
    base: float = 10000.0
    freqs: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.half_dim < 1:
            raise ConfigError(f"half_dim must be >= 1, got {self.half_dim}")
        d = 2 * self.half_dim
        freqs = self.base ** (-np.arange(0, d, 2, dtype=np.float64) / d)
        object.__setattr__(self, "freqs", freqs)

    @classmethod
    def for_head_dim(cls, head_dim: int, base: float = 10000.0) -> "RotaryTable":
        if head_dim % 2 != 0:
            raise ConfigError(f"rotary requires an even head dimension, got {head_dim}")
        return cls(half_dim=head_dim // 2, base=base)

    def angles(self, positions) -> np.ndarray:
        """Outer product positions x freqs -> (len, half_dim) rotation angles."""
        pos = np.asarray(positions, dtype=np.float64)
        return pos[:, None] * self.freqs[None, :]


def apply_rotary(q_or_k, pos: PositionVector, table: RotaryTable):
    """Rotate channel pairs of a (len, heads, head_dim) array by pos * freq.

    Positions may be arbitrary reals (the continuous-time generalization);
    each channel pair's norm is preserved exactly up to f64 rounding.
    Accepts either a numpy array or a Tensor; returns the same kind.
    """
    from . import tensor as T

    is_tensor = isinstance(q_or_k, T.Tensor)
    arr = q_or_k.data if is_tensor else np.asarray(q_or_k, dtype=np.float64)
    if arr.shape[-1] != 2 * table.half_dim:
        raise ConfigError(
            f"head dim {arr.shape[-1]} does not match rotary table half_dim {table.half_dim}"
        )
    if arr.shape[0] != len(pos):
        raise AlignmentError(f"{arr.shape[0]} tokens but {len(pos)} positions")
    ang = table.angles(pos.positions)  # (len, half_dim)
    cos = np.cos(ang)[:, None, :]      # broadcast over heads
    sin = np.sin(ang)[:, None, :]
    if is_tensor:
        return T.rotate_pairs(q_or_k, cos, sin)
    out = np.empty_like(arr)
    even, odd = arr[..., 0::2], arr[..., 1::2]
    out[..., 0::2] = even * cos - odd * sin
    out[..., 1::2] = even * sin + odd * cos
    return out


def require_same_basis(a: PositionVector, b: PositionVector):
    if a.coordinate_basis != b.coordinate_basis:
        raise AlignmentError(
            f"coordinate bases differ: {a.coordinate_basis} vs {b.coordinate_basis}"
        )
