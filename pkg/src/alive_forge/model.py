"""Joint audio-video diffusion transformer.

Layout per forward pass:

* Audio branch: speech tokens are embedded and concatenated in front of the
  noised audio latents, then run through `audio_blocks` transformer blocks
  (self-attention on shared-timeline rotary positions, caption cross-attention,
  MLP, all modulated by zero-initialized adaptive layer norm).
* Video branch: optional reference latents are prepended at negative timeline
  positions, then `video_dual_blocks` blocks with bidirectional fusion against
  the audio stream, then `video_single_blocks` blocks with audio-to-video
  fusion only.
* Fusion is time-aligned cross-attention: queries and keys are rotated by
  their positions on the shared audio-indexed timeline, and the output passes
  through a timestep-conditioned scale/shift/gate (gate zero-initialized, so a
  fresh model computes two fully independent branches).

The audio stream never receives information from the single-stream stage, and
with the mutual signal disabled the two branches are computed by the exact
same code path as the standalone branch forwards, so independence is bit-exact.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import AlignmentError, ConfigError
from .positions import (
    AUDIO_BASIS,
    ModalityTiming,
    PositionVector,
    RotaryTable,
    audio_positions,
    reference_positions,
    require_same_basis,
    video_positions,
)

# Reserved caption-table rows.
NULL_TEXT_ID = 0
NEG_TEXT_ID = 1
FIRST_CONTENT_ID = 2

# Special speech-token ids; remaining rows cover a byte-level alphabet.
SPEECH_PAD_ID = 0
SPEECH_W_OPEN = 1   # <W>
SPEECH_W_CLOSE = 2  # </W>
SPEECH_I_OPEN = 3   # <I>
SPEECH_I_CLOSE = 4  # </I>
SPEECH_BYTE_BASE = 5


def encode_speech(text: str, vocab: int) -> list[int]:
    """Byte-level speech-token encoding with tag markers as special ids."""
    out = [SPEECH_W_OPEN]
    for b in text.encode("utf-8"):
        out.append(SPEECH_BYTE_BASE + (b % (vocab - SPEECH_BYTE_BASE)))
    out.append(SPEECH_W_CLOSE)
    return out


@dataclass
class DiTConfig:
    """Structural parameters of the joint model.

    The first block of fields matches the model config file schema verbatim;
    the trailing fields are desk-scale knobs with sane defaults.
    """

    video_dual_blocks: int = 2
    video_single_blocks: int = 2
    audio_blocks: int = 4
    heads: int = 2
    video_head_dim: int = 16
    audio_head_dim: int = 8
    video_in_dim: int = 4
    video_out_dim: int = 4
    audio_in_dim: int = 4
    audio_out_dim: int = 4
    mutual_attention: bool = True

    mlp_ratio: int = 2
    time_embed_dim: int = 16
    caption_embed_dim: int = 16
    caption_tokens: int = 2
    caption_vocab: int = 16
    speech_vocab: int = 64
    rotary_base: float = 10000.0
    ref_phi: float = 10.0

    def __post_init__(self):
        for name in ("video_dual_blocks", "video_single_blocks", "audio_blocks", "heads"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.video_head_dim % 2 or self.audio_head_dim % 2:
            raise ConfigError("head dims must be even (rotary pairs channels)")
        if self.audio_blocks < self.video_dual_blocks:
            raise ConfigError("audio_blocks must be >= video_dual_blocks (one per fusion round)")
        if self.caption_vocab < FIRST_CONTENT_ID + 1:
            raise ConfigError("caption_vocab too small for reserved null/negative rows")

    @property
    def video_dim(self):
        return self.heads * self.video_head_dim

    @property
    def audio_dim(self):
        return self.heads * self.audio_head_dim

    @classmethod
    def production_scale(cls) -> "DiTConfig":
        """The full-scale layout this desk model is shaped after."""
        return cls(
            video_dual_blocks=16,
            video_single_blocks=40,
            audio_blocks=32,
            heads=24,
            video_head_dim=128,
            audio_head_dim=64,
            video_in_dim=36,
            video_out_dim=16,
            audio_in_dim=32,
            audio_out_dim=32,
            mlp_ratio=4,
            time_embed_dim=256,
            caption_embed_dim=1024,
            caption_vocab=32768,
            speech_vocab=32768,
        )


@dataclass
class ConditioningState:
    """Which of the conditioning signals are active for one forward pass."""

    text_condition: str = "positive"        # positive | negative | null
    caption_ids: np.ndarray | None = None   # (B,), required when positive
    mutual_signal: bool = True
    references: np.ndarray | None = None    # (B, K, video_in_dim)
    speech_tokens: np.ndarray | None = None  # (B, S) int

    def __post_init__(self):
        if self.text_condition not in ("positive", "negative", "null"):
            raise ConfigError(f"unknown text_condition {self.text_condition!r}")
        if self.text_condition == "positive" and self.caption_ids is None:
            raise ConfigError("positive text condition requires caption_ids")


@dataclass(frozen=True)
class TimestepEmbedding:
    """Deterministic sinusoidal features of a diffusion time in [0, 1]."""

    t: np.ndarray
    vector: np.ndarray

    @classmethod
    def of(cls, t, dim: int) -> "TimestepEmbedding":
        t = np.atleast_1d(np.asarray(t, dtype=np.float64))
        return cls(t=t, vector=timestep_features(t, dim))


def timestep_features(t, dim: int) -> np.ndarray:
    """(B,) times -> (B, dim) sin/cos features, log-spaced frequencies."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(np.linspace(0.0, np.log(1000.0), half))
    ang = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=-1)


@dataclass
class LatentSequence:
    """A batch of timed latents for one modality: (B, L, C) plus its grid."""

    data: np.ndarray
    timing: ModalityTiming

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 3:
            raise ConfigError(f"latents must be (batch, length, channels), got {self.data.shape}")
        if self.data.shape[1] != self.timing.latent_count:
            raise AlignmentError(
                f"latent length {self.data.shape[1]} != timing latent_count {self.timing.latent_count}"
            )


# ---------------------------------------------------------------------------
# parameter registry
# ---------------------------------------------------------------------------

def _block_specs(prefix, dim, cap_dim, mlp_ratio):
    """Self-attention + caption cross-attention + MLP block parameters."""
    hidden = dim * mlp_ratio
    yield f"{prefix}.attn.wqkv", (dim, 3 * dim), "weight"
    yield f"{prefix}.attn.bqkv", (3 * dim,), "bias"
    yield f"{prefix}.attn.wo", (dim, dim), "weight"
    yield f"{prefix}.attn.bo", (dim,), "bias"
    yield f"{prefix}.mod.w", (dim, 6 * dim), "zero"
    yield f"{prefix}.mod.b", (6 * dim,), "zero"
    yield f"{prefix}.cap.wq", (dim, dim), "weight"
    yield f"{prefix}.cap.bq", (dim,), "bias"
    yield f"{prefix}.cap.wk", (cap_dim, dim), "weight"
    yield f"{prefix}.cap.wv", (cap_dim, dim), "weight"
    yield f"{prefix}.cap.wo", (dim, dim), "weight"
    yield f"{prefix}.cap.bo", (dim,), "bias"
    yield f"{prefix}.cap.gate", (dim,), "zero"
    yield f"{prefix}.mlp.w1", (dim, hidden), "weight"
    yield f"{prefix}.mlp.b1", (hidden,), "bias"
    yield f"{prefix}.mlp.w2", (hidden, dim), "weight"
    yield f"{prefix}.mlp.b2", (dim,), "bias"


def _fusion_specs(prefix, q_dim, kv_dim):
    """Time-aligned cross-attention module parameters."""
    yield f"{prefix}.wq", (q_dim, q_dim), "weight"
    yield f"{prefix}.bq", (q_dim,), "bias"
    yield f"{prefix}.wk", (kv_dim, q_dim), "weight"
    yield f"{prefix}.wv", (kv_dim, q_dim), "weight"
    yield f"{prefix}.wo", (q_dim, q_dim), "weight"
    yield f"{prefix}.bo", (q_dim,), "bias"
    yield f"{prefix}.tmod.w", (q_dim, 3 * q_dim), "zero"
    yield f"{prefix}.tmod.b", (3 * q_dim,), "zero"


def parameter_specs(cfg: DiTConfig):
    """Yield (name, shape, init_kind) for every trainable parameter.

    The model constructor and the symbolic parameter counter both consume
    this, so the two can never drift apart.
    """
    dv, da = cfg.video_dim, cfg.audio_dim
    cap = cfg.caption_embed_dim

    yield "video.in_proj.w", (cfg.video_in_dim, dv), "weight"
    yield "video.in_proj.b", (dv,), "bias"
    yield "video.t_mlp.w1", (cfg.time_embed_dim, dv), "weight"
    yield "video.t_mlp.b1", (dv,), "bias"
    yield "video.t_mlp.w2", (dv, dv), "weight"
    yield "video.t_mlp.b2", (dv,), "bias"
    yield "video.caption_table", (cfg.caption_vocab, cfg.caption_tokens * cap), "table"
    for i in range(cfg.video_dual_blocks):
        yield from _block_specs(f"video.dual{i}", dv, cap, cfg.mlp_ratio)
        yield from _fusion_specs(f"video.dual{i}.xattn", dv, da)
    for j in range(cfg.video_single_blocks):
        yield from _block_specs(f"video.single{j}", dv, cap, cfg.mlp_ratio)
        yield from _fusion_specs(f"video.single{j}.xattn", dv, da)
    yield "video.final.mod.w", (dv, 2 * dv), "zero"
    yield "video.final.mod.b", (2 * dv,), "zero"
    yield "video.out_proj.w", (dv, cfg.video_out_dim), "zero"
    yield "video.out_proj.b", (cfg.video_out_dim,), "zero"

    yield "audio.in_proj.w", (cfg.audio_in_dim, da), "weight"
    yield "audio.in_proj.b", (da,), "bias"
    yield "audio.speech_table", (cfg.speech_vocab, da), "table"
    yield "audio.t_mlp.w1", (cfg.time_embed_dim, da), "weight"
    yield "audio.t_mlp.b1", (da,), "bias"
    yield "audio.t_mlp.w2", (da, da), "weight"
    yield "audio.t_mlp.b2", (da,), "bias"
    yield "audio.caption_table", (cfg.caption_vocab, cfg.caption_tokens * cap), "table"
    for i in range(cfg.audio_blocks):
        yield from _block_specs(f"audio.block{i}", da, cap, cfg.mlp_ratio)
    yield "audio.final.mod.w", (da, 2 * da), "zero"
    yield "audio.final.mod.b", (2 * da,), "zero"
    yield "audio.out_proj.w", (da, cfg.audio_out_dim), "zero"
    yield "audio.out_proj.b", (cfg.audio_out_dim,), "zero"

    # Audio-side fusion (audio queries video) exists only in the dual rounds.
    for i in range(cfg.video_dual_blocks):
        yield from _fusion_specs(f"v2a_cross.block{i}", da, dv)


def param_count(cfg: DiTConfig) -> dict:
    """Symbolic per-group parameter counts; never allocates the arrays."""
    counts = {"video": 0, "audio": 0, "v2a_cross": 0, "total": 0}
    for name, shape, _ in parameter_specs(cfg):
        n = int(np.prod(shape))
        counts[group_of(name)] += n
        counts["total"] += n
    return counts


def group_of(name: str) -> str:
    """Learning-rate group of a parameter: video, audio, or v2a_cross."""
    for g in ("video", "audio", "v2a_cross"):
        if name.startswith(g + "."):
            return g
    raise ConfigError(f"parameter {name!r} belongs to no learning-rate group")


# ---------------------------------------------------------------------------
# model
# ---------------------------------------------------------------------------

def _linear(x, w, b=None):
    out = T.matmul(x, w)
    return out if b is None else T.add(out, b)


def _to_heads(x, heads, head_dim):
    # (B, L, H*hd) -> (B, H, L, hd)
    b, l = x.data.shape[0], x.data.shape[1]
    return T.transpose(T.reshape(x, (b, l, heads, head_dim)), (0, 2, 1, 3))


def _from_heads(x):
    # (B, H, L, hd) -> (B, L, H*hd)
    b, h, l, hd = x.data.shape
    return T.reshape(T.transpose(x, (0, 2, 1, 3)), (b, l, h * hd))


def _attend(q, k, v, head_dim):
    scores = T.mul(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(head_dim))
    return T.matmul(T.softmax(scores, axis=-1), v)


class JointAVDiT:
    """The joint model: parameter store plus the forward passes.

    A model instance is single-threaded during forward/backward; a frozen
    instance may serve concurrent read-only forwards (parameters are only
    mutated by the optimizer).
    """

    def __init__(self, cfg: DiTConfig, seed: int = 0):
        self.cfg = cfg
        self.params: dict[str, T.Tensor] = {}
        rng = np.random.default_rng(np.random.SeedSequence(seed))
        for name, shape, kind in parameter_specs(cfg):
            if kind == "zero":
                data = np.zeros(shape)
            elif kind == "bias":
                data = np.zeros(shape)
            elif kind == "table":
                data = rng.normal(0.0, 1.0 / np.sqrt(shape[-1]), size=shape)
            else:  # weight
                data = rng.normal(0.0, 1.0 / np.sqrt(shape[0]), size=shape)
            self.params[name] = T.parameter(data, name)
        self._rot_cache: dict = {}
        self.forward_counts = {"mutual_on": 0, "mutual_off": 0}

    # -- parameter plumbing -------------------------------------------------

    def p(self, name):
        return self.params[name]

    def parameters(self):
        return list(self.params.values())

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def randomize_parameters(self, rng, std=0.05):
        """Overwrite every parameter with small random values.

        Gradient checks need the zero-initialized gates off their saddle,
        otherwise most of the network is disconnected from the loss.
        """
        for p in self.params.values():
            p.data = rng.normal(0.0, std, size=p.data.shape)

    def state_arrays(self):
        return {name: p.data for name, p in self.params.items()}

    def load_state_arrays(self, arrays):
        for name, p in self.params.items():
            if name not in arrays:
                raise ConfigError(f"checkpoint missing parameter {name!r}")
            if list(arrays[name].shape) != p.shape:
                raise ConfigError(
                    f"checkpoint shape mismatch for {name!r}: {list(arrays[name].shape)} vs {p.shape}"
                )
            p.data = np.ascontiguousarray(arrays[name], dtype=np.float64)

    # -- rotary helpers -----------------------------------------------------

    def _cos_sin(self, pos: PositionVector, head_dim: int):
        key = (pos.positions, head_dim)
        hit = self._rot_cache.get(key)
        if hit is None:
            table = RotaryTable.for_head_dim(head_dim, self.cfg.rotary_base)
            ang = table.angles(pos.positions)
            # broadcast layout: (1, 1, L, half) against (B, H, L, half)
            hit = (np.cos(ang)[None, None, :, :], np.sin(ang)[None, None, :, :])
            self._rot_cache[key] = hit
        return hit

    def _rotate(self, x_heads, pos: PositionVector, head_dim: int):
        cos, sin = self._cos_sin(pos, head_dim)
        return T.rotate_pairs(x_heads, cos, sin)

    # -- conditioning -------------------------------------------------------

    def caption_tokens(self, branch: str, state: ConditioningState, batch: int):
        """(B, caption_tokens, caption_embed_dim) caption key/value tokens."""
        if state.text_condition == "positive":
            ids = np.asarray(state.caption_ids, dtype=np.int64)
            if ids.shape != (batch,):
                raise ConfigError(f"caption_ids must be ({batch},), got {ids.shape}")
            if (ids < FIRST_CONTENT_ID).any() or (ids >= self.cfg.caption_vocab).any():
                raise ConfigError("caption id outside the content range")
        elif state.text_condition == "negative":
            ids = np.full(batch, NEG_TEXT_ID, dtype=np.int64)
        else:
            ids = np.full(batch, NULL_TEXT_ID, dtype=np.int64)
        flat = T.embedding(self.p(f"{branch}.caption_table"), ids)
        return T.reshape(flat, (batch, self.cfg.caption_tokens, self.cfg.caption_embed_dim))

    def _t_vector(self, branch: str, t: np.ndarray):
        feats = T.Tensor(timestep_features(t, self.cfg.time_embed_dim))
        h = T.silu(_linear(feats, self.p(f"{branch}.t_mlp.w1"), self.p(f"{branch}.t_mlp.b1")))
        return T.silu(_linear(h, self.p(f"{branch}.t_mlp.w2"), self.p(f"{branch}.t_mlp.b2")))

    # -- blocks -------------------------------------------------------------

    def _block(self, prefix, x, cap_tokens, t_vec, pos, dim, head_dim):
        """Pre-norm transformer block with adaptive modulation.

        All three sub-layers are gated; with the modulation weights at their
        zero initialization the block is exactly the identity.
        """
        b = x.data.shape[0]
        mod = _linear(t_vec, self.p(f"{prefix}.mod.w"), self.p(f"{prefix}.mod.b"))
        chunks = [T.reshape(T.narrow(mod, 1, i * dim, dim), (b, 1, dim)) for i in range(6)]
        a1, b1, g1, a2, b2, g2 = chunks

        h = T.add(T.mul(T.normalize(x), T.add(a1, 1.0)), b1)
        qkv = _linear(h, self.p(f"{prefix}.attn.wqkv"), self.p(f"{prefix}.attn.bqkv"))
        q = _to_heads(T.narrow(qkv, 2, 0, dim), self.cfg.heads, head_dim)
        k = _to_heads(T.narrow(qkv, 2, dim, dim), self.cfg.heads, head_dim)
        v = _to_heads(T.narrow(qkv, 2, 2 * dim, dim), self.cfg.heads, head_dim)
        q = self._rotate(q, pos, head_dim)
        k = self._rotate(k, pos, head_dim)
        attn = _linear(_from_heads(_attend(q, k, v, head_dim)),
                       self.p(f"{prefix}.attn.wo"), self.p(f"{prefix}.attn.bo"))
        x = T.add(x, T.mul(g1, attn))

        cap = self._caption_cross(prefix, x, cap_tokens, dim, head_dim)
        x = T.add(x, cap)

        h = T.add(T.mul(T.normalize(x), T.add(a2, 1.0)), b2)
        h = _linear(T.silu(_linear(h, self.p(f"{prefix}.mlp.w1"), self.p(f"{prefix}.mlp.b1"))),
                    self.p(f"{prefix}.mlp.w2"), self.p(f"{prefix}.mlp.b2"))
        return T.add(x, T.mul(g2, h))

    def _caption_cross(self, prefix, x, cap_tokens, dim, head_dim):
        q = _to_heads(_linear(T.normalize(x), self.p(f"{prefix}.cap.wq"), self.p(f"{prefix}.cap.bq")),
                      self.cfg.heads, head_dim)
        k = _to_heads(_linear(cap_tokens, self.p(f"{prefix}.cap.wk")), self.cfg.heads, head_dim)
        v = _to_heads(_linear(cap_tokens, self.p(f"{prefix}.cap.wv")), self.cfg.heads, head_dim)
        out = _linear(_from_heads(_attend(q, k, v, head_dim)),
                      self.p(f"{prefix}.cap.wo"), self.p(f"{prefix}.cap.bo"))
        return T.mul(self.p(f"{prefix}.cap.gate"), out)

    def ta_cross_attention(self, prefix, query_stream, key_value_stream,
                           q_positions: PositionVector, kv_positions: PositionVector,
                           t_vec, q_dim, head_dim):
        """Time-aligned cross-attention; returns the gated fusion delta.

        Queries and keys are rotated by their positions on the shared
        timeline, so attention logits depend on the physical time offset
        between tokens of the two modalities.  The output is normalized and
        rescaled by a timestep-conditioned (scale, shift, gate); the gate is
        zero at initialization, making the delta exactly zero.
        """
        require_same_basis(q_positions, kv_positions)
        b = query_stream.data.shape[0]
        q = _to_heads(_linear(query_stream, self.p(f"{prefix}.wq"), self.p(f"{prefix}.bq")),
                      self.cfg.heads, head_dim)
        k = _to_heads(_linear(key_value_stream, self.p(f"{prefix}.wk")), self.cfg.heads, head_dim)
        v = _to_heads(_linear(key_value_stream, self.p(f"{prefix}.wv")), self.cfg.heads, head_dim)
        q = self._rotate(q, q_positions, head_dim)
        k = self._rotate(k, kv_positions, head_dim)
        out = _linear(_from_heads(_attend(q, k, v, head_dim)),
                      self.p(f"{prefix}.wo"), self.p(f"{prefix}.bo"))

        tmod = _linear(t_vec, self.p(f"{prefix}.tmod.w"), self.p(f"{prefix}.tmod.b"))
        scale = T.reshape(T.narrow(tmod, 1, 0, q_dim), (b, 1, q_dim))
        shift = T.reshape(T.narrow(tmod, 1, q_dim, q_dim), (b, 1, q_dim))
        gate = T.reshape(T.narrow(tmod, 1, 2 * q_dim, q_dim), (b, 1, q_dim))
        return T.mul(gate, T.add(T.mul(T.normalize(out), T.add(scale, 1.0)), shift))

    def _final(self, branch, x, t_vec, dim, out_dim):
        b = x.data.shape[0]
        mod = _linear(t_vec, self.p(f"{branch}.final.mod.w"), self.p(f"{branch}.final.mod.b"))
        scale = T.reshape(T.narrow(mod, 1, 0, dim), (b, 1, dim))
        shift = T.reshape(T.narrow(mod, 1, dim, dim), (b, 1, dim))
        h = T.add(T.mul(T.normalize(x), T.add(scale, 1.0)), shift)
        return _linear(h, self.p(f"{branch}.out_proj.w"), self.p(f"{branch}.out_proj.b"))

    # -- branch assembly ----------------------------------------------------

    def _audio_tokens(self, audio: LatentSequence, speech_tokens):
        """Embed speech tokens, project latents, concatenate, build positions."""
        b, la, _ = audio.data.shape
        apos = audio_positions(audio.timing)
        x = _linear(T.Tensor(audio.data), self.p("audio.in_proj.w"), self.p("audio.in_proj.b"))
        if speech_tokens is not None and np.asarray(speech_tokens).shape[-1] > 0:
            ids = np.asarray(speech_tokens, dtype=np.int64)
            if ids.ndim != 2 or ids.shape[0] != b:
                raise ConfigError(f"speech_tokens must be (batch, S), got {ids.shape}")
            s = ids.shape[1]
            emb = T.embedding(self.p("audio.speech_table"), ids)
            x = T.concat([emb, x], axis=1)
            # speech tokens sit just before the audio timeline
            pos = tuple(float(-s + i) for i in range(s)) + apos.positions
        else:
            s = 0
            pos = apos.positions
        return x, PositionVector(pos), s

    def _video_tokens(self, video: LatentSequence, audio_timing: ModalityTiming, references):
        """Prepend references at negative positions, project, build positions."""
        b, lv, cv = video.data.shape
        vpos = video_positions(video.timing, audio_timing)
        if references is not None and np.asarray(references).size > 0:
            refs = np.asarray(references, dtype=np.float64)
            if refs.ndim != 3 or refs.shape[0] != b or refs.shape[2] != cv:
                raise ConfigError(f"references must be (batch, K, {cv}), got {refs.shape}")
            k = refs.shape[1]
            latents = np.concatenate([refs, video.data], axis=1)
            rpos = reference_positions(k, self.cfg.ref_phi)
            pos = rpos.positions + vpos.positions
        else:
            k = 0
            latents = video.data
            pos = vpos.positions
        x = _linear(T.Tensor(latents), self.p("video.in_proj.w"), self.p("video.in_proj.b"))
        return x, PositionVector(pos), k

    def audio_branch_forward(self, audio: LatentSequence, state: ConditioningState, t,
                             return_hidden=False):
        """Run the audio branch alone (no fusion).

        Returns hidden states over speech + latent positions when
        `return_hidden`, otherwise the velocity prediction for the latent
        positions only.
        """
        b = audio.data.shape[0]
        t = np.broadcast_to(np.asarray(t, dtype=np.float64), (b,))
        cap = self.caption_tokens("audio", state, b)
        self._check_caption_width(cap)
        t_vec = self._t_vector("audio", t)
        x, pos, s = self._audio_tokens(audio, state.speech_tokens)
        for i in range(self.cfg.audio_blocks):
            x = self._block(f"audio.block{i}", x, cap, t_vec, pos,
                            self.cfg.audio_dim, self.cfg.audio_head_dim)
        if return_hidden:
            return x
        la = audio.data.shape[1]
        out = self._final("audio", x, t_vec, self.cfg.audio_dim, self.cfg.audio_out_dim)
        return T.narrow(out, 1, s, la)

    def video_branch_forward(self, video: LatentSequence, audio_timing: ModalityTiming,
                             state: ConditioningState, t):
        """Run the video branch alone (no fusion); prediction excludes references."""
        b = video.data.shape[0]
        t = np.broadcast_to(np.asarray(t, dtype=np.float64), (b,))
        cap = self.caption_tokens("video", state, b)
        self._check_caption_width(cap)
        t_vec = self._t_vector("video", t)
        x, pos, k = self._video_tokens(video, audio_timing, state.references)
        for i in range(self.cfg.video_dual_blocks):
            x = self._block(f"video.dual{i}", x, cap, t_vec, pos,
                            self.cfg.video_dim, self.cfg.video_head_dim)
        for j in range(self.cfg.video_single_blocks):
            x = self._block(f"video.single{j}", x, cap, t_vec, pos,
                            self.cfg.video_dim, self.cfg.video_head_dim)
        out = self._final("video", x, t_vec, self.cfg.video_dim, self.cfg.video_out_dim)
        return T.narrow(out, 1, k, video.data.shape[1])

    def _check_caption_width(self, cap):
        if cap.data.shape[-1] != self.cfg.caption_embed_dim:
            raise ConfigError(
                f"caption embedding width {cap.data.shape[-1]} != configured {self.cfg.caption_embed_dim}"
            )

    # -- joint forward --------------------------------------------------------

    def forward(self, video: LatentSequence, audio: LatentSequence,
                state: ConditioningState, t, t_audio=None, audio_receives_fusion=True):
        """Joint denoising forward; returns (video_pred, audio_pred) tensors.

        With the mutual signal disabled this dispatches to the standalone
        branch forwards, so the two modalities are bit-identical to running
        them independently.  `t_audio` lets the refiner drive the audio
        branch at time zero while the video branch denoises.
        """
        mutual = state.mutual_signal and self.cfg.mutual_attention
        if not mutual:
            self.forward_counts["mutual_off"] += 1
            v = self.video_branch_forward(video, audio.timing, state, t)
            a = self.audio_branch_forward(audio, state, t if t_audio is None else t_audio)
            return v, a
        self.forward_counts["mutual_on"] += 1

        b = video.data.shape[0]
        t = np.broadcast_to(np.asarray(t, dtype=np.float64), (b,))
        t_a = t if t_audio is None else np.broadcast_to(np.asarray(t_audio, dtype=np.float64), (b,))

        cap_v = self.caption_tokens("video", state, b)
        cap_a = self.caption_tokens("audio", state, b)
        self._check_caption_width(cap_v)
        t_vec_v = self._t_vector("video", t)
        t_vec_a = self._t_vector("audio", t_a)

        x_a, apos, s = self._audio_tokens(audio, state.speech_tokens)
        x_v, vpos, k = self._video_tokens(video, audio.timing, state.references)

        # dual-stream rounds: one audio block, one video block, bidirectional fusion
        m = self.cfg.video_dual_blocks
        for i in range(m):
            x_a = self._block(f"audio.block{i}", x_a, cap_a, t_vec_a, apos,
                              self.cfg.audio_dim, self.cfg.audio_head_dim)
            x_v = self._block(f"video.dual{i}", x_v, cap_v, t_vec_v, vpos,
                              self.cfg.video_dim, self.cfg.video_head_dim)
            delta_v = self.ta_cross_attention(f"video.dual{i}.xattn", x_v, x_a,
                                              vpos, apos, t_vec_v,
                                              self.cfg.video_dim, self.cfg.video_head_dim)
            if audio_receives_fusion:
                delta_a = self.ta_cross_attention(f"v2a_cross.block{i}", x_a, x_v,
                                                  apos, vpos, t_vec_a,
                                                  self.cfg.audio_dim, self.cfg.audio_head_dim)
                x_a = T.add(x_a, delta_a)
            x_v = T.add(x_v, delta_v)

        # remaining audio blocks run fusion-free; the audio stream is final
        # before the single-stream stage starts
        for i in range(m, self.cfg.audio_blocks):
            x_a = self._block(f"audio.block{i}", x_a, cap_a, t_vec_a, apos,
                              self.cfg.audio_dim, self.cfg.audio_head_dim)

        # single-stream rounds: audio -> video only
        for j in range(self.cfg.video_single_blocks):
            x_v = self._block(f"video.single{j}", x_v, cap_v, t_vec_v, vpos,
                              self.cfg.video_dim, self.cfg.video_head_dim)
            x_v = T.add(x_v, self.ta_cross_attention(f"video.single{j}.xattn", x_v, x_a,
                                                     vpos, apos, t_vec_v,
                                                     self.cfg.video_dim, self.cfg.video_head_dim))

        v_out = self._final("video", x_v, t_vec_v, self.cfg.video_dim, self.cfg.video_out_dim)
        a_out = self._final("audio", x_a, t_vec_a, self.cfg.audio_dim, self.cfg.audio_out_dim)
        return (T.narrow(v_out, 1, k, video.data.shape[1]),
                T.narrow(a_out, 1, s, audio.data.shape[1]))
