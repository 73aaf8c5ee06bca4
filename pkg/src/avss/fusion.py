"""Cross-modal fusion of visual and audio features.

The visual stream is conditioned on the motion embedding by a feature-wise
affine map (a scale and a bias, each produced by one fully connected layer),
refined by a stack of dilated 1-d conv blocks, then combined with the audio
bottleneck through gated scaled-dot-product attention whose queries and keys
come from the visual tokens and whose values come from pooled audio tokens.

All forwards accept either batched input (leading batch axis) or a single
sample; single samples are expanded and squeezed transparently.
"""

from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .errors import ShapeMismatch
from .layers import BatchNorm, Conv1d, Conv2d, Linear, Module, kaiming_uniform, parameter


def _batched(x, rank):
    """Return (tensor with batch axis, had_batch_flag)."""
    if x.ndim == rank:
        return x.reshape((1,) + x.shape), False
    if x.ndim == rank + 1:
        return x, True
    raise ShapeMismatch(f"expected rank {rank} or {rank + 1}, got shape {x.shape}")


class FilmGenerator(Module):
    """Produces the per-channel scale and bias vectors from a conditioning vector."""

    def __init__(self, cond_dim, channels, rng):
        super().__init__()
        self.gamma_layer = Linear(cond_dim, channels, rng)
        self.beta_layer = Linear(cond_dim, channels, rng)
        self.channels = channels

    def set_identity(self):
        """Force gamma=1, beta=0 regardless of the conditioning input."""
        self.gamma_layer.weight.data[:] = 0.0
        self.gamma_layer.bias.data[:] = 1.0
        self.beta_layer.weight.data[:] = 0.0
        self.beta_layer.bias.data[:] = 0.0


def film_modulate(f_v, f_m, gen: FilmGenerator):
    """gamma(f_m) * f_v + beta(f_m), broadcast over time."""
    f_v, had_batch = _batched(f_v, 2)
    f_m, _ = _batched(f_m, 1)
    if f_m.shape[-1] != gen.gamma_layer.weight.shape[1]:
        raise ShapeMismatch(
            f"conditioning dim {f_m.shape[-1]} != generator input "
            f"{gen.gamma_layer.weight.shape[1]}"
        )
    if f_v.shape[1] != gen.channels:
        raise ShapeMismatch(f"feature channels {f_v.shape[1]} != {gen.channels}")
    b, k, _ = f_v.shape
    gamma = gen.gamma_layer(f_m).reshape((b, k, 1))
    beta = gen.beta_layer(f_m).reshape((b, k, 1))
    out = gamma * f_v + beta
    return out if had_batch else out.reshape(out.shape[1:])


class MotionDimMatcher(Module):
    """Folds the time axis of the motion feature into channels, then projects.

    The (C_m, T_m) map is flattened row-major to a C_m*T_m vector and mapped
    by one learned linear layer to the conditioning dimension.
    """

    def __init__(self, channels, steps, out_dim, rng):
        super().__init__()
        self.channels = channels
        self.steps = steps
        self.proj = Linear(channels * steps, out_dim, rng)

    def flatten(self, f_m_raw):
        f_m_raw, had_batch = _batched(f_m_raw, 2)
        if f_m_raw.shape[1:] != (self.channels, self.steps):
            raise ShapeMismatch(
                f"motion feature {f_m_raw.shape[1:]} != configured "
                f"({self.channels}, {self.steps})"
            )
        flat = f_m_raw.reshape((f_m_raw.shape[0], self.channels * self.steps))
        return flat if had_batch else flat.reshape(flat.shape[1:])

    def forward(self, f_m_raw):
        flat, had_batch = _batched(self.flatten(f_m_raw), 1)
        out = self.proj(flat)
        return out if had_batch else out.reshape(out.shape[1:])


class TcnBlock(Module):
    """Residual block: x + relu(BN(dilated conv(x))); length-preserving."""

    def __init__(self, width, kernel, dilation, rng):
        super().__init__()
        self.conv = Conv1d(width, width, kernel, rng,
                           padding=dilation * (kernel - 1) // 2, dilation=dilation)
        self.bn = BatchNorm(width)

    def forward(self, x):
        return x + T.relu(self.bn(self.conv(x)))


class TcnStack(Module):
    """Dilated residual conv blocks over time; dilation doubles per block."""

    def __init__(self, width, depth, rng, kernel=3):
        super().__init__()
        self.width = width
        self.blocks = [TcnBlock(width, kernel, 2**i, rng) for i in range(depth)]

    def forward(self, x):
        x, had_batch = _batched(x, 2)
        if x.shape[1] != self.width:
            raise ShapeMismatch(f"channels {x.shape[1]} != stack width {self.width}")
        for block in self.blocks:
            x = block(x)
        return x if had_batch else x.reshape(x.shape[1:])


def tcn_apply(f, stack: TcnStack):
    return stack(f)


class CmaLayer(Module):
    """Gated cross-modal attention.

    Queries and keys are 1x1-conv projections of the visual tokens; values are
    1x1-conv projections of the audio map, flattened to tokens and pooled to
    the visual positions by a learned linear map.  The attended value is
    projected back to the visual width, scaled by the learnable gate, and
    added to the input.  The gate starts at 0 (pure residual path).
    """

    def __init__(self, visual_dim, visual_len, audio_ch, audio_tokens, dim, rng,
                 heads=1):
        super().__init__()
        if dim % heads:
            raise ShapeMismatch(f"attention dim {dim} not divisible by {heads} heads")
        self.lambda_gate = parameter(np.zeros(()))
        self.q_proj = Conv2d(visual_dim, dim, 1, rng)
        self.k_proj = Conv2d(visual_dim, dim, 1, rng)
        self.v_proj = Conv2d(audio_ch, dim, 1, rng)
        self.pool = parameter(
            kaiming_uniform(rng, (visual_len, audio_tokens), audio_tokens)
        )
        self.out_proj = Linear(dim, visual_dim, rng)
        self.dim = dim
        self.heads = heads
        self.visual_len = visual_len
        self.audio_tokens = audio_tokens

    def _attend(self, f_vm, f_a):
        b, kv, tv = f_vm.shape
        if tv != self.visual_len:
            raise ShapeMismatch(f"visual length {tv} != configured {self.visual_len}")
        ntok = f_a.shape[2] * f_a.shape[3]
        if ntok != self.audio_tokens:
            raise ShapeMismatch(f"audio tokens {ntok} != configured {self.audio_tokens}")
        d, h = self.dim, self.heads
        dh = d // h

        q = self.q_proj(f_vm.reshape((b, kv, 1, tv))).reshape((b, d, tv))
        k = self.k_proj(f_vm.reshape((b, kv, 1, tv))).reshape((b, d, tv))
        v = self.v_proj(f_a).reshape((b, d, ntok))
        q = q.transpose((0, 2, 1))                   # (B, T_v, d)
        k = k.transpose((0, 2, 1))
        v = T.matmul(self.pool, v.transpose((0, 2, 1)))  # (B, T_v, d)

        if h > 1:
            q = q.reshape((b, tv, h, dh)).transpose((0, 2, 1, 3))
            k = k.reshape((b, tv, h, dh)).transpose((0, 2, 1, 3))
            v = v.reshape((b, tv, h, dh)).transpose((0, 2, 1, 3))
        scores = T.matmul(q, k.transpose(tuple(range(q.ndim - 2)) + (-1, -2)))
        weights = T.softmax(scores * (1.0 / math.sqrt(dh)), axis=-1)
        attended = T.matmul(weights, v)
        if h > 1:
            attended = attended.transpose((0, 2, 1, 3)).reshape((b, tv, d))
        out = self.out_proj(attended).transpose((0, 2, 1))  # (B, K_v, T_v)
        return out, weights

    def forward(self, f_vm, f_a):
        f_vm, had_batch = _batched(f_vm, 2)
        f_a, _ = _batched(f_a, 3)
        out, _ = self._attend(f_vm, f_a)
        result = f_vm + self.lambda_gate * out
        return result if had_batch else result.reshape(result.shape[1:])

    def attention_weights(self, f_vm, f_a):
        """The softmax attention map, for inspection (rows sum to 1)."""
        f_vm, _ = _batched(f_vm, 2)
        f_a, _ = _batched(f_a, 3)
        _, weights = self._attend(f_vm, f_a)
        return weights


def cross_modal_attention(f_vm, f_a, layer: CmaLayer):
    return layer(f_vm, f_a)


class CrossModalFusion(Module):
    """Full fusion pipeline producing the joint audio-visual bottleneck map.

    mode selects the ablation variant:
      cross_modal    motion FiLM + TCN + gated attention, concat with audio
      concatenation  motion FiLM + TCN, concat with audio (no attention)
      addition       motion FiLM + TCN, projected and summed into audio
      lip_only       TCN on the raw lip feature, concat with audio
    """

    MODES = ("cross_modal", "concatenation", "addition", "lip_only")

    def __init__(self, mode, visual_dim, visual_len, motion_channels, motion_steps,
                 cond_dim, audio_ch, audio_freq, audio_len, attn_dim, rng,
                 tcn_depth=2, attn_heads=1):
        super().__init__()
        if mode not in self.MODES:
            raise ShapeMismatch(f"unknown fusion mode '{mode}'")
        self.mode = mode
        self.visual_dim = visual_dim
        self.audio_freq = audio_freq
        self.audio_len = audio_len
        if mode != "lip_only":
            self.matcher = MotionDimMatcher(motion_channels, motion_steps, cond_dim, rng)
            self.film = FilmGenerator(cond_dim, visual_dim, rng)
        else:
            self.matcher = None
            self.film = None
        self.tcn = TcnStack(visual_dim, tcn_depth, rng)
        if mode == "cross_modal":
            self.cma = CmaLayer(visual_dim, visual_len, audio_ch,
                                audio_freq * audio_len, attn_dim, rng, heads=attn_heads)
        else:
            self.cma = None
        if mode == "addition":
            self.add_proj = Linear(visual_dim, audio_ch, rng)
        else:
            self.add_proj = None
        # nearest-neighbor map from visual time steps to audio time steps
        self.time_index = np.minimum(
            (np.floor((np.arange(audio_len) + 0.5) * visual_len / audio_len)).astype(int),
            visual_len - 1,
        )

    def visual_branch(self, f_v, f_m_raw, f_a):
        if self.mode != "lip_only":
            f_m = self.matcher(f_m_raw)
            x = film_modulate(f_v, f_m, self.film)
        else:
            x = f_v
        x = self.tcn(x)
        if self.mode == "cross_modal":
            x = self.cma(x, f_a)
        return x

    def forward(self, f_v, f_m_raw, f_a):
        f_v, had_batch = _batched(f_v, 2)
        f_a, _ = _batched(f_a, 3)
        if f_m_raw is not None:
            f_m_raw, _ = _batched(f_m_raw, 2)
        x = self.visual_branch(f_v, f_m_raw, f_a)

        b, kv, _ = x.shape
        tiled = T.index_select(x, 2, self.time_index)            # (B, K_v, T')
        tiled = tiled.reshape((b, kv, 1, self.audio_len))
        tiled = T.expand(tiled, (b, kv, self.audio_freq, self.audio_len))

        if self.mode == "addition":
            proj = self.add_proj(tiled.transpose((0, 2, 3, 1)))  # (B, F', T', C)
            out = f_a + proj.transpose((0, 3, 1, 2))
        else:
            out = T.concat([f_a, tiled], axis=1)
        return out if had_batch else out.reshape(out.shape[1:])


def fuse(f_v, f_m_raw, f_a, fusion: CrossModalFusion):
    return fusion(f_v, f_m_raw, f_a)
