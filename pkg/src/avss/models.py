"""Toy-scale lip/motion encoders and the U-Net complex-mask separator.

Layouts are channels-first: lip input (B, 1, N, H, W), flow input
(B, 2, N-1, H, W), audio input (B, 2, F_pad, T_pad) with real/imag channels.
The frequency/time extents of the spectrogram are zero-padded up to the next
multiple of 2**unet_depth and cropped again after decoding.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from . import fusion as fusion_mod
from . import tensor as T
from .dsp import ComplexMask, ComplexSpectrogram, StftConfig, Waveform, istft, stft
from .errors import ConfigError, ShapeMismatch
from .flow import FlowParams, FrameSequence, flow_sequence, flow_stack
from .layers import BatchNorm, Conv2d, Conv3d, Linear, Module, kaiming_uniform
from .tensor import Tensor


@dataclass(frozen=True)
class ModelConfig:
    frames: int = 25
    fps: float = 25.0
    height: int = 64
    width: int = 64
    lip_dim: int = 64
    motion_dim: int = 64
    lip_channels: int = 8
    lip_blocks: int = 2
    motion_blocks: int = 2
    tcn_depth: int = 2
    unet_depth: int = 2
    base_channels: int = 16
    attn_dim: int = 64
    attn_heads: int = 1
    mask_bound: float = 10.0
    fusion_mode: str = "cross_modal"
    sample_rate: int = 8000
    stft: StftConfig = field(default_factory=StftConfig)
    flow_params: FlowParams = field(default_factory=FlowParams)

    def __post_init__(self):
        if self.fusion_mode not in fusion_mod.CrossModalFusion.MODES:
            raise ConfigError(
                f"fusion_mode '{self.fusion_mode}' not one of "
                f"{fusion_mod.CrossModalFusion.MODES}"
            )
        if self.frames < 2:
            raise ConfigError("need at least 2 frames for motion")
        if self.sample_rate != self.stft.sample_rate:
            raise ConfigError(
                f"sample_rate {self.sample_rate} != stft sample rate "
                f"{self.stft.sample_rate}"
            )
        _ = self.derived()  # shape algebra must be consistent

    def derived(self):
        """All derived extents; raises ConfigError on inconsistency."""
        d = {}
        if self.height % 4 or self.width % 4:
            raise ConfigError("height and width must be multiples of 4")
        hw = (self.height // 4, self.width // 4)  # after 3-d front + pooling
        ch = self.lip_channels
        for _ in range(self.lip_blocks):
            hw = (hw[0] // 2, hw[1] // 2)
            ch *= 2
        if min(hw) < 1:
            raise ConfigError(
                f"lip trunk collapses the {self.height}x{self.width} frame to {hw}"
            )
        d["lip_trunk_channels"] = ch
        d["lip_trunk_hw"] = hw

        mh, mw, mch = self.height, self.width, 2
        for i in range(self.motion_blocks):
            mh, mw = mh // 2, mw // 2
            mch = self.lip_channels * 2**i
        if min(mh, mw) < 1:
            raise ConfigError("motion trunk collapses the frame")
        d["motion_channels"] = mch
        d["motion_steps"] = self.frames - 1

        samples = round(self.frames / self.fps * self.sample_rate)
        if samples < self.stft.win_length:
            raise ConfigError(f"clip of {samples} samples shorter than one window")
        d["clip_samples"] = samples
        d["spec_freqs"] = self.stft.freq_bins
        d["spec_frames"] = self.stft.frame_count(samples)
        mult = 2**self.unet_depth
        d["padded_freqs"] = -(-d["spec_freqs"] // mult) * mult
        d["padded_frames"] = -(-d["spec_frames"] // mult) * mult
        d["bottleneck_freqs"] = d["padded_freqs"] // mult
        d["bottleneck_frames"] = d["padded_frames"] // mult
        d["bottleneck_channels"] = self.base_channels * 2 ** (self.unet_depth - 1)
        if self.fusion_mode == "addition":
            d["fused_channels"] = d["bottleneck_channels"]
        else:
            d["fused_channels"] = d["bottleneck_channels"] + self.lip_dim
        return d

    @property
    def uses_motion(self):
        return self.fusion_mode != "lip_only"


# --- flat key=value config files -------------------------------------------

_STFT_KEYS = ("fft_size", "win_length", "hop")
_FLOW_KEYS = ("pyramid_levels", "pyramid_scale", "window_size", "iterations",
              "poly_n", "poly_sigma")


def config_to_text(cfg: ModelConfig) -> str:
    lines = []
    for f in dataclasses.fields(cfg):
        value = getattr(cfg, f.name)
        if f.name == "stft":
            for key in _STFT_KEYS:
                lines.append(f"stft.{key} = {getattr(value, key)}")
        elif f.name == "flow_params":
            for key in _FLOW_KEYS:
                lines.append(f"flow.{key} = {getattr(value, key)}")
        else:
            lines.append(f"{f.name} = {value}")
    return "\n".join(lines) + "\n"


def save_config(path, cfg: ModelConfig):
    with open(path, "w") as fh:
        fh.write(config_to_text(cfg))


def parse_config_text(text, base: ModelConfig | None = None) -> ModelConfig:
    cfg = base or ModelConfig()
    plain = {f.name: getattr(cfg, f.name) for f in dataclasses.fields(cfg)
             if f.name not in ("stft", "flow_params")}
    stft_kw = {k: getattr(cfg.stft, k) for k in _STFT_KEYS}
    flow_kw = {k: getattr(cfg.flow_params, k) for k in _FLOW_KEYS}
    casts = {f.name: type(getattr(cfg, f.name)) for f in dataclasses.fields(cfg)}

    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key.startswith("stft."):
            sub = key[5:]
            if sub not in stft_kw:
                raise ConfigError(f"unknown config key '{key}'")
            stft_kw[sub] = int(value)
        elif key.startswith("flow."):
            sub = key[5:]
            if sub not in flow_kw:
                raise ConfigError(f"unknown config key '{key}'")
            flow_kw[sub] = float(value) if sub in ("pyramid_scale", "poly_sigma") else int(value)
        elif key in plain:
            kind = casts[key]
            plain[key] = value if kind is str else kind(float(value)) if kind is int else kind(value)
        else:
            raise ConfigError(f"unknown config key '{key}'")
    plain["stft"] = StftConfig(sample_rate=int(plain["sample_rate"]), **stft_kw)
    plain["flow_params"] = FlowParams(**flow_kw)
    return ModelConfig(**plain)


def load_config(path, base: ModelConfig | None = None) -> ModelConfig:
    with open(path) as fh:
        return parse_config_text(fh.read(), base)


# ---------------------------------------------------------------------------
# networks
# ---------------------------------------------------------------------------


def _avg_pool_hw(x):
    """Average-pool the last two axes by 2 (extents must be even)."""
    shp = x.shape
    h, w = shp[-2], shp[-1]
    x = x.reshape(shp[:-2] + (h // 2, 2, w // 2, 2))
    return x.mean(axis=(x.ndim - 3, x.ndim - 1))


class LipNetwork(Module):
    """3-d conv front end, shared 2-d trunk per frame, linear head per frame."""

    def __init__(self, cfg: ModelConfig, rng):
        super().__init__()
        cl = cfg.lip_channels
        self.front = Conv3d(1, cl, (3, 5, 5), rng, stride=(1, 2, 2), padding=(1, 2, 2))
        self.front_bn = BatchNorm(cl)
        self.trunk = []
        ch = cl
        for _ in range(cfg.lip_blocks):
            conv = Conv2d(ch, ch * 2, 3, rng, stride=2, padding=1)
            self.trunk.append([conv, BatchNorm(ch * 2)])
            ch *= 2
        self.head = Linear(ch, cfg.lip_dim, rng)
        self.lip_dim = cfg.lip_dim

    def forward(self, x):
        # (B, 1, N, H, W) -> (B, lip_dim, N)
        x = T.relu(self.front_bn(self.front(x)))
        x = _avg_pool_hw(x)
        b, c, n, h, w = x.shape
        x = x.transpose((0, 2, 1, 3, 4)).reshape((b * n, c, h, w))
        for conv, bn in self.trunk:
            x = T.relu(bn(conv(x)))
        x = x.mean(axis=(2, 3))
        x = self.head(x)
        return x.reshape((b, n, self.lip_dim)).transpose((0, 2, 1))


class MotionNetwork(Module):
    """Stack of 3-d conv blocks with kernels replicated over time at init."""

    def __init__(self, cfg: ModelConfig, rng):
        super().__init__()
        self.blocks = []
        ch = 2
        for i in range(cfg.motion_blocks):
            out = cfg.lip_channels * 2**i
            conv = Conv3d(ch, out, 3, rng, stride=(1, 2, 2), padding=1)
            _inflate_kernel(conv, rng)
            self.blocks.append([conv, BatchNorm(out)])
            ch = out

    def forward(self, x):
        # (B, 2, N-1, H, W) -> (B, C_m, T_m)
        for conv, bn in self.blocks:
            x = T.relu(bn(conv(x)))
        return x.mean(axis=(3, 4))


def _inflate_kernel(conv: Conv3d, rng):
    """Replace the kernel by a 2-d kernel replicated over time and normalized."""
    co, ci, kd, kh, kw = conv.weight.shape
    w2 = kaiming_uniform(rng, (co, ci, kh, kw), ci * kh * kw)
    conv.weight.data = np.broadcast_to(
        w2[:, :, None].astype(conv.weight.data.dtype), (co, ci, kd, kh, kw)
    ).copy() / kd


class SeparatorUNet(Module):
    """Strided conv encoder, bottleneck fusion hook, skip-connected decoder."""

    def __init__(self, cfg: ModelConfig, rng):
        super().__init__()
        d = cfg.derived()
        base = cfg.base_channels
        depth = cfg.unet_depth
        self.depth = depth
        self.mask_bound = cfg.mask_bound

        self.enc = []
        ch = 2
        for i in range(depth):
            out = base * 2**i
            self.enc.append([Conv2d(ch, out, 3, rng, stride=2, padding=1), BatchNorm(out)])
            ch = out

        self.dec = []
        ch = d["fused_channels"]
        for i in reversed(range(depth)):
            skip = base * 2 ** (i - 1) if i > 0 else 0
            out = base * 2 ** (i - 1) if i > 0 else base
            self.dec.append([Conv2d(ch + skip, out, 3, rng, stride=1, padding=1),
                             BatchNorm(out)])
            ch = out
        self.head = Conv2d(base, 2, 1, rng)

    def encode(self, x):
        if x.shape[-1] % 2**self.depth or x.shape[-2] % 2**self.depth:
            raise ShapeMismatch(
                f"encoder depth {self.depth} needs extents divisible by "
                f"{2**self.depth}, got {x.shape}"
            )
        skips = []
        for conv, bn in self.enc:
            x = T.leaky_relu(bn(conv(x)), 0.2)
            skips.append(x)
        return x, skips

    def decode(self, f_avm, skips):
        x = f_avm
        for level, (conv, bn) in zip(reversed(range(self.depth)), self.dec):
            x = T.upsample_nearest(x, (2, 2))
            if level > 0:
                x = T.concat([x, skips[level - 1]], axis=1)
            x = T.relu(bn(conv(x)))
        return self.mask_bound * T.tanh(self.head(x))


class SeparationModel(Module):
    """Lip + motion encoders, fusion, and the mask-predicting U-Net."""

    def __init__(self, cfg: ModelConfig, rng):
        super().__init__()
        d = cfg.derived()
        self.config = cfg
        self.lip = LipNetwork(cfg, rng)
        self.motion = MotionNetwork(cfg, rng) if cfg.uses_motion else None
        self.unet = SeparatorUNet(cfg, rng)
        self.fusion = fusion_mod.CrossModalFusion(
            cfg.fusion_mode,
            visual_dim=cfg.lip_dim,
            visual_len=cfg.frames,
            motion_channels=d["motion_channels"],
            motion_steps=d["motion_steps"],
            cond_dim=cfg.motion_dim,
            audio_ch=d["bottleneck_channels"],
            audio_freq=d["bottleneck_freqs"],
            audio_len=d["bottleneck_frames"],
            attn_dim=cfg.attn_dim,
            rng=rng,
            tcn_depth=cfg.tcn_depth,
            attn_heads=cfg.attn_heads,
        )
        self._derived = d
        self._spec_scale = 2.0 / cfg.stft.win_length

    # -- batched training forward ------------------------------------------

    def forward(self, x_v, x_m, x_a):
        """Batched mask prediction: returns (B, 2, F, T) cropped to spec size."""
        f_a, skips = self.unet.encode(x_a)
        f_v = self.lip(x_v)
        f_m = self.motion(x_m) if self.motion is not None else None
        f_avm = self.fusion(f_v, f_m, f_a)
        mask = self.unet.decode(f_avm, skips)
        d = self._derived
        return mask[:, :, : d["spec_freqs"], : d["spec_frames"]]

    # -- per-sample views used by inference and tests ------------------------

    def lip_forward(self, frames):
        """(N, H, W) gray stack -> (lip_dim, N) feature tensor."""
        frames = np.asarray(frames)
        n, h, w = frames.shape
        cfg = self.config
        if (n, h, w) != (cfg.frames, cfg.height, cfg.width):
            raise ShapeMismatch(
                f"frame stack {frames.shape} != configured "
                f"({cfg.frames}, {cfg.height}, {cfg.width})"
            )
        x = Tensor(frames[None, None])
        return self.lip(x).reshape((cfg.lip_dim, cfg.frames))

    def motion_forward(self, flows):
        """(N-1, 2, H, W) flow stack -> (C_m, T_m) raw motion feature."""
        if self.motion is None:
            raise ConfigError("model built without a motion network (lip_only)")
        flows = np.asarray(flows)
        cfg = self.config
        if flows.shape != (cfg.frames - 1, 2, cfg.height, cfg.width):
            raise ShapeMismatch(
                f"flow stack {flows.shape} != configured "
                f"({cfg.frames - 1}, 2, {cfg.height}, {cfg.width})"
            )
        x = Tensor(flows.transpose(1, 0, 2, 3)[None])
        out = self.motion(x)
        return out.reshape(out.shape[1:])

    def spectrogram_input(self, spec: ComplexSpectrogram):
        """Pack a spectrogram into the padded (2, F_pad, T_pad) network input."""
        d = self._derived
        fr, tm = spec.shape
        if (fr, tm) != (d["spec_freqs"], d["spec_frames"]):
            raise ShapeMismatch(
                f"spectrogram {spec.shape} != configured "
                f"({d['spec_freqs']}, {d['spec_frames']})"
            )
        out = np.zeros((2, d["padded_freqs"], d["padded_frames"]),
                       dtype=T.default_dtype())
        out[0, :fr, :tm] = spec.real * self._spec_scale
        out[1, :fr, :tm] = spec.imag * self._spec_scale
        return out

    def encode_audio(self, spec: ComplexSpectrogram):
        """Per-sample encoder pass: (bottleneck feature, skip list)."""
        x = Tensor(self.spectrogram_input(spec)[None])
        f_a, skips = self.unet.encode(x)
        return f_a.reshape(f_a.shape[1:]), skips

    def decode_mask(self, f_avm, skips) -> ComplexMask:
        f_avm, _ = fusion_mod._batched(f_avm, 3)
        d = self._derived
        mask = self.unet.decode(f_avm, skips)
        mask = mask[:, :, : d["spec_freqs"], : d["spec_frames"]]
        return ComplexMask(mask.data[0, 0] + 1j * mask.data[0, 1],
                           clip_bound=self.config.mask_bound)

    def separate(self, mixture: Waveform, frames: FrameSequence) -> Waveform:
        """Full inference path; output has exactly the mixture's length."""
        cfg = self.config
        d = self._derived
        if len(frames) != cfg.frames or len(mixture) != d["clip_samples"]:
            raise ShapeMismatch(
                f"misaligned clip: expected {cfg.frames} frames / "
                f"{d['clip_samples']} samples, got {len(frames)} frames / "
                f"{len(mixture)} samples"
            )
        was_training = self.training
        self.eval()
        try:
            with T.no_grad():
                spec = stft(mixture, cfg.stft)
                x_a = Tensor(self.spectrogram_input(spec)[None])
                x_v = Tensor(np.asarray(frames.frames)[None, None])
                if self.motion is not None:
                    stack = flow_stack(flow_sequence(frames, cfg.flow_params))
                    x_m = Tensor(stack.transpose(1, 0, 2, 3)[None])
                else:
                    x_m = None
                mask_t = self.forward(x_v, x_m, x_a)
            mask = ComplexMask(mask_t.data[0, 0] + 1j * mask_t.data[0, 1],
                               clip_bound=cfg.mask_bound)
            est_spec = ComplexSpectrogram(mask.data * spec.data, cfg.stft)
            est = istft(est_spec)
        finally:
            self.train(was_training)
        out = est.samples
        if len(out) < len(mixture):
            out = np.pad(out, (0, len(mixture) - len(out)))
        return Waveform(out[: len(mixture)], mixture.sample_rate)


def build_model(cfg: ModelConfig, seed=0) -> SeparationModel:
    return SeparationModel(cfg, np.random.default_rng(seed))
