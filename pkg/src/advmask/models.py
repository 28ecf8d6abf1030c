"""Encoder (1-D ResNet-18 + projection head), U-Net mask generator and linear probe."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .params import ParameterSet, kaiming_uniform
from .tensor import ShapeError, Tensor

MODES = ("train", "eval", "frozen")


def make_rng(seed: int) -> np.random.Generator:
    """Counter-based generator; every stochastic component takes one of these explicitly."""
    return np.random.Generator(np.random.Philox(seed))


class _Builder:
    def __init__(self, params: ParameterSet, rng: np.random.Generator):
        self.params = params
        self.rng = rng

    def conv(self, name, c_in, c_out, k, bias=False):
        self.params.add(f"{name}.weight", kaiming_uniform(self.rng, (c_out, c_in, k), c_in * k))
        if bias:
            self.params.add(f"{name}.bias", np.zeros(c_out))

    def bn(self, name, c):
        self.params.add(f"{name}.weight", np.ones(c))
        self.params.add(f"{name}.bias", np.zeros(c))
        self.params.add(f"{name}.running_mean", np.zeros(c), trainable=False)
        self.params.add(f"{name}.running_var", np.ones(c), trainable=False)

    def linear(self, name, d_in, d_out):
        self.params.add(f"{name}.weight", kaiming_uniform(self.rng, (d_out, d_in), d_in))
        self.params.add(f"{name}.bias", np.zeros(d_out))


def _conv(p: ParameterSet, name, x, stride=1, padding=None):
    w = p[f"{name}.weight"]
    b = p.params.get(f"{name}.bias")
    if padding is None:
        padding = w.shape[-1] // 2
    return T.conv1d(x, w, b, stride=stride, padding=padding)


def _bn(p: ParameterSet, name, x, mode):
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    return T.batch_norm1d(x, p[f"{name}.weight"], p[f"{name}.bias"],
                          p.buffers[f"{name}.running_mean"], p.buffers[f"{name}.running_var"], mode=mode)


def _linear(p: ParameterSet, name, x):
    return T.linear(x, p[f"{name}.weight"], p[f"{name}.bias"])


# ------------------------------------------------------------------- encoder


@dataclass
class EncoderConfig:
    in_leads: int = 12
    stage_widths: tuple = (8, 16, 32, 64)
    blocks_per_stage: int = 2
    hidden_dim: int = 64
    projection_dim: int = 128
    kernel_size: int = 7
    stem_kernel: int = 7

    def __post_init__(self):
        self.stage_widths = tuple(int(w) for w in self.stage_widths)
        if len(self.stage_widths) != 4:
            raise ValueError("stage_widths needs exactly 4 entries")
        if self.hidden_dim != self.stage_widths[-1]:
            raise ValueError(f"hidden_dim {self.hidden_dim} must equal last stage width {self.stage_widths[-1]}")
        if self.projection_dim <= 0:
            raise ValueError("projection_dim must be positive")

    @classmethod
    def full_scale(cls) -> "EncoderConfig":
        return cls(stage_widths=(64, 128, 256, 512), hidden_dim=512)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stage_widths"] = list(self.stage_widths)
        return d


MIN_ENCODER_LENGTH = 32


class Encoder:
    """1-D ResNet-18: stem conv + max-pool, four stages of basic blocks, global average pool."""

    def __init__(self, config: EncoderConfig, rng: np.random.Generator):
        self.config = config
        self.params = ParameterSet()
        b = _Builder(self.params, rng)
        c = config
        b.conv("stem.conv", c.in_leads, c.stage_widths[0], c.stem_kernel)
        b.bn("stem.bn", c.stage_widths[0])
        c_in = c.stage_widths[0]
        for s, width in enumerate(c.stage_widths):
            for k in range(c.blocks_per_stage):
                name = f"stage{s + 1}.block{k + 1}"
                b.conv(f"{name}.conv1", c_in, width, c.kernel_size)
                b.bn(f"{name}.bn1", width)
                b.conv(f"{name}.conv2", width, width, c.kernel_size)
                b.bn(f"{name}.bn2", width)
                if self._block_stride(s, k) != 1 or c_in != width:
                    b.conv(f"{name}.down.conv", c_in, width, 1)
                    b.bn(f"{name}.down.bn", width)
                c_in = width

    @staticmethod
    def _block_stride(stage: int, block: int) -> int:
        return 2 if stage > 0 and block == 0 else 1

    def forward(self, x: Tensor, mode: str = "train") -> Tensor:
        c, p = self.config, self.params
        if x.ndim != 3 or x.shape[1] != c.in_leads:
            raise ShapeError("encoder", x.shape, detail=f"expected [B, {c.in_leads}, D]")
        if x.shape[2] < MIN_ENCODER_LENGTH:
            raise ValueError(f"signal length {x.shape[2]} too short; encoder needs D >= {MIN_ENCODER_LENGTH}")
        h = T.relu(_bn(p, "stem.bn", _conv(p, "stem.conv", x, stride=2), mode))
        h = T.max_pool1d(h, 3, 2, padding=1)
        for s in range(4):
            for k in range(c.blocks_per_stage):
                name = f"stage{s + 1}.block{k + 1}"
                stride = self._block_stride(s, k)
                out = T.relu(_bn(p, f"{name}.bn1", _conv(p, f"{name}.conv1", h, stride=stride), mode))
                out = _bn(p, f"{name}.bn2", _conv(p, f"{name}.conv2", out), mode)
                if f"{name}.down.conv.weight" in p:
                    h = _bn(p, f"{name}.down.bn", _conv(p, f"{name}.down.conv", h, stride=stride), mode)
                h = T.relu(out + h)
        return T.avg_pool1d(h)

    __call__ = forward


class Projector:
    """Two-layer head mapping encoder features to the contrastive space; discarded after pretraining."""

    def __init__(self, config: EncoderConfig, rng: np.random.Generator):
        self.config = config
        self.params = ParameterSet()
        b = _Builder(self.params, rng)
        b.linear("fc1", config.hidden_dim, config.hidden_dim)
        b.linear("fc2", config.hidden_dim, config.projection_dim)

    def forward(self, h: Tensor) -> Tensor:
        if h.ndim != 2 or h.shape[1] != self.config.hidden_dim:
            raise ShapeError("projector", h.shape, detail=f"expected [B, {self.config.hidden_dim}]")
        return _linear(self.params, "fc2", T.relu(_linear(self.params, "fc1", h)))

    __call__ = forward


def encoder_forward(encoder: Encoder, x: Tensor, mode: str = "train") -> Tensor:
    return encoder.forward(x, mode)


def projector_forward(projector: Projector, h: Tensor) -> Tensor:
    return projector.forward(h)


# ------------------------------------------------------------ mask generator


@dataclass
class MaskGeneratorConfig:
    in_leads: int = 12
    depth: int = 4
    base_channels: int = 8
    n_masks: int = 2
    kernel_size: int = 3

    def __post_init__(self):
        if self.n_masks < 1:
            raise ValueError("n_masks must be >= 1")
        if self.n_masks > 12:
            raise ValueError("n_masks above 12 is not supported (one mask per lead at most)")

    @property
    def head_activation(self) -> str:
        return "sigmoid" if self.n_masks == 1 else "softmax"

    def to_dict(self) -> dict:
        return asdict(self)


class MaskGenerator:
    """1-D U-Net emitting ``n_masks`` masks in [0, 1] per timestep."""

    def __init__(self, config: MaskGeneratorConfig, rng: np.random.Generator):
        self.config = config
        self.params = ParameterSet()
        b = _Builder(self.params, rng)
        k, c_in = config.kernel_size, config.in_leads
        widths = [config.base_channels * 2**i for i in range(config.depth + 1)]
        for i in range(config.depth):
            self._double(b, f"down{i + 1}", c_in, widths[i], k)
            c_in = widths[i]
        self._double(b, "bottleneck", c_in, widths[-1], k)
        c_in = widths[-1]
        for i in reversed(range(config.depth)):
            self._double(b, f"up{i + 1}", c_in + widths[i], widths[i], k)
            c_in = widths[i]
        b.conv("head", c_in, config.n_masks, 1, bias=True)

    @staticmethod
    def _double(b, name, c_in, c_out, k):
        b.conv(f"{name}.conv1", c_in, c_out, k)
        b.bn(f"{name}.bn1", c_out)
        b.conv(f"{name}.conv2", c_out, c_out, k)
        b.bn(f"{name}.bn2", c_out)

    def _apply_double(self, name, x, mode):
        p = self.params
        x = T.relu(_bn(p, f"{name}.bn1", _conv(p, f"{name}.conv1", x), mode))
        return T.relu(_bn(p, f"{name}.bn2", _conv(p, f"{name}.conv2", x), mode))

    def forward(self, x: Tensor, mode: str = "train") -> Tensor:
        c = self.config
        if x.ndim != 3 or x.shape[1] != c.in_leads:
            raise ShapeError("mask_generator", x.shape, detail=f"expected [B, {c.in_leads}, D]")
        B, _, D = x.shape
        unit = 2**c.depth
        pad = (-D) % unit
        if pad:
            x = T.concat([x, Tensor(np.zeros((B, c.in_leads, pad), dtype=x.dtype), dtype=x.dtype)], axis=2)
        skips = []
        h = x
        for i in range(c.depth):
            h = self._apply_double(f"down{i + 1}", h, mode)
            skips.append(h)
            h = T.max_pool1d(h, 2, 2)
        h = self._apply_double("bottleneck", h, mode)
        for i in reversed(range(c.depth)):
            h = T.concat([T.upsample_nearest1d(h, 2), skips[i]], axis=1)
            h = self._apply_double(f"up{i + 1}", h, mode)
        logits = _conv(self.params, "head", h, padding=0)
        if pad:
            logits = logits[:, :, :D]
        if c.head_activation == "sigmoid":
            return T.sigmoid(logits)
        return T.softmax(logits, axis=1)

    __call__ = forward


def mask_generator_forward(model: MaskGenerator, x: Tensor, mode: str = "train") -> Tensor:
    return model.forward(x, mode)


# -------------------------------------------------------------- linear probe

N_CLASSES = {"arrhythmia": 4, "gender": 2}


class LinearProbe:
    def __init__(self, hidden_dim: int, n_classes: int, rng: np.random.Generator):
        self.n_classes = n_classes
        self.params = ParameterSet()
        _Builder(self.params, rng).linear("fc", hidden_dim, n_classes)

    def forward(self, h: Tensor) -> Tensor:
        return _linear(self.params, "fc", h)

    __call__ = forward


def linear_probe_forward(probe: LinearProbe, h: Tensor) -> Tensor:
    return probe.forward(h)
