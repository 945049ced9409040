"""CNN-BLSTM front-end: residual CNN, height pooling bridge, stacked BLSTM."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Iterator, Optional

import numpy as np

from . import tensor as T
from .errors import InputTooShortError, ShapeError
from .tensor import ConvSpec, NormState, Tensor

MIN_FRAMES = 8


@dataclass(frozen=True)
class ModelConfig:
    input_dim: int = 64
    channels: tuple = (16, 32, 64, 128)
    blocks: tuple = (3, 4, 6, 3)
    blstm_layers: int = 2
    blstm_hidden: int = 128
    num_classes: int = 14
    head: str = "sap"

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        object.__setattr__(self, "blocks", tuple(int(b) for b in self.blocks))
        if len(self.channels) != 4 or len(self.blocks) != 4:
            raise ValueError("channels and blocks need one entry per residual stage (4)")
        if self.input_dim % 8:
            raise ValueError(f"input_dim must be divisible by 8, got {self.input_dim}")
        if self.head not in ("sap", "tap"):
            raise ValueError(f"head must be 'sap' or 'tap', got {self.head!r}")
        if self.num_classes < 2:
            raise ValueError("num_classes must be at least 2")

    @property
    def embedding_dim(self) -> int:
        return 2 * self.blstm_hidden

    @property
    def cnn_height(self) -> int:
        return self.input_dim // 8

    def to_dict(self) -> dict:
        return asdict(self)


PRESETS = {
    "paper": ModelConfig(),
    "tiny": ModelConfig(channels=(2, 2, 2, 2), blocks=(1, 1, 1, 1), blstm_hidden=2),
}


def preset(name: str, **overrides) -> ModelConfig:
    try:
        base = PRESETS[name]
    except KeyError:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
    return ModelConfig(**{**base.to_dict(), **overrides})


def output_width(length: int) -> int:
    """Time steps left after the three stride-2 stages."""
    w = length
    for _ in range(3):
        w = -(-w // 2)
    return w


# ---------------------------------------------------------------- parameters


@dataclass
class ModelParameters:
    """Named tensors of the whole graph; ``norm`` holds running statistics."""

    config: ModelConfig
    tensors: dict = field(default_factory=dict)
    norm: dict = field(default_factory=dict)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def __iter__(self) -> Iterator[str]:
        return iter(self.tensors)

    def items(self):
        return self.tensors.items()

    def trainable(self) -> list[Tensor]:
        return list(self.tensors.values())

    def count(self) -> int:
        return sum(t.size for t in self.tensors.values())

    def state_tensors(self) -> dict:
        """Every tensor that belongs in a checkpoint, running statistics included."""
        out = dict(self.tensors)
        for name, st in self.norm.items():
            out[f"{name}.running_mean"] = st.running_mean
            out[f"{name}.running_var"] = st.running_var
        return out

    def load_state(self, named: dict) -> None:
        for name, t in self.state_tensors().items():
            if name not in named:
                raise KeyError(f"missing tensor {name!r}")
            value = np.asarray(named[name], dtype=np.float64)
            if value.shape != t.shape:
                raise ShapeError(f"{name}: stored shape {value.shape} != expected {t.shape}")
            t.data[...] = value

    def copy(self) -> "ModelParameters":
        other = init_parameters(self.config, seed=0)
        other.load_state({k: v.data for k, v in self.state_tensors().items()})
        return other


def _uniform(rng, bound, shape):
    return rng.uniform(-bound, bound, size=shape)


def _kaiming(rng, fan_in, shape):
    return _uniform(rng, math.sqrt(6.0 / fan_in), shape)


def _conv_layout(cfg: ModelConfig) -> list[tuple[str, ConvSpec]]:
    """Every convolution of the CNN in execution order, each followed by a norm."""
    layout = [("cnn.conv1", ConvSpec(1, cfg.channels[0]))]
    in_ch = cfg.channels[0]
    for stage, (ch, nblocks) in enumerate(zip(cfg.channels, cfg.blocks), start=1):
        for block in range(nblocks):
            stride = 2 if stage > 1 and block == 0 else 1
            prefix = f"cnn.res{stage}.{block}"
            layout.append((f"{prefix}.conv_a", ConvSpec(in_ch, ch, stride)))
            layout.append((f"{prefix}.conv_b", ConvSpec(ch, ch, 1)))
            if stride != 1 or in_ch != ch:
                layout.append((f"{prefix}.shortcut", ConvSpec(in_ch, ch, stride, kernel=1, padding=0)))
            in_ch = ch
    return layout


def _lstm_layout(cfg: ModelConfig) -> list[tuple[str, int]]:
    layout, in_dim = [], cfg.channels[-1]
    for layer in range(cfg.blstm_layers):
        for d in ("fwd", "bwd"):
            layout.append((f"blstm.l{layer}.{d}", in_dim))
        in_dim = 2 * cfg.blstm_hidden
    return layout


def init_parameters(cfg: ModelConfig, seed: int = 0) -> ModelParameters:
    rng = np.random.default_rng(seed)
    params = ModelParameters(cfg)
    t = params.tensors

    def add(name, data):
        t[name] = Tensor(data, requires_grad=True, name=name)

    for name, spec in _conv_layout(cfg):
        fan_in = spec.in_channels * spec.kernel * spec.kernel
        add(f"{name}.weight", _kaiming(rng, fan_in, (spec.out_channels, spec.in_channels, spec.kernel, spec.kernel)))
        add(f"{name}.bias", np.zeros(spec.out_channels))
        add(f"{name}.bn.gamma", np.ones(spec.out_channels))
        add(f"{name}.bn.beta", np.zeros(spec.out_channels))
        params.norm[f"{name}.bn"] = NormState.fresh(spec.out_channels)

    r = cfg.blstm_hidden
    for name, in_dim in _lstm_layout(cfg):
        bound = 1.0 / math.sqrt(r)
        add(f"{name}.w_ih", _uniform(rng, bound, (4 * r, in_dim)))
        add(f"{name}.w_hh", _uniform(rng, bound, (4 * r, r)))
        bias = np.zeros(4 * r)
        bias[r:2 * r] = 1.0  # gate order i, f, g, o
        add(f"{name}.bias", bias)

    e = cfg.embedding_dim
    if cfg.head == "sap":
        add("sap.weight", _kaiming(rng, e, (e, e)))
        add("sap.bias", np.zeros(e))
        add("sap.context", _uniform(rng, 0.05, (e,)))
    add("fc.weight", _kaiming(rng, e, (e, e)))
    add("fc.bias", np.zeros(e))
    add("out.weight", _kaiming(rng, e, (cfg.num_classes, e)))
    add("out.bias", np.zeros(cfg.num_classes))
    return params


def parameter_count(cfg: ModelConfig) -> int:
    """Trainable scalar count, derived from the layer plan without building tensors."""
    total = 0
    for _, spec in _conv_layout(cfg):
        total += spec.out_channels * (spec.in_channels * spec.kernel ** 2 + 3)
    r = cfg.blstm_hidden
    for _, in_dim in _lstm_layout(cfg):
        total += 4 * r * (in_dim + r + 1)
    e = cfg.embedding_dim
    if cfg.head == "sap":
        total += e * e + 2 * e
    total += e * e + e + cfg.num_classes * (e + 1)
    return total


# ---------------------------------------------------------------- forward


@dataclass
class SequenceRepresentation:
    """Batch of feature sequences stored as ``(N, F, W)``; ``widths`` are the true W."""

    values: Tensor
    widths: list

    @property
    def dim(self) -> int:
        return self.values.shape[1]

    @property
    def width(self) -> int:
        return self.values.shape[2]


def _conv_bn(x, name, spec, params, mode, update_stats):
    y = T.conv2d(x, spec, params[f"{name}.weight"], params[f"{name}.bias"])
    return T.batch_norm(y, params[f"{name}.bn.gamma"], params[f"{name}.bn.beta"],
                        params.norm[f"{name}.bn"], mode=mode, update_stats=update_stats)


def resnet_forward(features, params: ModelParameters, mode: str = "train",
                   update_stats: bool = True) -> Tensor:
    """``(N, D, L)`` or ``(D, L)`` features to the ``(N, C, D/8, W)`` feature block."""
    x = T.as_tensor(features)
    if x.ndim == 2:
        x = x.reshape(1, *x.shape)
    cfg = params.config
    if x.ndim != 3 or x.shape[1] != cfg.input_dim:
        raise ShapeError(f"expected features of shape (N, {cfg.input_dim}, L), got {x.shape}")
    if x.shape[2] < MIN_FRAMES:
        raise InputTooShortError(f"need at least {MIN_FRAMES} frames, got {x.shape[2]}")
    x = x.reshape(x.shape[0], 1, x.shape[1], x.shape[2])

    layout = dict(_conv_layout(cfg))
    x = T.relu(_conv_bn(x, "cnn.conv1", layout["cnn.conv1"], params, mode, update_stats))
    for stage, nblocks in enumerate(cfg.blocks, start=1):
        for block in range(nblocks):
            prefix = f"cnn.res{stage}.{block}"
            y = T.relu(_conv_bn(x, f"{prefix}.conv_a", layout[f"{prefix}.conv_a"], params, mode, update_stats))
            y = _conv_bn(y, f"{prefix}.conv_b", layout[f"{prefix}.conv_b"], params, mode, update_stats)
            shortcut = layout.get(f"{prefix}.shortcut")
            if shortcut is not None:
                x = _conv_bn(x, f"{prefix}.shortcut", shortcut, params, mode, update_stats)
            x = T.relu(y + x)
    return x


def height_pool_squeeze(block: Tensor, expected_height: Optional[int] = None) -> SequenceRepresentation:
    """Mean over the height axis of ``(N, C, H, W)``, leaving ``(N, C, W)``."""
    if block.ndim == 3:
        block = block.reshape(1, *block.shape)
    if expected_height is not None and block.shape[2] != expected_height:
        raise ShapeError(f"expected feature-map height {expected_height}, got {block.shape[2]}")
    values = T.mean(block, axis=2)
    return SequenceRepresentation(values, [values.shape[2]] * values.shape[0])


def lstm_direction(x: Tensor, w_ih: Tensor, w_hh: Tensor, bias: Tensor, reverse: bool = False) -> Tensor:
    """One LSTM pass over ``x`` of shape ``(N, W, F)``; returns ``(N, W, R)``."""
    n, steps, _ = x.shape
    r = w_hh.shape[1]
    projected = T.affine(x, w_ih, bias)
    h = Tensor(np.zeros((n, r)))
    c = Tensor(np.zeros((n, r)))
    outputs = [None] * steps
    order = range(steps - 1, -1, -1) if reverse else range(steps)
    for t in order:
        gates = projected[:, t, :] + T.affine(h, w_hh)
        i = T.sigmoid(gates[:, :r])
        f = T.sigmoid(gates[:, r:2 * r])
        g = T.tanh(gates[:, 2 * r:3 * r])
        o = T.sigmoid(gates[:, 3 * r:])
        c = f * c + i * g
        h = o * T.tanh(c)
        outputs[t] = h
    return T.stack(outputs, axis=1)


def blstm_forward(seq: SequenceRepresentation, params: ModelParameters) -> SequenceRepresentation:
    """Stacked bidirectional LSTM; each step emits ``[forward; backward]``."""
    x = T.transpose(seq.values, (0, 2, 1))
    for layer in range(params.config.blstm_layers):
        p = f"blstm.l{layer}"
        fwd = lstm_direction(x, params[f"{p}.fwd.w_ih"], params[f"{p}.fwd.w_hh"], params[f"{p}.fwd.bias"])
        bwd = lstm_direction(x, params[f"{p}.bwd.w_ih"], params[f"{p}.bwd.w_hh"], params[f"{p}.bwd.bias"],
                             reverse=True)
        x = T.concat([fwd, bwd], axis=2)
    return SequenceRepresentation(T.transpose(x, (0, 2, 1)), list(seq.widths))


def forward_frontend(features, params: ModelParameters, mode: str = "train",
                     update_stats: bool = True) -> SequenceRepresentation:
    block = resnet_forward(features, params, mode, update_stats)
    seq = height_pool_squeeze(block, params.config.cnn_height)
    return blstm_forward(seq, params)
