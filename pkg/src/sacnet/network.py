"""DenseNet-style backbone with attention-augmented composite layers,
global pooling, and a multi-label sigmoid head."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, asdict

import numpy as np

from . import tensor as T
from .attention import (AttentionAugmentedConv, AttentionConfig,
                        derive_attention_dims)
from .tensor import BatchNormState, Parameter, Tensor, TensorError


class ConfigError(ValueError):
    pass


@dataclass
class NetworkConfig:
    input_size: tuple[int, int] = (32, 32)
    stem_kernel: int = 3
    stem_stride: int = 1
    stem_channels: int = 16
    stem_pool: bool = False          # extra 2x pool after the stem (full profile)
    block_layout: tuple[int, ...] = (2, 2, 2, 2)
    growth_rate: int = 8
    compression: float = 0.5
    num_classes: int = 14
    bottleneck_factor: int = 4
    attention_heads: int = 2
    attention_output_dim: int | None = None   # None: derived from growth_rate
    attention_relative_positions: bool = False
    attention_positions_cap: int = 1024
    # composite-layer indices within each block that get the attention branch
    attention_placement: tuple[int, ...] = (0,)

    def __post_init__(self):
        self.input_size = tuple(self.input_size)
        self.block_layout = tuple(self.block_layout)
        self.attention_placement = tuple(self.attention_placement)
        if not self.block_layout or any(l < 1 for l in self.block_layout):
            raise ConfigError("block_layout must be a nonempty list of positive counts")
        if self.growth_rate < 1:
            raise ConfigError("growth_rate must be >= 1")
        if not 0 < self.compression <= 1:
            raise ConfigError("compression must be in (0, 1]")
        if self.num_classes < 1:
            raise ConfigError("num_classes must be positive")

    def attention_config(self) -> AttentionConfig:
        if self.attention_output_dim is None:
            d_out, d_k, d_h = derive_attention_dims(self.growth_rate,
                                                    self.attention_heads)
        else:
            d_out = self.attention_output_dim
            d_k = d_h = max(1, d_out // self.attention_heads)
        return AttentionConfig(
            num_heads=self.attention_heads,
            key_dim=d_k, value_dim=d_h, output_dim=d_out,
            relative_positions=self.attention_relative_positions,
            max_rel_extent=max(self.input_size),
            positions_cap=self.attention_positions_cap)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_size"] = list(self.input_size)
        d["block_layout"] = list(self.block_layout)
        d["attention_placement"] = list(self.attention_placement)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        return cls(**d)


def desk_profile(**overrides) -> NetworkConfig:
    """Small configuration meant to train on a laptop-class machine."""
    return NetworkConfig(**overrides)


def full_profile(**overrides) -> NetworkConfig:
    """DenseNet-121-shaped configuration; built for structural checks only."""
    base = dict(input_size=(224, 224), stem_kernel=7, stem_stride=2,
                stem_channels=64, stem_pool=True,
                block_layout=(6, 12, 24, 16), growth_rate=32, compression=0.5)
    base.update(overrides)
    return NetworkConfig(**base)


# ---------------------------------------------------------------------------
# layers

class _BatchNorm:
    def __init__(self, channels: int, prefix: str):
        self.gamma = Parameter(np.ones(channels), f"{prefix}/gamma")
        self.beta = Parameter(np.zeros(channels), f"{prefix}/beta")
        self.state = BatchNormState(channels)
        # start from the conventional identity statistics so a freshly built
        # network can run in eval mode
        self.state.running_mean = np.zeros(channels)
        self.state.running_var = np.ones(channels)
        self.prefix = prefix

    def forward(self, x: Tensor, train: bool) -> Tensor:
        return T.batchnorm2d(x, self.gamma, self.beta, self.state, train)

    def parameters(self):
        return [self.gamma, self.beta]


class _Conv:
    def __init__(self, in_ch: int, out_ch: int, kernel: int, stride: int,
                 padding: int, prefix: str, rng: np.random.Generator):
        self.weight = Parameter(
            T.fan_in_uniform(rng, (out_ch, in_ch, kernel, kernel),
                             in_ch * kernel * kernel),
            f"{prefix}/weight")
        self.bias = Parameter(np.zeros(out_ch), f"{prefix}/bias")
        self.stride, self.padding = stride, padding

    def forward(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, self.stride, self.padding)

    def parameters(self):
        return [self.weight, self.bias]


class _CompositeLayer:
    """BN -> ReLU -> 1x1 conv (bottleneck) -> BN -> ReLU -> 3x3 conv
    producing growth_rate channels; the final conv may carry an attention
    branch."""

    def __init__(self, in_ch: int, growth: int, attn_config: AttentionConfig | None,
                 bottleneck_factor: int, prefix: str, rng: np.random.Generator):
        mid = bottleneck_factor * growth
        self.bn1 = _BatchNorm(in_ch, f"{prefix}/bn1")
        self.conv1 = _Conv(in_ch, mid, 1, 1, 0, f"{prefix}/conv1", rng)
        self.bn2 = _BatchNorm(mid, f"{prefix}/bn2")
        if attn_config is not None and attn_config.output_dim > 0:
            self.conv2 = AttentionAugmentedConv(mid, growth, attn_config,
                                                f"{prefix}/conv2", rng)
        else:
            self.conv2 = _Conv(mid, growth, 3, 1, 1, f"{prefix}/conv2", rng)

    def forward(self, x: Tensor, train: bool) -> Tensor:
        h = T.relu(self.bn1.forward(x, train))
        h = self.conv1.forward(h)
        h = T.relu(self.bn2.forward(h, train))
        if isinstance(self.conv2, AttentionAugmentedConv):
            return self.conv2.forward(h)
        return self.conv2.forward(h)

    def parameters(self):
        return (self.bn1.parameters() + self.conv1.parameters()
                + self.bn2.parameters() + self.conv2.parameters())

    def batchnorms(self):
        return [self.bn1, self.bn2]


class _DenseBlock:
    def __init__(self, in_ch: int, num_layers: int, growth: int,
                 attn_config: AttentionConfig | None, placement: tuple[int, ...],
                 bottleneck_factor: int, prefix: str, rng: np.random.Generator):
        self.layers = []
        ch = in_ch
        for i in range(num_layers):
            cfg = attn_config if i in placement else None
            self.layers.append(_CompositeLayer(ch, growth, cfg, bottleneck_factor,
                                               f"{prefix}/layer{i}", rng))
            ch += growth
        self.out_channels = ch

    def forward(self, x: Tensor, train: bool) -> Tensor:
        feats = [x]
        for layer in self.layers:
            current = feats[0] if len(feats) == 1 else T.concat_channels(feats)
            feats.append(layer.forward(current, train))
        return T.concat_channels(feats)

    def parameters(self):
        return [p for l in self.layers for p in l.parameters()]

    def batchnorms(self):
        return [bn for l in self.layers for bn in l.batchnorms()]


class _Transition:
    """BN -> ReLU -> 1x1 conv compressing channels -> 2x average pool."""

    def __init__(self, in_ch: int, compression: float, prefix: str,
                 rng: np.random.Generator):
        self.out_channels = int(np.floor(compression * in_ch))
        self.bn = _BatchNorm(in_ch, f"{prefix}/bn")
        self.conv = _Conv(in_ch, self.out_channels, 1, 1, 0, f"{prefix}/conv", rng)

    def forward(self, x: Tensor, train: bool) -> Tensor:
        h = T.relu(self.bn.forward(x, train))
        h = self.conv.forward(h)
        return T.avgpool2d(h, 2, 2)

    def parameters(self):
        return self.bn.parameters() + self.conv.parameters()

    def batchnorms(self):
        return [self.bn]


class Network:
    """Backbone + classifier head; exposes a flat named-parameter registry."""

    def __init__(self, config: NetworkConfig, seed: int):
        self.config = config
        self.seed = seed
        rng = np.random.default_rng(seed)
        attn = config.attention_config() if config.attention_placement else None

        self.stem = _Conv(3, config.stem_channels, config.stem_kernel,
                          config.stem_stride, config.stem_kernel // 2, "stem", rng)
        self.blocks: list[_DenseBlock] = []
        self.transitions: list[_Transition] = []
        ch = config.stem_channels
        for b, num_layers in enumerate(config.block_layout):
            block = _DenseBlock(ch, num_layers, config.growth_rate, attn,
                                config.attention_placement,
                                config.bottleneck_factor, f"block{b + 1}", rng)
            self.blocks.append(block)
            ch = block.out_channels
            if b != len(config.block_layout) - 1:
                trans = _Transition(ch, config.compression, f"trans{b + 1}", rng)
                self.transitions.append(trans)
                ch = trans.out_channels
        self.head_bn = _BatchNorm(ch, "head/bn")
        self.fc_weight = Parameter(
            T.fan_in_uniform(rng, (ch, config.num_classes), ch), "head/fc/weight")
        self.fc_bias = Parameter(np.zeros(config.num_classes), "head/fc/bias")
        self.feature_channels = ch

        self._registry: dict[str, Parameter] = {}
        for p in self._all_parameters():
            if p.name in self._registry:
                raise ConfigError(f"duplicate parameter name {p.name}")
            self._registry[p.name] = p

    def _all_parameters(self):
        ps = list(self.stem.parameters())
        for i, block in enumerate(self.blocks):
            ps += block.parameters()
            if i < len(self.transitions):
                ps += self.transitions[i].parameters()
        ps += self.head_bn.parameters() + [self.fc_weight, self.fc_bias]
        return ps

    def parameters(self) -> dict[str, Parameter]:
        return self._registry

    def parameter_count(self) -> int:
        return sum(p.data.size for p in self._registry.values())

    def batchnorms(self):
        bns = []
        for i, block in enumerate(self.blocks):
            bns += block.batchnorms()
            if i < len(self.transitions):
                bns += self.transitions[i].batchnorms()
        bns.append(self.head_bn)
        return bns

    def zero_grad(self) -> None:
        for p in self._registry.values():
            p.zero_grad()

    def forward(self, batch: Tensor, train: bool = False) -> Tensor:
        if batch.data.ndim != 4 or batch.shape[1] != 3:
            raise TensorError(f"expected B x 3 x H x W input, got {batch.shape}")
        if batch.shape[2:] != self.config.input_size:
            raise TensorError(
                f"input spatial size {batch.shape[2:]} != configured "
                f"{self.config.input_size}")
        h = self.stem.forward(batch)
        if self.config.stem_pool:
            h = T.avgpool2d(h, 2, 2)
        for i, block in enumerate(self.blocks):
            h = block.forward(h, train)
            if i < len(self.transitions):
                h = self.transitions[i].forward(h, train)
        h = T.relu(self.head_bn.forward(h, train))
        h = T.global_avgpool(h)
        h = T.reshape(h, (h.shape[0], h.shape[1]))
        return T.linear(h, self.fc_weight, self.fc_bias)

    def predict_probabilities(self, batch: Tensor) -> Tensor:
        return T.sigmoid(self.forward(batch, train=False))

    # -- state as flat named arrays (parameters + batchnorm running stats) --

    def state_arrays(self) -> list[tuple[str, np.ndarray]]:
        items = [(name, p.data) for name, p in self._registry.items()]
        for bn in self.batchnorms():
            items.append((f"{bn.prefix}/running_mean", bn.state.running_mean))
            items.append((f"{bn.prefix}/running_var", bn.state.running_var))
        return items

    def load_state_arrays(self, arrays: dict[str, np.ndarray],
                          strict: bool = True) -> dict:
        report = {"loaded": [], "skipped": []}
        targets: dict[str, np.ndarray] = {n: p.data for n, p in self._registry.items()}
        setters = {}
        for bn in self.batchnorms():
            setters[f"{bn.prefix}/running_mean"] = (bn.state, "running_mean")
            setters[f"{bn.prefix}/running_var"] = (bn.state, "running_var")

        for name, arr in arrays.items():
            if name in targets:
                if targets[name].shape != arr.shape:
                    if strict:
                        raise TensorError(
                            f"shape mismatch for {name}: "
                            f"{targets[name].shape} vs {arr.shape}")
                    report["skipped"].append((name, "shape mismatch"))
                    continue
                self._registry[name].data = arr.astype(np.float64).copy()
                report["loaded"].append(name)
            elif name in setters:
                state, attr = setters[name]
                setattr(state, attr, arr.astype(np.float64).copy())
                report["loaded"].append(name)
            else:
                if strict:
                    raise TensorError(f"unknown parameter {name} in archive")
                report["skipped"].append((name, "no such parameter"))
        missing = (set(targets) | set(setters)) - set(arrays)
        if missing and strict:
            raise TensorError(f"archive missing parameters: {sorted(missing)[:5]}...")
        for name in sorted(missing):
            report["skipped"].append((name, "absent from archive"))
        return report


def build(config: NetworkConfig, seed: int) -> Network:
    return Network(config, seed)


# ---------------------------------------------------------------------------
# checkpoint archive: JSON manifest record, then (name, tensor) records in
# the binary tensor format.

def save_archive(path, meta: dict, arrays: list[tuple[str, np.ndarray]]) -> None:
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)
        f.write(struct.pack("<I", len(arrays)))
        for name, arr in arrays:
            nb = name.encode("utf-8")
            f.write(struct.pack("<I", len(nb)))
            f.write(nb)
            T.write_tensor(f, arr)


def load_archive(path) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as f:
        (meta_len,) = struct.unpack("<Q", f.read(8))
        meta = json.loads(f.read(meta_len).decode("utf-8"))
        (count,) = struct.unpack("<I", f.read(4))
        arrays: dict[str, np.ndarray] = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<I", f.read(4))
            name = f.read(name_len).decode("utf-8")
            arrays[name] = T.read_tensor(f)
    return meta, arrays


def export_weights(net: Network, path) -> None:
    save_archive(path, {"config": net.config.to_dict()}, net.state_arrays())


def import_pretrained(net: Network, path, strict: bool = True) -> dict:
    """Load name-matched, shape-matched parameters from a weight archive.

    strict=True errors on any mismatch; otherwise mismatches are reported
    under "skipped"."""
    _, arrays = load_archive(path)
    return net.load_state_arrays(arrays, strict=strict)
