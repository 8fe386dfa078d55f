"""2D multi-head self-attention over feature maps and the attention-augmented
convolution block that concatenates a convolutional branch with an attentional
branch over the same input."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Parameter, Tensor, TensorError, _make


@dataclass
class AttentionConfig:
    num_heads: int = 2
    key_dim: int = 4            # D_k per head
    value_dim: int = 4          # D_h per head
    output_dim: int = 8         # D_out after the output projection
    relative_positions: bool = False
    max_rel_extent: int = 32    # embedding capacity per spatial axis
    positions_cap: int = 1024   # average-pool before attention above this

    def __post_init__(self):
        if self.num_heads < 1 or self.key_dim < 1 or self.value_dim < 1:
            raise ValueError("attention dims must be positive")
        if self.output_dim < 0:
            raise ValueError("output_dim must be nonnegative")

    @property
    def concat_dim(self) -> int:
        return self.num_heads * self.value_dim


def derive_attention_dims(f_out: int, num_heads: int) -> tuple[int, int, int]:
    """Default channel split: D_out = ceil(f_out/5) rounded up to a multiple
    of num_heads, D_k = D_h = D_out / num_heads.  Returns (d_out, d_k, d_h)."""
    d_out = -(-f_out // 5)
    if d_out % num_heads:
        d_out += num_heads - d_out % num_heads
    per_head = max(1, d_out // num_heads)
    return d_out, per_head, per_head


class AttentionWeights:
    """Per-head Q/K/V projections, the output projection, and (optionally)
    per-axis relative-position embeddings.  All are named parameters under
    the given prefix (e.g. "block1/layer0/attn")."""

    def __init__(self, in_channels: int, config: AttentionConfig, prefix: str,
                 rng: np.random.Generator):
        self.config = config
        self.in_channels = in_channels
        c, dk, dh, nh = in_channels, config.key_dim, config.value_dim, config.num_heads
        self.w_qry = [Parameter(T.fan_in_uniform(rng, (c, dk), c),
                                f"{prefix}/head{h}/w_qry") for h in range(nh)]
        self.w_key = [Parameter(T.fan_in_uniform(rng, (c, dk), c),
                                f"{prefix}/head{h}/w_key") for h in range(nh)]
        self.w_val = [Parameter(T.fan_in_uniform(rng, (c, dh), c),
                                f"{prefix}/head{h}/w_val") for h in range(nh)]
        self.w_out = Parameter(
            T.fan_in_uniform(rng, (nh * dh, config.output_dim), nh * dh),
            f"{prefix}/w_out")
        self.rel_height = None
        self.rel_width = None
        if config.relative_positions:
            n = 2 * config.max_rel_extent - 1
            self.rel_height = Parameter(
                T.fan_in_uniform(rng, (n, dk), dk), f"{prefix}/rel_height")
            self.rel_width = Parameter(
                T.fan_in_uniform(rng, (n, dk), dk), f"{prefix}/rel_width")

    def parameters(self) -> list[Parameter]:
        ps = [*self.w_qry, *self.w_key, *self.w_val, self.w_out]
        if self.rel_height is not None:
            ps += [self.rel_height, self.rel_width]
        return ps

    def parameter_count(self) -> int:
        return sum(p.data.size for p in self.parameters())


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor,
                         extra_logits: Tensor | None = None) -> Tensor:
    """softmax(q kᵀ / sqrt(d_k)) v over batched position sequences.

    q, k: batch × positions × d_k; v: batch × positions × d_h.
    extra_logits, when given, is added to the scaled scores before softmax.
    """
    if q.shape[-1] != k.shape[-1]:
        raise TensorError(f"query/key dim mismatch: {q.shape} vs {k.shape}")
    if k.shape[-2] != v.shape[-2]:
        raise TensorError(f"key/value position mismatch: {k.shape} vs {v.shape}")
    d_k = q.shape[-1]
    logits = T.scale(T.matmul(q, T.transpose(k, (0, 2, 1))), 1.0 / np.sqrt(d_k))
    if extra_logits is not None:
        logits = T.add(logits, extra_logits)
    weights = T.softmax(logits, axis=-1)
    return T.matmul(weights, v)


def relative_logits(q: Tensor, rel_height: Tensor, rel_width: Tensor,
                    height: int, width: int) -> Tensor:
    """Additive position logits: L[b,i,j] = q[b,i] · (rh[Δrow] + rw[Δcol])
    where Δrow/Δcol are the row/column offsets from position i to j on the
    height × width grid, indexed from the center of each embedding table."""
    p = height * width
    if q.shape[-2] != p:
        raise TensorError(f"query has {q.shape[-2]} positions, grid has {p}")
    max_h = (rel_height.shape[0] + 1) // 2
    max_w = (rel_width.shape[0] + 1) // 2
    if height > max_h or width > max_w:
        raise TensorError(
            f"grid {height}x{width} exceeds relative embedding capacity "
            f"{max_h}x{max_w}")
    rows = np.arange(p) // width
    cols = np.arange(p) % width
    h_idx = (rows[None, :] - rows[:, None]) + max_h - 1   # (P, P)
    w_idx = (cols[None, :] - cols[:, None]) + max_w - 1
    emb = rel_height.data[h_idx] + rel_width.data[w_idx]  # (P, P, d_k)
    y = np.einsum("bpk,pqk->bpq", q.data, emb, optimize=True)
    out = None

    def backward():
        g = out.grad
        if q.requires_grad:
            q._accumulate(np.einsum("bpq,pqk->bpk", g, emb, optimize=True))
        if rel_height.requires_grad or rel_width.requires_grad:
            d_emb = np.einsum("bpq,bpk->pqk", g, q.data, optimize=True)
            if rel_height.requires_grad:
                dh = np.zeros_like(rel_height.data)
                np.add.at(dh, h_idx.reshape(-1),
                          d_emb.reshape(-1, d_emb.shape[-1]))
                rel_height._accumulate(dh)
            if rel_width.requires_grad:
                dw = np.zeros_like(rel_width.data)
                np.add.at(dw, w_idx.reshape(-1),
                          d_emb.reshape(-1, d_emb.shape[-1]))
                rel_width._accumulate(dw)

    out = _make(y, (q, rel_height, rel_width), backward, "relative_logits")
    return out


def multi_head_self_attention(x: Tensor, weights: AttentionWeights,
                              config: AttentionConfig) -> Tensor:
    """MHSA over a B×C×H×W feature map, returning B×D_out×H×W.

    When H·W exceeds positions_cap the input is average-pooled to fit and the
    attention output is nearest-neighbor upsampled back."""
    if x.data.ndim != 4:
        raise TensorError("multi_head_self_attention expects a 4-D input")
    b, c, h, w = x.shape
    if c != weights.in_channels:
        raise TensorError(
            f"input has {c} channels, attention weights expect {weights.in_channels}")

    factor = 1
    while (h // factor) * (w // factor) > config.positions_cap:
        factor += 1
        if factor > min(h, w):
            raise TensorError(
                f"no integer pooling factor fits {h}x{w} under the "
                f"{config.positions_cap}-position cap")
        while h % factor or w % factor:
            factor += 1
            if factor > min(h, w):
                raise TensorError(
                    f"no common pooling factor for {h}x{w} under the "
                    f"{config.positions_cap}-position cap")
    if factor > 1:
        x = T.avgpool2d(x, factor, factor)
        h, w = h // factor, w // factor

    p = h * w
    # B×C×H×W -> B×P×C position sequence
    seq = T.transpose(T.reshape(x, (b, c, p)), (0, 2, 1))
    heads = []
    for i in range(config.num_heads):
        q = T.matmul(seq, weights.w_qry[i])
        k = T.matmul(seq, weights.w_key[i])
        v = T.matmul(seq, weights.w_val[i])
        extra = None
        if config.relative_positions:
            scaled_q = T.scale(q, 1.0 / np.sqrt(config.key_dim))
            extra = relative_logits(scaled_q, weights.rel_height,
                                    weights.rel_width, h, w)
        heads.append(scaled_dot_attention(q, k, v, extra))
    merged = heads[0] if len(heads) == 1 else T.concat(heads, axis=2)
    projected = T.matmul(merged, weights.w_out)
    out = T.reshape(T.transpose(projected, (0, 2, 1)),
                    (b, config.output_dim, h, w))
    if factor > 1:
        out = T.upsample_nearest(out, factor)
    return out


class AttentionAugmentedConv:
    """Output channels = conv branch (f_out − d_out) ++ attention branch (d_out).

    The conv branch is a 3×3 stride-1 convolution padded to preserve H×W so
    both branches stay spatially aligned.  d_out = 0 degenerates to a plain
    convolution."""

    def __init__(self, in_channels: int, f_out: int, config: AttentionConfig,
                 prefix: str, rng: np.random.Generator, kernel: int = 3):
        if config.output_dim > f_out:
            raise ValueError("attention output_dim exceeds total output channels")
        self.f_out = f_out
        self.config = config
        self.kernel = kernel
        conv_channels = f_out - config.output_dim
        self.conv_weight = None
        self.conv_bias = None
        if conv_channels > 0:
            self.conv_weight = Parameter(
                T.fan_in_uniform(rng, (conv_channels, in_channels, kernel, kernel),
                                 in_channels * kernel * kernel),
                f"{prefix}/conv/weight")
            self.conv_bias = Parameter(np.zeros(conv_channels), f"{prefix}/conv/bias")
        self.attn = None
        if config.output_dim > 0:
            self.attn = AttentionWeights(in_channels, config, f"{prefix}/attn", rng)

    def parameters(self) -> list[Parameter]:
        ps = []
        if self.conv_weight is not None:
            ps += [self.conv_weight, self.conv_bias]
        if self.attn is not None:
            ps += self.attn.parameters()
        return ps

    def forward(self, x: Tensor) -> Tensor:
        branches = []
        if self.conv_weight is not None:
            branches.append(T.conv2d(x, self.conv_weight, self.conv_bias,
                                     stride=1, padding=self.kernel // 2))
        if self.attn is not None:
            branches.append(multi_head_self_attention(x, self.attn, self.config))
        out = branches[0] if len(branches) == 1 else T.concat_channels(branches)
        if out.shape[1] != self.f_out:
            raise TensorError("attention-augmented conv channel bookkeeping broke")
        return out


def mhsa_parameter_count(in_channels: int, config: AttentionConfig) -> int:
    """Closed-form parameter count of one MHSA layer."""
    n = config.num_heads * in_channels * (2 * config.key_dim + config.value_dim)
    n += config.num_heads * config.value_dim * config.output_dim
    if config.relative_positions:
        n += 2 * (2 * config.max_rel_extent - 1) * config.key_dim
    return n
