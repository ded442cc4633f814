"""Neural building blocks: VGG block, normalizations, attention, MLP,
transformer block and the hypernetwork.

Parameter containers hold plain Tensors and expose ``named()`` iterators of
(relative_name, tensor) pairs; the model prefixes these into its flat
parameter namespace. Weight initialization is Kaiming-style fan-in normal for
convs and linears, 1/sqrt(S) for attention projections, and identity for
normalization affines.
"""

from __future__ import annotations

import numpy as np

from .autodiff import (
    Tensor, concat, conv2d, leaky_relu, matmul, reshape, softmax, standardize,
    transpose,
)
from .errors import ConfigError


def kaiming_conv(rng: np.random.Generator, c_out: int, c_in: int, k: int) -> Tensor:
    std = np.sqrt(2.0 / (c_in * k * k))
    return Tensor(rng.normal(0.0, std, size=(c_out, c_in, k, k)), requires_grad=True)


def kaiming_linear(rng: np.random.Generator, fan_in: int, fan_out: int) -> Tensor:
    std = np.sqrt(2.0 / fan_in)
    return Tensor(rng.normal(0.0, std, size=(fan_in, fan_out)), requires_grad=True)


def _zeros(*shape) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


def _ones(*shape) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=True)


# -- normalizations -----------------------------------------------------------


def instance_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-channel standardization over the spatial grid, then affine."""
    c = x.shape[-3]
    xn = standardize(x, (-2, -1), eps)
    return xn * reshape(gamma, (c, 1, 1)) + reshape(beta, (c, 1, 1))


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Standardize each token along the feature axis, then affine."""
    return standardize(x, -1, eps) * gamma + beta


# -- VGG block ----------------------------------------------------------------


class VggBlockParams:
    """3x3 conv (bias-free), instance-norm affine, leaky-relu slope."""

    def __init__(self, rng: np.random.Generator, c_in: int, c_out: int,
                 slope: float = 0.01):
        self.kernel = kaiming_conv(rng, c_out, c_in, 3)
        self.gamma = _ones(c_out)
        self.beta = _zeros(c_out)
        self.slope = float(slope)

    def named(self):
        yield "kernel", self.kernel
        yield "gamma", self.gamma
        yield "beta", self.beta


def vgg_block(x: Tensor, p: VggBlockParams, eps: float = 1e-5) -> Tensor:
    h = conv2d(x, p.kernel, stride=1, padding=1)
    h = instance_norm(h, p.gamma, p.beta, eps)
    return leaky_relu(h, p.slope)


# -- attention / transformer ---------------------------------------------------


class AttentionParams:
    """Per-head Q/K/V projections (bias-free), output projection with bias."""

    def __init__(self, rng: np.random.Generator, s: int, heads: int):
        if s % heads:
            raise ConfigError(f"token width {s} not divisible by {heads} heads")
        self.s = s
        self.heads = heads
        self.head_dim = s // heads
        std = 1.0 / np.sqrt(s)
        def proj():
            return Tensor(rng.normal(0.0, std, size=(s, self.head_dim)), requires_grad=True)
        self.wq = [proj() for _ in range(heads)]
        self.wk = [proj() for _ in range(heads)]
        self.wv = [proj() for _ in range(heads)]
        self.wo = Tensor(rng.normal(0.0, std, size=(s, s)), requires_grad=True)
        self.bo = _zeros(s)

    def named(self):
        for l in range(self.heads):
            yield f"h{l}.wq", self.wq[l]
            yield f"h{l}.wk", self.wk[l]
            yield f"h{l}.wv", self.wv[l]
        yield "wo", self.wo
        yield "bo", self.bo


def mhsa(tokens: Tensor, p: AttentionParams) -> Tensor:
    """Multi-head scaled dot-product self-attention with internal residual.

    Output is Concat(heads) W_o + b_o + tokens; the residual is part of the
    operator, not of the caller. Heads are evaluated as one stacked matrix
    product over concatenated projections, equivalent to the per-head loop.
    Accepts [G,S] tokens or any stack [...,G,S] of token matrices.
    """
    lead = tokens.shape[:-2]
    g = tokens.shape[-2]
    l, d = p.heads, p.head_dim
    nl = len(lead)
    # [...,G,l,d] -> [...,l,G,d] and the swap of the last two axes
    to_heads = tuple(range(nl)) + (nl + 1, nl, nl + 2)
    swap_last = tuple(range(nl + 1)) + (nl + 2, nl + 1)
    inv_sqrt_d = 1.0 / np.sqrt(d)

    def split(w):
        return transpose(reshape(matmul(tokens, concat(w, axis=1)), lead + (g, l, d)),
                         to_heads)

    q, k, v = split(p.wq), split(p.wk), split(p.wv)
    scores = matmul(q, transpose(k, swap_last)) * inv_sqrt_d
    ctx = matmul(softmax(scores, axis=-1), v)
    merged = reshape(transpose(ctx, to_heads), lead + (g, l * d))
    return matmul(merged, p.wo) + p.bo + tokens


class MlpParams:
    """Two linear layers around a leaky-relu, hidden width 4x the token width."""

    def __init__(self, rng: np.random.Generator, s: int, slope: float = 0.01):
        hidden = 4 * s
        self.w1 = kaiming_linear(rng, s, hidden)
        self.b1 = _zeros(hidden)
        self.w2 = kaiming_linear(rng, hidden, s)
        self.b2 = _zeros(s)
        self.slope = float(slope)

    def named(self):
        yield "w1", self.w1
        yield "b1", self.b1
        yield "w2", self.w2
        yield "b2", self.b2


def mlp(tokens: Tensor, p: MlpParams) -> Tensor:
    h = leaky_relu(matmul(tokens, p.w1) + p.b1, p.slope)
    return matmul(h, p.w2) + p.b2


class TransformerBlockParams:
    def __init__(self, rng: np.random.Generator, s: int, heads: int,
                 slope: float = 0.01):
        self.ln1_gamma = _ones(s)
        self.ln1_beta = _zeros(s)
        self.attn = AttentionParams(rng, s, heads)
        self.ln2_gamma = _ones(s)
        self.ln2_beta = _zeros(s)
        self.mlp = MlpParams(rng, s, slope)

    def named(self):
        yield "ln1.gamma", self.ln1_gamma
        yield "ln1.beta", self.ln1_beta
        for name, p in self.attn.named():
            yield f"attn.{name}", p
        yield "ln2.gamma", self.ln2_gamma
        yield "ln2.beta", self.ln2_beta
        for name, p in self.mlp.named():
            yield f"mlp.{name}", p


def transformer_block(tokens: Tensor, p: TransformerBlockParams,
                      eps: float = 1e-5) -> Tensor:
    """Pre-norm residual pair: attention sublayer then MLP sublayer."""
    tokens = tokens + mhsa(layer_norm(tokens, p.ln1_gamma, p.ln1_beta, eps), p.attn)
    tokens = tokens + mlp(layer_norm(tokens, p.ln2_gamma, p.ln2_beta, eps), p.mlp)
    return tokens


# -- hypernetwork ---------------------------------------------------------------


class HyperNetParams:
    """Three fully connected layers mapping a scalar control to one long
    vector of channel-wise (scale, bias) pairs for the decoder blocks.

    The final layer starts at zero weights with ``init_bias`` as its bias, so
    the initial modulation is whatever identity pattern the caller encodes
    there, independent of the control value.
    """

    def __init__(self, rng: np.random.Generator, out_dim: int, hidden: int,
                 init_bias: np.ndarray, slope: float = 0.01):
        if init_bias.shape != (out_dim,):
            raise ConfigError(f"hypernet bias length {init_bias.shape} != ({out_dim},)")
        self.w1 = kaiming_linear(rng, 1, hidden)
        self.b1 = _zeros(hidden)
        self.w2 = kaiming_linear(rng, hidden, hidden)
        self.b2 = _zeros(hidden)
        self.w3 = _zeros(hidden, out_dim)
        self.b3 = Tensor(init_bias.copy(), requires_grad=True)
        self.slope = float(slope)
        self.out_dim = out_dim

    def named(self):
        yield "w1", self.w1
        yield "b1", self.b1
        yield "w2", self.w2
        yield "b2", self.b2
        yield "w3", self.w3
        yield "b3", self.b3


def hypernet_forward(xi: float, p: HyperNetParams) -> Tensor:
    """Evaluate the hypernetwork at control value xi; returns [out_dim]."""
    x = Tensor(np.array([[float(xi)]]))
    h = leaky_relu(matmul(x, p.w1) + p.b1, p.slope)
    h = leaky_relu(matmul(h, p.w2) + p.b2, p.slope)
    out = matmul(h, p.w3) + p.b3
    return reshape(out, (p.out_dim,))


def hypernet_modulate(g: Tensor, gamma: Tensor, beta: Tensor) -> Tensor:
    """Channel-wise affine g * gamma + beta, broadcast over the spatial grid."""
    c = g.shape[-3]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ConfigError(
            f"modulation lengths {gamma.shape}/{beta.shape} do not match {c} channels"
        )
    return g * reshape(gamma, (c, 1, 1)) + reshape(beta, (c, 1, 1))
