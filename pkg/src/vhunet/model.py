"""The full bias-field correction network.

An encoder of ConvHTBlocks (two VGG blocks, then a 2D Hadamard transform,
trainable coefficient scaling, semi-soft shrinkage and the inverse transform)
feeds a transformer bottleneck operating on Hadamard-domain tokens; a decoder
of upsample/skip/ConvHTBlock stages, modulated channel-wise by a hypernetwork,
ends in a 1x1 conv head whose exponential output is the multiplicative scalar
field. Corrected image = input * field.

The final encoder block skips the inverse transform: its output is the
Hadamard-domain latent whose AC coefficients the variational loss regularizes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from .autodiff import (
    Tensor, clip, concat, conv2d, exp, maxpool2d, no_grad, relu, reshape,
    transpose, upsample_nearest2x,
)
from .container import read_vhut, write_vhut
from .errors import ConfigError, DataError
from .hadamard import (
    HadamardPlan, ScalingParams, ThresholdParams, ht2d, iht2d, scale, semi_soft,
)
from .layers import (
    HyperNetParams, TransformerBlockParams, VggBlockParams, hypernet_forward,
    hypernet_modulate, kaiming_conv, transformer_block, vgg_block,
)


def _is_pow2(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


@dataclass
class VhuNetConfig:
    """Architecture hyperparameters.

    Stage i of the encoder has base_channels * 2**(i-1) channels; spatial
    extents halve between stages, so height and width must be powers of two
    at least 2**(n_encoder - 1). The decoder has n_encoder - 1 stages.
    """

    height: int = 32
    width: int = 32
    n_encoder: int = 3
    base_channels: int = 8
    heads: int = 8
    xi: float = 0.1
    leaky_slope: float = 0.01
    norm_eps: float = 1e-5
    hypernet_hidden: int = 32

    @staticmethod
    def desk() -> "VhuNetConfig":
        """Small preset trainable on a CPU in minutes (32x32 inputs)."""
        return VhuNetConfig()

    @staticmethod
    def full() -> "VhuNetConfig":
        """Full-scale preset: 6 encoder stages, 16 base channels, 256x256."""
        return VhuNetConfig(height=256, width=256, n_encoder=6, base_channels=16)

    @staticmethod
    def preset(name: str) -> "VhuNetConfig":
        if name == "desk":
            return VhuNetConfig.desk()
        if name == "full":
            return VhuNetConfig.full()
        raise ConfigError(f"unknown model preset '{name}' (expected desk or full)")

    def validate(self) -> None:
        if self.n_encoder < 2:
            raise ConfigError(f"n_encoder must be at least 2, got {self.n_encoder}")
        if not (_is_pow2(self.height) and _is_pow2(self.width)):
            raise ConfigError(f"input extents must be powers of two, got {self.height}x{self.width}")
        least = 1 << (self.n_encoder - 1)
        if self.height < least or self.width < least:
            raise ConfigError(
                f"{self.n_encoder} encoder stages need extents >= {least}, "
                f"got {self.height}x{self.width}"
            )
        if self.base_channels < 1:
            raise ConfigError("base_channels must be positive")
        latent = self.base_channels << (self.n_encoder - 1)
        if latent % self.heads:
            raise ConfigError(
                f"latent width {latent} not divisible by {self.heads} attention heads"
            )
        if self.hypernet_hidden < 1:
            raise ConfigError("hypernet_hidden must be positive")
        if self.norm_eps <= 0:
            raise ConfigError("norm_eps must be positive")
        if self.leaky_slope < 0:
            raise ConfigError("leaky_slope must be nonnegative")

    def stage_channels(self) -> list:
        return [self.base_channels << i for i in range(self.n_encoder)]

    def to_text(self) -> str:
        return "".join(f"{f.name} = {getattr(self, f.name)}\n" for f in fields(self))

    @classmethod
    def from_text(cls, text: str) -> "VhuNetConfig":
        known = {f.name for f in fields(cls)}
        defaults = cls()
        kwargs = {}
        for raw in text.splitlines():
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"bad config line (expected key = value): {raw!r}")
            key, _, val = line.partition("=")
            key, val = key.strip(), val.strip()
            if key not in known:
                raise ConfigError(f"unknown model config key '{key}'")
            caster = type(getattr(defaults, key))
            try:
                kwargs[key] = caster(val)
            except ValueError as e:
                raise ConfigError(f"bad value for '{key}': {val!r}") from e
        cfg = cls(**kwargs)
        cfg.validate()
        return cfg


class ConvHtBlockParams:
    """Two VGG blocks plus the transform-domain scaling and threshold."""

    def __init__(self, rng, c_in: int, c_out: int, h: int, w: int, slope: float):
        self.vgg1 = VggBlockParams(rng, c_in, c_out, slope)
        self.vgg2 = VggBlockParams(rng, c_out, c_out, slope)
        self.scaling = ScalingParams(h, w)
        self.threshold = ThresholdParams(h, w)
        self.plan = HadamardPlan(h, w)

    def named(self):
        for n, p in self.vgg1.named():
            yield f"vgg1.{n}", p
        for n, p in self.vgg2.named():
            yield f"vgg2.{n}", p
        yield "ht.theta", self.scaling.theta
        yield "ht.t_raw", self.threshold.t_raw


def conv_ht_block(x: Tensor, p: ConvHtBlockParams, apply_inverse: bool = True,
                  eps: float = 1e-5, mods=None, apply_ht: bool = True) -> Tensor:
    """vgg -> vgg -> ht2d -> scale -> semi_soft -> (iht2d if apply_inverse).

    ``mods`` optionally holds two (gamma, beta) channel modulations applied
    after the respective VGG blocks (decoder stages). ``apply_ht=False``
    short-circuits the whole transform branch (the stripped network).
    """
    h = vgg_block(x, p.vgg1, eps)
    if mods is not None:
        h = hypernet_modulate(h, mods[0][0], mods[0][1])
    h = vgg_block(h, p.vgg2, eps)
    if mods is not None:
        h = hypernet_modulate(h, mods[1][0], mods[1][1])
    if not apply_ht:
        return h
    y = ht2d(h, p.plan)
    y = scale(y, p.scaling.theta)
    y = semi_soft(y, relu(p.threshold.t_raw))
    if apply_inverse:
        y = iht2d(y, p.plan)
    return y


class IhtrtbParams:
    """Two transformer blocks over Hadamard-domain tokens, then shrinkage
    and the inverse transform back to the spatial domain."""

    def __init__(self, rng, s: int, heads: int, h: int, w: int, slope: float):
        self.tb1 = TransformerBlockParams(rng, s, heads, slope)
        self.tb2 = TransformerBlockParams(rng, s, heads, slope)
        self.threshold = ThresholdParams(h, w)
        self.plan = HadamardPlan(h, w)

    def named(self):
        for n, p in self.tb1.named():
            yield f"tb1.{n}", p
        for n, p in self.tb2.named():
            yield f"tb2.{n}", p
        yield "ht.t_raw", self.threshold.t_raw


def ihtrtb(y: Tensor, p: IhtrtbParams, eps: float = 1e-5) -> Tensor:
    """Tokens are spatial positions; features are the channels at one position."""
    lead = y.shape[:-3]
    s, m, n = y.shape[-3:]
    nl = len(lead)
    swap = tuple(range(nl)) + (nl + 1, nl)
    tokens = transpose(reshape(y, lead + (s, m * n)), swap)
    tokens = transformer_block(tokens, p.tb1, eps)
    tokens = transformer_block(tokens, p.tb2, eps)
    back = reshape(transpose(tokens, swap), lead + (s, m, n))
    back = semi_soft(back, relu(p.threshold.t_raw))
    return iht2d(back, p.plan)


class DecoderStageParams:
    """Upsampling 3x3 conv (halves channels) plus a ConvHTBlock that takes the
    skip concatenation back down to the stage width."""

    def __init__(self, rng, c_in: int, c_out: int, h: int, w: int, slope: float):
        self.upconv_kernel = kaiming_conv(rng, c_out, c_in, 3)
        self.upconv_bias = Tensor(np.zeros(c_out), requires_grad=True)
        self.block = ConvHtBlockParams(rng, 2 * c_out, c_out, h, w, slope)

    def named(self):
        yield "upconv.kernel", self.upconv_kernel
        yield "upconv.bias", self.upconv_bias
        for n, p in self.block.named():
            yield n, p


class VhuNet:
    """The assembled model; parameters live in a flat named namespace like
    ``encoder.block1.vgg1.kernel`` or ``decoder.ihtrtb.tb1.attn.h0.wq``."""

    def __init__(self, config: VhuNetConfig, seed: int = 0):
        config.validate()
        self.config = config
        rng = np.random.default_rng(seed)
        slope = config.leaky_slope
        chans = config.stage_channels()
        n = config.n_encoder
        hs = [config.height >> i for i in range(n)]
        ws = [config.width >> i for i in range(n)]

        self.encoder = []
        c_prev = 1
        for i in range(n):
            self.encoder.append(ConvHtBlockParams(rng, c_prev, chans[i], hs[i], ws[i], slope))
            c_prev = chans[i]

        self.bottleneck = IhtrtbParams(rng, chans[-1], config.heads, hs[-1], ws[-1], slope)

        self.decoder = []
        dec_chans = chans[-2::-1]
        c_prev = chans[-1]
        for m, c in enumerate(dec_chans):
            lvl = n - 2 - m
            self.decoder.append(DecoderStageParams(rng, c_prev, c, hs[lvl], ws[lvl], slope))
            c_prev = c

        # one (scale, bias) pair per decoder VGG block, two blocks per stage;
        # zero final-layer weights with this bias make the initial modulation
        # an exact identity
        self._mod_channels = [c for c in dec_chans for _ in range(2)]
        out_dim = 2 * sum(self._mod_channels)
        identity_bias = np.concatenate(
            [np.concatenate([np.ones(c), np.zeros(c)]) for c in self._mod_channels]
        )
        self.hypernet = HyperNetParams(rng, out_dim, config.hypernet_hidden,
                                       identity_bias, slope)

        # zero-initialized head: the untrained field is exactly one everywhere
        self.head_kernel = Tensor(np.zeros((1, dec_chans[-1], 1, 1)), requires_grad=True)
        self.head_bias = Tensor(np.zeros(1), requires_grad=True)

    # -- parameters -----------------------------------------------------------

    def named_parameters(self) -> dict:
        out = {}
        for i, blk in enumerate(self.encoder, start=1):
            for name, p in blk.named():
                out[f"encoder.block{i}.{name}"] = p
        for name, p in self.bottleneck.named():
            out[f"decoder.ihtrtb.{name}"] = p
        for m, st in enumerate(self.decoder, start=1):
            for name, p in st.named():
                out[f"decoder.stage{m}.{name}"] = p
        for name, p in self.hypernet.named():
            out[f"hypernet.{name}"] = p
        out["head.kernel"] = self.head_kernel
        out["head.bias"] = self.head_bias
        return out

    def n_parameters(self) -> int:
        return sum(p.size for p in self.named_parameters().values())

    # -- forward passes ---------------------------------------------------------

    def _modulations(self, xi: float) -> list:
        vec = hypernet_forward(xi, self.hypernet)
        mods, pos = [], 0
        for c in self._mod_channels:
            mods.append((vec[pos:pos + c], vec[pos + c:pos + 2 * c]))
            pos += 2 * c
        return mods

    def _check_input(self, x):
        """Accepts one [1,H,W] image or a [B,1,H,W] batch; returns the input
        as a 4D tensor plus whether to squeeze the batch axis back out."""
        if not isinstance(x, Tensor):
            x = Tensor(x)
        want = (1, self.config.height, self.config.width)
        if x.shape == want:
            return reshape(x, (1,) + want), True
        if x.ndim == 4 and x.shape[1:] == want:
            return x, False
        raise DataError(f"input shape {x.shape} does not match model input {want}")

    def forward_with_latent(self, x, xi=None):
        """Returns (scalar_field, hadamard_latent); the latent feeds the
        sparsity term of the training loss. Shapes mirror the input: a single
        [1,H,W] image yields a [1,H,W] field and a [C,M,N] latent, a [B,1,H,W]
        batch yields [B,1,H,W] and [B,C,M,N]."""
        x, squeeze = self._check_input(x)
        xi = self.config.xi if xi is None else float(xi)
        eps = self.config.norm_eps
        n = self.config.n_encoder

        skips = []
        h = x
        for i, blk in enumerate(self.encoder):
            last = i == n - 1
            h = conv_ht_block(h, blk, apply_inverse=not last, eps=eps)
            if not last:
                skips.append(h)
                h = maxpool2d(h, 2)
        latent = h

        h = ihtrtb(h, self.bottleneck, eps)

        mods = self._modulations(xi)
        for m, st in enumerate(self.decoder):
            h = upsample_nearest2x(h)
            h = conv2d(h, st.upconv_kernel, stride=1, padding=1, bias=st.upconv_bias)
            h = concat([h, skips[n - 2 - m]], axis=1)
            h = conv_ht_block(h, st.block, apply_inverse=True, eps=eps,
                              mods=mods[2 * m:2 * m + 2])

        u = conv2d(h, self.head_kernel, stride=1, padding=0, bias=self.head_bias)
        field = exp(clip(u, math.log(1e-3), math.log(1e3)))
        if squeeze:
            field = reshape(field, field.shape[1:])
            latent = reshape(latent, latent.shape[1:])
        return field, latent

    def forward(self, x, xi=None) -> Tensor:
        field, _ = self.forward_with_latent(x, xi)
        return field

    def forward_stripped(self, x, xi=None) -> Tensor:
        """The same network with every transform-domain branch removed: a
        plain convolutional encoder-decoder over the identical parameters.
        Reference path for the identity-collapse property."""
        x, squeeze = self._check_input(x)
        xi = self.config.xi if xi is None else float(xi)
        eps = self.config.norm_eps
        n = self.config.n_encoder

        skips = []
        h = x
        for i, blk in enumerate(self.encoder):
            h = conv_ht_block(h, blk, eps=eps, apply_ht=False)
            if i != n - 1:
                skips.append(h)
                h = maxpool2d(h, 2)

        mods = self._modulations(xi)
        for m, st in enumerate(self.decoder):
            h = upsample_nearest2x(h)
            h = conv2d(h, st.upconv_kernel, stride=1, padding=1, bias=st.upconv_bias)
            h = concat([h, skips[n - 2 - m]], axis=1)
            h = conv_ht_block(h, st.block, eps=eps, mods=mods[2 * m:2 * m + 2],
                              apply_ht=False)

        u = conv2d(h, self.head_kernel, stride=1, padding=0, bias=self.head_bias)
        field = exp(clip(u, math.log(1e-3), math.log(1e3)))
        if squeeze:
            field = reshape(field, field.shape[1:])
        return field

    def correct(self, x_raw):
        """Normalize, estimate the field, multiply, map back to the original
        intensity scale. Returns (corrected, field) as plain-value tensors."""
        if not isinstance(x_raw, Tensor):
            x_raw = Tensor(x_raw)
        lo = float(x_raw.data.min())
        hi = float(x_raw.data.max())
        if hi <= lo:
            raise DataError("degenerate image: max intensity equals min")
        with no_grad():
            x_norm = Tensor((x_raw.data - lo) / (hi - lo))
            field = self.forward(x_norm)
            corrected = x_norm.data * field.data * (hi - lo) + lo
        return Tensor(corrected), Tensor(field.data.copy())

    # -- persistence -----------------------------------------------------------

    def save(self, path) -> None:
        """Checkpoint: tensor container of parameters + config sidecar."""
        write_vhut(path, {name: p.data for name, p in self.named_parameters().items()})
        Path(str(path) + ".cfg").write_text(self.config.to_text())

    @classmethod
    def load(cls, path) -> "VhuNet":
        sidecar = Path(str(path) + ".cfg")
        if not sidecar.exists():
            raise DataError(f"checkpoint sidecar not found: {sidecar}")
        config = VhuNetConfig.from_text(sidecar.read_text())
        model = cls(config)
        stored = read_vhut(path)
        params = model.named_parameters()
        missing = sorted(set(params) - set(stored))
        extra = sorted(set(stored) - set(params))
        if missing or extra:
            raise DataError(
                f"checkpoint does not match architecture (missing {missing[:3]}, "
                f"unexpected {extra[:3]})"
            )
        for name, p in params.items():
            if stored[name].shape != p.data.shape:
                raise DataError(
                    f"checkpoint tensor '{name}' has shape {stored[name].shape}, "
                    f"expected {p.data.shape}"
                )
            p.data = stored[name].copy()
        return model


def zero_transformer_weights(model: VhuNet) -> None:
    """Zero every bottleneck transformer parameter, normalization affines
    included, so both sublayers emit zero and each block reduces to its
    residual path."""
    for blk in (model.bottleneck.tb1, model.bottleneck.tb2):
        for _, p in blk.named():
            p.data[...] = 0.0
