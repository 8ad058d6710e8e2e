"""Hierarchical encoder-decoder crack network with a feature-preserving branch.

Topology, per scale ``k = 1..5`` (resolution ``H / 2**(k-1)``):

* encoder block ``k``: 3x3 conv + ReLU layers producing ``E_k``, then 2x2
  max-pooling that records indices;
* decoder block ``k``: max-unpooling with encoder ``k``'s indices, then 3x3
  conv + ReLU layers producing ``D_k``;
* branch: ``B_1 = E_1`` and ``B_k = merge_k(concat(pool(B_{k-1}), E_k))``
  with a linear 1x1 merge;
* side head ``k``: ``concat(B_k, D_k)`` -> 1x1 conv to one channel ->
  bilinear-initialised deconvolution by ``2**(k-1)``, giving logits ``F^k``;
* fusion: 1x1 conv over ``concat(F^1..F^5)`` giving ``F^fused``.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np

from . import tensor as T
from .exceptions import ConfigError, ShapeError
from .tensor import ConvParams

N_SCALES = 5


@dataclass(frozen=True)
class NetworkConfig:
    input_channels: int = 3
    channels_per_block: Tuple[int, ...] = (64, 128, 256, 512, 512)
    convs_per_block: Tuple[int, ...] = (2, 2, 3, 3, 3)
    use_batchnorm: bool = False
    channel_scale: float = 1.0
    input_mean: float = 0.5

    def __post_init__(self):
        if len(self.channels_per_block) != N_SCALES or len(self.convs_per_block) != N_SCALES:
            raise ConfigError(f"the network has exactly {N_SCALES} blocks")
        if any(c < 1 for c in self.convs_per_block):
            raise ConfigError("every block needs at least one convolution")
        if self.input_channels < 1:
            raise ConfigError("input_channels must be positive")
        if self.channel_scale <= 0:
            raise ConfigError("channel_scale must be positive")
        self.channels  # validates integrality

    @property
    def channels(self) -> Tuple[int, ...]:
        """Per-block widths after applying ``channel_scale``."""
        scale = Fraction(self.channel_scale).limit_denominator(1 << 16)
        out = []
        for c in self.channels_per_block:
            scaled = c * scale
            if scaled.denominator != 1 or scaled < 1:
                raise ConfigError(f"channel_scale {self.channel_scale} gives non-integral width for {c}")
            out.append(int(scaled))
        return tuple(out)

    def to_dict(self) -> dict:
        return {
            "input_channels": self.input_channels,
            "channels_per_block": list(self.channels_per_block),
            "convs_per_block": list(self.convs_per_block),
            "use_batchnorm": self.use_batchnorm,
            "channel_scale": self.channel_scale,
            "input_mean": self.input_mean,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        return cls(
            input_channels=int(d["input_channels"]),
            channels_per_block=tuple(int(c) for c in d["channels_per_block"]),
            convs_per_block=tuple(int(c) for c in d["convs_per_block"]),
            use_batchnorm=bool(d.get("use_batchnorm", False)),
            channel_scale=float(d["channel_scale"]),
            input_mean=float(d.get("input_mean", 0.5)),
        )


@dataclass(frozen=True)
class LayerSpec:
    """Static description of one parameterised layer."""

    name: str
    kind: str  # "conv", "merge", "reduce", "deconv" or "fuse"
    in_channels: int
    out_channels: int
    kernel: int
    scale: int  # 1..5, or 0 for the fusion head
    factor: int = 1
    relu: bool = False


@dataclass
class SideOutputs:
    side: Tuple[np.ndarray, ...]
    fused: np.ndarray

    def maps(self) -> List[np.ndarray]:
        """All six logit maps, side maps first."""
        return list(self.side) + [self.fused]


@dataclass
class ActivationCache:
    """Intermediates retained by :meth:`Network.forward` for the backward pass."""

    image_shape: Tuple[int, ...]
    layer_inputs: Dict[str, np.ndarray] = field(default_factory=dict)
    pre_relu: Dict[str, np.ndarray] = field(default_factory=dict)
    encoder: Dict[int, np.ndarray] = field(default_factory=dict)
    pool_indices: Dict[int, np.ndarray] = field(default_factory=dict)
    unpool_indices: Dict[int, np.ndarray] = field(default_factory=dict)
    branch: Dict[int, np.ndarray] = field(default_factory=dict)
    branch_pool_indices: Dict[int, np.ndarray] = field(default_factory=dict)
    decoder: Dict[int, np.ndarray] = field(default_factory=dict)


class Network:
    """Parameter store plus forward/backward passes over the fixed topology."""

    def __init__(self, config: NetworkConfig, layers: List[LayerSpec],
                 params: Dict[str, ConvParams], dtype=np.float32):
        self.config = config
        self.layers = layers
        self.params = params
        self.dtype = np.dtype(dtype)
        self._by_name = {spec.name: spec for spec in layers}

    # -- introspection ------------------------------------------------------

    def layer(self, name: str) -> LayerSpec:
        return self._by_name[name]

    def encoder_layers(self, scale: Optional[int] = None) -> List[LayerSpec]:
        return [s for s in self.layers if s.name.startswith("enc")
                and (scale is None or s.scale == scale)]

    def decoder_layers(self, scale: Optional[int] = None) -> List[LayerSpec]:
        return [s for s in self.layers if s.name.startswith("dec")
                and (scale is None or s.scale == scale)]

    @property
    def n_pool(self) -> int:
        return N_SCALES

    @property
    def n_unpool(self) -> int:
        return N_SCALES

    def named_arrays(self) -> Iterator[Tuple[str, np.ndarray]]:
        """``(name, array)`` for every weight and bias, in layer order."""
        for spec in self.layers:
            p = self.params[spec.name]
            yield f"{spec.name}.weight", p.weight
            yield f"{spec.name}.bias", p.bias

    def n_parameters(self) -> int:
        return sum(a.size for _, a in self.named_arrays())

    def copy(self) -> "Network":
        return copy.deepcopy(self)

    def astype(self, dtype) -> "Network":
        params = {k: ConvParams(p.weight.astype(dtype), p.bias.astype(dtype))
                  for k, p in self.params.items()}
        return Network(self.config, list(self.layers), params, dtype)

    # -- forward -------------------------------------------------------------

    def _conv(self, name: str, x: np.ndarray, cache: ActivationCache) -> np.ndarray:
        spec = self._by_name[name]
        cache.layer_inputs[name] = x
        if spec.kind == "deconv":
            return T.deconv(x, self.params[name], spec.factor)
        y = T.conv2d(x, self.params[name])
        if spec.relu:
            cache.pre_relu[name] = y
            y = T.relu(y)
        return y

    def forward(self, image: np.ndarray) -> Tuple[SideOutputs, ActivationCache]:
        x = T.check_tensor4(image, "image")
        n, c, h, w = x.shape
        if c != self.config.input_channels:
            raise ShapeError(f"expected {self.config.input_channels} input channels, got {c}")
        div = 2 ** N_SCALES
        if h % div or w % div:
            raise ShapeError(f"input height and width must be divisible by {div}, got {h}x{w}")
        cache = ActivationCache(image_shape=x.shape)

        # encoder; inputs in [0, 1] are centred so first-layer ReLUs see both signs
        pooled = {}
        cur = x - self.config.input_mean
        for k in range(1, N_SCALES + 1):
            for spec in self.encoder_layers(k):
                cur = self._conv(spec.name, cur, cache)
            cache.encoder[k] = cur
            cur, idx = T.maxpool2x2(cur)
            cache.pool_indices[k] = idx
            pooled[k] = cur

        # decoder, deepest first; unpooling at scale k uses encoder k's indices
        cur = pooled[N_SCALES]
        for k in range(N_SCALES, 0, -1):
            idx = cache.pool_indices[k]
            cache.unpool_indices[k] = idx
            cur = T.max_unpool2x2(cur, idx, cache.encoder[k].shape[:1] + cur.shape[1:2] + cache.encoder[k].shape[2:])
            for spec in self.decoder_layers(k):
                cur = self._conv(spec.name, cur, cache)
            cache.decoder[k] = cur

        # feature-preserving branch
        cache.branch[1] = cache.encoder[1]
        for k in range(2, N_SCALES + 1):
            down, bidx = T.maxpool2x2(cache.branch[k - 1])
            cache.branch_pool_indices[k] = bidx
            cache.branch[k] = self._conv(f"branch{k}.merge", T.concat_channels(down, cache.encoder[k]), cache)

        # side heads and fusion
        side = []
        for k in range(1, N_SCALES + 1):
            z = self._conv(f"side{k}.reduce", T.concat_channels(cache.branch[k], cache.decoder[k]), cache)
            side.append(self._conv(f"side{k}.deconv", z, cache))
        fused = self._conv("fuse", np.concatenate(side, axis=1), cache)
        return SideOutputs(tuple(side), fused), cache

    # -- backward ------------------------------------------------------------

    def _conv_back(self, name: str, grad: np.ndarray, cache: ActivationCache,
                   grads: Dict[str, Tuple[np.ndarray, np.ndarray]]) -> np.ndarray:
        spec = self._by_name[name]
        x = cache.layer_inputs[name]
        if spec.kind == "deconv":
            gx, gw, gb = T.deconv_backward(x, self.params[name], grad, spec.factor)
        else:
            if spec.relu:
                grad = T.relu_backward(cache.pre_relu[name], grad)
            gx, gw, gb = T.conv2d_backward(x, self.params[name], grad)
        grads[name] = (gw, gb)
        return gx

    def backward(self, cache: ActivationCache, grad_side: List[np.ndarray],
                 grad_fused: np.ndarray) -> Dict[str, Tuple[np.ndarray, np.ndarray]]:
        """Parameter gradients given the loss gradient w.r.t. every logit map.

        Returns ``{layer name: (grad_weight, grad_bias)}`` in float64.
        """
        grads: Dict[str, Tuple[np.ndarray, np.ndarray]] = {}
        g_side = [np.asarray(g, dtype=np.float64).copy() for g in grad_side]
        g_cat = self._conv_back("fuse", np.asarray(grad_fused, dtype=np.float64), cache, grads)
        for k in range(N_SCALES):
            g_side[k] += g_cat[:, k:k + 1]

        g_branch: Dict[int, np.ndarray] = {}
        g_dec: Dict[int, np.ndarray] = {}
        for k in range(1, N_SCALES + 1):
            gz = self._conv_back(f"side{k}.deconv", g_side[k - 1], cache, grads)
            gcat = self._conv_back(f"side{k}.reduce", gz, cache, grads)
            g_branch[k], g_dec[k] = T.split_channels(gcat, cache.branch[k].shape[1])

        g_enc = {k: np.zeros_like(cache.encoder[k]) for k in range(1, N_SCALES + 1)}

        # decoder: shallowest first so deeper blocks receive complete gradients
        for k in range(1, N_SCALES + 1):
            g = g_dec[k]
            for spec in reversed(self.decoder_layers(k)):
                g = self._conv_back(spec.name, g, cache, grads)
            g_in = T.max_unpool2x2_backward(g, cache.unpool_indices[k])
            if k < N_SCALES:
                g_dec[k + 1] = g_dec[k + 1] + g_in
            else:
                g_enc[N_SCALES] += T.maxpool2x2_backward(
                    g_in, cache.pool_indices[N_SCALES], cache.encoder[N_SCALES].shape)

        # branch: deepest first
        for k in range(N_SCALES, 1, -1):
            gcat = self._conv_back(f"branch{k}.merge", g_branch[k], cache, grads)
            nprev = cache.branch[k - 1].shape[1]
            g_down, g_e = T.split_channels(gcat, nprev)
            g_enc[k] += g_e
            g_branch[k - 1] = g_branch[k - 1] + T.maxpool2x2_backward(
                g_down, cache.branch_pool_indices[k], cache.branch[k - 1].shape)
        g_enc[1] += g_branch[1]

        # encoder: deepest first
        for k in range(N_SCALES, 0, -1):
            g = g_enc[k]
            for spec in reversed(self.encoder_layers(k)):
                g = self._conv_back(spec.name, g, cache, grads)
            if k > 1:
                g_enc[k - 1] += T.maxpool2x2_backward(
                    g, cache.pool_indices[k - 1], cache.encoder[k - 1].shape)
        return grads

    # -- inference -----------------------------------------------------------

    def predict_proba(self, image: np.ndarray) -> np.ndarray:
        """Crack probability map ``sigmoid(F^fused)``, shape ``(n, 1, H, W)``."""
        outputs, _ = self.forward(image)
        return T.sigmoid_map(outputs.fused)

    def predict(self, image: np.ndarray, threshold: float = 0.5) -> np.ndarray:
        """Binary mask ``sigmoid(F^fused) > threshold`` (strict), dtype uint8."""
        if not 0.0 < threshold < 1.0:
            raise ConfigError(f"threshold must lie in (0, 1), got {threshold}")
        return (self.predict_proba(image) > threshold).astype(np.uint8)


def build_layers(config: NetworkConfig) -> List[LayerSpec]:
    """Layer plan for ``config``; shapes only, no parameters."""
    if config.use_batchnorm:
        raise ConfigError("batch normalization is not supported by this network")
    ch = config.channels
    layers: List[LayerSpec] = []
    prev = config.input_channels
    for k in range(1, N_SCALES + 1):
        for j in range(1, config.convs_per_block[k - 1] + 1):
            layers.append(LayerSpec(f"enc{k}.conv{j}", "conv", prev, ch[k - 1], 3, k, relu=True))
            prev = ch[k - 1]
    for k in range(N_SCALES, 0, -1):
        n = config.convs_per_block[k - 1]
        out_last = ch[k - 2] if k > 1 else ch[0]
        for j in range(1, n + 1):
            out = out_last if j == n else ch[k - 1]
            layers.append(LayerSpec(f"dec{k}.conv{j}", "conv", ch[k - 1], out, 3, k, relu=True))
    for k in range(2, N_SCALES + 1):
        layers.append(LayerSpec(f"branch{k}.merge", "merge", ch[k - 2] + ch[k - 1], ch[k - 1], 1, k))
    for k in range(1, N_SCALES + 1):
        dec_out = ch[k - 2] if k > 1 else ch[0]
        layers.append(LayerSpec(f"side{k}.reduce", "reduce", ch[k - 1] + dec_out, 1, 1, k))
        f = 2 ** (k - 1)
        layers.append(LayerSpec(f"side{k}.deconv", "deconv", 1, 1, 2 * f, k, factor=f))
    layers.append(LayerSpec("fuse", "fuse", N_SCALES, 1, 1, 0))
    return layers


def build_network(config: NetworkConfig | None = None,
                  rng: np.random.Generator | int | None = None,
                  dtype=np.float32) -> Network:
    """Construct and initialise a network.

    Convolutions get He-normal weights, deconvolutions the bilinear kernel,
    and every bias starts at zero.
    """
    config = config or NetworkConfig()
    rng = np.random.default_rng(rng)
    layers = build_layers(config)
    params: Dict[str, ConvParams] = {}
    for spec in layers:
        if spec.kind == "deconv":
            params[spec.name] = T.bilinear_kernel(spec.factor, spec.out_channels, dtype=dtype)
        else:
            shape = (spec.out_channels, spec.in_channels, spec.kernel, spec.kernel)
            params[spec.name] = ConvParams(T.he_normal_init(shape, rng, dtype=dtype),
                                           np.zeros(spec.out_channels, dtype=dtype))
    return Network(config, layers, params, dtype)


def encoder_receptive_field(net: Network, scale: int) -> int:
    """Receptive field of the convolution stack inside one encoder block."""
    return T.receptive_field((s.kernel, 1) for s in net.encoder_layers(scale))
