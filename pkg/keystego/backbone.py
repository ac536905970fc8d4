"""
The image-to-image network N and its three key-conditioned task modes.

N is a plain U-Net (configurable width/depth). Its convolution kernels are the
maskable tensors described by the ShapeManifest; biases and normalization
parameters are always shared. One 6-channel input layout serves every mode:
embedding concatenates (secret, cover); purification and recovery duplicate
their single image into both slots.
"""
import logging
import math
from collections import OrderedDict
from dataclasses import dataclass
from enum import Enum
from typing import Dict, Optional, Sequence, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.func import functional_call

from keystego.keyed_weights import (
    BinaryMask,
    KeyRegistry,
    ParameterError,
    ShapeManifest,
    WeightSet,
    assemble_tensors,
    initial_weights,
    sample_mask,
)
from keystego.models import BackboneConfig

logger = logging.getLogger(__name__)

# LRU bound on the cast fills one model keeps.
FILL_CACHE_SIZE = 16


class BackboneConfigError(ValueError):
    """Raised when a BackboneConfig cannot produce a valid network."""
    pass


class TaskError(ValueError):
    """Raised for wrong input arity or an unknown key index."""
    pass


def _activation(name: str) -> nn.Module:
    if name == "relu":
        return nn.ReLU()
    if name == "leaky_relu":
        return nn.LeakyReLU(0.2)
    if name == "gelu":
        return nn.GELU()
    if name == "tanh":
        return nn.Tanh()
    raise BackboneConfigError(f"Unknown activation '{name}'")


def _norm_groups(channels: int) -> int:
    return math.gcd(channels, 8)


class _Stage(nn.Module):
    """conv3x3 (optionally strided) -> GroupNorm -> activation."""

    def __init__(self, in_ch: int, out_ch: int, stride: int, activation: str, use_norm: bool):
        super().__init__()
        self.conv = nn.Conv2d(in_ch, out_ch, 3, stride=stride, padding=1)
        self.norm = nn.GroupNorm(_norm_groups(out_ch), out_ch) if use_norm else nn.Identity()
        self.act = _activation(activation)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.act(self.norm(self.conv(x)))


class UNet(nn.Module):
    """Encoder-decoder with skip connections; 6 channels in, 3 channels out, same H x W."""

    def __init__(self, config: BackboneConfig):
        super().__init__()
        self.config = config
        chans = [config.width * 2**i for i in range(config.depth + 1)]
        self.inc = nn.Conv2d(config.in_channels, chans[0], 3, padding=1)
        self.act = _activation(config.activation)
        self.downs = nn.ModuleList(
            _Stage(chans[i], chans[i + 1], 2, config.activation, config.use_norm)
            for i in range(config.depth)
        )
        self.ups = nn.ModuleList(
            _Stage(chans[i + 1] + chans[i], chans[i], 1, config.activation, config.use_norm)
            for i in reversed(range(config.depth))
        )
        self.outc = nn.Conv2d(chans[0], 3, 1)

    def forward(self, x: torch.Tensor, activate: bool = True, return_features: bool = False) -> torch.Tensor:
        if x.shape[-3] == 3:
            x = torch.cat([x, x], dim=-3)
        h = self.act(self.inc(x))
        skips = [h]
        for down in self.downs:
            h = down(h)
            skips.append(h)
        skips.pop()
        for up in self.ups:
            h = F.interpolate(h, scale_factor=2, mode="nearest")
            h = up(torch.cat([h, skips.pop()], dim=-3))
        if return_features:
            return h
        z = self.outc(h)
        return torch.sigmoid(z) if activate else z


def manifest_of(net: nn.Module) -> ShapeManifest:
    """Convolution/affine kernels (ndim >= 2) in registration order."""
    return ShapeManifest.from_shapes(
        (name, tuple(p.shape)) for name, p in net.named_parameters() if p.ndim >= 2
    )


def build_backbone(config: BackboneConfig) -> Tuple[ShapeManifest, UNet]:
    """
    Build N for `config` and describe its maskable weights.

    Raises:
        BackboneConfigError: If the side length cannot be halved `depth` times
    """
    if config.input_slots != 2:
        raise BackboneConfigError("The backbone takes exactly two image slots (6 channels)")
    if config.side % (2**config.depth) != 0:
        raise BackboneConfigError(
            f"side {config.side} is not divisible by 2**depth = {2**config.depth}"
        )
    net = UNet(config)
    return manifest_of(net), net


# ============================================
# Task modes
# ============================================
class TaskKind(str, Enum):
    PURIFY = "purify"
    EMBED = "embed"
    RECOVER = "recover"


@dataclass(frozen=True)
class TaskMode:
    kind: TaskKind
    key_index: Optional[int] = None

    def __post_init__(self):
        if self.kind is TaskKind.PURIFY and self.key_index is not None:
            raise TaskError("Purify mode takes no key index")
        if self.kind is not TaskKind.PURIFY and (self.key_index is None or self.key_index < 1):
            raise TaskError(f"{self.kind.value} mode needs a key index >= 1")

    @classmethod
    def purify(cls) -> "TaskMode":
        return cls(TaskKind.PURIFY)

    @classmethod
    def embed(cls, index: int) -> "TaskMode":
        return cls(TaskKind.EMBED, index)

    @classmethod
    def recover(cls, index: int) -> "TaskMode":
        return cls(TaskKind.RECOVER, index)

    @property
    def arity(self) -> int:
        return 2 if self.kind is TaskKind.EMBED else 1


# ============================================
# Masked backbone
# ============================================
class MaskedBackbone(nn.Module):
    """
    Shared weight set W (the network's own parameters), binary mask M and
    sparse ratio alpha. Calling it with a fill WeightSet runs
    N[W*M + fill*(1-M)]; calling it without one runs N[W].
    """

    def __init__(
        self,
        config: BackboneConfig,
        alpha: float,
        mask_seed: int,
        init_seed: int = 1,
        mask: Optional[BinaryMask] = None,
    ):
        super().__init__()
        self.config = config
        self.manifest, self.net = build_backbone(config)
        if mask is not None and (mask.manifest != self.manifest or mask.alpha != alpha or mask.seed != mask_seed):
            raise BackboneConfigError("Provided mask does not match this backbone")
        self.mask: BinaryMask = mask if mask is not None else sample_mask(self.manifest, alpha, mask_seed)
        self.init_seed = init_seed
        self._bits_cache: Dict[torch.device, Dict[str, torch.Tensor]] = {}
        self._fill_cache: OrderedDict[Tuple[int, torch.dtype, torch.device], Dict[str, torch.Tensor]] = OrderedDict()
        self.reset_parameters(init_seed)
        logger.info(
            f"Built backbone: {self.manifest.total_size} maskable weights in "
            f"{len(self.manifest)} tensors, alpha={alpha}"
        )

    @property
    def alpha(self) -> float:
        return self.mask.alpha

    @property
    def mask_seed(self) -> int:
        return self.mask.seed

    def reset_parameters(self, init_seed: int) -> None:
        """Glorot kernels from `init_seed`, zero biases, unit norm scales."""
        init = initial_weights(init_seed, self.manifest)
        with torch.no_grad():
            for name, p in self.net.named_parameters():
                if name in init.tensors:
                    p.copy_(init[name].to(p.dtype))
                elif name.endswith("norm.weight"):
                    p.fill_(1.0)
                else:
                    p.zero_()

    def masked_parameters(self) -> Dict[str, nn.Parameter]:
        return {name: self.net.get_parameter(name) for name in self.manifest.names}

    def shared_weights(self) -> WeightSet:
        return WeightSet(
            manifest=self.manifest,
            tensors={n: p.detach().clone() for n, p in self.masked_parameters().items()},
            origin="trained",
        )

    def bits_on(self, device: torch.device) -> Dict[str, torch.Tensor]:
        if device not in self._bits_cache:
            self._bits_cache[device] = {n: b.to(device) for n, b in self.mask.bits.items()}
        return self._bits_cache[device]

    def _cast_fill(self, fill: WeightSet, dtype: torch.dtype, device: torch.device) -> Dict[str, torch.Tensor]:
        if fill.key is None:
            return fill.to(dtype, device)
        cache_key = (fill.key, dtype, device)
        if cache_key in self._fill_cache:
            self._fill_cache.move_to_end(cache_key)
            return self._fill_cache[cache_key]
        cast = fill.to(dtype, device)
        self._fill_cache[cache_key] = cast
        while len(self._fill_cache) > FILL_CACHE_SIZE:
            self._fill_cache.popitem(last=False)
        return cast

    def effective_parameters(self, fill: Optional[WeightSet]) -> Dict[str, torch.Tensor]:
        """W*M + fill*(1-M) for the masked tensors; W itself when fill is None."""
        shared = self.masked_parameters()
        if fill is None:
            return dict(shared)
        if fill.manifest != self.manifest:
            raise TaskError("Fill weights were generated for a different manifest")
        ref = next(iter(shared.values()))
        cast = self._cast_fill(fill, ref.dtype, ref.device)
        return assemble_tensors(shared, self.bits_on(ref.device), cast)

    def forward(
        self,
        x: torch.Tensor,
        fill: Optional[WeightSet] = None,
        activate: bool = True,
        return_features: bool = False,
    ) -> torch.Tensor:
        if fill is None:
            return self.net(x, activate=activate, return_features=return_features)
        return functional_call(
            self.net,
            self.effective_parameters(fill),
            (x,),
            {"activate": activate, "return_features": return_features},
        )

    def mask_gradients(self) -> None:
        """Zero gradients at M = 0 positions so only W*M is ever updated."""
        for name, p in self.masked_parameters().items():
            if p.grad is not None:
                p.grad.masked_fill_(~self.bits_on(p.grad.device)[name], 0.0)


# ============================================
# Task execution
# ============================================
def fill_for(model: MaskedBackbone, registry: Optional[KeyRegistry], mode: TaskMode) -> Optional[WeightSet]:
    """Fill weights for `mode`: None (W itself) for purification, a key-seeded set otherwise."""
    if mode.kind is TaskKind.PURIFY:
        return None
    if registry is None:
        raise TaskError(f"{mode.kind.value} mode needs a key registry")
    try:
        if mode.kind is TaskKind.EMBED:
            return registry.embed_fill(mode.key_index, model.manifest)
        return registry.recover_fill(mode.key_index, model.manifest)
    except ParameterError as e:
        raise TaskError(str(e)) from e


def stack_inputs(mode: TaskMode, inputs: Sequence[torch.Tensor]) -> torch.Tensor:
    """Lay the mode's images out in the two input slots."""
    if len(inputs) != mode.arity:
        raise TaskError(f"{mode.kind.value} takes {mode.arity} image(s), got {len(inputs)}")
    for img in inputs:
        if img.ndim not in (3, 4) or img.shape[-3] != 3:
            raise TaskError(f"Expected 3-channel image planes, got shape {tuple(img.shape)}")
    if mode.arity == 2:
        secret, cover = inputs
        if secret.shape != cover.shape:
            raise TaskError("secret and cover must have the same shape")
        return torch.cat([secret, cover], dim=-3)
    return torch.cat([inputs[0], inputs[0]], dim=-3)


def _batched(x: torch.Tensor) -> Tuple[torch.Tensor, bool]:
    return (x.unsqueeze(0), True) if x.ndim == 3 else (x, False)


def run_with_fill(model: MaskedBackbone, fill: Optional[WeightSet], mode: TaskMode, inputs: Sequence[torch.Tensor]) -> torch.Tensor:
    """Inference-time forward with an explicit fill; output clamped to [0, 1]."""
    x, squeeze = _batched(stack_inputs(mode, inputs))
    ref = next(model.net.parameters())
    with torch.no_grad():
        out = model(x.to(dtype=ref.dtype, device=ref.device), fill=fill).clamp(0.0, 1.0)
    return out.squeeze(0) if squeeze else out


def run_task(
    model: MaskedBackbone,
    registry: Optional[KeyRegistry],
    mode: TaskMode,
    inputs: Sequence[torch.Tensor],
) -> torch.Tensor:
    """
    Purify -> N[W](I_noisy); Embed(i) -> N[W*M + W_e^i*(1-M)](I_secret, I_cover);
    Recover(i) -> N[W*M + W_r^i*(1-M)](I_stego). Accepts (3,H,W) or (N,3,H,W).
    """
    return run_with_fill(model, fill_for(model, registry, mode), mode, inputs)


def extract_recovery_features(
    model: MaskedBackbone,
    registry: KeyRegistry,
    key_index: int,
    stego: torch.Tensor,
) -> torch.Tensor:
    """Flattened last-decoder-stage activations under Recover(key_index): (D,) or (N, D)."""
    mode = TaskMode.recover(key_index)
    fill = fill_for(model, registry, mode)
    x, squeeze = _batched(stack_inputs(mode, [stego]))
    ref = next(model.net.parameters())
    with torch.no_grad():
        feats = model(x.to(dtype=ref.dtype, device=ref.device), fill=fill, return_features=True)
    feats = feats.flatten(start_dim=1)
    return feats.squeeze(0) if squeeze else feats
