"""Generator (shared encoder + style-modulated decoder) and patch discriminators."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, ContractError, DimensionError

CONTENT = "content"
EDGE = "edge"
CONTENT_EDGE = "content_edge"


@dataclass
class NetConfig:
    base_channels: int = 64
    downsample_count: int = 2
    residual_blocks: int = 4
    input_channels: int = 3
    discriminator_layers: int = 4
    discriminator_base_channels: int = 64
    discriminator_max_channels: int = 256

    def validate(self) -> None:
        problems = [
            f"net.{f.name} must be an integer >= 1, got {getattr(self, f.name)!r}"
            for f in fields(self)
            if not isinstance(getattr(self, f.name), int) or getattr(self, f.name) < 1
        ]
        if problems:
            raise ConfigError(problems)

    @property
    def code_channels(self) -> int:
        return self.base_channels * 2**self.downsample_count

    @property
    def style_layers(self) -> int:
        return 2 * self.residual_blocks

    def discriminator_widths(self) -> list[int]:
        return [
            min(self.discriminator_base_channels * 2**i, self.discriminator_max_channels)
            for i in range(self.discriminator_layers)
        ]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "NetConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError([f"net.{k} is not a recognised field" for k in unknown])
        return cls(**d)


@dataclass
class StyleCode:
    """Frozen per-domain modulation: ``gamma`` and ``beta`` of shape (layers, channels)."""

    gamma: torch.Tensor
    beta: torch.Tensor


@dataclass
class LatentCode:
    tensor: torch.Tensor
    kind: str


class LayerNorm(nn.Module):
    """Per-sample normalisation over (C, H, W) with a per-channel affine."""

    def __init__(self, channels, eps=1e-5):
        super().__init__()
        self.eps = eps
        self.gamma = nn.Parameter(torch.ones(channels))
        self.beta = nn.Parameter(torch.zeros(channels))

    def forward(self, x):
        mean = x.mean(dim=(1, 2, 3), keepdim=True)
        var = x.var(dim=(1, 2, 3), keepdim=True, unbiased=False)
        x = (x - mean) / torch.sqrt(var + self.eps)
        return x * self.gamma.view(1, -1, 1, 1) + self.beta.view(1, -1, 1, 1)


def adaptive_instance_norm(x, gamma, beta, eps=1e-5):
    # gamma/beta: (C,) shared by the batch or (N, C) per sample
    x = F.instance_norm(x, eps=eps)
    if gamma.dim() == 1:
        gamma, beta = gamma.view(1, -1, 1, 1), beta.view(1, -1, 1, 1)
    else:
        gamma, beta = gamma[:, :, None, None], beta[:, :, None, None]
    return gamma * x + beta


class ResBlock(nn.Module):
    def __init__(self, dim):
        super().__init__()
        self.conv1 = nn.Conv2d(dim, dim, 3, padding=1, padding_mode="reflect", bias=False)
        self.conv2 = nn.Conv2d(dim, dim, 3, padding=1, padding_mode="reflect", bias=False)

    def forward(self, x):
        h = F.relu(F.instance_norm(self.conv1(x)))
        h = F.instance_norm(self.conv2(h))
        return x + h


class StyledResBlock(ResBlock):
    def forward(self, x, g1, b1, g2, b2):
        h = F.relu(adaptive_instance_norm(self.conv1(x), g1, b1))
        h = adaptive_instance_norm(self.conv2(h), g2, b2)
        return x + h


class Encoder(nn.Module):
    """Strided-conv downsampling followed by instance-normalised residual blocks."""

    def __init__(self, cfg: NetConfig):
        super().__init__()
        dim = cfg.base_channels
        self.stem = nn.Conv2d(cfg.input_channels, dim, 7, padding=3, padding_mode="reflect", bias=False)
        self.down = nn.ModuleList()
        for _ in range(cfg.downsample_count):
            self.down.append(nn.Conv2d(dim, 2 * dim, 4, stride=2, padding=1, padding_mode="reflect", bias=False))
            dim *= 2
        self.blocks = nn.ModuleList(ResBlock(dim) for _ in range(cfg.residual_blocks))

    def forward(self, x):
        h = F.relu(F.instance_norm(self.stem(x)))
        for conv in self.down:
            h = F.relu(F.instance_norm(conv(h)))
        for block in self.blocks:
            h = block(h)
        return h


class Decoder(nn.Module):
    def __init__(self, cfg: NetConfig):
        super().__init__()
        dim = cfg.code_channels
        self.blocks = nn.ModuleList(StyledResBlock(dim) for _ in range(cfg.residual_blocks))
        self.up = nn.ModuleList()
        self.up_norm = nn.ModuleList()
        for _ in range(cfg.downsample_count):
            self.up.append(nn.Conv2d(dim, dim // 2, 5, padding=2, padding_mode="reflect"))
            self.up_norm.append(LayerNorm(dim // 2))
            dim //= 2
        self.head = nn.Conv2d(dim, cfg.input_channels, 7, padding=3, padding_mode="reflect")

    def forward(self, code, gamma, beta):
        # gamma/beta: (L, C) or (N, L, C)
        h = code
        for i, block in enumerate(self.blocks):
            j = 2 * i
            h = block(h, gamma[..., j, :], beta[..., j, :], gamma[..., j + 1, :], beta[..., j + 1, :])
        for conv, norm in zip(self.up, self.up_norm):
            h = F.interpolate(h, scale_factor=2, mode="nearest")
            h = F.relu(norm(conv(h)))
        return torch.tanh(self.head(h))


class PatchDiscriminator(nn.Module):
    """Stride-2 conv stack ending in a 3x3 valid conv; one logit per receptive field."""

    def __init__(self, cfg: NetConfig):
        super().__init__()
        layers = []
        prev = cfg.input_channels
        for width in cfg.discriminator_widths():
            layers += [nn.Conv2d(prev, width, 4, stride=2, padding=1), nn.LeakyReLU(0.2)]
            prev = width
        layers.append(nn.Conv2d(prev, 1, 3))
        self.net = nn.Sequential(*layers)

    def forward(self, x):
        return self.net(x)


class StereoTranslator(nn.Module):
    """Everything trained or frozen in one place: E, G, D_a, D_b and both style codes."""

    def __init__(self, cfg: NetConfig, seed: int = 0):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.seed = seed
        self.encoder = Encoder(cfg)
        self.decoder = Decoder(cfg)
        self.disc_a = PatchDiscriminator(cfg)
        self.disc_b = PatchDiscriminator(cfg)
        shape = (2, cfg.style_layers, cfg.code_channels)
        self.register_buffer("style_a", torch.zeros(shape))
        self.register_buffer("style_b", torch.zeros(shape))

    def style(self, domain: str) -> StyleCode:
        buf = {"a": self.style_a, "b": self.style_b}[domain]
        return StyleCode(buf[0], buf[1])

    def generator_parameters(self):
        return list(self.encoder.parameters()) + list(self.decoder.parameters())

    def discriminator_parameters(self):
        return list(self.disc_a.parameters()) + list(self.disc_b.parameters())

    def discriminator(self, which: str) -> PatchDiscriminator:
        return {"a": self.disc_a, "b": self.disc_b}[which]


def _fan_in_normal_(weight: torch.Tensor, gen: torch.Generator) -> None:
    fan_in = weight[0].numel()
    std = math.sqrt(2.0 / fan_in)
    with torch.no_grad():
        weight.copy_(torch.randn(weight.shape, generator=gen) * std)


def init_model(cfg: NetConfig, seed: int = 0) -> StereoTranslator:
    """Build a model with fan-in scaled normal conv weights and N(0, 1) style codes."""
    if not isinstance(cfg, NetConfig):
        raise ConfigError("init_model needs a NetConfig")
    model = StereoTranslator(cfg, seed)
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for module in model.modules():
            if isinstance(module, nn.Conv2d):
                _fan_in_normal_(module.weight, gen)
                if module.bias is not None:
                    module.bias.zero_()
        model.style_a.copy_(torch.randn(model.style_a.shape, generator=gen))
        model.style_b.copy_(torch.randn(model.style_b.shape, generator=gen))
    return model


# --------------------------------------------------------------- functional ops


def encode(model: StereoTranslator, img: torch.Tensor, kind: str = CONTENT) -> LatentCode:
    """Encode images (or edge maps, replicated to the input channel count)."""
    if kind not in (CONTENT, EDGE):
        raise ContractError(f"encode produces content or edge codes, not {kind!r}")
    x = img.unsqueeze(0) if img.dim() == 3 else img
    cfg = model.cfg
    if x.shape[1] == 1 and cfg.input_channels != 1:
        x = x.expand(-1, cfg.input_channels, -1, -1)
    if x.shape[1] != cfg.input_channels:
        raise DimensionError(f"encoder takes {cfg.input_channels} channels, got {x.shape[1]}")
    step = 2**cfg.downsample_count
    if x.shape[2] % step or x.shape[3] % step:
        raise DimensionError(f"image {x.shape[2]}x{x.shape[3]} is not divisible by {step}")
    return LatentCode(model.encoder(x), kind)


def fuse(content: LatentCode, edge: LatentCode) -> LatentCode:
    if content.kind != CONTENT or edge.kind != EDGE:
        raise ContractError(f"fuse needs (content, edge) codes, got ({content.kind}, {edge.kind})")
    if content.tensor.shape != edge.tensor.shape:
        raise ContractError(f"code shapes differ: {tuple(content.tensor.shape)} vs {tuple(edge.tensor.shape)}")
    return LatentCode(content.tensor + edge.tensor, CONTENT_EDGE)


def zero_edge(content: LatentCode) -> LatentCode:
    return LatentCode(torch.zeros_like(content.tensor), EDGE)


def decode(model: StereoTranslator, code: LatentCode, style: StyleCode) -> torch.Tensor:
    if code.kind != CONTENT_EDGE:
        raise ContractError(f"decode takes a content-edge code, got {code.kind}")
    cfg = model.cfg
    expect = (cfg.style_layers, cfg.code_channels)
    if tuple(style.gamma.shape[-2:]) != expect or style.gamma.shape != style.beta.shape:
        raise ContractError(f"style code of shape {tuple(style.gamma.shape)} does not fit decoder {expect}")
    if style.gamma.dim() == 3 and style.gamma.shape[0] != code.tensor.shape[0]:
        raise ContractError("per-sample style count does not match the batch")
    return model.decoder(code.tensor, style.gamma, style.beta)


def discriminate(model: StereoTranslator, which: str, img: torch.Tensor) -> torch.Tensor:
    if which not in ("a", "b"):
        raise ContractError(f"discriminator must be 'a' or 'b', got {which!r}")
    x = img.unsqueeze(0) if img.dim() == 3 else img
    if x.shape[1] != model.cfg.input_channels:
        raise DimensionError(f"discriminator takes {model.cfg.input_channels} channels, got {x.shape[1]}")
    return model.discriminator(which)(x)


def generate(model: StereoTranslator, img, edges, style: StyleCode, use_edges: bool = True) -> torch.Tensor:
    content = encode(model, img, CONTENT)
    edge = encode(model, edges, EDGE) if use_edges else zero_edge(content)
    return decode(model, fuse(content, edge), style)


def translate_pair(model: StereoTranslator, left, right, edges_left, edges_right, use_edges: bool = True):
    """Translate both views of a synthetic pair into the real domain (style ``b``)."""
    squeeze = left.dim() == 3
    imgs = torch.cat([_batch(left), _batch(right)])
    edges = torch.cat([_batch(edges_left), _batch(edges_right)])
    out = generate(model, imgs, edges, model.style("b"), use_edges)
    n = out.shape[0] // 2
    left_ab, right_ab = out[:n], out[n:]
    if squeeze:
        return left_ab[0], right_ab[0]
    return left_ab, right_ab


def _batch(x):
    return x.unsqueeze(0) if x.dim() == 3 else x


def count_params(model: nn.Module) -> int:
    """Trainable scalars; the style codes are buffers and never counted."""
    return sum(p.numel() for p in model.parameters() if p.requires_grad)


def discriminator_output_size(cfg: NetConfig, rows: int, cols: int) -> tuple[int, int]:
    for _ in range(cfg.discriminator_layers):
        rows = (rows + 2 - 4) // 2 + 1
        cols = (cols + 2 - 4) // 2 + 1
    return rows - 2, cols - 2
