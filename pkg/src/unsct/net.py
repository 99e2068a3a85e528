"""Multi-resolution landmark network with Spatial Relationship Fusion blocks.

A small HRNet-style backbone keeps a stride-``s`` stream alive through every
stage and adds one lower-resolution branch per stage. Each stage opens with an
SRF block on every branch (coordinate channels, 1x1 fusion, sequential
polarized channel/spatial attention, residual add), runs basic residual blocks
and exchanges information across branches. Two 1x1 heads on the
highest-resolution stream emit K heatmaps and 2E PAF channels.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

BN_MOMENTUM = 0.1


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class NetworkConfig:
    stages: int = 3
    widths: tuple[int, ...] = (16, 32, 64)
    blocks: int = 2
    stride: int = 4
    num_landmarks: int = 24
    num_edges: int = 24
    in_channels: int = 1
    srf_enabled: bool = True
    heatmap_feedback: bool = True
    channel_attention: bool = True
    spatial_attention: bool = True

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if self.stages < 1:
            raise ConfigError(f"stages must be >= 1, got {self.stages}")
        if not self.widths or any(w < 2 for w in self.widths):
            raise ConfigError(f"widths must be >= 2 channels, got {self.widths}")
        if any(b <= a for a, b in zip(self.widths, self.widths[1:])):
            raise ConfigError(f"widths must increase strictly from high to low resolution, got {self.widths}")
        if self.stride < 1 or self.stride & (self.stride - 1):
            raise ConfigError(f"stride must be a power of two, got {self.stride}")
        if self.blocks < 0:
            raise ConfigError("blocks must be >= 0")

    @property
    def num_branches(self) -> int:
        return min(self.stages, len(self.widths))

    @property
    def downsample_factor(self) -> int:
        return self.stride * 2 ** (self.num_branches - 1)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["widths"] = list(self.widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        d = dict(d)
        if "widths" in d:
            d["widths"] = tuple(d["widths"])
        return cls(**d)


def conv_bn(cin, cout, k=3, stride=1, relu=True):
    layers = [nn.Conv2d(cin, cout, k, stride, k // 2, bias=False), nn.BatchNorm2d(cout, momentum=BN_MOMENTUM)]
    if relu:
        layers.append(nn.ReLU(inplace=True))
    return nn.Sequential(*layers)


class BasicBlock(nn.Module):
    def __init__(self, c):
        super().__init__()
        self.body = nn.Sequential(conv_bn(c, c), conv_bn(c, c, relu=False))

    def forward(self, x):
        return F.relu(x + self.body(x))


def coord_channels(h: int, w: int, like: torch.Tensor) -> torch.Tensor:
    """(1, 3, h, w): x and y in [-1, 1] and radius scaled to [0, 1]."""
    ys = torch.linspace(-1.0, 1.0, h, dtype=like.dtype, device=like.device) if h > 1 else torch.zeros(1, dtype=like.dtype)
    xs = torch.linspace(-1.0, 1.0, w, dtype=like.dtype, device=like.device) if w > 1 else torch.zeros(1, dtype=like.dtype)
    yy, xx = torch.meshgrid(ys, xs, indexing="ij")
    rr = torch.sqrt(xx ** 2 + yy ** 2) / math.sqrt(2.0)
    return torch.stack([xx, yy, rr]).unsqueeze(0)


class PolarizedChannelAttention(nn.Module):
    def __init__(self, c):
        super().__init__()
        half = max(c // 2, 1)
        self.wq = nn.Conv2d(c, 1, 1)
        self.wv = nn.Conv2d(c, half, 1)
        self.wz = nn.Conv2d(half, c, 1)
        self.norm = nn.LayerNorm([c, 1, 1])

    def forward(self, x):
        b, c, h, w = x.shape
        q = torch.softmax(self.wq(x).view(b, 1, h * w), dim=-1)  # (b, 1, hw)
        v = self.wv(x).view(b, -1, h * w)  # (b, c/2, hw)
        z = torch.bmm(v, q.transpose(1, 2)).unsqueeze(-1)  # (b, c/2, 1, 1)
        return x * torch.sigmoid(self.norm(self.wz(z)))


class PolarizedSpatialAttention(nn.Module):
    def __init__(self, c):
        super().__init__()
        half = max(c // 2, 1)
        self.wq = nn.Conv2d(c, half, 1)
        self.wv = nn.Conv2d(c, half, 1)

    def forward(self, x):
        b, c, h, w = x.shape
        q = torch.softmax(self.wq(x).mean(dim=(2, 3)), dim=1).unsqueeze(1)  # (b, 1, c/2)
        v = self.wv(x).view(b, -1, h * w)  # (b, c/2, hw)
        z = torch.bmm(q, v).view(b, 1, h, w)
        return x * torch.sigmoid(z)


class SRFBlock(nn.Module):
    """Coordinates (and optionally heatmap priors) -> 1x1 fusion -> attention, added residually."""

    def __init__(self, c, extra_channels=0, channel_attention=True, spatial_attention=True):
        super().__init__()
        self.extra_channels = extra_channels
        self.fuse = nn.Conv2d(c + 3 + extra_channels, c, 1)
        self.channel = PolarizedChannelAttention(c) if channel_attention else nn.Identity()
        self.spatial = PolarizedSpatialAttention(c) if spatial_attention else nn.Identity()

    def forward(self, x, extra=None):
        b, _, h, w = x.shape
        parts = [x, coord_channels(h, w, x).expand(b, -1, -1, -1)]
        if self.extra_channels:
            if extra is None:
                raise ValueError("this SRF block expects extra heatmap channels")
            parts.append(extra)
        y = self.fuse(torch.cat(parts, dim=1))
        return x + self.spatial(self.channel(y))


class Stage(nn.Module):
    def __init__(self, widths, blocks):
        super().__init__()
        self.widths = widths
        self.branches = nn.ModuleList(nn.Sequential(*[BasicBlock(c) for _ in range(blocks)]) for c in widths)
        n = len(widths)
        fuse = []
        for j in range(n):
            row = nn.ModuleList()
            for k in range(n):
                if k == j:
                    row.append(nn.Identity())
                elif k > j:
                    row.append(conv_bn(widths[k], widths[j], k=1, relu=False))
                else:
                    steps = []
                    for s in range(j - k):
                        last = s == j - k - 1
                        cout = widths[j] if last else widths[k]
                        steps.append(conv_bn(widths[k], cout, stride=2, relu=not last))
                    row.append(nn.Sequential(*steps))
            fuse.append(row)
        self.fuse = nn.ModuleList(fuse)

    def forward(self, xs):
        xs = [branch(x) for branch, x in zip(self.branches, xs)]
        if len(xs) == 1:
            return xs
        out = []
        for j, row in enumerate(self.fuse):
            acc = xs[j]
            for k, op in enumerate(row):
                if k == j:
                    continue
                y = op(xs[k])
                if k > j:
                    y = F.interpolate(y, size=xs[j].shape[-2:], mode="nearest")
                acc = acc + y
            out.append(F.relu(acc))
        return out


class UnsctNet(nn.Module):
    def __init__(self, cfg: NetworkConfig = NetworkConfig()):
        super().__init__()
        self.cfg = cfg
        w0 = cfg.widths[0]
        n_down = int(math.log2(cfg.stride))
        stem = [conv_bn(cfg.in_channels, w0, stride=2 if n_down > 0 else 1)]
        for _ in range(max(n_down - 1, 0)):
            stem.append(conv_bn(w0, w0, stride=2))
        self.stem = nn.Sequential(*stem)

        self.transitions = nn.ModuleDict()
        self.stages = nn.ModuleList()
        self.srf = nn.ModuleDict()
        for i in range(cfg.stages):
            nb = min(i + 1, len(cfg.widths))
            widths = cfg.widths[:nb]
            prev_nb = min(i, len(cfg.widths)) if i > 0 else 1
            if nb > prev_nb:
                self.transitions[str(i)] = conv_bn(cfg.widths[nb - 2], cfg.widths[nb - 1], stride=2)
            if cfg.srf_enabled:
                final = i == cfg.stages - 1
                extra = cfg.num_landmarks if (final and cfg.heatmap_feedback) else 0
                self.srf[str(i)] = nn.ModuleList(
                    SRFBlock(c, extra, cfg.channel_attention, cfg.spatial_attention) for c in widths)
            self.stages.append(Stage(widths, cfg.blocks))
        if cfg.srf_enabled and cfg.heatmap_feedback:
            self.srf["prior_head"] = nn.Conv2d(w0, cfg.num_landmarks, 1)
        self.heatmap_head = nn.Conv2d(w0, cfg.num_landmarks, 1)
        self.paf_head = nn.Conv2d(w0, 2 * cfg.num_edges, 1)

    def check_input(self, x: torch.Tensor) -> None:
        if x.dim() != 4 or x.shape[1] != self.cfg.in_channels:
            raise ConfigError(f"expected input (B, {self.cfg.in_channels}, H, W), got {tuple(x.shape)}")
        f = self.cfg.downsample_factor
        for name, size in (("height", x.shape[2]), ("width", x.shape[3])):
            if size % f:
                raise ConfigError(f"input {name} {size} is not divisible by the downsampling factor {f}")

    def forward(self, x):
        self.check_input(x)
        cfg = self.cfg
        xs = [self.stem(x)]
        for i, stage in enumerate(self.stages):
            if str(i) in self.transitions:
                xs = xs + [self.transitions[str(i)](xs[-1])]
            if cfg.srf_enabled:
                blocks = self.srf[str(i)]
                if blocks[0].extra_channels:
                    prior = self.srf["prior_head"](xs[0])
                    xs = [blk(t, F.adaptive_avg_pool2d(prior, t.shape[-2:])) for blk, t in zip(blocks, xs)]
                else:
                    xs = [blk(t) for blk, t in zip(blocks, xs)]
            xs = stage(xs)
        feat = xs[0]
        return self.heatmap_head(feat), self.paf_head(feat)


def count_parameters(cfg_or_model) -> int:
    model = cfg_or_model if isinstance(cfg_or_model, nn.Module) else UnsctNet(cfg_or_model)
    return sum(p.numel() for p in model.parameters())


def srf_parameter_count(model: UnsctNet) -> int:
    return sum(p.numel() for p in model.srf.parameters())


def layer_manifest(model: nn.Module) -> str:
    return "\n".join(f"{name}\t{tuple(t.shape)}" for name, t in model.state_dict().items()) + "\n"
