"""Object, edge and refinement networks for 2D and 3D inputs.

* :class:`ObjectNet` - residual encoder-decoder with ASPP, produces the
  object map.
* :class:`EdgeNet` - 16 convolutions in five stages with accumulated side
  projections; every stage feature passes a logical gate driven by the object
  map. Six supervised outputs (five sides plus fusion).
* :class:`RefineNet` - four encoder and four decoder stages, each gated by the
  phase-one edge and object maps. Nine supervised outputs.

All networks keep logits internally and expose sigmoid maps.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F

from ._validation import ConfigError, check_rank, check_spatial_divisible
from .gate import LogicalGate, RefineGate, resample

__all__ = [
    "NetConfig",
    "Phase1Outputs",
    "Phase2Outputs",
    "ASPP",
    "ObjectNet",
    "EdgeNet",
    "RefineNet",
    "build_object_net",
    "build_edge_net",
    "build_refine_net",
    "object_forward",
    "edge_forward",
    "refine_forward",
    "aspp_forward",
    "save_checkpoint",
    "load_checkpoint",
]


@dataclass
class NetConfig:
    rank: int = 2
    in_channels: int = 1
    base_width: int = 32
    encoder_blocks: list = field(default_factory=lambda: [4, 6, 6, 4])
    aspp_rates: list = field(default_factory=lambda: [1, 2, 4, 8])
    gn_groups: int = 8
    edge_stage_layers: list = field(default_factory=lambda: [3, 3, 3, 3, 4])
    side_channels: int = 16
    gate_enabled: bool = True

    def validate(self) -> "NetConfig":
        check_rank(self.rank)
        if self.in_channels < 1:
            raise ConfigError("in_channels must be >= 1")
        if len(self.encoder_blocks) != 4 or any(int(b) < 1 for b in self.encoder_blocks):
            raise ConfigError(f"encoder_blocks must list 4 positive counts, got {self.encoder_blocks}")
        if len(self.edge_stage_layers) != 5 or sum(self.edge_stage_layers) != 16:
            raise ConfigError(
                f"edge_stage_layers must have 5 entries summing to 16, got {self.edge_stage_layers}"
            )
        if any(int(n) < 1 for n in self.edge_stage_layers):
            raise ConfigError("every edge stage needs at least one convolution")
        if self.gn_groups < 1 or self.base_width < 1 or self.base_width % self.gn_groups:
            raise ConfigError(
                f"base_width ({self.base_width}) must be a positive multiple of gn_groups ({self.gn_groups})"
            )
        if self.side_channels < 1:
            raise ConfigError("side_channels must be >= 1")
        if not self.aspp_rates or any(int(r) < 1 for r in self.aspp_rates):
            raise ConfigError(f"aspp_rates must be nonempty with every rate >= 1, got {self.aspp_rates}")
        return self

    def width(self, level: int) -> int:
        """Channels at encoder level ``level``: doubling, capped at 8x base."""
        return min(self.base_width * 2**level, 8 * self.base_width)

    def to_dict(self) -> dict:
        return {k: (list(v) if isinstance(v, (list, tuple)) else v) for k, v in dataclasses.asdict(self).items()}


@dataclass
class Phase1Outputs:
    object_map: torch.Tensor
    edge_sides: list
    edge_fused: torch.Tensor
    object_logits: torch.Tensor | None = None
    edge_logits: list | None = None  # 5 sides + fusion

    @property
    def edge_maps(self) -> list:
        return list(self.edge_sides) + [self.edge_fused]


@dataclass
class Phase2Outputs:
    stage_maps: list
    fused: torch.Tensor
    logits: list | None = None  # 8 stages + fusion

    @property
    def maps(self) -> list:
        return list(self.stage_maps) + [self.fused]


def _conv(rank, cin, cout, k=3, stride=1, dilation=1, bias=True):
    cls = nn.Conv2d if rank == 2 else nn.Conv3d
    return cls(cin, cout, k, stride=stride, padding=dilation * (k // 2), dilation=dilation, bias=bias)


def _upsample_to(x, size):
    return resample(x, size)


class ResidualBlock(nn.Module):
    def __init__(self, rank, channels, groups):
        super().__init__()
        self.conv1 = _conv(rank, channels, channels)
        self.norm1 = nn.GroupNorm(groups, channels)
        self.conv2 = _conv(rank, channels, channels)
        self.norm2 = nn.GroupNorm(groups, channels)

    def forward(self, x):
        y = F.relu(self.norm1(self.conv1(x)))
        y = self.norm2(self.conv2(y))
        return F.relu(x + y)


class ASPP(nn.Module):
    """Parallel dilated 3x3 branches plus a global-average branch.

    The branches are concatenated with the pooled map and projected back to
    the input width by a 1x1 convolution. Output shape equals input shape.
    """

    def __init__(self, rank, channels, rates):
        super().__init__()
        rates = [int(r) for r in rates]
        if not rates or any(r < 1 for r in rates):
            raise ConfigError(f"ASPP rates must be nonempty and >= 1, got {rates}")
        self.rates = rates
        self.branches = nn.ModuleList(_conv(rank, channels, channels, dilation=r) for r in rates)
        self.project = _conv(rank, channels * (len(rates) + 1), channels, k=1)

    def forward(self, x):
        spatial = tuple(range(2, x.dim()))
        pooled = x.mean(dim=spatial, keepdim=True).expand_as(x)
        return self.project(torch.cat([b(x) for b in self.branches] + [pooled], dim=1))


def aspp_forward(module: ASPP, feat: torch.Tensor) -> torch.Tensor:
    return module(feat)


def _groups_for(cfg: NetConfig, channels: int) -> int:
    # widths are multiples of base_width, hence of gn_groups
    return cfg.gn_groups if channels % cfg.gn_groups == 0 else 1


class ObjectNet(nn.Module):
    def __init__(self, cfg: NetConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        r, g = cfg.rank, cfg.gn_groups
        b = cfg.width(0)
        self.stem = _conv(r, cfg.in_channels, b)
        self.stem_block = ResidualBlock(r, b, g)

        self.down = nn.ModuleList()
        self.enc = nn.ModuleList()
        for level, n in enumerate(cfg.encoder_blocks, start=1):
            cin, cout = cfg.width(level - 1), cfg.width(level)
            self.down.append(_conv(r, cin, cout, stride=2))
            self.enc.append(nn.Sequential(*[ResidualBlock(r, cout, g) for _ in range(int(n))]))
        self.aspp = ASPP(r, cfg.width(4), cfg.aspp_rates)

        self.up_proj = nn.ModuleList()
        self.dec = nn.ModuleList()
        for level in (3, 2, 1, 0):
            cin, cout = cfg.width(level + 1), cfg.width(level)
            self.up_proj.append(_conv(r, cin, cout, k=1))
            self.dec.append(nn.Sequential(ResidualBlock(r, cout, g), ResidualBlock(r, cout, g)))
        self.head = _conv(r, b, 1)

    def forward_logits(self, x):
        check_spatial_divisible(x.shape[2:])
        x = self.stem_block(self.stem(x))
        skips = [x]
        for down, stage in zip(self.down, self.enc):
            x = down(x)
            x = x + stage(x)
            skips.append(x)
        x = self.aspp(x)
        for proj, stage, skip in zip(self.up_proj, self.dec, reversed(skips[:-1])):
            x = proj(_upsample_to(x, skip.shape[2:])) + skip
            x = stage(x)
        return self.head(x)

    def forward(self, x):
        return torch.sigmoid(self.forward_logits(x))


class EdgeNet(nn.Module):
    def __init__(self, cfg: NetConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        r, sc = cfg.rank, cfg.side_channels
        self.stages = nn.ModuleList()
        self.sides = nn.ModuleList()
        self.stage_convs = nn.ModuleList()
        self.gates = nn.ModuleList()
        self.heads = nn.ModuleList()
        cin = cfg.in_channels
        for s, n in enumerate(cfg.edge_stage_layers):
            w = cfg.width(s)
            convs = nn.ModuleList()
            for _ in range(int(n)):
                convs.append(_conv(r, cin, w))
                cin = w
            self.stages.append(convs)
            self.sides.append(nn.ModuleList(_conv(r, w, sc, k=1) for _ in range(int(n))))
            self.stage_convs.append(_conv(r, sc, sc))
            self.gates.append(LogicalGate(sc, r, enabled=cfg.gate_enabled))
            self.heads.append(_conv(r, sc, 1, k=1))
        self.fuse = _conv(r, 5, 1, k=1)
        self._pool = F.max_pool2d if r == 2 else F.max_pool3d

    def stage_features(self, x, obj_map):
        """Gated stage features F' for all five stages."""
        check_spatial_divisible(x.shape[2:])
        feats = []
        for s, (convs, sides) in enumerate(zip(self.stages, self.sides)):
            if s:
                x = self._pool(x, 2)
            acc = 0
            for conv, side in zip(convs, sides):
                x = F.relu(conv(x))
                acc = acc + side(x)
            f = self.stage_convs[s](acc)
            feats.append(self.gates[s](f, obj_map))
        return feats

    def forward_logits(self, x, obj_map):
        size = x.shape[2:]
        sides = [_upsample_to(head(f), size) for head, f in zip(self.heads, self.stage_features(x, obj_map))]
        return sides + [self.fuse(torch.cat(sides, dim=1))]

    def forward(self, x, obj_map):
        return [torch.sigmoid(t) for t in self.forward_logits(x, obj_map)]


def _double_conv(rank, cin, cout, groups):
    return nn.Sequential(
        _conv(rank, cin, cout), nn.ReLU(), nn.GroupNorm(groups, cout),
        _conv(rank, cout, cout), nn.ReLU(), nn.GroupNorm(groups, cout),
    )


class RefineNet(nn.Module):
    """Input channels are the image plus nothing else; the phase-one maps
    enter only through the gates."""

    def __init__(self, cfg: NetConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        r, g = cfg.rank, cfg.gn_groups
        self.enc = nn.ModuleList()
        self.down = nn.ModuleList()
        for level in range(4):
            cin = cfg.in_channels if level == 0 else cfg.width(level)
            self.enc.append(_double_conv(r, cin, cfg.width(level), g))
            if level < 3:
                self.down.append(_conv(r, cfg.width(level), cfg.width(level + 1), stride=2))
        self.aspp = ASPP(r, cfg.width(3), cfg.aspp_rates)

        self.up_proj = nn.ModuleList()
        self.dec = nn.ModuleList()
        dec_levels = (3, 2, 1, 0)
        for i, level in enumerate(dec_levels):
            w = cfg.width(level)
            if i:
                self.up_proj.append(_conv(r, cfg.width(level + 1), w, k=1))
            self.dec.append(_double_conv(r, w, w, g))
        widths = [cfg.width(l) for l in range(4)] + [cfg.width(l) for l in dec_levels]
        self.gates = nn.ModuleList(RefineGate(w, r, enabled=cfg.gate_enabled) for w in widths)
        self.heads = nn.ModuleList(_conv(r, w, 1, k=1) for w in widths)
        self.fuse = _conv(r, 8, 1, k=1)

    def stage_features(self, x, edge_map, obj_map):
        check_spatial_divisible(x.shape[2:])
        feats, skips = [], []
        for level in range(4):
            if level:
                x = self.down[level - 1](x)
            x = self.gates[level](self.enc[level](x), edge_map, obj_map)
            feats.append(x)
            skips.append(x)
        x = self.aspp(x)
        for i in range(4):
            if i:
                skip = skips[3 - i]
                x = self.up_proj[i - 1](_upsample_to(x, skip.shape[2:])) + skip
            x = self.gates[4 + i](self.dec[i](x), edge_map, obj_map)
            feats.append(x)
        return feats

    def forward_logits(self, x, edge_map, obj_map):
        size = x.shape[2:]
        feats = self.stage_features(x, edge_map, obj_map)
        stages = [_upsample_to(h(f), size) for h, f in zip(self.heads, feats)]
        return stages + [self.fuse(torch.cat(stages, dim=1))]

    def forward(self, x, edge_map, obj_map):
        return [torch.sigmoid(t) for t in self.forward_logits(x, edge_map, obj_map)]


def _build(cls, cfg, seed):
    cfg.validate()
    if seed is None:
        return cls(cfg)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return cls(cfg)


def build_object_net(cfg: NetConfig, seed: int | None = 0) -> ObjectNet:
    return _build(ObjectNet, cfg, seed)


def build_edge_net(cfg: NetConfig, seed: int | None = 0) -> EdgeNet:
    return _build(EdgeNet, cfg, seed)


def build_refine_net(cfg: NetConfig, seed: int | None = 0) -> RefineNet:
    return _build(RefineNet, cfg, seed)


def object_forward(net: ObjectNet, image: torch.Tensor) -> torch.Tensor:
    return net(image)


def edge_forward(net: EdgeNet, image: torch.Tensor, obj_map: torch.Tensor) -> Phase1Outputs:
    """Edge-module forward pass. ``obj_map`` is the object map D_O at input
    resolution; the returned object_map field echoes it."""
    logits = net.forward_logits(image, obj_map)
    maps = [torch.sigmoid(t) for t in logits]
    return Phase1Outputs(object_map=obj_map, edge_sides=maps[:5], edge_fused=maps[5], edge_logits=logits)


def refine_forward(net: RefineNet, image, edge_map, obj_map) -> Phase2Outputs:
    logits = net.forward_logits(image, edge_map, obj_map)
    maps = [torch.sigmoid(t) for t in logits]
    return Phase2Outputs(stage_maps=maps[:8], fused=maps[8], logits=logits)


_KINDS = {"object": ObjectNet, "edge": EdgeNet, "refine": RefineNet}


def save_checkpoint(net: nn.Module, path) -> None:
    """Write config record and named parameters into one archive."""
    kind = {v: k for k, v in _KINDS.items()}[type(net)]
    state = {k: v.detach().clone() for k, v in net.state_dict().items()}
    torch.save({"kind": kind, "config": net.cfg.to_dict(), "state": state}, Path(path))


def load_checkpoint(path) -> nn.Module:
    blob = torch.load(Path(path), map_location="cpu", weights_only=True)
    cfg = NetConfig(**blob["config"])
    net = _KINDS[blob["kind"]](cfg)
    net.load_state_dict(blob["state"])
    return net
