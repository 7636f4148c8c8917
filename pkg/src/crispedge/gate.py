"""Logical gate: edge features amplified by the object map, then convolved.

The gate exploits the fact that a binary edge map is a subset of the object
map it outlines (``E & O == E`` and ``E | O == O``). For a feature ``E`` and an
object probability map ``O`` it computes ``conv3(E + O * E)``.
"""

from __future__ import annotations

import threading

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from ._validation import ConfigError, ShapeError, check_prob_map

__all__ = [
    "gate_combine",
    "logical_gate",
    "refine_gate",
    "resample",
    "check_subset",
    "LogicalGate",
    "RefineGate",
    "gate_call_count",
    "reset_gate_call_count",
]

# Instrumentation only; lets the ablation tests prove the gate path is cut.
_calls = 0
_calls_lock = threading.Lock()


def gate_call_count() -> int:
    return _calls


def reset_gate_call_count() -> None:
    global _calls
    with _calls_lock:
        _calls = 0


def _conv(rank: int):
    return F.conv2d if rank == 2 else F.conv3d


def gate_combine(edge: torch.Tensor, obj: torch.Tensor) -> torch.Tensor:
    """Return ``edge + obj * edge`` with ``obj`` broadcast over channels."""
    global _calls
    if (
        obj.dim() != edge.dim()
        or obj.shape[1] != 1
        or obj.shape[0] != edge.shape[0]
        or obj.shape[2:] != edge.shape[2:]
    ):
        raise ShapeError(
            f"gate operands disagree: edge features {tuple(edge.shape)} vs object map {tuple(obj.shape)}"
        )
    with _calls_lock:
        _calls += 1
    return edge + obj * edge


def logical_gate(
    edge: torch.Tensor,
    obj: torch.Tensor,
    weight: torch.Tensor,
    bias: torch.Tensor | None = None,
) -> torch.Tensor:
    """Size-preserving 3x3 (or 3x3x3) convolution of :func:`gate_combine`."""
    rank = edge.dim() - 2
    if rank not in (2, 3):
        raise ShapeError(f"edge features must be 4D or 5D, got {tuple(edge.shape)}")
    if weight.dim() != edge.dim() or any(k != 3 for k in weight.shape[2:]):
        raise ConfigError(f"gate kernel must be 3-wide in every spatial axis, got {tuple(weight.shape)}")
    if weight.shape[1] != edge.shape[1]:
        raise ConfigError(
            f"gate kernel expects {weight.shape[1]} input channels but features have {edge.shape[1]}"
        )
    return _conv(rank)(gate_combine(edge, obj), weight, bias, padding=1)


def resample(t: torch.Tensor, size) -> torch.Tensor:
    """Linear (bi/trilinear) resize without corner alignment."""
    size = tuple(int(s) for s in size)
    if any(s < 1 for s in size):
        raise ShapeError(f"cannot resample to empty size {size}")
    if tuple(t.shape[2:]) == size:
        return t
    mode = "bilinear" if t.dim() == 4 else "trilinear"
    return F.interpolate(t, size=size, mode=mode, align_corners=False)


def refine_gate(
    feat: torch.Tensor,
    edge_map: torch.Tensor,
    obj_map: torch.Tensor,
    proj_weight: torch.Tensor,
    proj_bias: torch.Tensor | None,
    weight: torch.Tensor,
    bias: torch.Tensor | None = None,
    *,
    validate: bool = True,
) -> torch.Tensor:
    """Three-input gate used by the refinement network.

    Both full-resolution maps are resampled to ``feat``'s grid. The edge map is
    lifted to ``feat``'s channels by a 1x1 projection and added to ``feat``;
    the sum is then gated by the object map.
    """
    if validate:
        check_prob_map(edge_map, "edge map")
        check_prob_map(obj_map, "object map")
    size = feat.shape[2:]
    e = resample(edge_map, size)
    o = resample(obj_map, size)
    rank = feat.dim() - 2
    if proj_weight.shape[1] != 1 or proj_weight.shape[0] != feat.shape[1]:
        raise ConfigError(
            f"edge projection must map 1 -> {feat.shape[1]} channels, got {tuple(proj_weight.shape)}"
        )
    lifted = feat + _conv(rank)(e, proj_weight, proj_bias)
    return logical_gate(lifted, o, weight, bias)


def check_subset(edge_mask, obj_mask) -> bool:
    """True iff every edge pixel is an object pixel."""
    e = np.asarray(edge_mask).astype(bool)
    o = np.asarray(obj_mask).astype(bool)
    if e.shape != o.shape:
        raise ShapeError(f"mask shapes differ: {e.shape} vs {o.shape}")
    return bool(np.array_equal(e & o, e) and np.array_equal(e | o, o))


def _conv_module(rank: int, cin: int, cout: int, k: int) -> nn.Module:
    cls = nn.Conv2d if rank == 2 else nn.Conv3d
    return cls(cin, cout, k, padding=k // 2)


class LogicalGate(nn.Module):
    """Two-operand gate module. With ``enabled=False`` it degrades to a plain
    3x3 convolution of the features (the no-gate ablation arm)."""

    def __init__(self, channels: int, rank: int = 2, enabled: bool = True):
        super().__init__()
        self.rank = rank
        self.enabled = enabled
        self.conv = _conv_module(rank, channels, channels, 3)

    def forward(self, feat: torch.Tensor, obj_map: torch.Tensor) -> torch.Tensor:
        if not self.enabled:
            return self.conv(feat)
        return logical_gate(feat, resample(obj_map, feat.shape[2:]), self.conv.weight, self.conv.bias)


class RefineGate(nn.Module):
    """Three-operand gate module (features, edge map, object map)."""

    def __init__(self, channels: int, rank: int = 2, enabled: bool = True):
        super().__init__()
        self.rank = rank
        self.enabled = enabled
        self.proj = _conv_module(rank, 1, channels, 1)
        self.conv = _conv_module(rank, channels, channels, 3)

    def forward(self, feat, edge_map, obj_map):
        if not self.enabled:
            return self.conv(feat)
        return refine_gate(
            feat, edge_map, obj_map,
            self.proj.weight, self.proj.bias, self.conv.weight, self.conv.bias,
            validate=False,
        )
