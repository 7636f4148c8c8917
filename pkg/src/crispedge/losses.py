"""Cross-entropy, focal and hybrid deep-supervision losses.

Every loss accepts probabilities by default. Pass ``logits=True`` to feed
pre-sigmoid scores instead; this is what training uses, for stability.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn.functional as F

from ._validation import ConfigError, ShapeError

__all__ = ["LossConfig", "bce_loss", "focal_loss", "hybrid_loss"]


@dataclass
class LossConfig:
    alpha_k: list = field(default_factory=lambda: [1.0] * 6)
    focal_gamma: float = 2.0
    focal_alpha_pos: float = 0.75
    epsilon: float = 1e-7

    def validate(self, k: int | None = None) -> "LossConfig":
        if k is not None and len(self.alpha_k) != k:
            raise ConfigError(f"alpha_k has {len(self.alpha_k)} weights but the network has {k} outputs")
        if any(a < 0 for a in self.alpha_k):
            raise ConfigError("alpha_k weights must be non-negative")
        if self.focal_gamma < 0:
            raise ConfigError("focal_gamma must be >= 0")
        if not 0 < self.focal_alpha_pos < 1:
            raise ConfigError("focal_alpha_pos must lie in (0, 1)")
        if not 0 < self.epsilon < 0.5:
            raise ConfigError("epsilon must lie in (0, 0.5)")
        return self


def _prepare(pred, target):
    if pred.shape != target.shape:
        raise ShapeError(f"prediction {tuple(pred.shape)} and target {tuple(target.shape)} differ in shape")
    if torch.isnan(pred).any():
        raise ValueError("prediction contains NaN")
    return target.to(pred.dtype)


def _log_probs(pred, target, logits, eps):
    """Return (log p, log(1-p))."""
    if logits:
        return F.logsigmoid(pred), F.logsigmoid(-pred)
    p = pred.clamp(eps, 1 - eps)
    return torch.log(p), torch.log1p(-p)


def bce_loss(pred, target, *, logits: bool = False, epsilon: float = 1e-7) -> torch.Tensor:
    y = _prepare(pred, target)
    log_p, log_q = _log_probs(pred, y, logits, epsilon)
    return -(y * log_p + (1 - y) * log_q).mean()


def focal_loss(pred, target, cfg: LossConfig | None = None, *, logits: bool = False) -> torch.Tensor:
    """Mean of ``-alpha_t (1 - p_t)^gamma log p_t``."""
    cfg = cfg or LossConfig()
    y = _prepare(pred, target)
    log_p, log_q = _log_probs(pred, y, logits, cfg.epsilon)
    log_pt = y * log_p + (1 - y) * log_q
    pt = torch.exp(log_pt)
    alpha_t = y * cfg.focal_alpha_pos + (1 - y) * (1 - cfg.focal_alpha_pos)
    if cfg.focal_gamma == 0:
        mod = torch.ones_like(pt)
    else:
        mod = (1 - pt).clamp_min(0) ** cfg.focal_gamma
    return -(alpha_t * mod * log_pt).mean()


def hybrid_loss(outputs, target, cfg: LossConfig, *, logits: bool = False) -> torch.Tensor:
    """Weighted sum over supervised outputs of cross-entropy plus focal loss."""
    outputs = list(outputs)
    if len(outputs) != len(cfg.alpha_k):
        raise ConfigError(f"{len(outputs)} outputs supplied but alpha_k has {len(cfg.alpha_k)} weights")
    total = 0
    for a, out in zip(cfg.alpha_k, outputs):
        total = total + a * (
            bce_loss(out, target, logits=logits, epsilon=cfg.epsilon) + focal_loss(out, target, cfg, logits=logits)
        )
    return total
