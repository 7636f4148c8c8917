"""Two-phase training, map caching, prediction and evaluation.

Phase 1 trains the object and edge networks jointly. Its object maps and
fused edge maps are then cached per sample id and consumed, frozen, by the
refinement network trained in phase 2.
"""

from __future__ import annotations

import csv
import hashlib
import io
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from ._validation import ConfigError, check_spatial_divisible
from .data import read_volume, write_volume
from .losses import LossConfig, bce_loss, hybrid_loss
from .metrics import (
    DEFAULT_SWEEP,
    EvalConfig,
    ReportRow,
    _ods_from,
    _ois_from,
    _prf_arrays,
    _tables,
    count_table,
    crispness_sweep,
    dice,
    hausdorff,
    to_points,
)
from .networks import (
    EdgeNet,
    NetConfig,
    ObjectNet,
    RefineNet,
    build_edge_net,
    build_object_net,
    build_refine_net,
    load_checkpoint,
    save_checkpoint,
)

__all__ = [
    "TrainConfig",
    "Phase1Artifacts",
    "Phase2Artifacts",
    "TrainingDivergedError",
    "train_phase1",
    "train_phase2",
    "phase1_maps",
    "phase2_maps",
    "predict",
    "evaluate_run",
    "save_phase1",
    "load_phase1",
    "save_phase2",
    "load_phase2",
    "parameter_checksum",
    "format_log",
]

logger = logging.getLogger(__name__)


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    seed: int = 0
    epochs_phase1: int = 10
    epochs_phase2: int = 10
    batch_size: int = 8
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.0
    alpha_phase1: list = field(default_factory=lambda: [1.0] * 6)
    alpha_phase2: list = field(default_factory=lambda: [1.0] * 9)
    focal_gamma: float = 2.0
    focal_alpha_pos: float = 0.75
    gate_enabled: bool = True
    flip_augment: bool = True
    checkpoint_dir: str | None = None

    def validate(self) -> "TrainConfig":
        if self.epochs_phase1 < 0 or self.epochs_phase2 < 0:
            raise ConfigError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be > 0")
        self.loss_config(1).validate(6)
        self.loss_config(2).validate(9)
        return self

    def loss_config(self, phase: int) -> LossConfig:
        return LossConfig(
            alpha_k=list(self.alpha_phase1 if phase == 1 else self.alpha_phase2),
            focal_gamma=self.focal_gamma,
            focal_alpha_pos=self.focal_alpha_pos,
        )


@dataclass
class Phase1Artifacts:
    object_net: ObjectNet
    edge_net: EdgeNet
    cache: dict = field(default_factory=dict)  # id -> (object map, fused edge map)
    log: list = field(default_factory=list)  # (step, phase, loss)
    epoch_losses: list = field(default_factory=list)


@dataclass
class Phase2Artifacts:
    refine_net: RefineNet
    log: list = field(default_factory=list)
    epoch_losses: list = field(default_factory=list)


def _stack(samples, attr):
    return np.stack([getattr(s, attr) for s in samples])


def _flip_axes(rng, rank, n, enabled):
    if not enabled:
        return [()] * n
    draws = rng.random((n, rank)) < 0.5
    return [tuple(int(a) for a in np.flatnonzero(row)) for row in draws]


def _flip(arr, axes, offset):
    return np.flip(arr, axis=tuple(a + offset for a in axes)) if axes else arr


def _batches(rng, n, batch_size):
    order = rng.permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def _adam(params, cfg: TrainConfig):
    return torch.optim.Adam(
        params, lr=cfg.learning_rate, betas=(cfg.beta1, cfg.beta2), weight_decay=cfg.weight_decay
    )


def _check_finite(loss, phase, step) -> float:
    value = loss.item()
    if not math.isfinite(value):
        raise TrainingDivergedError(f"phase {phase}: non-finite loss {value} at step {step}")
    return value


def _check_logits(tensors, phase, step) -> None:
    if not all(torch.isfinite(t).all() for t in tensors):
        raise TrainingDivergedError(f"phase {phase}: non-finite network output at step {step}")


def _validate_dataset(samples):
    if not samples:
        raise ValueError("training set is empty")
    shape = samples[0].spatial_shape
    check_spatial_divisible(shape)
    if any(s.spatial_shape != shape for s in samples):
        raise ValueError("all samples in a training set must share one spatial shape")


def train_phase1(dataset, cfg: TrainConfig, net_cfg: NetConfig | None = None, cache_for=()) -> Phase1Artifacts:
    """Joint object/edge training, then cache maps for ``dataset`` and ``cache_for``."""
    cfg.validate()
    dataset = list(dataset)
    _validate_dataset(dataset)
    net_cfg = NetConfig(**{**(net_cfg or NetConfig()).to_dict(), "gate_enabled": cfg.gate_enabled})
    net_cfg.rank = len(dataset[0].spatial_shape)
    net_cfg.validate()
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    obj_net = build_object_net(net_cfg, seed=cfg.seed)
    edge_net = build_edge_net(net_cfg, seed=cfg.seed + 1)
    opt = _adam(list(obj_net.parameters()) + list(edge_net.parameters()), cfg)
    lc = cfg.loss_config(1)

    images, objs, edges = _stack(dataset, "image"), _stack(dataset, "object_mask"), _stack(dataset, "edge_mask")
    rank = net_cfg.rank
    log, epoch_losses, step = [], [], 0
    obj_net.train()
    edge_net.train()
    for epoch in range(cfg.epochs_phase1):
        losses = []
        for idx in _batches(rng, len(dataset), cfg.batch_size):
            axes = _flip_axes(rng, rank, len(idx), cfg.flip_augment)
            x = torch.from_numpy(np.stack([_flip(images[i], a, 1) for i, a in zip(idx, axes)]).copy())
            yo = torch.from_numpy(np.stack([_flip(objs[i], a, 0) for i, a in zip(idx, axes)])[:, None].copy())
            ye = torch.from_numpy(np.stack([_flip(edges[i], a, 0) for i, a in zip(idx, axes)])[:, None].copy())
            obj_logits = obj_net.forward_logits(x)
            edge_logits = edge_net.forward_logits(x, torch.sigmoid(obj_logits))
            _check_logits([obj_logits, *edge_logits], 1, step)
            loss = bce_loss(obj_logits, yo, logits=True) + hybrid_loss(edge_logits, ye, lc, logits=True)
            value = _check_finite(loss, 1, step)
            opt.zero_grad()
            loss.backward()
            opt.step()
            log.append((step, 1, value))
            losses.append(value)
            step += 1
        epoch_losses.append(float(np.mean(losses)))
        logger.info("phase 1 epoch %d mean loss %.5f", epoch, epoch_losses[-1])

    art = Phase1Artifacts(obj_net.eval(), edge_net.eval(), {}, log, epoch_losses)
    seen = set()
    to_cache = [s for s in list(dataset) + list(cache_for) if not (s.id in seen or seen.add(s.id))]
    art.cache = dict(zip([s.id for s in to_cache], phase1_maps(art, [s.image for s in to_cache])))
    return art


@torch.no_grad()
def _phase1_forward(art: Phase1Artifacts, x):
    d_o = art.object_net(x)
    outs = art.edge_net(x, d_o)
    return d_o, outs


def phase1_maps(art: Phase1Artifacts, images, batch_size: int = 8, all_outputs: bool = False):
    """Object map and fused edge map per image (or all six edge maps)."""
    results = []
    images = [np.asarray(im, dtype=np.float32) for im in images]
    for i in range(0, len(images), batch_size):
        x = torch.from_numpy(np.stack(images[i:i + batch_size]))
        d_o, outs = _phase1_forward(art, x)
        for b in range(x.shape[0]):
            o = d_o[b, 0].numpy()
            if all_outputs:
                results.append((o, [t[b, 0].numpy() for t in outs]))
            else:
                results.append((o, outs[-1][b, 0].numpy()))
    return results


def _cached(p1: Phase1Artifacts, sample):
    try:
        return p1.cache[sample.id]
    except KeyError:
        raise KeyError(f"no phase-1 cache entry for sample {sample.id!r}") from None


def train_phase2(dataset, p1: Phase1Artifacts, cfg: TrainConfig, net_cfg: NetConfig | None = None) -> Phase2Artifacts:
    """Refinement training on cached phase-1 maps; phase-1 nets untouched."""
    cfg.validate()
    dataset = list(dataset)
    _validate_dataset(dataset)
    maps = [_cached(p1, s) for s in dataset]
    net_cfg = NetConfig(**{**(net_cfg or NetConfig()).to_dict(), "gate_enabled": cfg.gate_enabled})
    net_cfg.rank = len(dataset[0].spatial_shape)
    net_cfg.validate()
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed + 7919)
    net = build_refine_net(net_cfg, seed=cfg.seed + 2)
    opt = _adam(net.parameters(), cfg)
    lc = cfg.loss_config(2)

    images, edges = _stack(dataset, "image"), _stack(dataset, "edge_mask")
    d_o_all = np.stack([m[0] for m in maps])
    d_e_all = np.stack([m[1] for m in maps])
    rank = net_cfg.rank
    log, epoch_losses, step = [], [], 0
    net.train()
    for epoch in range(cfg.epochs_phase2):
        losses = []
        for idx in _batches(rng, len(dataset), cfg.batch_size):
            axes = _flip_axes(rng, rank, len(idx), cfg.flip_augment)
            x = torch.from_numpy(np.stack([_flip(images[i], a, 1) for i, a in zip(idx, axes)]).copy())
            ye = torch.from_numpy(np.stack([_flip(edges[i], a, 0) for i, a in zip(idx, axes)])[:, None].copy())
            d_o = torch.from_numpy(np.stack([_flip(d_o_all[i], a, 0) for i, a in zip(idx, axes)])[:, None].copy())
            d_e = torch.from_numpy(np.stack([_flip(d_e_all[i], a, 0) for i, a in zip(idx, axes)])[:, None].copy())
            refine_logits = net.forward_logits(x, d_e, d_o)
            _check_logits(refine_logits, 2, step)
            loss = hybrid_loss(refine_logits, ye, lc, logits=True)
            value = _check_finite(loss, 2, step)
            opt.zero_grad()
            loss.backward()
            opt.step()
            log.append((step, 2, value))
            losses.append(value)
            step += 1
        epoch_losses.append(float(np.mean(losses)))
        logger.info("phase 2 epoch %d mean loss %.5f", epoch, epoch_losses[-1])
    return Phase2Artifacts(net.eval(), log, epoch_losses)


@torch.no_grad()
def phase2_maps(p2: Phase2Artifacts, images, p1_maps, batch_size: int = 8):
    """All nine refinement outputs per image, as numpy arrays."""
    results = []
    images = [np.asarray(im, dtype=np.float32) for im in images]
    for i in range(0, len(images), batch_size):
        x = torch.from_numpy(np.stack(images[i:i + batch_size]))
        chunk = p1_maps[i:i + batch_size]
        d_o = torch.from_numpy(np.stack([m[0] for m in chunk])[:, None].astype(np.float32))
        d_e = torch.from_numpy(np.stack([m[1] for m in chunk])[:, None].astype(np.float32))
        outs = p2.refine_net(x, d_e, d_o)
        for b in range(x.shape[0]):
            results.append([t[b, 0].numpy() for t in outs])
    return results


def predict(p2: Phase2Artifacts, p1: Phase1Artifacts, image) -> np.ndarray:
    """Binary edge map: fused refinement output strictly above 0.5."""
    image = np.asarray(image, dtype=np.float32)
    rank = p1.object_net.cfg.rank
    if image.ndim == rank:
        image = image[None]
    check_spatial_divisible(image.shape[1:])
    m1 = phase1_maps(p1, [image])
    fused = phase2_maps(p2, [image], m1)[0][-1]
    return (fused > 0.5).astype(np.uint8)


def _mean_dsc_hd(maps, gts, threshold, strict=False):
    dsc, hd = [], []
    for m, g in zip(maps, gts):
        b = m > threshold if strict else m >= threshold
        dsc.append(dice(b, g))
        hd.append(hausdorff(to_points(b), to_points(g), shape=g.shape))
    return float(np.mean(dsc)), float(np.mean(hd))


def _output_rows(name, dataset, maps, gts, cfg):
    tables = _tables(maps, gts, cfg)
    t, p, r, f, _ = _ods_from(tables, cfg.thresholds)
    dsc, hd = _mean_dsc_hd(maps, gts, t)
    op, orr, of, _ = _ois_from(tables)
    return [
        ReportRow("ods", dataset, name, cfg.d, t, p, r, f, dsc, hd),
        ReportRow("ois", dataset, name, cfg.d, None, op, orr, of),
    ]


def evaluate_run(p1: Phase1Artifacts, p2: Phase2Artifacts, test_set, eval_cfg: EvalConfig | None = None,
                 dataset: str = "test", sweep=DEFAULT_SWEEP):
    """Report rows for phase-1 fusion, the nine refinement outputs, the final
    binary prediction and (optionally) the crispness sweep of the fusion."""
    cfg = (eval_cfg or EvalConfig()).validate()
    test_set = list(test_set)
    gts = [s.edge_mask for s in test_set]
    images = [s.image for s in test_set]
    m1 = [p1.cache[s.id] if s.id in p1.cache else None for s in test_set]
    if any(m is None for m in m1):
        m1 = phase1_maps(p1, images)
    rows = _output_rows("phase1_fusion", dataset, [m[1] for m in m1], gts, cfg)
    if p2 is None:
        return rows
    outs = phase2_maps(p2, images, m1)
    names = [f"phase2_side{k}" for k in range(1, 9)] + ["phase2_fusion"]
    for k, name in enumerate(names):
        rows += _output_rows(name, dataset, [o[k] for o in outs], gts, cfg)

    fused = [o[-1] for o in outs]
    binary = [(m > 0.5).astype(np.uint8) for m in fused]
    tp = n_pred = n_gt = 0
    for b, g in zip(binary, gts):
        t_, n_, g_ = count_table(b.astype(np.float64), g, [0.5], cfg.d)
        tp, n_pred, n_gt = tp + int(t_[0]), n_pred + int(n_[0]), n_gt + int(g_[0])
    p, r, f = (float(v) for v in _prf_arrays(tp, n_pred, n_gt))
    dsc, hd = _mean_dsc_hd(fused, gts, 0.5, strict=True)
    rows.append(ReportRow("binary", dataset, "final", cfg.d, 0.5, p, r, f, dsc, hd))

    if sweep:
        for d, f_ods, f_ois in crispness_sweep(fused, gts, sweep, cfg):
            rows.append(ReportRow("sweep_ods", dataset, "phase2_fusion", d, None, None, None, f_ods))
            rows.append(ReportRow("sweep_ois", dataset, "phase2_fusion", d, None, None, None, f_ois))
    return rows


def parameter_checksum(*nets) -> str:
    h = hashlib.sha256()
    for net in nets:
        for name, t in sorted(net.state_dict().items()):
            h.update(name.encode())
            h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def format_log(log) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["step", "phase", "loss"])
    for step, phase, loss in log:
        w.writerow([step, phase, repr(float(loss))])
    return buf.getvalue()


def save_phase1(art: Phase1Artifacts, out_dir) -> Path:
    out = Path(out_dir)
    (out / "cache").mkdir(parents=True, exist_ok=True)
    save_checkpoint(art.object_net, out / "object_net.pt")
    save_checkpoint(art.edge_net, out / "edge_net.pt")
    for sid in sorted(art.cache):
        d_o, d_e = art.cache[sid]
        write_volume(out / "cache" / f"{sid}_object_map.raw", d_o, "f32")
        write_volume(out / "cache" / f"{sid}_edge_map.raw", d_e, "f32")
    (out / "cache" / "index.txt").write_text("".join(f"{sid}\n" for sid in sorted(art.cache)))
    (out / "train_log.csv").write_text(format_log(art.log))
    return out


def _read_log(path):
    if not path.exists():
        return []
    rows = list(csv.DictReader(path.read_text().splitlines()))
    return [(int(r["step"]), int(r["phase"]), float(r["loss"])) for r in rows]


def load_phase1(in_dir) -> Phase1Artifacts:
    d = Path(in_dir)
    for name in ("object_net.pt", "edge_net.pt"):
        if not (d / name).exists():
            raise FileNotFoundError(f"phase-1 artifact missing: {d / name}")
    cache = {}
    index = d / "cache" / "index.txt"
    if index.exists():
        for sid in index.read_text().split():
            cache[sid] = (
                read_volume(d / "cache" / f"{sid}_object_map.raw"),
                read_volume(d / "cache" / f"{sid}_edge_map.raw"),
            )
    return Phase1Artifacts(
        load_checkpoint(d / "object_net.pt").eval(),
        load_checkpoint(d / "edge_net.pt").eval(),
        cache,
        _read_log(d / "train_log.csv"),
    )


def save_phase2(art: Phase2Artifacts, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(art.refine_net, out / "refine_net.pt")
    (out / "train_log.csv").write_text(format_log(art.log))
    return out


def load_phase2(in_dir) -> Phase2Artifacts:
    d = Path(in_dir)
    if not (d / "refine_net.pt").exists():
        raise FileNotFoundError(f"phase-2 artifact missing: {d / 'refine_net.pt'}")
    return Phase2Artifacts(load_checkpoint(d / "refine_net.pt").eval(), _read_log(d / "train_log.csv"))
