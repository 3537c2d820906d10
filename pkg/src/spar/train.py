"""Two-stage training: shape auto-encoder pretraining, then segmenter training
with an optional regularizer, alternating discriminator and segmenter
updates on every batch.
"""
from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
from torch.nn import functional as F

from . import nets
from .data import AugmentParams, PatientCase, SlicePool, Volume, cohort_hash
from .objectives import (
    LossValue,
    MethodKind,
    cross_entropy,
    disc_loss,
    shape_l2_loss,
    spar_loss,
    total_seg_loss,
)

log = logging.getLogger(__name__)

# independent seed streams derived from the run seed
_SEED_S, _SEED_AE, _SEED_D, _SEED_AE_BATCHES, _SEED_SEG_BATCHES = range(5)


def derive_seed(seed: int, stream: int) -> int:
    return int(np.random.SeedSequence([int(seed), stream]).generate_state(1, dtype=np.uint64)[0] >> 1)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    method: MethodKind = MethodKind.SPAR
    lam: float = 1e-2
    ae_lr: float = 1e-2
    seg_lr: float = 1e-4
    disc_lr: float | None = None  # defaults to seg_lr
    epochs: int = 10
    ae_epochs: int | None = None  # defaults to epochs
    batch_size: int = 32
    seed: int = 0
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    augment: AugmentParams | None = field(default_factory=AugmentParams)
    probe_slices: int = 16

    def __post_init__(self):
        self.method = MethodKind(self.method)
        if isinstance(self.augment, dict):
            self.augment = AugmentParams(**self.augment)
        self.betas = tuple(self.betas)
        if min(self.ae_lr, self.seg_lr, self.disc_lr or self.seg_lr) <= 0:
            raise ValueError("learning rates must be positive")
        if self.epochs < 0 or (self.ae_epochs is not None and self.ae_epochs < 0):
            raise ValueError("epochs must be non-negative")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 (batch-statistics normalisation)")
        if self.lam < 0:
            raise ValueError("lambda must be non-negative")

    @property
    def pretrain_epochs(self) -> int:
        return self.epochs if self.ae_epochs is None else self.ae_epochs

    def to_dict(self) -> dict:
        d = asdict(self)
        d["method"] = self.method.value
        d["betas"] = list(self.betas)
        return d


@dataclass
class EpochLog:
    epoch: int
    ce: float
    reg: float
    total: float
    disc_loss: float | None
    latent_distance: float | None
    wall_time: float


@dataclass
class AEEpochLog:
    epoch: int
    loss: float
    recon_dice: float
    recon_dice_per_class: list[float]
    wall_time: float


def _adam(params, lr: float, cfg: TrainConfig) -> torch.optim.Adam:
    return torch.optim.Adam(params, lr=lr, betas=cfg.betas, eps=cfg.adam_eps)


def _mask_tensor(masks: np.ndarray, classes: int) -> torch.Tensor:
    return F.one_hot(torch.from_numpy(masks.astype(np.int64)), classes).permute(0, 3, 1, 2).float()


def _to_tensors(images: np.ndarray, masks: np.ndarray, classes: int) -> tuple[torch.Tensor, torch.Tensor]:
    x = torch.from_numpy(np.ascontiguousarray(images, dtype=np.float32))[:, None]
    return x, _mask_tensor(masks, classes)


def _check_finite(loss: torch.Tensor, what: str, epoch: int, step: int) -> None:
    if not torch.isfinite(loss):
        raise TrainingDiverged(f"{what} became non-finite ({loss.item()}) at epoch {epoch}, step {step}")


def foreground_dice(pred: np.ndarray, gt: np.ndarray, classes: int) -> list[float]:
    """Pooled Dice per foreground class over a stack of label grids."""
    out = []
    for c in range(1, classes):
        p, g = pred == c, gt == c
        denom = p.sum() + g.sum()
        out.append(1.0 if denom == 0 else float(2 * (p & g).sum() / denom))
    return out


def reconstruct(encoder, decoder, masks: np.ndarray, classes: int, chunk: int = 64) -> np.ndarray:
    encoder.eval()
    decoder.eval()
    out = []
    with torch.no_grad():
        for s in range(0, len(masks), chunk):
            y = _mask_tensor(masks[s:s + chunk], classes)
            out.append(decoder(encoder(y)).numpy().argmax(axis=1))
    return np.concatenate(out).astype(np.uint8)


def pretrain_autoencoder(cases: Sequence[PatientCase], net_cfg: nets.NetConfig, cfg: TrainConfig,
                         on_batch: Callable[[int, int, float], None] | None = None):
    """Fit the shape auto-encoder to reconstruct ground-truth mask slices.

    Returns ``(encoder, decoder, logs)``; one ``AEEpochLog`` per epoch with
    the reconstruction Dice over foreground classes on the unaugmented
    training slices.
    """
    pool = SlicePool.from_cases(cases)
    encoder = nets.build("F", net_cfg, derive_seed(cfg.seed, _SEED_AE))
    decoder = nets.build("G", net_cfg, derive_seed(cfg.seed, _SEED_AE) + 1)
    rng = np.random.default_rng(derive_seed(cfg.seed, _SEED_AE_BATCHES))
    opt = _adam(list(encoder.parameters()) + list(decoder.parameters()), cfg.ae_lr, cfg)
    logs: list[AEEpochLog] = []
    step = 0
    for epoch in range(1, cfg.pretrain_epochs + 1):
        t0 = time.perf_counter()
        encoder.train()
        decoder.train()
        losses = []
        for _, masks in pool.batches(cfg.batch_size, rng, cfg.augment):
            y = _mask_tensor(masks, net_cfg.classes)
            loss = cross_entropy(decoder(encoder(y)), y).total
            _check_finite(loss, "auto-encoder loss", epoch, step)
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(loss.item())
            if on_batch is not None:
                on_batch(epoch, step, loss.item())
            step += 1
        per_class = foreground_dice(reconstruct(encoder, decoder, pool.masks, net_cfg.classes),
                                    pool.masks, net_cfg.classes)
        logs.append(AEEpochLog(epoch, float(np.mean(losses)), float(np.mean(per_class)), per_class,
                               time.perf_counter() - t0))
        log.info("ae epoch %d loss %.4f recon dice %.4f", epoch, logs[-1].loss, logs[-1].recon_dice)
    return encoder, decoder, logs


def _probe_indices(pool: SlicePool, k: int) -> np.ndarray:
    fg = np.flatnonzero(pool.masks.reshape(len(pool), -1).max(axis=1) > 0)
    if len(fg) == 0 or k <= 0:
        return np.zeros(0, dtype=np.int64)
    return np.unique(fg[np.linspace(0, len(fg) - 1, min(k, len(fg))).round().astype(int)])


def latent_distance(segmenter, encoder, images: np.ndarray, masks: np.ndarray, classes: int) -> float:
    """Mean Euclidean distance between codes of predicted and ground-truth masks."""
    segmenter.eval()
    encoder.eval()
    with torch.no_grad():
        x, y = _to_tensors(images, masks, classes)
        diff = (encoder(segmenter(x)) - encoder(y)).flatten(1)
        return float(diff.norm(dim=1).mean())


@dataclass
class SegmenterResult:
    segmenter: torch.nn.Module
    discriminator: torch.nn.Module | None
    logs: list[EpochLog]
    batch_rows: list[dict]


def train_segmenter(cases: Sequence[PatientCase], method: MethodKind | str, net_cfg: nets.NetConfig,
                    cfg: TrainConfig, encoder: torch.nn.Module | None = None,
                    update_discriminator: bool = True,
                    on_epoch: Callable[[int, torch.nn.Module, torch.nn.Module | None], None] | None = None,
                    ) -> SegmenterResult:
    """Train the segmenter with cross-entropy plus ``lam`` times the method's regularizer.

    Per batch, adversarial methods first update the discriminator on the
    detached prediction, then update the segmenter. The encoder is frozen
    throughout and only used as a fixed, differentiable map.
    """
    method = MethodKind(method)
    if method.needs_encoder and encoder is None:
        raise ValueError(f"method {method.value!r} requires a pretrained shape encoder")
    if encoder is not None:
        nets.freeze(encoder)
    pool = SlicePool.from_cases(cases)
    segmenter = nets.build("S", net_cfg, derive_seed(cfg.seed, _SEED_S))
    disc = None
    if method is MethodKind.SPAR:
        disc = nets.build("D", net_cfg, derive_seed(cfg.seed, _SEED_D))
    elif method is MethodKind.ADV_MASK:
        disc = nets.build("M", net_cfg, derive_seed(cfg.seed, _SEED_D))
    opt_s = _adam(segmenter.parameters(), cfg.seg_lr, cfg)
    opt_d = _adam(disc.parameters(), cfg.disc_lr or cfg.seg_lr, cfg) if disc is not None else None
    rng = np.random.default_rng(derive_seed(cfg.seed, _SEED_SEG_BATCHES))
    probe = _probe_indices(pool, cfg.probe_slices)

    logs: list[EpochLog] = []
    rows: list[dict] = []
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        segmenter.train()
        if disc is not None:
            disc.train()
        acc = {"ce": [], "reg": [], "total": [], "disc": []}
        for images, masks in pool.batches(cfg.batch_size, rng, cfg.augment):
            x, y = _to_tensors(images, masks, net_cfg.classes)
            pred = segmenter(x)
            ce = cross_entropy(pred, y)
            d_value = None
            reg: LossValue | None = None

            if method.adversarial:
                if method is MethodKind.SPAR:
                    with torch.no_grad():
                        real_in, fake_in = encoder(y), encoder(pred.detach())
                else:
                    real_in, fake_in = y, pred.detach()
                if update_discriminator:
                    disc.requires_grad_(True)
                    loss_d = disc_loss(disc(fake_in), disc(real_in))
                    _check_finite(loss_d.total, "discriminator loss", epoch, step)
                    opt_d.zero_grad()
                    loss_d.total.backward()
                    opt_d.step()
                    d_value = float(loss_d)
                disc.requires_grad_(False)
                gen_in = encoder(pred) if method is MethodKind.SPAR else pred
                reg = spar_loss(disc(gen_in))
            elif method is MethodKind.SHAPE_L2:
                with torch.no_grad():
                    code_gt = encoder(y)
                reg = shape_l2_loss(encoder(pred), code_gt)

            loss = total_seg_loss(ce, reg, cfg.lam)
            _check_finite(loss.total, "segmenter loss", epoch, step)
            opt_s.zero_grad()
            loss.total.backward()
            opt_s.step()
            if disc is not None:
                disc.requires_grad_(True)

            acc["ce"].append(loss.parts["ce"])
            acc["reg"].append(loss.parts["reg"])
            acc["total"].append(loss.parts["total"])
            if d_value is not None:
                acc["disc"].append(d_value)
            rows.append({"epoch": epoch, "step": step, "method": method.value, "ce": loss.parts["ce"],
                         "reg": loss.parts["reg"], "total": loss.parts["total"], "disc_loss": d_value})
            step += 1

        dist = None
        if encoder is not None and len(probe):
            dist = latent_distance(segmenter, encoder, pool.images[probe], pool.masks[probe], net_cfg.classes)
        logs.append(EpochLog(epoch, float(np.mean(acc["ce"])), float(np.mean(acc["reg"])),
                             float(np.mean(acc["total"])),
                             float(np.mean(acc["disc"])) if acc["disc"] else None, dist,
                             time.perf_counter() - t0))
        log.info("%s epoch %d ce %.4f reg %.4f latent %s", method.value, epoch, logs[-1].ce, logs[-1].reg, dist)
        if on_epoch is not None:
            on_epoch(epoch, segmenter, disc)
    segmenter.eval()
    return SegmenterResult(segmenter, disc, logs, rows)


def predict_probabilities(segmenter, images: np.ndarray, chunk: int = 32) -> np.ndarray:
    segmenter.eval()
    out = []
    with torch.no_grad():
        for s in range(0, len(images), chunk):
            x = torch.from_numpy(np.ascontiguousarray(images[s:s + chunk], dtype=np.float32))[:, None]
            out.append(segmenter(x).numpy())
    return np.concatenate(out)


def predict_volume(segmenter, image: Volume) -> Volume:
    """Slice-wise argmax prediction (ties go to the lowest class index), stacked along z."""
    size = segmenter.cfg.input_size
    if image.height != size or image.width != size:
        raise ValueError(f"slice size {image.height}x{image.width} does not match network input {size}")
    labels = predict_probabilities(segmenter, image.data).argmax(axis=1).astype(np.uint8)
    return Volume(labels, image.spacing_mm, "u8", segmenter.cfg.classes)


# ---------------------------------------------------------------------------
# run directories

LOSS_COLUMNS = ["epoch", "step", "method", "ce", "reg", "total", "disc_loss"]
EPOCH_COLUMNS = ["epoch", "ce", "reg", "total", "disc_loss", "latent_distance"]


def fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return "nan" if np.isnan(v) else f"{v:.9g}"
    return str(v)


def write_csv(path, columns: Sequence[str], rows: Sequence[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([fmt(r.get(c)) for c in columns])


@dataclass
class RunResult:
    out_dir: Path
    segmenter: torch.nn.Module
    discriminator: torch.nn.Module | None
    encoder: torch.nn.Module | None
    logs: list[EpochLog]
    ae_logs: list[AEEpochLog]
    manifest: dict


def run_training(cases: Sequence[PatientCase], net_cfg: nets.NetConfig, cfg: TrainConfig, out_dir,
                 pretrained: tuple | None = None) -> RunResult:
    """Pretrain the shape auto-encoder when the method needs it, train the
    segmenter, and write checkpoints, loss CSVs and ``run_manifest.json``.

    ``pretrained`` may supply ``(encoder, decoder, ae_logs)`` from an identical
    earlier pretraining on the same cases and seed.
    """
    out_dir = Path(out_dir)
    ckpt = out_dir / "checkpoints"
    ckpt.mkdir(parents=True, exist_ok=True)
    checkpoints: dict = {"S": {}, "D": {}}
    encoder = decoder = None
    ae_logs: list[AEEpochLog] = []
    ae_rows: list[dict] = []
    if cfg.method.needs_encoder:
        if pretrained is None:
            encoder, decoder, ae_logs = pretrain_autoencoder(
                cases, net_cfg, cfg, on_batch=lambda e, s, v: ae_rows.append({"epoch": e, "step": s, "loss": v}))
            write_csv(out_dir / "ae_loss.csv", ["epoch", "step", "loss"], ae_rows)
        else:
            encoder, decoder, ae_logs = pretrained
        nets.save_params(encoder, ckpt / "F.params")
        nets.save_params(decoder, ckpt / "G.params")
        checkpoints["F"] = "checkpoints/F.params"
        checkpoints["G"] = "checkpoints/G.params"
        write_csv(out_dir / "ae_epochs.csv", ["epoch", "loss", "recon_dice"], [asdict(a) for a in ae_logs])

    def save_epoch(epoch, segmenter, disc):
        name = f"S_epoch{epoch:02d}.params"
        nets.save_params(segmenter, ckpt / name)
        checkpoints["S"][str(epoch)] = f"checkpoints/{name}"
        if disc is not None:
            name = f"D_epoch{epoch:02d}.params"
            nets.save_params(disc, ckpt / name)
            checkpoints["D"][str(epoch)] = f"checkpoints/{name}"

    result = train_segmenter(cases, cfg.method, net_cfg, cfg, encoder=encoder, on_epoch=save_epoch)
    if cfg.epochs == 0:
        save_epoch(0, result.segmenter, result.discriminator)
    if not checkpoints["D"]:
        del checkpoints["D"]
    write_csv(out_dir / "loss.csv", LOSS_COLUMNS, result.batch_rows)
    write_csv(out_dir / "epochs.csv", EPOCH_COLUMNS, [asdict(e) for e in result.logs])
    manifest = {
        "method": cfg.method.value,
        "seed": cfg.seed,
        "cohort_hash": cohort_hash(cases),
        "case_ids": [c.case_id for c in cases],
        "train_config": cfg.to_dict(),
        "net_config": net_cfg.to_dict(),
        "ae_epochs": [asdict(a) for a in ae_logs],
        "epochs": [asdict(e) for e in result.logs],
        "checkpoints": checkpoints,
        "final_epoch": cfg.epochs,
    }
    (out_dir / "run_manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return RunResult(out_dir, result.segmenter, result.discriminator, encoder, result.logs, ae_logs, manifest)
