"""Latent shape codes of ground-truth and predicted masks, their 2D t-SNE
embedding, and a per-structure convergence statistic."""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from scipy.spatial.distance import pdist, squareform
from torch.nn import functional as F

from . import kernels, nets
from .data import PatientCase

log = logging.getLogger(__name__)

GROUND_TRUTH = "ground-truth"
PREDICTION = "prediction"


@dataclass
class CodeVector:
    values: np.ndarray
    epoch: int
    case_id: str
    slice: int
    structure: int
    provenance: str


def pooled_codes(encoder, masks: np.ndarray, classes: int, chunk: int = 64) -> np.ndarray:
    """Encode label grids ``(N, H, W)`` and global-max-pool each code over space."""
    encoder.eval()
    out = []
    with torch.no_grad():
        for s in range(0, len(masks), chunk):
            y = F.one_hot(torch.from_numpy(masks[s:s + chunk].astype(np.int64)), classes).permute(0, 3, 1, 2)
            out.append(encoder(y.float()).amax(dim=(2, 3)).double().numpy())
    if not out:
        return np.zeros((0, nets.CODE_CHANNELS))
    return np.concatenate(out)


def extract_codes(encoder, gt_masks: np.ndarray, pred_masks: np.ndarray | None, classes: int,
                  epoch: int = 0, case_id: str = "", slice_ids: Sequence[int] | None = None) -> list[CodeVector]:
    """One 512-d code per (slice, structure) present in the ground truth.

    Each structure is binarised against background before encoding, so the
    encoder sees a single-structure mask. When ``pred_masks`` is given, the
    matching predicted structure masks are encoded too, even if empty.
    """
    gt_masks = np.asarray(gt_masks)
    if gt_masks.ndim != 3 or gt_masks.shape[1:] != (encoder.cfg.input_size,) * 2:
        raise ValueError(f"mask stack of shape {gt_masks.shape} does not match the encoder input")
    if pred_masks is not None and np.shape(pred_masks) != gt_masks.shape:
        raise ValueError("predicted and ground-truth mask stacks differ in shape")
    slice_ids = list(range(len(gt_masks))) if slice_ids is None else list(slice_ids)
    keys, gt_bin, pred_bin = [], [], []
    for i in range(len(gt_masks)):
        for k in range(1, classes):
            g = gt_masks[i] == k
            if not g.any():
                continue
            keys.append((slice_ids[i], k))
            gt_bin.append(np.where(g, k, 0))
            if pred_masks is not None:
                pred_bin.append(np.where(pred_masks[i] == k, k, 0))
    out = []
    if not keys:
        return out
    for provenance, stack in ((GROUND_TRUTH, gt_bin), (PREDICTION, pred_bin)):
        if not stack:
            continue
        codes = pooled_codes(encoder, np.stack(stack).astype(np.uint8), classes)
        out += [CodeVector(v, 0 if provenance == GROUND_TRUTH else epoch, case_id, s, k, provenance)
                for v, (s, k) in zip(codes, keys)]
    return out


def convergence_stat(codes: Sequence[CodeVector]) -> dict[int, float]:
    """Per structure: mean over predicted codes of the distance to the nearest ground-truth code."""
    structures = sorted({c.structure for c in codes})
    out = {}
    for k in structures:
        gt = np.array([c.values for c in codes if c.structure == k and c.provenance == GROUND_TRUTH])
        pred = np.array([c.values for c in codes if c.structure == k and c.provenance == PREDICTION])
        if len(gt) == 0 or len(pred) == 0:
            raise ValueError(f"structure {k} lacks ground-truth or predicted codes")
        d = kernels.nearest_distances(np.ascontiguousarray(pred, dtype=np.float64),
                                      np.ascontiguousarray(gt, dtype=np.float64))
        out[k] = float(d.mean())
    return out


# ---------------------------------------------------------------------------
# exact t-SNE


@dataclass
class Embedding2D:
    points: np.ndarray
    perplexity: float
    iterations: int
    seed: int
    kl_history: np.ndarray
    entropy_bits: np.ndarray = field(repr=False)

    @property
    def final_kl(self) -> float:
        return float(self.kl_history[-1])


def joint_affinities(x: np.ndarray, perplexity: float, tol: float = 1e-5):
    """Symmetrised Gaussian affinities; returns ``(P, conditional P, entropy bits)``."""
    d2 = squareform(pdist(np.asarray(x, dtype=np.float64), "sqeuclidean"))
    cond, _, entropy = kernels.perplexity_bisection(np.ascontiguousarray(d2), float(perplexity), tol)
    p = (cond + cond.T) / (2.0 * len(x))
    return p, cond, entropy


def _student_t(y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    sq = (y * y).sum(axis=1)
    num = 1.0 / (1.0 + np.maximum(sq[:, None] + sq[None, :] - 2.0 * y @ y.T, 0.0))
    np.fill_diagonal(num, 0.0)
    return num, num / num.sum()


def _kl(p: np.ndarray, q: np.ndarray) -> float:
    mask = p > 0
    return float(np.sum(p[mask] * np.log(p[mask] / np.maximum(q[mask], 1e-300))))


def tsne_embed(vectors, perplexity: float = 30.0, iterations: int = 1000, seed: int = 0,
               learning_rate: float | None = None, exaggeration: float = 12.0,
               exaggeration_iters: int = 250, momentum: tuple[float, float] = (0.5, 0.8)) -> Embedding2D:
    """Exact O(N^2) t-SNE into 2D by gradient descent with momentum.

    ``learning_rate`` defaults to ``max(N / exaggeration, 50)``.
    """
    x = np.asarray([v.values if isinstance(v, CodeVector) else v for v in vectors], dtype=np.float64)
    n = len(x)
    if x.ndim != 2 or n < 3 * perplexity + 1:
        raise ValueError(f"t-SNE with perplexity {perplexity} needs at least {int(3 * perplexity + 1)} points, got {n}")
    if not np.all(np.isfinite(x)):
        raise ValueError("input vectors must be finite")
    if np.all(x == x[0]):
        raise ValueError("all input vectors are identical")
    lr = learning_rate if learning_rate is not None else max(n / exaggeration, 50.0)
    p, _, entropy = joint_affinities(x, perplexity)
    p = np.maximum(p, 1e-12)
    rng = np.random.default_rng(seed)
    y = rng.normal(0.0, 1e-4, size=(n, 2))
    velocity = np.zeros_like(y)
    kl = np.empty(iterations)
    for it in range(iterations):
        early = it < exaggeration_iters
        pe = p * exaggeration if early else p
        num, q = _student_t(y)
        w = (pe - q) * num
        grad = 4.0 * (np.diag(w.sum(axis=1)) - w) @ y
        velocity = (momentum[0] if early else momentum[1]) * velocity - lr * grad
        y = y + velocity
        y = y - y.mean(axis=0)
        kl[it] = _kl(p, _student_t(y)[1])
    return Embedding2D(y, float(perplexity), iterations, seed, kl, entropy)


# ---------------------------------------------------------------------------
# files

_PALETTE = ("#1f77b4", "#2ca02c", "#d62728", "#9467bd", "#ff7f0e", "#8c564b")


def write_codes_csv(path, codes: Sequence[CodeVector]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "case_id", "slice", "structure", "provenance"]
                   + [f"c{i}" for i in range(nets.CODE_CHANNELS)])
        for c in codes:
            w.writerow([c.epoch, c.case_id, c.slice, c.structure, c.provenance] + [f"{v:.9g}" for v in c.values])


def write_embedding_csv(path, codes: Sequence[CodeVector], emb: Embedding2D) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "case_id", "slice", "structure", "provenance", "x", "y"])
        for c, (px, py) in zip(codes, emb.points):
            w.writerow([c.epoch, c.case_id, c.slice, c.structure, c.provenance, f"{px:.9g}", f"{py:.9g}"])


def render_svg(codes: Sequence[CodeVector], emb: Embedding2D, size: int = 600) -> str:
    """Scatter plot: colour per structure, circle for ground truth, square for predictions."""
    pts = emb.points
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    span = np.where(hi - lo > 0, hi - lo, 1.0)
    margin = 20
    scaled = margin + (pts - lo) / span * (size - 2 * margin)
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" '
           f'viewBox="0 0 {size} {size}">',
           f'<rect width="{size}" height="{size}" fill="white"/>']
    for c, (px, py) in zip(codes, scaled):
        color = _PALETTE[(c.structure - 1) % len(_PALETTE)]
        title = f"<title>epoch {c.epoch} case {c.case_id} slice {c.slice} structure {c.structure} {c.provenance}</title>"
        if c.provenance == GROUND_TRUTH:
            out.append(f'<circle class="code" cx="{px:.2f}" cy="{size - py:.2f}" r="3" fill="{color}">{title}</circle>')
        else:
            out.append(f'<rect class="code" x="{px - 2.5:.2f}" y="{size - py - 2.5:.2f}" width="5" height="5" '
                       f'fill="none" stroke="{color}">{title}</rect>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


DEFAULT_EPOCHS = (1, 2, 3, 4, 5, 10)


def visualize_run(run_dir, cases: Sequence[PatientCase], out_dir, epochs: Sequence[int] = DEFAULT_EPOCHS,
                  perplexity: float = 30.0, iterations: int = 1000, seed: int = 0) -> dict:
    """Codes, joint embedding, SVG and convergence table for a training run.

    Ground-truth codes do not depend on the segmenter and are emitted once
    with epoch 0; predicted codes are emitted for every requested epoch.
    """
    from .train import predict_probabilities

    run_dir, out_dir = Path(run_dir), Path(out_dir)
    manifest = json.loads((run_dir / "run_manifest.json").read_text())
    ckpts = manifest["checkpoints"]
    if "F" not in ckpts:
        raise FileNotFoundError(f"{run_dir}: run has no shape-encoder checkpoint")
    missing = [e for e in epochs if str(e) not in ckpts["S"]]
    if missing:
        raise FileNotFoundError(f"{run_dir}: no segmenter checkpoint for epoch(s) {missing}")
    encoder = nets.load_params(run_dir / ckpts["F"], expect_role="F")
    classes = encoder.cfg.classes
    wanted = set(manifest["case_ids"])
    cases = [c for c in cases if c.case_id in wanted] or list(cases)

    codes: list[CodeVector] = []
    for case in cases:
        codes += extract_codes(encoder, case.mask.data, None, classes, case_id=case.case_id)
    gt_codes = list(codes)
    per_epoch = {}
    for e in epochs:
        segmenter = nets.load_params(run_dir / ckpts["S"][str(e)], expect_role="S")
        pred_codes = []
        for case in cases:
            pred = predict_probabilities(segmenter, case.image.data).argmax(axis=1).astype(np.uint8)
            pred_codes += [c for c in extract_codes(encoder, case.mask.data, pred, classes, epoch=e,
                                                    case_id=case.case_id) if c.provenance == PREDICTION]
        per_epoch[e] = convergence_stat(gt_codes + pred_codes)
        codes += pred_codes
        log.info("epoch %d convergence %s", e, per_epoch[e])

    out_dir.mkdir(parents=True, exist_ok=True)
    write_codes_csv(out_dir / "codes.csv", codes)
    emb = tsne_embed(codes, perplexity=perplexity, iterations=iterations, seed=seed)
    write_embedding_csv(out_dir / "embedding.csv", codes, emb)
    (out_dir / "embedding.svg").write_text(render_svg(codes, emb))
    with open(out_dir / "convergence.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "structure", "mean_nearest_gt_distance"])
        for e in epochs:
            for k, v in sorted(per_epoch[e].items()):
                w.writerow([e, k, f"{v:.9g}"])
    return {"convergence": per_epoch, "final_kl": emb.final_kl, "n_codes": len(codes)}
