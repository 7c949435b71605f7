"""Training objectives with analytic gradients.

Every loss returns a ``LossOutput`` holding the scalar value (a sum over
the supplied elements) and gradients with respect to each prediction
input, keyed by the prediction-field name.  Subgradients at L1 kinks and
hinge boundaries are 0.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .tilecodec import PredictionGrid, TargetGrid, angle_targets


@dataclass
class LossOutput:
    value: float
    grads: dict[str, np.ndarray]


def _sigmoid(z):
    return 1.0 / (1.0 + np.exp(-z))


def _bce_with_logits(logits, targets):
    """Numerically stable binary cross entropy; returns (values, d/dlogits)."""
    logits = np.asarray(logits, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    values = np.maximum(logits, 0.0) - logits * targets + np.log1p(np.exp(-np.abs(logits)))
    return values, _sigmoid(logits) - targets


def offsets_loss(pred_r, pred_dz, target_r, target_dz) -> LossOutput:
    """L1 on the lateral and height offsets of occupied tiles."""
    dr = np.asarray(pred_r, dtype=np.float64) - target_r
    ddz = np.asarray(pred_dz, dtype=np.float64) - target_dz
    value = float(np.abs(dr).sum() + np.abs(ddz).sum())
    return LossOutput(value, {"r": np.sign(dr), "dz": np.sign(ddz)})


def angle_loss(bin_logits, pred_residuals, probs, residuals, mask) -> LossOutput:
    """Soft multi-label bin classification plus masked residual regression."""
    mask = np.asarray(mask, dtype=bool)
    if not np.all(mask.sum(axis=-1) == 3):
        raise ValueError("residual mask must cover exactly 3 bins per tile")
    bce, d_logits = _bce_with_logits(bin_logits, probs)
    dres = np.asarray(pred_residuals, dtype=np.float64) - residuals
    value = float(bce.sum() + np.abs(dres[mask]).sum())
    return LossOutput(
        value,
        {"bin_logits": d_logits, "bin_residuals": np.sign(dres) * mask},
    )


def score_loss(score_logit, c) -> LossOutput:
    """Binary cross entropy on the tile occupancy logit."""
    values, grad = _bce_with_logits(score_logit, c)
    return LossOutput(float(values.sum()), {"score_logit": grad})


def tiles_loss(preds: PredictionGrid, targets: TargetGrid) -> LossOutput:
    """Eq.-style grid objective: score everywhere, angle and offsets gated
    by ground-truth occupancy."""
    if preds.score_logit.shape != targets.c.shape:
        raise ValueError("prediction and target grids have different shapes")
    occ = targets.c
    n_bins = preds.n_bins

    total = score_loss(preds.score_logit, occ.astype(np.float64))
    grads = {
        "score_logit": total.grads["score_logit"],
        "r": np.zeros_like(preds.r),
        "dz": np.zeros_like(preds.dz),
        "bin_logits": np.zeros_like(preds.bin_logits),
        "bin_residuals": np.zeros_like(preds.bin_residuals),
    }
    value = total.value

    if occ.any():
        enc = angle_targets(targets.phi[occ], n_bins)
        ang = angle_loss(
            preds.bin_logits[occ], preds.bin_residuals[occ], enc.probs, enc.residuals, enc.mask
        )
        off = offsets_loss(preds.r[occ], preds.dz[occ], targets.r[occ], targets.dz[occ])
        value += ang.value + off.value
        grads["bin_logits"][occ] = ang.grads["bin_logits"]
        grads["bin_residuals"][occ] = ang.grads["bin_residuals"]
        grads["r"][occ] = off.grads["r"]
        grads["dz"][occ] = off.grads["dz"]
    return LossOutput(value, grads)


def embedding_loss(
    embeddings, lane_ids, delta_pull: float = 0.1, delta_push: float = 3.0
) -> LossOutput:
    """Discriminative push-pull objective over per-tile embeddings.

    ``embeddings`` is (N, D) for the occupied tiles, ``lane_ids`` the
    matching instance labels.  Gradients flow through the cluster means.
    """
    f = np.asarray(embeddings, dtype=np.float64)
    lane_ids = np.asarray(lane_ids)
    if f.ndim != 2 or f.shape[0] == 0:
        raise ValueError("need at least one embedded tile")
    ids = np.unique(lane_ids)
    n_clusters = len(ids)

    members = [np.flatnonzero(lane_ids == cid) for cid in ids]
    mus = np.stack([f[m].mean(axis=0) for m in members])

    grad_f = np.zeros_like(f)
    grad_mu = np.zeros_like(mus)
    value = 0.0

    for c, m in enumerate(members):
        diff = mus[c] - f[m]
        dist = np.linalg.norm(diff, axis=1)
        excess = dist - delta_pull
        active = excess > 0
        scale = 1.0 / (n_clusters * len(m))
        value += scale * float((excess[active] ** 2).sum())
        if active.any():
            unit = diff[active] / dist[active, None]
            coeff = 2.0 * scale * excess[active]
            grad_f[m[active]] -= coeff[:, None] * unit
            grad_mu[c] += (coeff[:, None] * unit).sum(axis=0)

    if n_clusters > 1:
        scale = 1.0 / (n_clusters * (n_clusters - 1))
        for a in range(n_clusters):
            for b in range(n_clusters):
                if a == b:
                    continue
                diff = mus[a] - mus[b]
                dist = float(np.linalg.norm(diff))
                gap = delta_push - dist
                if gap <= 0:
                    continue
                value += scale * gap * gap
                if dist > 0:
                    pull_apart = 2.0 * scale * gap * diff / dist
                    grad_mu[a] -= pull_apart
                    grad_mu[b] += pull_apart

    for c, m in enumerate(members):
        grad_f[m] += grad_mu[c] / len(m)
    return LossOutput(float(value), {"embedding": grad_f})


def nll_loss(log_var, sq_err=None, mu=None, y=None) -> LossOutput:
    """Gaussian negative log likelihood (constant dropped).

    Supply either the squared error directly or (mu, y); the latter also
    yields a gradient for the mean.
    """
    s = np.asarray(log_var, dtype=np.float64)
    grads: dict[str, np.ndarray] = {}
    if sq_err is None:
        if mu is None or y is None:
            raise ValueError("need sq_err or both mu and y")
        resid = np.asarray(mu, dtype=np.float64) - y
        sq_err = resid ** 2
        grads["mu"] = resid / np.exp(s)
    else:
        sq_err = np.asarray(sq_err, dtype=np.float64)
        if np.any(sq_err < 0):
            raise ValueError("squared errors must be nonnegative")
    inv_var = np.exp(-s)
    value = float((0.5 * s + 0.5 * sq_err * inv_var).sum())
    grads["log_var"] = 0.5 - 0.5 * sq_err * inv_var
    return LossOutput(value, grads)


def soft_label_entropy(probs) -> float:
    """Sum of per-bin binary entropies: the floor of the soft-label BCE."""
    p = np.asarray(probs, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        h = -(p * np.log(p) + (1 - p) * np.log(1 - p))
    return float(np.where((p > 0) & (p < 1), h, 0.0).sum())
