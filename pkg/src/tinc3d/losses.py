"""Non-contrastive pretraining objectives on projection batches.

Every function takes ``(n, d)`` torch tensors and returns a differentiable
scalar tensor. ``Z`` and ``Zp`` are the projections of the two views of each
pair (row ``i`` of one matches row ``i`` of the other).
"""

from __future__ import annotations

from dataclasses import dataclass

import torch


class DegenerateBatchError(ValueError):
    """Batch statistics need at least two rows."""


@dataclass(frozen=True)
class LossConfig:
    lambda_: float = 15.0
    mu: float = 25.0
    nu: float = 5.0
    gamma: float = 1.0
    eps: float = 1e-4
    bt_off_diag_weight: float = 0.01
    similarity_mode: str = "tinc"
    loss: str = "vicreg_family"

    def __post_init__(self):
        if min(self.lambda_, self.mu, self.nu, self.gamma, self.bt_off_diag_weight) < 0:
            raise ValueError(f"loss weights must be non-negative: {self}")
        if self.eps <= 0:
            raise ValueError("eps must be positive")
        if self.similarity_mode not in ("tinc", "vicreg_invariance"):
            raise ValueError(f"unknown similarity_mode {self.similarity_mode!r}")
        if self.loss not in ("vicreg_family", "barlow_twins"):
            raise ValueError(f"unknown loss {self.loss!r}")


@dataclass
class LossBreakdown:
    similarity: torch.Tensor
    variance_a: torch.Tensor
    variance_b: torch.Tensor
    covariance_a: torch.Tensor
    covariance_b: torch.Tensor
    total: torch.Tensor

    def as_floats(self) -> dict[str, float]:
        return {k: float(getattr(self, k).detach()) for k in
                ("similarity", "variance_a", "variance_b", "covariance_a", "covariance_b", "total")}


def _check_pair(Z, Zp):
    if Z.dim() != 2 or Z.shape != Zp.shape:
        raise ValueError(f"projection batches must be matching (n, d) matrices, "
                         f"got {tuple(Z.shape)} and {tuple(Zp.shape)}")
    if Z.shape[0] < 1:
        raise ValueError("empty batch")


def _check_batch(Z):
    if Z.dim() != 2:
        raise ValueError(f"expected an (n, d) matrix, got shape {tuple(Z.shape)}")
    if Z.shape[0] < 2:
        raise DegenerateBatchError(f"batch statistics need n >= 2, got n={Z.shape[0]}")


def _sq_dists(Z, Zp):
    return (Z - Zp).pow(2).sum(dim=1)


def invariance_term(Z, Zp):
    """Mean squared l2 distance between paired rows."""
    _check_pair(Z, Zp)
    return _sq_dists(Z, Zp).mean()


def variance_term(Z, gamma: float = 1.0, eps: float = 1e-4):
    """Hinge on the per-dimension std: mean_j max(0, gamma - sqrt(var_j + eps)).

    ``var_j`` uses the unbiased (n - 1) denominator.
    """
    _check_batch(Z)
    std = torch.sqrt(Z.var(dim=0, unbiased=True) + eps)
    return torch.relu(gamma - std).mean()


def covariance_matrix(Z):
    _check_batch(Z)
    centered = Z - Z.mean(dim=0)
    return centered.T @ centered / (Z.shape[0] - 1)


def covariance_term(Z):
    """Sum of squared off-diagonal covariances, divided by d."""
    cov = covariance_matrix(Z)
    d = Z.shape[1]
    off = cov.pow(2).sum() - torch.diagonal(cov).pow(2).sum()
    return off / d


def tinc_term(Z, Zp, dt_norm):
    """Margin-based similarity: mean_i max(0, ||z_i - z'_i||^2 - dt_i).

    ``dt_norm`` holds the normalized time gaps in [0, 1]. The hinge has zero
    gradient at the kink.
    """
    _check_pair(Z, Zp)
    dt = torch.as_tensor(dt_norm, dtype=Z.dtype, device=Z.device).reshape(-1)
    if dt.shape[0] != Z.shape[0]:
        raise ValueError(f"need one time gap per pair: {dt.shape[0]} != {Z.shape[0]}")
    if bool(((dt < 0) | (dt > 1)).any()) or not bool(torch.isfinite(dt).all()):
        raise ValueError("dt_norm must lie in [0, 1]")
    return torch.relu(_sq_dists(Z, Zp) - dt).mean()


def combined_loss(Z, Zp, dt_norm, cfg: LossConfig = LossConfig()) -> LossBreakdown:
    """Weighted sum of similarity, variance and covariance terms for both branches."""
    if cfg.similarity_mode == "tinc":
        sim = tinc_term(Z, Zp, dt_norm)
    else:
        sim = invariance_term(Z, Zp)
    va = variance_term(Z, cfg.gamma, cfg.eps)
    vb = variance_term(Zp, cfg.gamma, cfg.eps)
    ca = covariance_term(Z)
    cb = covariance_term(Zp)
    total = cfg.lambda_ * sim + cfg.mu * (va + vb) + cfg.nu * (ca + cb)
    return LossBreakdown(sim, va, vb, ca, cb, total)


def _standardize(Z, eps):
    return (Z - Z.mean(dim=0)) / torch.sqrt(Z.var(dim=0, unbiased=False) + eps)


def cross_correlation(Z, Zp, eps: float = 1e-4):
    _check_pair(Z, Zp)
    _check_batch(Z)
    return _standardize(Z, eps).T @ _standardize(Zp, eps) / Z.shape[0]


def barlow_twins_loss(Z, Zp, cfg: LossConfig = LossConfig()):
    """Barlow Twins redundancy reduction on batch-standardized projections."""
    c = cross_correlation(Z, Zp, cfg.eps)
    on_diag = (1 - torch.diagonal(c)).pow(2).sum()
    off_diag = c.pow(2).sum() - torch.diagonal(c).pow(2).sum()
    return on_diag + cfg.bt_off_diag_weight * off_diag
