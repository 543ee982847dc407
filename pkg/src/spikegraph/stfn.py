"""Spatial-temporal feature normalization.

Instantaneous membrane-potential inputs of shape [T, N, C] are standardized
per node over the joint feature x time dimensions, rescaled toward a target
standard deviation of rho * v_th, and restored by a trainable per-channel
affine map.  Gradients flow through the statistics (batchnorm-style), with
an optional detach mode.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as tz
from .errors import ShapeMismatch
from .tensor import Tensor


@dataclass
class StfnParams:
    lam: Tensor                 # trainable per-channel scale [C]
    gamma: Tensor               # trainable per-channel shift [C]
    rho: float = 1.0
    eps: float = 1e-5
    p: float = 2.0              # generalized variance exponent (analysis only)
    detach_stats: bool = False
    # running per-node statistics for frozen-stats evaluation
    running_mean: np.ndarray = None
    running_var: np.ndarray = None
    momentum: float = 0.1

    @staticmethod
    def create(channels: int, rho: float = 1.0, eps: float = 1e-5):
        return StfnParams(
            lam=tz.parameter(np.ones(channels, dtype=tz.DTYPE)),
            gamma=tz.parameter(np.zeros(channels, dtype=tz.DTYPE)),
            rho=rho, eps=eps)


@dataclass
class StfnStats:
    mean: np.ndarray   # per-node mean over C*T, shape [N]
    var: np.ndarray    # per-node population variance over C*T, shape [N]


def stfn_stats(s: np.ndarray) -> StfnStats:
    """Per-node mean/variance computed jointly over the T and C axes."""
    s = np.asarray(s)
    if s.ndim != 3:
        raise ShapeMismatch(f"expected [T,N,C], got shape {s.shape}")
    mean = s.mean(axis=(0, 2))
    var = s.var(axis=(0, 2))
    return StfnStats(mean=mean, var=var)


def stfn_apply(s: Tensor, params: StfnParams, v_th: float,
               stats: StfnStats = None, update_running: bool = False) -> Tensor:
    """Normalize a [T, N, C] window and apply the affine restore.

    Y[t,v,k] = lam[k] * rho * v_th * (s[t,v,k] - mean[v]) / sqrt(var[v]+eps)
               + gamma[k]

    When ``stats`` is omitted they are computed from ``s`` itself and the
    backward pass differentiates through them.  Passing precomputed stats
    (e.g. running averages) treats them as constants.
    """
    x = s.data
    if x.ndim != 3:
        raise ShapeMismatch(f"expected [T,N,C], got shape {x.shape}")
    t_len, n, c = x.shape
    through_stats = stats is None and not params.detach_stats
    if stats is None:
        stats = stfn_stats(x)
    if update_running:
        if params.running_mean is None:
            params.running_mean = stats.mean.copy()
            params.running_var = stats.var.copy()
        else:
            m = params.momentum
            params.running_mean = (1 - m) * params.running_mean + m * stats.mean
            params.running_var = (1 - m) * params.running_var + m * stats.var

    coef = tz.DTYPE(params.rho * v_th)
    std = np.sqrt(stats.var + params.eps).astype(tz.DTYPE)   # [N]
    xhat_unit = (x - stats.mean[None, :, None]) / std[None, :, None]
    shat = coef * xhat_unit
    lam, gamma = params.lam, params.gamma
    # affine parameters are per-channel [C] by default; a per-node [N,C]
    # variant is supported for single-graph experiments
    lam_b = lam.data[None, None, :] if lam.data.ndim == 1 else lam.data[None]
    gamma_b = gamma.data[None, None, :] if gamma.data.ndim == 1 else gamma.data[None]
    affine_axes = (0, 1) if lam.data.ndim == 1 else (0,)
    y = lam_b * shat + gamma_b

    def bwd(g):
        if gamma.requires_grad:
            gamma.accumulate(g.sum(axis=affine_axes))
        if lam.requires_grad:
            lam.accumulate((g * shat).sum(axis=affine_axes))
        if s.requires_grad:
            gx = g * lam_b * coef   # d loss / d shat-pre-lam
            if through_stats:
                mean_g = gx.mean(axis=(0, 2), keepdims=True)
                mean_gx = (gx * xhat_unit).mean(axis=(0, 2), keepdims=True)
                ds = (gx - mean_g - xhat_unit * mean_gx) / std[None, :, None]
            else:
                ds = gx / std[None, :, None]
            s.accumulate(ds.astype(tz.DTYPE))

    return tz._result(y.astype(tz.DTYPE), (s, lam, gamma), bwd)


def variance_after_norm(sigma: float, p: float) -> float:
    """Post-normalization standard deviation sigma^(1 - 1/p).

    Dividing centered samples of spread sigma by sigma^(1/p) shrinks the
    spread whenever sigma > 1, most strongly at p = 1.
    """
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    if p < 1:
        raise ValueError("p must be >= 1")
    return float(sigma ** (1.0 - 1.0 / p))
