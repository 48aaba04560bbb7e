"""Diagonal-Gaussian sequence math shared by all three training objectives.

Everything here is a pure function of its inputs: no module owns RNG state,
and callers supply whatever noise they need.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import Tensor

# Variances below this are clamped before any log/sqrt. validate() still
# rejects non-positive values outright; the floor only guards against
# underflow in otherwise-valid parameters produced during training.
VARIANCE_FLOOR = 1e-6


@dataclass
class DiagGaussianSeq:
    """Per-word diagonal Gaussian parameters.

    ``mean`` and ``var`` are [W, H] tensors (W words, H latent dims) holding
    means and variances (not standard deviations). Extra leading batch
    dimensions are allowed; all operations reduce over the last dim only.
    """

    mean: Tensor
    var: Tensor

    def __post_init__(self):
        self.mean = torch.as_tensor(self.mean)
        self.var = torch.as_tensor(self.var)
        if self.mean.shape != self.var.shape:
            raise ValueError(
                f"mean shape {tuple(self.mean.shape)} != var shape {tuple(self.var.shape)}"
            )

    @property
    def n_words(self) -> int:
        return self.mean.shape[-2]

    @property
    def width(self) -> int:
        return self.mean.shape[-1]

    def validate(self) -> "DiagGaussianSeq":
        """Strict invariant check: finite parameters, strictly positive variance."""
        if not bool(torch.isfinite(self.mean).all()) or not bool(torch.isfinite(self.var).all()):
            raise ValueError("non-finite Gaussian parameters")
        if bool((self.var <= 0).any()):
            raise ValueError("non-positive variance in DiagGaussianSeq")
        return self

    def detach(self) -> "DiagGaussianSeq":
        return DiagGaussianSeq(self.mean.detach(), self.var.detach())


@dataclass(frozen=True)
class AnnealSchedule:
    """Linear 0-to-1 ramp of the KL weight, measured in training steps."""

    start_step: int = 0
    end_step: int = 10_000

    def __post_init__(self):
        if self.start_step < 0:
            raise ValueError(f"start_step must be >= 0, got {self.start_step}")
        if self.end_step <= self.start_step:
            raise ValueError(
                f"end_step ({self.end_step}) must exceed start_step ({self.start_step})"
            )


def anneal_alpha(step: int, sched: AnnealSchedule) -> float:
    """KL weight at `step`: 0 before the ramp, 1 after, linear in between."""
    if step < 0:
        raise ValueError(f"step must be >= 0, got {step}")
    alpha = (step - sched.start_step) / (sched.end_step - sched.start_step)
    return min(1.0, max(0.0, alpha))


def _checked_var(g: DiagGaussianSeq) -> Tensor:
    if bool((g.var <= 0).any()):
        raise ValueError("non-positive variance")
    return g.var.clamp_min(VARIANCE_FLOOR)


def kl_to_standard_normal(g: DiagGaussianSeq) -> Tensor:
    """KL(N(mean, var) || N(0, I)) per word, summed over latent dims.

    Closed form per dim: 0.5 * (var + mean^2 - 1 - ln var).
    """
    var = _checked_var(g)
    per_dim = 0.5 * (var + g.mean.square() - 1.0 - torch.log(var))
    return per_dim.sum(dim=-1)


def kl_diag_gaussians(p: DiagGaussianSeq, q: DiagGaussianSeq) -> Tensor:
    """KL(p || q) per word for two diagonal-Gaussian sequences.

    Argument order matters: `p` is the approximating (e.g. predicted)
    distribution and the expectation is taken under it.
    """
    if p.mean.shape != q.mean.shape:
        raise ValueError(
            f"shape mismatch: p {tuple(p.mean.shape)} vs q {tuple(q.mean.shape)}"
        )
    vp = _checked_var(p)
    vq = _checked_var(q)
    per_dim = 0.5 * (torch.log(vq / vp) + (vp + (p.mean - q.mean).square()) / vq - 1.0)
    return per_dim.sum(dim=-1)


def sample_reparam(g: DiagGaussianSeq, noise: Tensor) -> Tensor:
    """Reparameterized draw: mean + sqrt(var) * noise.

    Differentiable in mean and var; `noise` is expected to be standard-normal
    draws of the same shape.
    """
    noise = torch.as_tensor(noise)
    if noise.shape != g.mean.shape:
        raise ValueError(
            f"noise shape {tuple(noise.shape)} != parameter shape {tuple(g.mean.shape)}"
        )
    return g.mean + torch.sqrt(g.var.clamp_min(VARIANCE_FLOOR)) * noise


def recon_nll(pred: Tensor, target: Tensor) -> Tensor:
    """Reconstruction error: mean squared residual over all entries.

    This is a fixed-unit-variance Gaussian negative log-likelihood up to an
    additive constant, which keeps the ELBO composition exact.
    """
    pred = torch.as_tensor(pred)
    target = torch.as_tensor(target)
    if pred.shape != target.shape:
        raise ValueError(
            f"shape mismatch: pred {tuple(pred.shape)} vs target {tuple(target.shape)}"
        )
    return (pred - target).square().mean()
