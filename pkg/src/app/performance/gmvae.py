"""
Gaussian-mixture VAE math: two-component priors per style factor,
reparameterized sampling, closed-form KL, responsibilities p(c|z) and the
penalized lower bound used for training.

Tensors carry frames on the second-to-last axis and latent dimensions on the
last one; any leading batch axes are allowed.
"""

import math
from dataclasses import dataclass, fields
from typing import NamedTuple

import torch
import torch.distributions as td
import torch.nn.functional as F
from torch import nn

from .exceptions import NonFiniteError, ShapeMismatchError

N_COMPONENTS = 2
KL_SERIES_CUTOFF = 1e-3


class GaussianParams(NamedTuple):
    """Diagonal Gaussian; mean and log_variance share a shape (..., D)."""

    mean: torch.Tensor
    log_variance: torch.Tensor

    @property
    def variance(self):
        return self.log_variance.exp()

    @property
    def std(self):
        return torch.exp(0.5 * self.log_variance)

    def detach(self):
        return GaussianParams(self.mean.detach(), self.log_variance.detach())


class MixturePrior(nn.Module):
    """
    Two-component diagonal Gaussian mixture, component index = condition label.

    Means start at -1 (component 0) and +1 (component 1) on every dimension,
    log-variances at 0. Weights are fixed at (1/2, 1/2).
    """

    def __init__(self, latent_dim, init_offset=1.0):
        super().__init__()
        means = torch.full((N_COMPONENTS, latent_dim), init_offset)
        means[0] = -init_offset
        self.means = nn.Parameter(means)
        self.log_variances = nn.Parameter(torch.zeros(N_COMPONENTS, latent_dim))
        self.register_buffer("log_weights", torch.full((N_COMPONENTS,), -math.log(N_COMPONENTS)))

    @property
    def latent_dim(self):
        return self.means.shape[-1]

    @property
    def weights(self):
        return self.log_weights.exp()

    def component(self, index):
        return GaussianParams(self.means[index], self.log_variances[index])

    @property
    def components(self):
        return [self.component(k) for k in range(N_COMPONENTS)]


def reparameterize(q, noise):
    """z = mean + exp(log_variance / 2) * noise, differentiable in q."""
    if q.mean.shape != q.log_variance.shape or noise.shape != q.mean.shape:
        raise ShapeMismatchError(
            f"mean {tuple(q.mean.shape)}, log_variance {tuple(q.log_variance.shape)} and "
            f"noise {tuple(noise.shape)} must agree")
    return q.mean + torch.exp(0.5 * q.log_variance) * noise


def kl_diag_gaussian(q, p):
    """KL(q || p) for diagonal Gaussians, summed over the last axis."""
    if q.mean.shape[-1] != p.mean.shape[-1]:
        raise ShapeMismatchError(
            f"dimensionality differs: {q.mean.shape[-1]} vs {p.mean.shape[-1]}")
    log_ratio = q.log_variance - p.log_variance
    mahalanobis = (q.mean - p.mean) ** 2 * torch.exp(-p.log_variance)
    # exp(r) - r - 1 >= 0; near r = 0 the subtraction cancels in float32
    variance_term = torch.where(
        log_ratio.abs() < KL_SERIES_CUTOFF,
        log_ratio ** 2 / 2 + log_ratio ** 3 / 6,
        torch.expm1(log_ratio) - log_ratio,
    )
    return 0.5 * (variance_term + mahalanobis).sum(-1)


def conditional_prior(c, prior):
    """p(z | c): the mixture component selected by each label in `c`."""
    c = torch.as_tensor(c, dtype=torch.long, device=prior.means.device)
    if ((c != 0) & (c != 1)).any():
        raise ValueError("condition labels must be 0 or 1")
    return GaussianParams(prior.means[c], prior.log_variances[c])


def component_log_densities(z, prior):
    """log N(z; mean_k, var_k) for both components, shape (..., 2)."""
    components = td.Normal(prior.means, torch.exp(0.5 * prior.log_variances))
    return components.log_prob(z.unsqueeze(-2)).sum(-1)


def posterior_from_log_joint(log_joint):
    """Normalize log p(c=k, z) over k with log-sum-exp."""
    return torch.log_softmax(log_joint, dim=-1)


def log_responsibilities(z, prior):
    return posterior_from_log_joint(prior.log_weights + component_log_densities(z, prior))


def responsibilities(z, prior):
    """p(c | z) for each frame, shape (..., 2)."""
    return log_responsibilities(z, prior).exp()


def aux_ce_loss(z, c, prior, detach_latent=False):
    """-(1/T) sum_t log p(c_t | z_t); with detach_latent only the prior is trained by it."""
    c = torch.as_tensor(c, dtype=torch.long, device=z.device)
    if z.shape[:-1] != c.shape:
        raise ShapeMismatchError(
            f"latents {tuple(z.shape)} do not match labels {tuple(c.shape)}")
    if detach_latent:
        z = z.detach()
    log_resp = log_responsibilities(z, prior)
    return F.nll_loss(log_resp.reshape(-1, N_COMPONENTS), c.reshape(-1))


def condition_accuracy(z, c, prior):
    """Fraction of frames whose most responsible component equals the label."""
    with torch.no_grad():
        c = torch.as_tensor(c, dtype=torch.long, device=z.device)
        predicted = component_log_densities(z, prior).add(prior.log_weights).argmax(-1)
        return (predicted == c).double().mean().item()


@dataclass
class LossBreakdown:
    recon: torch.Tensor
    kl_art: torch.Tensor
    kl_dyn: torch.Tensor
    ce_art: torch.Tensor
    ce_dyn: torch.Tensor
    total: torch.Tensor
    beta: float = 1.0
    ce_weight: float = 1.0
    # batch diagnostics, not part of the objective
    acc_art: float = float("nan")
    acc_dyn: float = float("nan")

    TERMS = ("recon", "kl_art", "kl_dyn", "ce_art", "ce_dyn", "total")

    def check_finite(self):
        for term in self.TERMS:
            if not torch.isfinite(getattr(self, term)).all():
                raise NonFiniteError(term, f"loss term '{term}' is not finite")
        return self

    def detach(self):
        values = {f.name: getattr(self, f.name) for f in fields(self)}
        for term in self.TERMS:
            values[term] = values[term].detach()
        return LossBreakdown(**values)

    def as_floats(self):
        values = {term: float(getattr(self, term)) for term in self.TERMS}
        values["acc_art"] = self.acc_art
        values["acc_dyn"] = self.acc_dyn
        return values


def _check_inputs(tensors):
    for name, tensor in tensors.items():
        if not torch.isfinite(tensor).all():
            raise NonFiniteError(name, f"input '{name}' contains non-finite values")


def elbo_loss(X, X_hat, q_art, q_dyn, c_art, c_dyn, prior_art, prior_dyn, beta, ce_weight,
              z_art=None, z_dyn=None, detach_ce_latent=False):
    """
    Negative penalized lower bound:

        total = recon + beta * (kl_art + kl_dyn) + ce_weight * (ce_art + ce_dyn)

    recon is the squared error summed over Mel bins and averaged over frames
    (fixed-variance Gaussian likelihood). KL terms compare every frame's
    posterior with the prior component picked by that frame's label and are
    averaged over frames. The cross-entropy terms use z_art / z_dyn (usually
    the reparameterized samples); they default to the posterior means.
    """
    z_art = q_art.mean if z_art is None else z_art
    z_dyn = q_dyn.mean if z_dyn is None else z_dyn
    _check_inputs({
        "X": X, "X_hat": X_hat,
        "q_art.mean": q_art.mean, "q_art.log_variance": q_art.log_variance,
        "q_dyn.mean": q_dyn.mean, "q_dyn.log_variance": q_dyn.log_variance,
        "z_art": z_art, "z_dyn": z_dyn,
    })

    if X.shape != X_hat.shape:
        raise ShapeMismatchError(f"X {tuple(X.shape)} vs X_hat {tuple(X_hat.shape)}")
    frames = X.shape[:-1]
    for name, tensor in (("q_art", q_art.mean), ("q_dyn", q_dyn.mean),
                         ("z_art", z_art), ("z_dyn", z_dyn)):
        if tensor.shape[:-1] != frames:
            raise ShapeMismatchError(f"{name} covers {tuple(tensor.shape[:-1])}, X covers {tuple(frames)}")
    for name, labels in (("c_art", c_art), ("c_dyn", c_dyn)):
        if tuple(labels.shape) != tuple(frames):
            raise ShapeMismatchError(f"{name} covers {tuple(labels.shape)}, X covers {tuple(frames)}")

    recon = ((X_hat - X) ** 2).sum(-1).mean()
    kl_art = kl_diag_gaussian(q_art, conditional_prior(c_art, prior_art)).mean()
    kl_dyn = kl_diag_gaussian(q_dyn, conditional_prior(c_dyn, prior_dyn)).mean()
    ce_art = aux_ce_loss(z_art, c_art, prior_art, detach_latent=detach_ce_latent)
    ce_dyn = aux_ce_loss(z_dyn, c_dyn, prior_dyn, detach_latent=detach_ce_latent)
    total = recon + beta * (kl_art + kl_dyn) + ce_weight * (ce_art + ce_dyn)

    return LossBreakdown(
        recon=recon, kl_art=kl_art, kl_dyn=kl_dyn, ce_art=ce_art, ce_dyn=ce_dyn, total=total,
        beta=beta, ce_weight=ce_weight,
        acc_art=condition_accuracy(z_art, c_art, prior_art),
        acc_dyn=condition_accuracy(z_dyn, c_dyn, prior_dyn),
    ).check_finite()


def kl_weight(step, max_steps, warmup_fraction):
    """Linear KL warm-up: 0 at step 0, 1 from warmup_fraction * max_steps on."""
    warmup_steps = warmup_fraction * max_steps
    if warmup_steps <= 0:
        return 1.0
    return min(1.0, step / warmup_steps)
