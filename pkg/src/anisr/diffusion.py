"""Conditional diffusion core: variants, forward noising, samplers.

All math here is plain float64 numpy; a denoiser is any callable
``model(z_t, cond, t, tau=None) -> eps_hat`` on 2D arrays. The four model
variants differ only in the diffusion target (HR image vs. HR - U(x)
residual) and in whether the conditioning channel is noise-augmented.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .pipeline import SlicePair
from .schedule import NoiseSchedule

VARIANTS = {
    # name -> (residual, nca)
    "SR3": (False, False),
    "AniRes2D": (True, False),
    "AniNCA2D": (False, True),
    "ResNCA2D": (True, True),
}


@dataclass(frozen=True)
class VariantConfig:
    name: str
    residual: bool
    nca: bool
    tau_max: float = 0.5
    nca_at_inference: bool = False

    def __post_init__(self):
        if self.name not in VARIANTS:
            raise ValueError(f"unknown variant {self.name!r}; choose from {sorted(VARIANTS)}")
        res, nca = VARIANTS[self.name]
        if (self.residual, self.nca) != (res, nca):
            raise ValueError(
                f"variant {self.name} requires residual={res}, nca={nca}")
        if self.nca and not 0.0 < self.tau_max <= 1.0:
            raise ValueError(f"tau_max must be in (0, 1], got {self.tau_max}")

    @classmethod
    def from_name(cls, name: str, tau_max: float = 0.5,
                  nca_at_inference: bool = False) -> "VariantConfig":
        res, nca = VARIANTS[name]
        return cls(name=name, residual=res, nca=nca, tau_max=tau_max,
                   nca_at_inference=nca_at_inference)


@dataclass(frozen=True)
class SamplerConfig:
    kind: str = "ddim"
    steps: int = 50
    eta: float = 0.0
    seed: int = 0

    def validate(self, T: int) -> "SamplerConfig":
        if self.kind not in ("ddpm", "ddim"):
            raise ValueError(f"unknown sampler kind {self.kind!r}")
        if not 1 <= self.steps <= T:
            raise ValueError(f"steps must be in 1..{T}, got {self.steps}")
        if self.kind == "ddpm" and self.steps != T:
            raise ValueError("the ancestral ddpm sampler runs all T steps")
        if not 0.0 <= self.eta <= 1.0:
            raise ValueError(f"eta must be in [0, 1], got {self.eta}")
        return self


def q_sample(z0, t: int, eps, sched: NoiseSchedule):
    """Forward noising: z_t = sqrt(ab_t) z0 + sqrt(1 - ab_t) eps."""
    z0 = np.asarray(z0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if z0.shape != eps.shape:
        raise ValueError(f"shape mismatch: z0 {z0.shape} vs eps {eps.shape}")
    if not 0 <= t <= sched.T:
        raise ValueError(f"t must be in 0..{sched.T}, got {t}")
    ab = sched.alpha_bar[t]
    return np.sqrt(ab) * z0 + np.sqrt(1.0 - ab) * eps


def training_target(pair: SlicePair, variant: VariantConfig):
    """Diffusion target and conditioning image for a pair: (z0, cond)."""
    cond = pair.up_lr
    z0 = pair.hr - pair.up_lr if variant.residual else pair.hr
    return z0, cond


def apply_nca(cond, tau: float, eps):
    """Noise-augment the conditioning image: cond + tau * eps."""
    cond = np.asarray(cond, dtype=np.float64)
    if not 0.0 <= tau <= 1.0:
        raise ValueError(f"tau must be in [0, 1], got {tau}")
    if tau == 0.0:
        return cond
    eps = np.asarray(eps, dtype=np.float64)
    if eps.shape != cond.shape:
        raise ValueError(f"shape mismatch: cond {cond.shape} vs eps {eps.shape}")
    return cond + tau * eps


def draw_tau(variant: VariantConfig, rng: np.random.Generator) -> float:
    return float(rng.uniform(0.0, variant.tau_max))


def loss_step(model, pair: SlicePair, sched: NoiseSchedule,
              variant: VariantConfig, rng: np.random.Generator,
              t: Optional[int] = None, eps=None, tau: Optional[float] = None) -> float:
    """Single-item noise-prediction MSE with uniformly drawn timestep.

    The draws (t, eps, tau) can be pinned for testing; otherwise they come
    from ``rng``.
    """
    z0, cond = training_target(pair, variant)
    if t is None:
        t = int(rng.integers(1, sched.T + 1))
    if eps is None:
        eps = rng.standard_normal(z0.shape)
    z_t = q_sample(z0, t, eps, sched)
    if variant.nca:
        if tau is None:
            tau = draw_tau(variant, rng)
        cond = apply_nca(cond, tau, rng.standard_normal(cond.shape))
    else:
        tau = None
    eps_hat = np.asarray(model(z_t, cond, t, tau), dtype=np.float64)
    if not np.all(np.isfinite(eps_hat)):
        raise FloatingPointError("denoiser produced non-finite output")
    return float(np.mean((eps_hat - eps) ** 2))


def ddpm_step_stats(z_t, eps_hat, t: int, sched: NoiseSchedule):
    """Posterior mean and variance of the ancestral update at step t."""
    beta = sched.beta[t]
    ab_t = sched.alpha_bar[t]
    ab_prev = sched.alpha_bar[t - 1]
    mean = (z_t - beta / np.sqrt(1.0 - ab_t) * eps_hat) / np.sqrt(sched.alpha[t])
    var = beta * (1.0 - ab_prev) / (1.0 - ab_t)
    return mean, var


def ddim_step_stats(z_t, eps_hat, t: int, t_prev: int, eta: float, sched: NoiseSchedule):
    """Mean and variance of the DDIM transition from t to t_prev."""
    ab_t = sched.alpha_bar[t]
    ab_prev = sched.alpha_bar[t_prev]
    x0_hat = (z_t - np.sqrt(1.0 - ab_t) * eps_hat) / np.sqrt(ab_t)
    var = (eta * np.sqrt((1.0 - ab_prev) / (1.0 - ab_t))
           * np.sqrt(1.0 - ab_t / ab_prev)) ** 2
    mean = np.sqrt(ab_prev) * x0_hat + np.sqrt(max(1.0 - ab_prev - var, 0.0)) * eps_hat
    return mean, var


def _prepare_cond(cond, variant: VariantConfig, rng: np.random.Generator):
    """Conditioning as seen by the network (noise-augmented when configured)."""
    if variant.nca and variant.nca_at_inference:
        tau = draw_tau(variant, rng)
        return apply_nca(cond, tau, rng.standard_normal(np.shape(cond))), tau
    return np.asarray(cond, dtype=np.float64), None


def sample_ddpm(model, cond, sched: NoiseSchedule, variant: VariantConfig,
                rng: np.random.Generator):
    """Ancestral sampling over all T steps; returns z0_hat in target space."""
    cond_in, tau = _prepare_cond(cond, variant, rng)
    z = rng.standard_normal(np.shape(cond))
    for t in range(sched.T, 0, -1):
        eps_hat = np.asarray(model(z, cond_in, t, tau), dtype=np.float64)
        mean, var = ddpm_step_stats(z, eps_hat, t, sched)
        if t > 1:
            z = mean + np.sqrt(var) * rng.standard_normal(z.shape)
        else:
            z = mean
    return z


def ddim_timesteps(T: int, S: int) -> np.ndarray:
    """Uniform-stride increasing subsequence of 1..T with S entries (last = T)."""
    if not 1 <= S <= T:
        raise ValueError(f"need 1 <= S <= T, got S={S}, T={T}")
    return np.unique(np.linspace(1, T, S).round().astype(int))


def sample_ddim(model, cond, sched: NoiseSchedule, S: int, eta: float,
                variant: VariantConfig, rng: np.random.Generator):
    """DDIM sampling over an S-step subsequence; eta=0 is deterministic."""
    cond_in, tau = _prepare_cond(cond, variant, rng)
    ts = ddim_timesteps(sched.T, S)
    z = rng.standard_normal(np.shape(cond))
    for i in range(len(ts) - 1, -1, -1):
        t = int(ts[i])
        t_prev = int(ts[i - 1]) if i > 0 else 0
        eps_hat = np.asarray(model(z, cond_in, t, tau), dtype=np.float64)
        mean, var = ddim_step_stats(z, eps_hat, t, t_prev, eta, sched)
        if var > 0.0 and t_prev > 0:
            z = mean + np.sqrt(var) * rng.standard_normal(z.shape)
        else:
            z = mean
    return z


def sample(model, cond, sched: NoiseSchedule, variant: VariantConfig,
           sampler: SamplerConfig, rng: np.random.Generator):
    sampler.validate(sched.T)
    if sampler.kind == "ddpm":
        return sample_ddpm(model, cond, sched, variant, rng)
    return sample_ddim(model, cond, sched, sampler.steps, sampler.eta, variant, rng)


def reconstruct_output(z0_hat, cond, variant: VariantConfig,
                       pad=None, norm=None):
    """Map a sampled target back to an SR image.

    Residual variants add the clean conditioning image (never the
    noise-augmented one); then padding is inverted and intensities are
    returned to native units when the records are provided.
    """
    z0_hat = np.asarray(z0_hat, dtype=np.float64)
    if variant.residual:
        cond = np.asarray(cond, dtype=np.float64)
        if cond.shape != z0_hat.shape:
            raise ValueError(f"shape mismatch: z0_hat {z0_hat.shape} vs cond {cond.shape}")
        sr = z0_hat + cond
    else:
        sr = z0_hat
    if pad is not None:
        sr = pad.unpad(sr)
    if norm is not None:
        sr = norm.invert(sr)
    return sr
