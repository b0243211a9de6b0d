"""Noise schedule, forward corruption, posterior reverse step and guided sampling.

Timesteps are 1-based: ``t`` in [1, T] reads ``alpha_bars[t - 1]`` and
``alpha_bar(0)`` is 1 so the final reverse step is deterministic.
"""

from dataclasses import dataclass

import numpy as np

SCHEDULE_SHAPES = ("linear",)


@dataclass
class DiffusionSchedule:
    T: int
    beta_start: float
    beta_end: float
    shape: str
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray

    def alpha_bar(self, t):
        """Cumulative product at step t (array-friendly), with alpha_bar(0) = 1."""
        t = np.asarray(t)
        padded = np.concatenate([[1.0], self.alpha_bars])
        return padded[t]

    def spec(self):
        return {"T": self.T, "beta_start": self.beta_start, "beta_end": self.beta_end,
                "shape": self.shape}


@dataclass
class NoisyState:
    x_t: object
    t: object
    eps: np.ndarray


def build_schedule(T=50, beta_start=1e-4, beta_end=0.02, shape="linear"):
    if T < 1:
        raise ValueError(f"T must be at least 1, got {T}")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise ValueError(f"Need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    if shape not in SCHEDULE_SHAPES:
        raise ValueError(f"Unknown schedule shape {shape!r}")
    betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)
    return DiffusionSchedule(T, float(beta_start), float(beta_end), shape, betas, alphas, alpha_bars)


def schedule_from_spec(spec):
    return build_schedule(int(spec["T"]), float(spec["beta_start"]), float(spec["beta_end"]),
                          spec.get("shape", "linear"))


def _check_t(t, sched):
    t_arr = np.asarray(t)
    if np.any(t_arr < 1) or np.any(t_arr > sched.T):
        raise ValueError(f"Timestep out of range [1, {sched.T}]: {t}")
    return t_arr


def forward_diffuse(x0, t, eps, sched):
    """x_t = sqrt(ab_t) x0 + sqrt(1 - ab_t) eps.

    ``x0`` may be an array or an autograd Tensor of shape (..., d); ``t`` a
    scalar or one timestep per row.
    """
    t_arr = _check_t(t, sched)
    eps = np.asarray(eps, dtype=np.float64)
    if np.shape(x0) != eps.shape:
        raise ValueError(f"x0 shape {np.shape(x0)} does not match eps shape {eps.shape}")
    ab = sched.alpha_bar(t_arr)
    if ab.ndim:
        ab = ab.reshape(ab.shape + (1,) * (eps.ndim - ab.ndim))
    x_t = np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps
    return NoisyState(x_t, t, eps)


def posterior_coefficients(sched, t, t_prev=None):
    """Coefficients of q(x_s | x_t, x0) for s = t_prev (default t - 1).

    Returns ``(coef_x0, coef_xt, variance)``.
    """
    t_prev = t - 1 if t_prev is None else t_prev
    if not 0 <= t_prev < t:
        raise ValueError(f"Need 0 <= t_prev < t, got t={t}, t_prev={t_prev}")
    ab_t = sched.alpha_bar(t)
    ab_s = sched.alpha_bar(t_prev)
    a_ts = ab_t / ab_s
    coef_x0 = np.sqrt(ab_s) * (1.0 - a_ts) / (1.0 - ab_t)
    coef_xt = np.sqrt(a_ts) * (1.0 - ab_s) / (1.0 - ab_t)
    variance = (1.0 - ab_s) / (1.0 - ab_t) * (1.0 - a_ts)
    return float(coef_x0), float(coef_xt), float(variance)


def reverse_step(state, x0_hat, sched, noise, t_prev=None):
    """One posterior step x_t -> x_{t_prev} given a clean-embedding estimate."""
    t = int(state.t)
    _check_t(t, sched)
    x_t = np.asarray(state.x_t, dtype=np.float64)
    x0_hat = np.asarray(x0_hat, dtype=np.float64)
    noise = np.asarray(noise, dtype=np.float64)
    for name, value in (("x_t", x_t), ("x0_hat", x0_hat), ("noise", noise)):
        if not np.all(np.isfinite(value)):
            raise ValueError(f"reverse_step received non-finite {name} at t={t}")
    coef_x0, coef_xt, variance = posterior_coefficients(sched, t, t_prev)
    mean = coef_x0 * x0_hat + coef_xt * x_t
    if variance == 0.0:
        return mean
    return mean + np.sqrt(variance) * noise


def strided_timesteps(T, n_steps):
    """Descending timesteps, evenly strided, including T and (for n_steps > 1) 1."""
    if not 1 <= n_steps <= T:
        raise ValueError(f"n_steps must be in [1, {T}], got {n_steps}")
    if n_steps == T:
        return list(range(T, 0, -1))
    if n_steps == 1:
        return [T]
    steps = np.rint(np.linspace(T, 1, n_steps)).astype(int)
    return sorted(set(steps.tolist()), reverse=True)


def guided_sample(g_d, denoiser, sched, rng_seed, n_steps, shape):
    """Run the reverse chain from pure noise and return the final x0 estimate.

    ``denoiser(x_t, g_d, t)`` returns an x0 estimate of ``shape``. ``rng_seed``
    is one seed, or one seed per row so a row's draws do not depend on which
    batch it was sampled in.
    """
    if np.ndim(rng_seed) == 0:
        rngs = [np.random.default_rng(rng_seed)]
        draw = lambda: rngs[0].standard_normal(shape)
    else:
        rngs = [np.random.default_rng(s) for s in rng_seed]
        if len(rngs) != shape[0]:
            raise ValueError(f"Got {len(rngs)} seeds for {shape[0]} rows")
        draw = lambda: np.stack([r.standard_normal(shape[1:]) for r in rngs])

    steps = strided_timesteps(sched.T, n_steps)
    x_t = draw()
    x0_hat = None
    for i, t in enumerate(steps):
        x0_hat = np.asarray(denoiser(x_t, g_d, t), dtype=np.float64)
        t_prev = steps[i + 1] if i + 1 < len(steps) else 0
        noise = draw() if t_prev > 0 else np.zeros(shape)
        x_t = reverse_step(NoisyState(x_t, t, None), x0_hat, sched, noise, t_prev=t_prev)
    return x0_hat
