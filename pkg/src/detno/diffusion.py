"""Noise schedule, v-parameterized training target and DDIM refinement.

The schedule keeps a residual noise floor ``s = min_noise_std``: per-step
noise standard deviations are ``sigma_k = s^((K-k)/K)`` for ``k = 0..K``, so
``sigma_K = 1`` (pure noise at the start of refinement) and ``sigma_0 = s``.
The cumulative signal fraction is ``alpha_bar_k = 1 - sigma_k^2``.

Training corrupts clean query states ``y`` as
``y_k = sqrt(alpha_bar_k) * y + sigma_k * eps`` and supervises the model on
the velocity target ``nu* = sqrt(alpha_bar_k) * eps - sigma_k * y``.
Inference starts the state channels from standard normal draws and applies
deterministic (eta = 0) DDIM updates down the schedule; the timestep fed to
the model is ``tau_k = k * 1000 / K``.
"""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor, no_grad
from .errors import NumericError

TAU_SCALE = 1000.0


class DiffusionSchedule:
    """Noise levels for K refinement steps with a minimum noise floor."""

    def __init__(self, n_steps: int = 10, min_noise_std: float = 9e-2):
        if n_steps < 1:
            raise ValueError("n_steps must be >= 1")
        if not 0.0 < min_noise_std < 1.0:
            raise ValueError("min_noise_std must lie in (0, 1)")
        self.n_steps = n_steps
        self.min_noise_std = min_noise_std
        k = np.arange(n_steps + 1)
        self.sigma = min_noise_std ** ((n_steps - k) / n_steps)
        self.alpha_bar = 1.0 - self.sigma ** 2

    def _check(self, k) -> None:
        k = np.asarray(k)
        if np.any(k < 0) or np.any(k > self.n_steps):
            raise IndexError(f"step index {k} outside 0..{self.n_steps}")

    def tau_of(self, k):
        """Scheduler timestep handed to the model's diffusion encoder."""
        self._check(k)
        return np.asarray(k, dtype=np.float64) * (TAU_SCALE / self.n_steps)

    def corrupt(self, y: np.ndarray, k, eps: np.ndarray) -> np.ndarray:
        """Noisy state at level k from clean y and external noise eps."""
        self._check(k)
        sqrt_ab = np.sqrt(self.alpha_bar[k])
        return sqrt_ab * y + self.sigma[k] * eps

    def v_target(self, y: np.ndarray, k, eps: np.ndarray) -> np.ndarray:
        """Supervision target: the velocity between noise and signal."""
        self._check(k)
        sqrt_ab = np.sqrt(self.alpha_bar[k])
        return sqrt_ab * eps - self.sigma[k] * y

    def clean_and_noise_estimates(self, x_k: np.ndarray, nu_hat: np.ndarray,
                                  k: int) -> tuple[np.ndarray, np.ndarray]:
        """Invert the corruption algebra given a velocity prediction."""
        self._check(k)
        sqrt_ab = np.sqrt(self.alpha_bar[k])
        x0_hat = sqrt_ab * x_k - self.sigma[k] * nu_hat
        eps_hat = self.sigma[k] * x_k + sqrt_ab * nu_hat
        return x0_hat, eps_hat

    def ddim_step(self, x_k: np.ndarray, nu_hat: np.ndarray, k: int) -> np.ndarray:
        """Deterministic update from noise level k to k - 1."""
        if k < 1 or k > self.n_steps:
            raise IndexError(f"ddim step index {k} outside 1..{self.n_steps}")
        x0_hat, eps_hat = self.clean_and_noise_estimates(x_k, nu_hat, k)
        sqrt_ab_prev = np.sqrt(self.alpha_bar[k - 1])
        return sqrt_ab_prev * x0_hat + self.sigma[k - 1] * eps_hat


def make_noisy_queries(coords: np.ndarray, states: np.ndarray) -> np.ndarray:
    """Assemble query tokens [x, t, rho_k, v_k] from coordinates and states."""
    return np.concatenate([coords, states], axis=-1)


def diffusion_loss_batch(model, sensors: np.ndarray, coords: np.ndarray,
                         targets: np.ndarray, schedule: DiffusionSchedule,
                         rng: np.random.Generator) -> tuple[Tensor, np.ndarray]:
    """Single-draw estimator of the diffusion loss over a batch.

    Each sample draws its own level k (uniform over 0..K) and noise; the
    loss is the mean squared error between the predicted and the target
    velocity.  Returns the loss tensor and the drawn levels (for diagnostics).
    """
    batch = targets.shape[0]
    k = rng.integers(0, schedule.n_steps + 1, size=batch)
    eps = rng.standard_normal(targets.shape)
    kk = k[:, None, None]
    noisy = schedule.corrupt(targets, kk, eps)
    nu_star = schedule.v_target(targets, kk, eps)
    queries = make_noisy_queries(coords, noisy)
    pred = model.forward_batch(sensors, queries, schedule.tau_of(k))
    diff = pred - Tensor(nu_star.astype(pred.data.dtype))
    return (diff * diff).mean(), k


def diffusion_loss(model, sample, schedule: DiffusionSchedule,
                   rng: np.random.Generator) -> float:
    """Loss of one training sample (see :func:`diffusion_loss_batch`)."""
    loss, _ = diffusion_loss_batch(model, sample.sensors[None],
                                   sample.queries[None], sample.targets[None],
                                   schedule, rng)
    return float(loss.data)


def diffusion_loss_full_sum(model, sample, schedule: DiffusionSchedule,
                            rng: np.random.Generator) -> float:
    """Sum of the per-level losses over every k; the reference the
    single-draw estimator is unbiased for (up to the K+1 normalization)."""
    total = 0.0
    for k in range(schedule.n_steps + 1):
        eps = rng.standard_normal(sample.targets.shape)
        noisy = schedule.corrupt(sample.targets, k, eps)
        nu_star = schedule.v_target(sample.targets, k, eps)
        queries = make_noisy_queries(sample.queries, noisy)
        with no_grad():
            pred = model.forward_batch(sample.sensors[None], queries[None],
                                       schedule.tau_of(np.array([k])))
        total += float(((pred.data[0] - nu_star) ** 2).mean())
    return total


def refine(model, sensors: np.ndarray, query_coords: np.ndarray,
           schedule: DiffusionSchedule, rng: np.random.Generator) -> np.ndarray:
    """Iterative denoising from pure noise down the schedule.

    Returns the raw (unclamped) state ``x_0`` per query; clamping to the
    physical range is the caller's choice so error metrics stay comparable.
    """
    state = rng.standard_normal((query_coords.shape[0], 2))
    predictor = _batched_model_fn(model, schedule)
    return predictor(sensors[None], query_coords[None], state[None])[0]


def refine_batch(model, sensors: np.ndarray, query_coords: np.ndarray,
                 schedule: DiffusionSchedule, rng: np.random.Generator) -> np.ndarray:
    """Vectorized :func:`refine` over a leading batch dimension."""
    state = rng.standard_normal(query_coords.shape[:2] + (2,))
    return _batched_model_fn(model, schedule)(sensors, query_coords, state)


def _batched_model_fn(model, schedule: DiffusionSchedule):
    def run(sensors, coords, state):
        batch = sensors.shape[0]
        with no_grad():
            for k in range(schedule.n_steps, 0, -1):
                queries = make_noisy_queries(coords, state)
                tau = np.full(batch, schedule.tau_of(k))
                nu_hat = model.forward_batch(sensors, queries, tau).data
                state = schedule.ddim_step(state, nu_hat, k)
                if not np.all(np.isfinite(state)):
                    raise NumericError(f"non-finite state at refinement step {k}")
        return state.astype(np.float64)

    return run
