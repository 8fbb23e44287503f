"""Stochastic bridge between a clean source and its separator estimate.

The process is pinned at the clean signal at time 0 and at the separator
estimate at time 1, with drift (s_hat - x_t)/(1 - t) pulling toward the
estimate and an exponentially growing diffusion c * v**t.  Its marginal at
any time is Gaussian with mean (1-t)*x0 + t*s_hat and a standard deviation
sigma(t) available in closed form via the exponential integral, so forward
states can be sampled in one shot instead of by path simulation.

All operations are pure given their inputs and a caller-supplied seed.
"""

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DomainError, NumericError, ShapeError
from .specfun import expint_ei

# Radicands more negative than this indicate a bug, not float noise.
_RADICAND_TOL = 1e-12


@dataclass(frozen=True)
class BridgeConfig:
    """Constants of the bridge SDE and its reverse-time discretization.

    c         diffusion scale, > 0
    v         diffusion base, > 0 and != 1
    T         terminal diffusion time, slightly below 1
    t_eps     numerical-stability floor for training times
    T_prime   reverse-process starting time, in (t_eps, T]
    M         number of reverse steps
    """

    c: float = 0.51
    v: float = 2.6
    T: float = 0.999
    t_eps: float = 0.03
    T_prime: float = 0.5
    M: int = 30

    def __post_init__(self):
        if not (self.c > 0):
            raise ConfigError(f"c must be > 0, got {self.c}")
        if not (self.v > 0) or self.v == 1.0:
            raise ConfigError(f"v must be > 0 and != 1, got {self.v}")
        if not (0 < self.t_eps < self.T_prime <= self.T < 1):
            raise ConfigError(
                "need 0 < t_eps < T_prime <= T < 1, got "
                f"t_eps={self.t_eps}, T_prime={self.T_prime}, T={self.T}"
            )
        if int(self.M) != self.M or self.M < 1:
            raise ConfigError(f"M must be a positive integer, got {self.M}")


@dataclass(frozen=True)
class KernelSample:
    """One forward draw x_t together with the Gaussian z_t that produced it.

    z_t and sigma_t are retained because the score-matching target is
    -z_t / sigma_t.
    """

    x_t: np.ndarray
    z_t: np.ndarray
    t: float
    sigma_t: float


def _pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def drift(x_t, s_hat, t: float) -> np.ndarray:
    """Bridge drift (s_hat - x_t) / (1 - t), elementwise."""
    x_t, s_hat = _pair(x_t, s_hat)
    if not (0.0 <= t < 1.0):
        raise DomainError(f"drift requires t in [0, 1), got {t}")
    return (s_hat - x_t) / (1.0 - t)


def diffusion(t: float, cfg: BridgeConfig) -> float:
    """Diffusion coefficient g(t) = c * v**t."""
    if not (0.0 <= t <= 1.0):
        raise DomainError(f"diffusion requires t in [0, 1], got {t}")
    return cfg.c * cfg.v**t


def mean(x0, s_hat, t: float) -> np.ndarray:
    """Kernel mean (1-t)*x0 + t*s_hat: the straight line between the pins."""
    x0, s_hat = _pair(x0, s_hat)
    if not (0.0 <= t <= 1.0):
        raise DomainError(f"mean requires t in [0, 1], got {t}")
    return (1.0 - t) * x0 + t * s_hat


def sigma(t: float, cfg: BridgeConfig) -> float:
    """Closed-form kernel standard deviation at time t.

    sigma(t)^2 = (1-t) c^2 [ (v^{2t} - 1 + t) + ln(v^{2 v^2}) (1-t) E ]
    with E = Ei(2(t-1) ln v) - Ei(-2 ln v); all logarithms natural.  Equals
    the variance integral (1-t)^2 * int_0^t g(tau)^2/(1-tau)^2 dtau and
    vanishes at both pins.
    """
    if not (0.0 <= t <= 1.0):
        raise DomainError(f"sigma requires t in [0, 1], got {t}")
    if t == 0.0 or t == 1.0:
        # Exact pins; t = 1 must bypass Ei's singularity at argument 0.
        return 0.0
    c, v = cfg.c, cfg.v
    log_v = np.log(v)
    e_term = expint_ei(2.0 * (t - 1.0) * log_v) - expint_ei(-2.0 * log_v)
    radicand = (1.0 - t) * c * c * (
        (v ** (2.0 * t) - 1.0 + t) + 2.0 * v * v * log_v * (1.0 - t) * e_term
    )
    if radicand < -_RADICAND_TOL:
        raise NumericError(
            f"sigma(t)^2 = {radicand} < -{_RADICAND_TOL} at t={t}; "
            "config or implementation is inconsistent"
        )
    if radicand < 0.0:
        radicand = 0.0
    return float(np.sqrt(radicand))


def _kernel_draw(x0, s_hat, t: float, cfg: BridgeConfig, rng_seed) -> KernelSample:
    """Unvalidated kernel draw; sample_kernel adds the [t_eps, T] guard."""
    x0, s_hat = _pair(x0, s_hat)
    rng = np.random.default_rng(rng_seed)
    z_t = rng.standard_normal(x0.shape)
    sigma_t = sigma(t, cfg)
    x_t = mean(x0, s_hat, t) + sigma_t * z_t
    return KernelSample(x_t=x_t, z_t=z_t, t=float(t), sigma_t=sigma_t)


def sample_kernel(x0, s_hat, t: float, cfg: BridgeConfig, rng_seed) -> KernelSample:
    """Draw x_t = mean(x0, s_hat, t) + sigma(t) * z with seeded z ~ N(0, I).

    t must lie in [t_eps, T], the range the training loop samples from.
    """
    if not (cfg.t_eps <= t <= cfg.T):
        raise DomainError(
            f"sample_kernel requires t in [{cfg.t_eps}, {cfg.T}], got {t}"
        )
    return _kernel_draw(x0, s_hat, t, cfg, rng_seed)
