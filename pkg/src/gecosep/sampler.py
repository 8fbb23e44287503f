"""Reverse-time generation along the bridge: multi-step Euler-Maruyama
refinement and the single-step fast path, sharing one stepping kernel.

The reverse grid partitions [0, T_prime] into M equal steps; grid times are
constructed (not accumulated) so the final time is identically 0.  Each step
i = M..1 updates

    x <- x + [-drift(x, s_hat, t) + g(t)^2 * score(x, s_hat, y, t)] * dt
           + g(t) * sqrt(dt) * z_i

with seeded z_i.  In deterministic-eval mode the Brownian term of the step
landing exactly at t = 0 is omitted, which makes SI-SNR-based evaluation
variance-free at the output; all other steps keep their noise.

Seeds derive per step as (seed, i) with i the descending step index and
(seed, 0) reserved for the starting draw, so the single-step path is
bit-identical to a one-step multi-step run under a shared seed.
"""

from dataclasses import dataclass, replace

import numpy as np

from . import bridge
from .errors import DomainError, NumericError
from .ioutil import write_text_atomic

_ZERO_TIME_TOL = 1e-12


@dataclass(frozen=True)
class ReverseTrace:
    """States and times of one reverse pass, start and end included."""

    states: list
    times: list
    seed: int


def init_reverse(s_hat, cfg: bridge.BridgeConfig, seed, sample_start: bool = True) -> np.ndarray:
    """Draw the reverse starting state x_{T_prime} ~ N(s_hat, sigma(T_prime)^2 I).

    With sample_start=False the reverse starts deterministically at s_hat.
    """
    s_hat = np.asarray(s_hat, dtype=np.float64)
    if not sample_start:
        return s_hat.copy()
    z = np.random.default_rng((seed, 0)).standard_normal(s_hat.shape)
    return s_hat + bridge.sigma(cfg.T_prime, cfg) * z


def eum_step(
    x,
    s_hat,
    y,
    t: float,
    dt: float,
    score_fn,
    cfg: bridge.BridgeConfig,
    seed,
    deterministic_eval: bool = False,
) -> np.ndarray:
    """One reverse Euler-Maruyama update from time t to t - dt."""
    if dt <= 0:
        raise DomainError(f"dt must be positive, got {dt}")
    if t - dt < -_ZERO_TIME_TOL:
        raise DomainError(f"step from t={t} by dt={dt} would pass below 0")
    x = np.asarray(x, dtype=np.float64)
    score = np.asarray(score_fn(x, s_hat, y, t), dtype=np.float64)
    if not np.all(np.isfinite(score)):
        raise NumericError(f"score function returned non-finite values at t={t}")
    g = bridge.diffusion(t, cfg)
    out = x + (-bridge.drift(x, s_hat, t) + g * g * score) * dt
    lands_at_zero = abs(t - dt) <= _ZERO_TIME_TOL
    if not (deterministic_eval and lands_at_zero):
        z = np.random.default_rng(seed).standard_normal(x.shape)
        out = out + g * np.sqrt(dt) * z
    return out


def reverse_grid(cfg: bridge.BridgeConfig) -> list[float]:
    """Descending grid times T_prime * (M - j) / M for j = 0..M."""
    return [cfg.T_prime * (cfg.M - j) / cfg.M for j in range(cfg.M + 1)]


def reverse_geco(
    s_hat,
    y,
    score_fn,
    cfg: bridge.BridgeConfig,
    seed,
    keep_trace: bool = False,
    deterministic_eval: bool = False,
    sample_start: bool = True,
):
    """Run the full M-step reverse pass and return the refined estimate.

    score_fn(x, s_hat, y, t) supplies the score estimate; with keep_trace
    the full ReverseTrace is returned alongside the final state.
    """
    times = reverse_grid(cfg)
    x = init_reverse(s_hat, cfg, seed, sample_start=sample_start)
    states = [x]
    for k in range(cfg.M):
        t, t_next = times[k], times[k + 1]
        x = eum_step(
            x,
            s_hat,
            y,
            t,
            t - t_next,
            score_fn,
            cfg,
            (seed, cfg.M - k),
            deterministic_eval=deterministic_eval,
        )
        states.append(x)
    if keep_trace:
        return x, ReverseTrace(states=states, times=times, seed=seed)
    return x


def one_step_fastgeco(
    s_hat,
    y,
    score_fn,
    cfg: bridge.BridgeConfig,
    seed,
    deterministic_eval: bool = False,
    sample_start: bool = True,
) -> np.ndarray:
    """Single reverse step over the whole [0, T_prime] interval: the
    multi-step pass with M = 1, bit-identical under a shared seed."""
    return reverse_geco(
        s_hat,
        y,
        score_fn,
        replace(cfg, M=1),
        seed,
        deterministic_eval=deterministic_eval,
        sample_start=sample_start,
    )


def reverse_geco_batch(
    s_hats: np.ndarray,
    ys: np.ndarray,
    score_fn_batch,
    cfg: bridge.BridgeConfig,
    seeds,
    deterministic_eval: bool = False,
    sample_start: bool = True,
) -> np.ndarray:
    """Vectorized reverse pass over a batch of equal-length signals.

    Per-row noise comes from the same (seed, step) streams as the scalar
    path, so row b reproduces reverse_geco(s_hats[b], ..., seeds[b]) up to
    BLAS reduction order inside the score network.
    """
    s_hats = np.asarray(s_hats, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    b_sz = s_hats.shape[0]
    if len(seeds) != b_sz:
        raise DomainError(f"need one seed per row, got {len(seeds)} for {b_sz}")
    sig0 = bridge.sigma(cfg.T_prime, cfg)
    if sample_start:
        z0 = np.stack(
            [np.random.default_rng((s, 0)).standard_normal(s_hats.shape[1]) for s in seeds]
        )
        x = s_hats + sig0 * z0
    else:
        x = s_hats.copy()
    times = reverse_grid(cfg)
    for k in range(cfg.M):
        t, t_next = times[k], times[k + 1]
        dt = t - t_next
        score = np.asarray(score_fn_batch(x, s_hats, ys, t), dtype=np.float64)
        if not np.all(np.isfinite(score)):
            raise NumericError(f"score function returned non-finite values at t={t}")
        g = bridge.diffusion(t, cfg)
        x = x + (-bridge.drift(x, s_hats, t) + g * g * score) * dt
        lands_at_zero = abs(t_next) <= _ZERO_TIME_TOL
        if not (deterministic_eval and lands_at_zero):
            z = np.stack(
                [
                    np.random.default_rng((s, cfg.M - k)).standard_normal(s_hats.shape[1])
                    for s in seeds
                ]
            )
            x = x + g * np.sqrt(dt) * z
    return x


def dump_trace(trace: ReverseTrace, path) -> None:
    """Write a trace as CSV: one row per grid time, time first then state."""
    lines = [f"# steps={len(trace.times) - 1} dim={trace.states[0].size} seed={trace.seed}"]
    for t, state in zip(trace.times, trace.states):
        lines.append(",".join([f"{t:.12g}"] + [f"{v:.12g}" for v in np.ravel(state)]))
    write_text_atomic(path, "\n".join(lines) + "\n")
