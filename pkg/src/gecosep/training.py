"""The three training loops: separator (permutation-invariant SI-SNR),
score model (denoising score matching along the bridge), and the one-step
fine-tune that turns the multi-step corrector into a single reverse step.

All loops use a first-order adaptive-moment optimizer (beta1 = 0.9,
beta2 = 0.999, eps = 1e-8) with global gradient-norm clipping, draw every
random quantity from seeds derived off the config seed, and abort with a
step diagnostic if the loss goes non-finite.  The separator stays frozen
through both corrector stages; speaker pairing is always resolved with the
exhaustive permutation search first, so estimate k trains against source k.
"""

import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from . import bridge, metrics, models, sampler
from .errors import DegenerateInputError, DomainError, NumericError

_SIGMA_FLOOR = 1e-6
_LN10 = float(np.log(10.0))


@dataclass(frozen=True)
class TrainConfig:
    """Optimizer and loop settings shared by all three stages."""

    lr: float = 1e-4
    epochs: int = 10
    batch_size: int = 8
    seed: int = 0
    ema_decay: float = 0.999
    grad_clip: float = 5.0
    # Training window in samples; None trains on full-length signals.
    crop_len: int | None = 1024

    def __post_init__(self):
        if self.lr <= 0 or self.epochs <= 0 or self.batch_size <= 0 or self.grad_clip <= 0:
            raise DomainError("lr, epochs, batch_size and grad_clip must all be positive")
        if not (0.0 <= self.ema_decay < 1.0):
            raise DomainError(f"ema_decay must lie in [0, 1), got {self.ema_decay}")


@dataclass
class TrainReport:
    """Per-epoch loss means, validation SI-SNRi, and run metadata."""

    epoch_losses: list = field(default_factory=list)
    val_sisnri: list = field(default_factory=list)
    wall_clock_s: float = 0.0
    checkpoint_path: str | None = None


class _Adam:
    """Adaptive-moment optimizer with global-norm gradient clipping."""

    def __init__(self, n: int, lr: float, clip: float, b1=0.9, b2=0.999, eps=1e-8):
        self.m = np.zeros(n)
        self.v = np.zeros(n)
        self.t = 0
        self.lr, self.clip, self.b1, self.b2, self.eps = lr, clip, b1, b2, eps

    def step(self, params: np.ndarray, g: np.ndarray) -> np.ndarray:
        norm = float(np.linalg.norm(g))
        if norm > self.clip:
            g = g * (self.clip / norm)
        self.t += 1
        self.m = self.b1 * self.m + (1 - self.b1) * g
        self.v = self.b2 * self.v + (1 - self.b2) * g * g
        m_hat = self.m / (1 - self.b1**self.t)
        v_hat = self.v / (1 - self.b2**self.t)
        return params - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


# ---------------------------------------------------------------------------
# Differentiable SI-SNR (mirrors metrics.si_snr including the +80 dB cap)
# ---------------------------------------------------------------------------


def si_snr_t(estimate, reference: np.ndarray):
    """Tape version of metrics.si_snr: estimate may be a Tensor, the
    reference is a constant."""
    ref = np.asarray(reference, dtype=np.float64)
    ref = ref - ref.mean()
    ref_power = float(ref @ ref)
    if ref_power == 0.0:
        raise DegenerateInputError("reference has zero power after zero-meaning")
    est = ad.sub(estimate, ad.mean(estimate))
    scale = ad.div(ad.sum(ad.mul(est, ref)), ref_power)
    proj_power = ad.mul(ad.square(scale), ref_power)
    residual = ad.sub(est, ad.mul(scale, ref))
    err_power = ad.maximum(ad.sum(ad.square(residual)), ad.mul(proj_power, metrics._ERROR_POWER_FLOOR))
    return ad.mul(ad.sub(ad.log(proj_power), ad.log(err_power)), 10.0 / _LN10)


# ---------------------------------------------------------------------------
# Speaker pairing
# ---------------------------------------------------------------------------


def resolve_pairing(separator: models.SeparatorModel, example):
    """Run the separator and order its outputs so estimate k pairs with
    source k, using the exhaustive permutation search on full signals.

    Returns (ordered estimates, PitResult).
    """
    ests = models.separator_forward(separator, example.mixture.samples)
    refs = [s.samples for s in example.sources]
    res = metrics.pit_assign(ests, refs)
    ordered = [ests[res.permutation[k]] for k in range(len(refs))]
    return ordered, res


def _crop_window(rng, n: int, crop_len) -> slice:
    if crop_len is None or crop_len >= n:
        return slice(0, n)
    start = int(rng.integers(0, n - crop_len + 1))
    return slice(start, start + crop_len)


def _check_finite(value: float, stage: str, epoch: int, step: int) -> float:
    if not np.isfinite(value):
        raise NumericError(f"{stage} diverged: loss={value} at epoch {epoch} step {step}")
    return float(value)


def _grad_and_loss(params: np.ndarray, closure):
    """One tape pass returning (gradient, loss value)."""
    p = ad.Tensor(np.array(params, copy=True))
    loss = closure(p)
    val = float(ad.value(loss))
    if not isinstance(loss, ad.Tensor) or not np.isfinite(val):
        return np.zeros_like(params), val
    loss.backward()
    g = p.grad if p.grad is not None else np.zeros_like(params)
    return g, val


# ---------------------------------------------------------------------------
# Separator training
# ---------------------------------------------------------------------------


def _eval_sisnri(separate_fn, examples) -> float:
    """Mean over examples/sources of uPIT-resolved SI-SNR improvement."""
    vals = []
    for ex in examples:
        ests = separate_fn(ex)
        refs = [s.samples for s in ex.sources]
        res = metrics.pit_assign(ests, refs)
        for k, ref in enumerate(refs):
            vals.append(
                res.per_source_sisnr[k] - metrics.si_snr(ex.mixture.samples, ref)
            )
    return float(np.mean(vals))


def train_separator(data, model: models.SeparatorModel, cfg: TrainConfig, val_data=None):
    """Minimize the permutation-resolved negative SI-SNR over minibatches.

    Validation SI-SNRi is recorded per epoch and the best-validation
    parameters are the ones returned.
    """
    if not data:
        raise DomainError("training data is empty")
    val = val_data if val_data is not None else data
    t_start = time.perf_counter()
    arch = model.arch
    params = np.array(model.params, copy=True)
    opt = _Adam(params.size, cfg.lr, cfg.grad_clip)
    shuffle_rng = np.random.default_rng((cfg.seed, 11))
    crop_rng = np.random.default_rng((cfg.seed, 13))
    report = TrainReport()
    best_val = -np.inf
    best_params = params.copy()

    for epoch in range(cfg.epochs):
        order = shuffle_rng.permutation(len(data))
        losses = []
        for step, lo in enumerate(range(0, len(order), cfg.batch_size)):
            batch = [data[i] for i in order[lo : lo + cfg.batch_size]]
            length = min(
                min(len(ex.mixture) for ex in batch),
                cfg.crop_len or max(len(ex.mixture) for ex in batch),
            )
            ys, refs = [], []
            for ex in batch:
                win = _crop_window(crop_rng, len(ex.mixture), length)
                ys.append(ex.mixture.samples[win])
                refs.append([s.samples[win] for s in ex.sources])
            y_mat = np.stack(ys)

            def closure(p):
                out = models.separator_forward_batch(p, y_mat, arch)
                out_data = ad.value(out)
                total = None
                for b, ref_list in enumerate(refs):
                    perm = metrics.pit_assign(
                        [out_data[b, i] for i in range(arch.n_sources)], ref_list
                    ).permutation
                    for k, ref in enumerate(ref_list):
                        term = si_snr_t(out[b, perm[k]], ref)
                        total = term if total is None else ad.add(total, term)
                return ad.div(ad.mul(total, -1.0), float(len(refs)))

            g, loss_val = _grad_and_loss(params, closure)
            losses.append(_check_finite(loss_val, "separator training", epoch, step))
            params = opt.step(params, g)
        report.epoch_losses.append(float(np.mean(losses)))

        val_model = replace(model, params=params)
        val_score = _eval_sisnri(
            lambda ex: models.separator_forward(val_model, ex.mixture.samples), val
        )
        report.val_sisnri.append(val_score)
        if val_score > best_val:
            best_val = val_score
            best_params = params.copy()

    report.wall_clock_s = time.perf_counter() - t_start
    return replace(model, params=best_params), report


# ---------------------------------------------------------------------------
# Denoising score matching
# ---------------------------------------------------------------------------


def _draw_dsm_time(rng, cfg_bridge: bridge.BridgeConfig) -> float:
    """Uniform t in [t_eps, T], resampled (at most 10 times) while sigma(t)
    is below the blow-up floor."""
    for _ in range(10):
        t = float(rng.uniform(cfg_bridge.t_eps, cfg_bridge.T))
        if bridge.sigma(t, cfg_bridge) >= _SIGMA_FLOOR:
            return t
    raise NumericError("could not draw a diffusion time with usable sigma in 10 tries")


def dsm_step(
    score_model: models.ScoreModel,
    example,
    separator: models.SeparatorModel,
    cfg_bridge: bridge.BridgeConfig,
    seed,
    score_fn=None,
) -> float:
    """Denoising-score-matching loss of one example at a seeded draw.

    Picks one speaker uniformly, pairs the separator estimate with its
    source via the permutation search, perturbs the source along the
    bridge at a uniform time, and returns the element-mean of
    (score + z/sigma)^2.  `score_fn(x_t, s_hat, y, t)` can replace the
    model's forward pass (test hook).
    """
    rng = np.random.default_rng(seed)
    ordered, _ = resolve_pairing(separator, example)
    k = int(rng.integers(len(ordered)))
    s_k = example.sources[k].samples
    s_hat_k = ordered[k]
    t = _draw_dsm_time(rng, cfg_bridge)
    kern = bridge.sample_kernel(s_k, s_hat_k, t, cfg_bridge, int(rng.integers(2**63)))
    if score_fn is None:
        score = models.score_forward(score_model, kern.x_t, s_hat_k, example.mixture.samples, t)
    else:
        score = np.asarray(score_fn(kern.x_t, s_hat_k, example.mixture.samples, t))
    return float(np.mean((score + kern.z_t / kern.sigma_t) ** 2))


def _probe_sisnri(score_model, separator, examples, cfg_bridge, seed, one_step=False, probe_m=10):
    """Cheap per-epoch validation: SI-SNRi of the corrector output on a few
    examples, deterministic final step."""
    cfg_probe = cfg_bridge if one_step else replace(cfg_bridge, M=min(probe_m, cfg_bridge.M))
    vals = []
    for j, ex in enumerate(examples[:4]):
        ordered, _ = resolve_pairing(separator, ex)
        score_fn = make_score_fn(score_model, cfg_bridge)
        for k, src in enumerate(ex.sources):
            run = sampler.one_step_fastgeco if one_step else sampler.reverse_geco
            out = run(
                ordered[k],
                ex.mixture.samples,
                score_fn,
                cfg_probe,
                (seed, j, k),
                deterministic_eval=True,
            )
            vals.append(
                metrics.si_snr(out, src.samples) - metrics.si_snr(ex.mixture.samples, src.samples)
            )
    return float(np.mean(vals))


def make_score_fn(score_model: models.ScoreModel, cfg_bridge: bridge.BridgeConfig):
    """Adapter from the score model to the sampler's score_fn signature.

    Query times are clamped into the model's trained range [t_eps, T]; the
    reverse grid's last step evaluates below t_eps at default settings and
    the network never extrapolates there.
    """

    def score_fn(x, s_hat, y, t):
        t_q = min(max(float(t), cfg_bridge.t_eps), cfg_bridge.T)
        return models.score_forward(score_model, x, s_hat, y, t_q)

    return score_fn


def make_score_fn_batch(score_model: models.ScoreModel, cfg_bridge: bridge.BridgeConfig):
    """Batched adapter for sampler.reverse_geco_batch."""

    def score_fn(x, s_hat, y, t):
        t_q = min(max(float(t), cfg_bridge.t_eps), cfg_bridge.T)
        return ad.value(
            models.score_forward_batch(score_model.params, x, s_hat, y, t_q, score_model.arch)
        )

    return score_fn


def train_geco(
    data,
    score_model: models.ScoreModel,
    separator: models.SeparatorModel,
    cfg: TrainConfig,
    cfg_bridge: bridge.BridgeConfig = bridge.BridgeConfig(),
    val_data=None,
):
    """Minimize the score-matching loss across the data; the separator is
    frozen throughout.  Returns (final model, EMA state, report); the EMA
    shadow is what evaluation should use.
    """
    if not data:
        raise DomainError("training data is empty")
    val = val_data if val_data is not None else data
    t_start = time.perf_counter()
    arch = score_model.arch
    params = np.array(score_model.params, copy=True)
    opt = _Adam(params.size, cfg.lr, cfg.grad_clip)
    ema = models.EmaState(shadow=params.copy(), decay=cfg.ema_decay)
    shuffle_rng = np.random.default_rng((cfg.seed, 21))
    draw_rng = np.random.default_rng((cfg.seed, 23))
    report = TrainReport()

    # Pairings depend only on the frozen separator; resolve once.
    pairings = [resolve_pairing(separator, ex)[0] for ex in data]

    for epoch in range(cfg.epochs):
        order = shuffle_rng.permutation(len(data))
        losses = []
        for step, lo in enumerate(range(0, len(order), cfg.batch_size)):
            rows_x, rows_sh, rows_y, rows_z, sig_list, t_list = [], [], [], [], [], []
            idxs = order[lo : lo + cfg.batch_size]
            length = min(
                min(len(data[i].mixture) for i in idxs),
                cfg.crop_len or max(len(data[i].mixture) for i in idxs),
            )
            for i in idxs:
                ex = data[i]
                k = int(draw_rng.integers(len(ex.sources)))
                t = _draw_dsm_time(draw_rng, cfg_bridge)
                win = _crop_window(draw_rng, len(ex.mixture), length)
                s_k = ex.sources[k].samples[win]
                sh_k = pairings[i][k][win]
                kern = bridge.sample_kernel(
                    s_k, sh_k, t, cfg_bridge, int(draw_rng.integers(2**63))
                )
                rows_x.append(kern.x_t)
                rows_sh.append(sh_k)
                rows_y.append(ex.mixture.samples[win])
                rows_z.append(kern.z_t / kern.sigma_t)
                sig_list.append(kern.sigma_t)
                t_list.append(t)
            x_mat, sh_mat = np.stack(rows_x), np.stack(rows_sh)
            y_mat, target = np.stack(rows_y), np.stack(rows_z)
            t_vec = np.array(t_list)

            def closure(p):
                score = models.score_forward_batch(p, x_mat, sh_mat, y_mat, t_vec, arch)
                return ad.mean(ad.square(ad.add(score, target)))

            g, loss_val = _grad_and_loss(params, closure)
            losses.append(_check_finite(loss_val, "score-model training", epoch, step))
            params = opt.step(params, g)
            ema = models.ema_update(ema, params)
        report.epoch_losses.append(float(np.mean(losses)))
        report.val_sisnri.append(
            _probe_sisnri(
                replace(score_model, params=ema.shadow.copy()),
                separator,
                val,
                cfg_bridge,
                (cfg.seed, 29, epoch),
            )
        )

    report.wall_clock_s = time.perf_counter() - t_start
    return replace(score_model, params=params), ema, report


# ---------------------------------------------------------------------------
# One-step fine-tuning
# ---------------------------------------------------------------------------


def _one_step_loss_t(p, x_start, sh_mat, y_mat, z_step, refs, cfg_bridge, arch):
    """Differentiable one-step reverse output and its SI-SNR loss.

    Only the score term depends on the parameters; the start state and the
    Brownian draw enter as constants per draw (reparameterized noise).
    """
    tp = cfg_bridge.T_prime
    g = bridge.diffusion(tp, cfg_bridge)
    const = x_start + g * np.sqrt(tp) * z_step + tp * (x_start - sh_mat) / (1.0 - tp)
    score = models.score_forward_batch(p, x_start, sh_mat, y_mat, tp, arch)
    x0_hat = ad.add(const, ad.mul(score, tp * g * g))
    total = None
    for b, ref in enumerate(refs):
        term = si_snr_t(x0_hat[b], ref)
        total = term if total is None else ad.add(total, term)
    return ad.div(ad.mul(total, -1.0), float(len(refs)))


def _fd_gradient_check(score_model, params, closure, g, n_coords=4, h=1e-5, tol=1e-3):
    """Spot-check the through-sampler gradient against central differences."""
    rng = np.random.default_rng(0)
    idx = rng.choice(params.size, size=n_coords, replace=False)
    base = float(ad.value(closure(params)))
    for i in idx:
        pp, pm = params.copy(), params.copy()
        pp[i] += h
        pm[i] -= h
        fd = (float(ad.value(closure(pp))) - float(ad.value(closure(pm)))) / (2 * h)
        denom = max(abs(fd), abs(g[i]), 1e-6 * max(1.0, abs(base)))
        if abs(fd - g[i]) / denom > tol:
            raise NumericError(
                f"through-sampler gradient failed the finite-difference check at "
                f"coordinate {i}: autodiff {g[i]:.6g} vs central difference {fd:.6g}"
            )


def finetune_fastgeco(
    data,
    score_model: models.ScoreModel,
    separator: models.SeparatorModel,
    cfg: TrainConfig,
    cfg_bridge: bridge.BridgeConfig = bridge.BridgeConfig(),
    val_data=None,
    fixed_noise: bool = False,
):
    """Fine-tune the score model through the single reverse step with the
    SI-SNR objective; the separator stays frozen.

    Fresh start/step noise is drawn per optimization step (fixed_noise
    reuses the step-0 draws; regression-test hook).  The through-sampler
    gradient is checked against finite differences on the first batch.
    """
    if not data:
        raise DomainError("training data is empty")
    val = val_data if val_data is not None else data
    t_start = time.perf_counter()
    arch = score_model.arch
    params = np.array(score_model.params, copy=True)
    opt = _Adam(params.size, cfg.lr, cfg.grad_clip)
    shuffle_rng = np.random.default_rng((cfg.seed, 31))
    draw_rng = np.random.default_rng((cfg.seed, 37))
    report = TrainReport()
    sig_start = bridge.sigma(cfg_bridge.T_prime, cfg_bridge)

    pairings = [resolve_pairing(separator, ex)[0] for ex in data]

    checked = False
    for epoch in range(cfg.epochs):
        order = shuffle_rng.permutation(len(data))
        losses = []
        for step, lo in enumerate(range(0, len(order), cfg.batch_size)):
            idxs = order[lo : lo + cfg.batch_size]
            length = min(
                min(len(data[i].mixture) for i in idxs),
                cfg.crop_len or max(len(data[i].mixture) for i in idxs),
            )
            rows_start, rows_sh, rows_y, rows_z, refs = [], [], [], [], []
            noise_rng = (
                np.random.default_rng((cfg.seed, 41, 0)) if fixed_noise
                else np.random.default_rng((cfg.seed, 41, epoch, step))
            )
            for i in idxs:
                ex = data[i]
                win = _crop_window(draw_rng, len(ex.mixture), length)
                for k in range(len(ex.sources)):
                    sh = pairings[i][k][win]
                    x_start = sh + sig_start * noise_rng.standard_normal(sh.size)
                    rows_start.append(x_start)
                    rows_sh.append(sh)
                    rows_y.append(ex.mixture.samples[win])
                    rows_z.append(noise_rng.standard_normal(sh.size))
                    refs.append(ex.sources[k].samples[win])
            x_mat, sh_mat = np.stack(rows_start), np.stack(rows_sh)
            y_mat, z_mat = np.stack(rows_y), np.stack(rows_z)

            def closure(p):
                return _one_step_loss_t(p, x_mat, sh_mat, y_mat, z_mat, refs, cfg_bridge, arch)

            g, loss_val = _grad_and_loss(params, closure)
            if not checked:
                _fd_gradient_check(score_model, params, closure, g)
                checked = True
            losses.append(_check_finite(loss_val, "one-step fine-tuning", epoch, step))
            params = opt.step(params, g)
        report.epoch_losses.append(float(np.mean(losses)))
        report.val_sisnri.append(
            _probe_sisnri(
                replace(score_model, params=params.copy()),
                separator,
                val,
                cfg_bridge,
                (cfg.seed, 43, epoch),
                one_step=True,
            )
        )

    report.wall_clock_s = time.perf_counter() - t_start
    return replace(score_model, params=params), report
