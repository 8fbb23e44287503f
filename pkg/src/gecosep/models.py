"""Small fully specified reference networks for the two pipeline slots:
a mask-based separator and a conditional score estimator.

Both models are value records: a flat float64 parameter vector plus a fixed
architecture record that completely determines the parameter layout.  The
forward passes are written against the autodiff ops, so the same code path
serves plain-numpy inference and gradient computation; `grad` returns the
exact reverse-mode gradient of any scalar loss closure built from those ops.

Separator: strided 80-sample frame encoder with 64 learned filters, a gated
residual mask stack (hidden 128, 2 blocks, each with a depthwise context
convolution over frames) producing per-source masks via a softmax over
K + 1 classes (the extra class absorbs background noise, so the source
masks are bounded and sum to at most 1 per basis coefficient), and a
transposed frame synthesis decoder.

Score model: the three conditioning signals (current state, separator
estimate, mixture) are stacked as channels, framed (window 32, hop 16) and
encoded to a hidden width of 128 per frame; a sinusoidal time embedding
(dim 32) is projected and added to the hidden activations; three residual
blocks (depthwise context conv over frames with dilations 1/3/9 and a
128->32->128 bottleneck) refine the frames; the output projection
synthesizes one channel back to the input length by windowed overlap-add
plus a time-conditioned linear bypass of the three input signals.  The
whole output is multiplied by 1/sigma(t) of the bridge schedule (whose
scale constants live in the arch record): the score-matching target is
-z/sigma(t), so with that factor pulled out of the trainable path the raw
regression target is a unit Gaussian at every time, which keeps both the
outputs and the gradients of the shared layers on one scale across t.
"""

from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from . import bridge
from .errors import DomainError, NumericError, ShapeError

# ---------------------------------------------------------------------------
# Architecture records and parameter layout
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SeparatorArch:
    window: int = 80
    basis: int = 64
    hidden: int = 128
    blocks: int = 2
    n_sources: int = 2


@dataclass(frozen=True)
class ScoreArch:
    in_channels: int = 3
    time_embed_dim: int = 32
    hidden: int = 128
    blocks: int = 3
    # Bridge-schedule constants baked into the output scale 1/sigma(t);
    # a noise-conditional score network is inseparable from its schedule.
    scale_c: float = 0.51
    scale_v: float = 2.6


# Fixed internals of the score model; they are part of the architecture
# version, not tunable knobs.
_SCORE_WINDOW = 32
_SCORE_HOP = 16
_SCORE_KERNEL_DW = 3
_SCORE_DILATIONS = (1, 3, 9)
_SCORE_BOTTLENECK = 32

# Periodic Hann synthesis window; adjacent hops sum to exactly 1.
_SYNTH_WINDOW = 0.5 * (1.0 - np.cos(2.0 * np.pi * np.arange(_SCORE_WINDOW) / _SCORE_WINDOW))


class ParamLayout:
    """Ordered (name, shape) table mapping a flat vector to tensor views."""

    def __init__(self, entries):
        self.entries = list(entries)
        self.offsets = {}
        pos = 0
        for name, shape in self.entries:
            size = int(np.prod(shape))
            self.offsets[name] = (pos, pos + size, shape)
            pos += size
        self.total = pos

    def view(self, params, name):
        lo, hi, shape = self.offsets[name]
        return ad.reshape(params[lo:hi], shape)


# Frame-context kernel and per-block dilations of the separator stack.
_SEP_KERNEL_DW = 5
_SEP_DILATIONS = (1, 2)


def separator_layout(arch: SeparatorArch) -> ParamLayout:
    w, b, h, k = arch.window, arch.basis, arch.hidden, arch.n_sources
    entries = [("enc_w", (w, b)), ("enc_b", (b,)), ("in_w", (b, h)), ("in_b", (h,))]
    for i in range(arch.blocks):
        entries += [
            (f"blk{i}_dw", (_SEP_KERNEL_DW, h)),
            (f"blk{i}_db", (h,)),
            (f"blk{i}_aw", (h, h)),
            (f"blk{i}_ab", (h,)),
            (f"blk{i}_gw", (h, h)),
            (f"blk{i}_gb", (h,)),
        ]
    # One mask head per source plus a residual head that soaks up noise.
    for j in range(k + 1):
        entries += [(f"mask{j}_w", (h, b)), (f"mask{j}_b", (b,))]
    entries += [("dec_w", (b, w))]
    return ParamLayout(entries)


def score_layout(arch: ScoreArch) -> ParamLayout:
    h, bneck = arch.hidden, _SCORE_BOTTLENECK
    entries = [
        ("enc_w", (_SCORE_WINDOW * arch.in_channels, h)),
        ("enc_b", (h,)),
        ("temb_w", (arch.time_embed_dim, h)),
        ("temb_b", (h,)),
        ("skip_w", (arch.time_embed_dim, arch.in_channels)),
        ("skip_b", (arch.in_channels,)),
    ]
    for i in range(arch.blocks):
        entries += [
            (f"blk{i}_tw", (arch.time_embed_dim, h)),
            (f"blk{i}_dw", (_SCORE_KERNEL_DW, h)),
            (f"blk{i}_db", (h,)),
            (f"blk{i}_w1", (h, bneck)),
            (f"blk{i}_b1", (bneck,)),
            (f"blk{i}_w2", (bneck, h)),
            (f"blk{i}_b2", (h,)),
        ]
    entries += [("dec_w", (h, _SCORE_WINDOW)), ("dec_b", (_SCORE_WINDOW,))]
    return ParamLayout(entries)


@dataclass(frozen=True, eq=False)
class SeparatorModel:
    params: np.ndarray
    arch: SeparatorArch = SeparatorArch()


@dataclass(frozen=True, eq=False)
class ScoreModel:
    params: np.ndarray
    arch: ScoreArch = ScoreArch()


def _glorot_init(layout: ParamLayout, seed) -> np.ndarray:
    """Uniform [-a, a] with a = sqrt(6/(fan_in+fan_out)) per weight matrix;
    biases and single-row tables start at zero."""
    rng = np.random.default_rng(seed)
    params = np.zeros(layout.total)
    for name, shape in layout.entries:
        lo, hi, _ = layout.offsets[name]
        if len(shape) == 2:
            a = np.sqrt(6.0 / (shape[0] + shape[1]))
            params[lo:hi] = rng.uniform(-a, a, hi - lo)
    return params


def init_separator(seed, arch: SeparatorArch = SeparatorArch()) -> SeparatorModel:
    return SeparatorModel(params=_glorot_init(separator_layout(arch), seed), arch=arch)


def init_score_model(seed, arch: ScoreArch = ScoreArch()) -> ScoreModel:
    return ScoreModel(params=_glorot_init(score_layout(arch), seed), arch=arch)


# ---------------------------------------------------------------------------
# Separator forward
# ---------------------------------------------------------------------------


def separator_forward_batch(params, y_batch: np.ndarray, arch: SeparatorArch):
    """Forward over a batch: (B, N) -> (B, K, N).  `params` may be a flat
    ndarray (inference) or an autodiff Tensor (training)."""
    layout = separator_layout(arch)
    b_sz, n = y_batch.shape
    w = arch.window
    if n < w:
        raise ShapeError(f"input length {n} shorter than the {w}-sample window")
    n_pad = (-n) % w
    padded = np.pad(y_batch, ((0, 0), (0, n_pad)))
    frames = padded.reshape(b_sz, -1, w)

    enc = ad.add(ad.matmul(frames, layout.view(params, "enc_w")), layout.view(params, "enc_b"))
    h = ad.tanh(ad.add(ad.matmul(enc, layout.view(params, "in_w")), layout.view(params, "in_b")))
    for i in range(arch.blocks):
        ctx = ad.add(
            _depthwise(h, layout.view(params, f"blk{i}_dw"), _SEP_KERNEL_DW, _SEP_DILATIONS[i]),
            layout.view(params, f"blk{i}_db"),
        )
        act = ad.tanh(
            ad.add(ad.matmul(ctx, layout.view(params, f"blk{i}_aw")), layout.view(params, f"blk{i}_ab"))
        )
        gate = ad.sigmoid(
            ad.add(ad.matmul(ctx, layout.view(params, f"blk{i}_gw")), layout.view(params, f"blk{i}_gb"))
        )
        h = ad.add(h, ad.mul(act, gate))
    logits = [
        ad.add(ad.matmul(h, layout.view(params, f"mask{j}_w")), layout.view(params, f"mask{j}_b"))
        for j in range(arch.n_sources + 1)
    ]
    masks = ad.softmax(ad.stack_last(logits), axis=-1)
    dec_w = layout.view(params, "dec_w")
    outs = []
    for j in range(arch.n_sources):
        mask_j = ad.reshape(masks[:, :, :, j : j + 1], ad.value(enc).shape)
        frames_j = ad.matmul(ad.mul(mask_j, enc), dec_w)
        flat = ad.reshape(frames_j, (b_sz, -1))
        outs.append(ad.reshape(flat[:, :n], (b_sz, 1, n)))
    return ad.concat(outs, axis=1)


def separator_forward(m: SeparatorModel, y) -> list[np.ndarray]:
    """Separate one mixture vector into K estimates of the same length."""
    y = np.asarray(y, dtype=np.float64)
    if y.ndim != 1:
        raise ShapeError(f"expected a 1-D vector, got shape {y.shape}")
    out = separator_forward_batch(m.params, y[None, :], m.arch)
    return [np.array(ad.value(out)[0, k]) for k in range(m.arch.n_sources)]


# ---------------------------------------------------------------------------
# Score model forward
# ---------------------------------------------------------------------------

# Frequencies span what a smooth function of t in [0, 1] needs; anything
# much faster lets time-conditioned coefficients oscillate between the
# training draws and destabilizes the reverse iteration at unseen times.
_TEMB_FREQS = 2.0 * np.pi * np.exp(np.linspace(np.log(0.25), np.log(8.0), 16))


def time_embedding(t) -> np.ndarray:
    """Sinusoidal embedding of diffusion time; (32,) for scalar t, (B, 32)
    for a vector of times."""
    t = np.asarray(t, dtype=np.float64)
    phase = t[..., None] * _TEMB_FREQS
    return np.concatenate([np.sin(phase), np.cos(phase)], axis=-1)


def _frame(signal: np.ndarray, n_frames: int) -> np.ndarray:
    """(B, N) -> (B, F, window) frames at hop 16, first frame centered so
    that every sample is covered by exactly two synthesis hops."""
    b, n = signal.shape
    pad_right = (n_frames - 1) * _SCORE_HOP + _SCORE_WINDOW - _SCORE_HOP - n
    padded = np.pad(signal, ((0, 0), (_SCORE_HOP, pad_right)))
    view = np.lib.stride_tricks.sliding_window_view(padded, _SCORE_WINDOW, axis=1)
    return np.ascontiguousarray(view[:, :: _SCORE_HOP, :])


def _overlap_add(frames, n: int):
    """Tape-side inverse of _frame: windowed frames (B, F, window) -> (B, n)."""
    b, f, w = ad.value(frames).shape
    first = frames[:, :, : _SCORE_HOP]
    second = frames[:, :, _SCORE_HOP :]
    merged = ad.add(ad.pad_axis(first, 1, 0, 1), ad.pad_axis(second, 1, 1, 0))
    flat = ad.reshape(merged, (b, (f + 1) * _SCORE_HOP))
    return flat[:, _SCORE_HOP : _SCORE_HOP + n]


def _schedule_sigma(t_row: np.ndarray, arch: ScoreArch) -> np.ndarray:
    """Bridge-kernel standard deviation at each time, per the arch's scale
    constants."""
    cfg = bridge.BridgeConfig(c=arch.scale_c, v=arch.scale_v)
    return np.array(
        [bridge.sigma(min(max(float(tt), 0.0), 1.0), cfg) for tt in np.atleast_1d(t_row)]
    )


def _depthwise(h, weight, kernel: int, dilation: int):
    """Per-channel dilated context convolution over the frame axis."""
    n = ad.value(h).shape[1]
    half = (kernel // 2) * dilation
    padded = ad.pad_axis(h, 1, half, half)
    out = None
    for k in range(kernel):
        shifted = padded[:, k * dilation : k * dilation + n, :]
        term = ad.mul(shifted, weight[k : k + 1, :])
        out = term if out is None else ad.add(out, term)
    return out


def score_forward_batch(params, x_t, s_hat, y, t, arch: ScoreArch):
    """Forward over a batch: three (B, N) signals and per-row (or scalar)
    time -> (B, N) score estimates."""
    layout = score_layout(arch)
    x_t = np.asarray(x_t, dtype=np.float64)
    s_hat = np.asarray(s_hat, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    b_sz, n = x_t.shape
    n_frames = -(-n // _SCORE_HOP) + 1
    cols = np.concatenate(
        [_frame(x_t, n_frames), _frame(s_hat, n_frames), _frame(y, n_frames)], axis=-1
    )

    temb = time_embedding(np.broadcast_to(np.asarray(t, dtype=np.float64), (b_sz,)))
    tproj = ad.add(ad.matmul(temb, layout.view(params, "temb_w")), layout.view(params, "temb_b"))
    tproj = ad.reshape(tproj, (b_sz, 1, arch.hidden))

    h = ad.matmul(cols, layout.view(params, "enc_w"))
    h = ad.tanh(ad.add(ad.add(h, layout.view(params, "enc_b")), tproj))
    for i in range(arch.blocks):
        block_t = ad.reshape(ad.matmul(temb, layout.view(params, f"blk{i}_tw")), (b_sz, 1, arch.hidden))
        ctx = _depthwise(
            ad.add(h, block_t), layout.view(params, f"blk{i}_dw"), _SCORE_KERNEL_DW, _SCORE_DILATIONS[i]
        )
        ctx = ad.add(ctx, layout.view(params, f"blk{i}_db"))
        mid = ad.tanh(
            ad.add(ad.matmul(ctx, layout.view(params, f"blk{i}_w1")), layout.view(params, f"blk{i}_b1"))
        )
        h = ad.add(
            h,
            ad.add(ad.matmul(mid, layout.view(params, f"blk{i}_w2")), layout.view(params, f"blk{i}_b2")),
        )
    dec = ad.add(ad.matmul(h, layout.view(params, "dec_w")), layout.view(params, "dec_b"))
    out = _overlap_add(ad.mul(dec, _SYNTH_WINDOW), n)

    # Time-conditioned linear bypass of the raw signals.
    coeffs = ad.add(ad.matmul(temb, layout.view(params, "skip_w")), layout.view(params, "skip_b"))
    for j, sig in enumerate((x_t, s_hat, y)):
        out = ad.add(out, ad.mul(coeffs[:, j : j + 1], sig))

    # Noise-conditional output scale 1/sigma(t); floored so queries at the
    # pins (where sigma vanishes) stay finite.
    t_row = np.broadcast_to(np.asarray(t, dtype=np.float64), (b_sz,))
    kappa = 1.0 / np.maximum(_schedule_sigma(t_row, arch), 1e-3)
    return ad.mul(out, kappa[:, None])


def score_forward(m: ScoreModel, x_t, s_hat, y, t: float) -> np.ndarray:
    """Score estimate for one signal triple at diffusion time t in (0, 1]."""
    x_t = np.asarray(x_t, dtype=np.float64)
    s_hat = np.asarray(s_hat, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if not (x_t.shape == s_hat.shape == y.shape) or x_t.ndim != 1:
        raise ShapeError(
            f"expected equal-length vectors, got {x_t.shape}, {s_hat.shape}, {y.shape}"
        )
    if not np.isfinite(t) or not (0.0 < t <= 1.0):
        raise DomainError(f"score model time must lie in (0, 1], got {t}")
    out = score_forward_batch(m.params, x_t[None], s_hat[None], y[None], float(t), m.arch)
    return np.array(ad.value(out)[0])


# ---------------------------------------------------------------------------
# Gradient contract and EMA
# ---------------------------------------------------------------------------


def grad(model, loss_closure) -> np.ndarray:
    """Exact gradient of a scalar loss closure w.r.t. the flat parameters.

    The closure receives the parameter vector (as an autodiff Tensor) and
    must build its scalar from the ops in `gecosep.autodiff` (the model
    forward functions already do).
    """
    p = ad.Tensor(np.array(model.params, dtype=np.float64, copy=True))
    loss = loss_closure(p)
    val = float(ad.value(loss))
    if not np.isfinite(val):
        raise NumericError(f"loss closure returned non-finite value {val}")
    if not isinstance(loss, ad.Tensor):
        # Loss did not depend on the parameters at all.
        return np.zeros_like(p.data)
    loss.backward()
    return p.grad if p.grad is not None else np.zeros_like(p.data)


@dataclass(frozen=True, eq=False)
class EmaState:
    """Exponential moving average shadow of a parameter vector."""

    shadow: np.ndarray
    decay: float = 0.999

    def __post_init__(self):
        if not (0.0 <= self.decay < 1.0):
            raise DomainError(f"EMA decay must lie in [0, 1), got {self.decay}")
        object.__setattr__(self, "shadow", np.asarray(self.shadow, dtype=np.float64))


def ema_update(e: EmaState, params: np.ndarray) -> EmaState:
    """shadow <- decay * shadow + (1 - decay) * params."""
    params = np.asarray(params, dtype=np.float64)
    if params.shape != e.shadow.shape:
        raise ShapeError(f"EMA shape mismatch: {e.shadow.shape} vs {params.shape}")
    return EmaState(shadow=e.decay * e.shadow + (1.0 - e.decay) * params, decay=e.decay)


def ema_swap_in(e: EmaState, model):
    """Return a model whose parameters are the EMA shadow (inference weights)."""
    if e.shadow.shape != model.params.shape:
        raise ShapeError("EMA shadow does not match the model parameter count")
    return replace(model, params=e.shadow.copy())
