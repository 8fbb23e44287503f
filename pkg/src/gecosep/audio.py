"""Waveforms, PCM-16 WAV I/O, synthetic sources, and the noisy-mixture
simulation protocol.

Synthetic generators stand in for recorded speech: three spectrally distinct
kinds (tonal, band_noise, chirp) so that two-source mixtures are separable
by structure.  Mixtures follow the min-length convention (everything is
truncated to the shortest source) and the background noise is rescaled to a
drawn SNR against the summed-source power; relative levels between the two
sources are never touched.
"""

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    DegenerateInputError,
    DomainError,
    FormatError,
    ShapeError,
)
from .ioutil import write_bytes_atomic, write_text_atomic

SOURCE_KINDS = ("tonal", "band_noise", "chirp")

_PCM_SCALE = 32768.0

# Spectrogram export settings.
SPEC_FRAME = 256
SPEC_HOP = 64
SPEC_LOG_FLOOR = 1e-10


@dataclass(frozen=True, eq=False)
class Waveform:
    """A finite real-valued sample sequence with its sample rate."""

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1 or samples.size == 0:
            raise ShapeError(f"samples must be a non-empty 1-D vector, got {samples.shape}")
        if not np.all(np.isfinite(samples)):
            raise DomainError("samples must all be finite")
        if int(self.sample_rate) != self.sample_rate or self.sample_rate <= 0:
            raise DomainError(f"sample_rate must be a positive integer, got {self.sample_rate}")
        object.__setattr__(self, "samples", samples)
        object.__setattr__(self, "sample_rate", int(self.sample_rate))

    def __len__(self) -> int:
        return self.samples.size

    @property
    def duration_s(self) -> float:
        return self.samples.size / self.sample_rate


@dataclass(frozen=True, eq=False)
class MixtureExample:
    """One simulation item: mixture = noise + sum of sources, exactly."""

    mixture: Waveform
    sources: list[Waveform]
    noise: Waveform
    snr_db: float
    id: str = ""

    def __post_init__(self):
        if len(self.sources) != 2:
            raise ShapeError(f"this release is two-source only, got {len(self.sources)}")
        all_w = [self.mixture, *self.sources, self.noise]
        n = len(self.mixture)
        sr = self.mixture.sample_rate
        for w in all_w:
            if len(w) != n or w.sample_rate != sr:
                raise ShapeError("all waveforms in an example must share length and sample rate")
        resid = self.mixture.samples - self.noise.samples
        for s in self.sources:
            resid = resid - s.samples
        if np.max(np.abs(resid)) > 1e-6:
            raise ShapeError(
                f"mixture does not reconstruct from components, max abs error {np.max(np.abs(resid)):.3g}"
            )


# ---------------------------------------------------------------------------
# WAV I/O (RIFF, PCM 16-bit, mono, little-endian).  Hand-parsed so that
# errors can point at the offending byte offset and the quantizer is exact.
# ---------------------------------------------------------------------------


def read_wav(path) -> Waveform:
    """Read a mono PCM-16 WAV file."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 12:
        raise FormatError(f"{path}: file too short for a RIFF header (byte 0)")
    if raw[0:4] != b"RIFF":
        raise FormatError(f"{path}: expected b'RIFF' at byte 0, got {raw[0:4]!r}")
    if raw[8:12] != b"WAVE":
        raise FormatError(f"{path}: expected b'WAVE' at byte 8, got {raw[8:12]!r}")
    sample_rate = None
    payload = None
    pos = 12
    while pos + 8 <= len(raw):
        chunk_id = raw[pos : pos + 4]
        (size,) = struct.unpack_from("<I", raw, pos + 4)
        body_start = pos + 8
        if body_start + size > len(raw):
            raise FormatError(f"{path}: chunk {chunk_id!r} at byte {pos} overruns the file")
        if chunk_id == b"fmt ":
            if size < 16:
                raise FormatError(f"{path}: fmt chunk at byte {pos} too small ({size} bytes)")
            fmt_tag, channels, sample_rate, _rate, _align, bits = struct.unpack_from(
                "<HHIIHH", raw, body_start
            )
            if fmt_tag != 1:
                raise FormatError(
                    f"{path}: unsupported encoding {fmt_tag} at byte {body_start} (PCM only)"
                )
            if channels != 1:
                raise FormatError(
                    f"{path}: {channels} channels at byte {body_start + 2} (mono only)"
                )
            if bits != 16:
                raise FormatError(
                    f"{path}: {bits}-bit samples at byte {body_start + 14} (16-bit only)"
                )
        elif chunk_id == b"data":
            payload = raw[body_start : body_start + size]
        pos = body_start + size + (size & 1)
    if sample_rate is None:
        raise FormatError(f"{path}: no fmt chunk found")
    if payload is None:
        raise FormatError(f"{path}: no data chunk found")
    if len(payload) < 2:
        raise FormatError(f"{path}: empty data chunk")
    ints = np.frombuffer(payload[: len(payload) - (len(payload) & 1)], dtype="<i2")
    return Waveform(samples=ints.astype(np.float64) / _PCM_SCALE, sample_rate=sample_rate)


def write_wav(path, w: Waveform) -> None:
    """Write a mono PCM-16 WAV file (atomic write)."""
    ints = np.clip(np.rint(w.samples * _PCM_SCALE), -32768, 32767).astype("<i2")
    payload = ints.tobytes()
    header = b"RIFF" + struct.pack("<I", 36 + len(payload)) + b"WAVE"
    header += b"fmt " + struct.pack(
        "<IHHIIHH", 16, 1, 1, w.sample_rate, w.sample_rate * 2, 2, 16
    )
    header += b"data" + struct.pack("<I", len(payload))
    write_bytes_atomic(path, header + payload)


# ---------------------------------------------------------------------------
# Synthetic sources
# ---------------------------------------------------------------------------


def _peak_normalize(x: np.ndarray, peak: float = 0.7) -> np.ndarray:
    return x * (peak / np.max(np.abs(x)))


def synth_source(kind: str, duration_s: float, sample_rate: int, seed) -> Waveform:
    """Deterministically generate one synthetic source.

    tonal       three harmonics of a random fundamental, shallow slow
                amplitude modulation; partial frequencies sit on the
                4096-point DFT grid so their energy stays concentrated
    band_noise  Gaussian noise confined to a random sub-band
    chirp       linear frequency sweep

    All kinds are peak-normalized to 0.7.
    """
    if duration_s <= 0:
        raise DomainError(f"duration_s must be > 0, got {duration_s}")
    if kind not in SOURCE_KINDS:
        raise DomainError(f"unknown source kind {kind!r}, expected one of {SOURCE_KINDS}")
    n = int(round(duration_s * sample_rate))
    if n < 2:
        raise DomainError("duration too short for the sample rate")
    rng = np.random.default_rng((SOURCE_KINDS.index(kind), seed))
    t = np.arange(n) / sample_rate

    if kind == "tonal":
        grid = sample_rate / 4096.0
        k0 = int(rng.integers(int(70 / grid), int(500 / grid)))
        x = np.zeros(n)
        for h in (1, 2, 3):
            amp = rng.uniform(0.3, 1.0) / h
            phase = rng.uniform(0.0, 2.0 * np.pi)
            x += amp * np.sin(2.0 * np.pi * (h * k0 * grid) * t + phase)
        depth = rng.uniform(0.05, 0.2)
        env_phase = rng.uniform(0.0, 2.0 * np.pi)
        env = 1.0 - depth * np.cos(2.0 * np.pi * t / (n / sample_rate) + env_phase)
        x *= env
    elif kind == "band_noise":
        white = rng.standard_normal(n)
        spectrum = np.fft.rfft(white)
        freqs = np.fft.rfftfreq(n, d=1.0 / sample_rate)
        f_lo = rng.uniform(300.0, 2200.0)
        f_hi = min(f_lo + rng.uniform(300.0, 1200.0), 0.45 * sample_rate)
        spectrum[(freqs < f_lo) | (freqs > f_hi)] = 0.0
        x = np.fft.irfft(spectrum, n)
    else:  # chirp
        f_start = rng.uniform(100.0, 900.0)
        f_end = rng.uniform(1200.0, 0.42 * sample_rate)
        inst_freq = f_start + (f_end - f_start) * t / t[-1]
        phase = 2.0 * np.pi * np.cumsum(inst_freq) / sample_rate
        x = np.sin(phase + rng.uniform(0.0, 2.0 * np.pi))

    return Waveform(samples=_peak_normalize(x), sample_rate=sample_rate)


def white_noise(duration_s: float, sample_rate: int, seed) -> Waveform:
    """Full-band Gaussian background noise, peak-normalized to 0.7."""
    n = int(round(duration_s * sample_rate))
    if n < 2:
        raise DomainError("duration too short for the sample rate")
    rng = np.random.default_rng(seed)
    return Waveform(samples=_peak_normalize(rng.standard_normal(n)), sample_rate=sample_rate)


# ---------------------------------------------------------------------------
# Mixing
# ---------------------------------------------------------------------------


def mix(sources, noise: Waveform, snr_db: float, example_id: str = "") -> MixtureExample:
    """Combine sources and noise at a prescribed SNR.

    Sources are truncated to the shortest source (min-length convention)
    and the noise to match.  The noise is rescaled so that the ratio of
    summed-source power to noise power equals snr_db; the sources keep
    their relative levels.
    """
    if not sources:
        raise ShapeError("need at least one source")
    sr = sources[0].sample_rate
    for w in [*sources, noise]:
        if w.sample_rate != sr:
            raise ShapeError("sample-rate mismatch between mixture components")
    n = min(len(s) for s in sources)
    if len(noise) < max(len(s) for s in sources):
        raise ShapeError("noise must be at least as long as the longest source")
    cut = [Waveform(s.samples[:n], sr) for s in sources]
    speech = np.sum([s.samples for s in cut], axis=0)
    noise_cut = noise.samples[:n]
    p_speech = float(np.mean(speech**2))
    p_noise = float(np.mean(noise_cut**2))
    if p_speech == 0.0 or p_noise == 0.0:
        raise DegenerateInputError("zero-power speech or noise cannot be mixed at an SNR")
    gain = float(np.sqrt(p_speech / (p_noise * 10.0 ** (snr_db / 10.0))))
    scaled_noise = gain * noise_cut
    mixture = speech + scaled_noise
    return MixtureExample(
        mixture=Waveform(mixture, sr),
        sources=cut,
        noise=Waveform(scaled_noise, sr),
        snr_db=float(snr_db),
        id=example_id,
    )


@dataclass(frozen=True)
class DatasetConfig:
    """Knobs of the simulation protocol."""

    sample_rate: int = 8000
    duration_min_s: float = 0.5
    duration_max_s: float = 0.7
    snr_min_db: float = -6.0
    snr_max_db: float = 3.0
    kinds: tuple[str, ...] = SOURCE_KINDS

    def __post_init__(self):
        if not (0 < self.duration_min_s <= self.duration_max_s):
            raise DomainError("need 0 < duration_min_s <= duration_max_s")
        if self.snr_min_db > self.snr_max_db:
            raise DomainError("need snr_min_db <= snr_max_db")
        for k in self.kinds:
            if k not in SOURCE_KINDS:
                raise DomainError(f"unknown source kind {k!r}")
        if len(self.kinds) < 2:
            raise DomainError("need at least two source kinds for distinct speakers")


def build_dataset(n_examples: int, cfg: DatasetConfig, seed) -> list[MixtureExample]:
    """Simulate n_examples mixtures, deterministically per (seed, index).

    Each example draws two distinct source kinds, per-source durations,
    a background noise track, and an SNR uniform on
    [snr_min_db, snr_max_db].
    """
    if n_examples < 1:
        raise DomainError(f"n_examples must be >= 1, got {n_examples}")
    examples = []
    for idx in range(n_examples):
        rng = np.random.default_rng((seed, idx))
        kind_ids = rng.choice(len(cfg.kinds), size=2, replace=False)
        durations = rng.uniform(cfg.duration_min_s, cfg.duration_max_s, size=2)
        source_seeds = rng.integers(0, 2**31, size=2)
        noise_seed = int(rng.integers(0, 2**31))
        snr_db = float(rng.uniform(cfg.snr_min_db, cfg.snr_max_db))
        sources = [
            synth_source(cfg.kinds[int(k)], float(d), cfg.sample_rate, int(s))
            for k, d, s in zip(kind_ids, durations, source_seeds)
        ]
        noise = white_noise(float(np.max(durations)), cfg.sample_rate, noise_seed)
        examples.append(mix(sources, noise, snr_db, example_id=f"ex{idx:05d}"))
    return examples


# ---------------------------------------------------------------------------
# Spectrogram export
# ---------------------------------------------------------------------------


def spectrogram(w: Waveform) -> np.ndarray:
    """Log-magnitude spectrogram, shape (bins, frames); frame 256, hop 64."""
    n = len(w)
    if n < SPEC_FRAME:
        raise ShapeError(f"need at least {SPEC_FRAME} samples, got {n}")
    n_frames = (n - SPEC_FRAME) // SPEC_HOP + 1
    window = np.hanning(SPEC_FRAME)
    frames = np.stack(
        [w.samples[i * SPEC_HOP : i * SPEC_HOP + SPEC_FRAME] * window for i in range(n_frames)]
    )
    mag = np.abs(np.fft.rfft(frames, axis=1)).T
    return 20.0 * np.log10(mag + SPEC_LOG_FLOOR)


def spectrogram_export(w: Waveform, path) -> None:
    """Write the spectrogram as CSV: a header line with dims, then one
    comma-separated row per frequency bin."""
    spec = spectrogram(w)
    lines = [f"# bins={spec.shape[0]} frames={spec.shape[1]} frame={SPEC_FRAME} hop={SPEC_HOP}"]
    for row in spec:
        lines.append(",".join(f"{v:.6f}" for v in row))
    write_text_atomic(path, "\n".join(lines) + "\n")
