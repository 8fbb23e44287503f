"""Scale-invariant SNR, its improvement over the mixture, and permutation
resolution between estimated and reference sources.

si_snr zero-means both signals, projects the estimate onto the reference,
and reports 10*log10 of projection power over residual power.  Perfect
reconstruction would be +inf, so the residual power is floored at
1e-8 * projection power, capping the value at +80 dB; no attainable
separation quality comes anywhere near that.
"""

from dataclasses import dataclass
from itertools import permutations

import numpy as np

from .errors import DegenerateInputError, ShapeError

CAP_DB = 80.0
_ERROR_POWER_FLOOR = 1e-8


@dataclass(frozen=True)
class PitResult:
    """Best source/estimate assignment found by exhaustive search.

    permutation[k] is the estimate index paired with reference k; total is
    the sum of the per-source SI-SNR values under that pairing.
    """

    permutation: tuple[int, ...]
    per_source_sisnr: tuple[float, ...]
    total: float


def _zero_mean_pair(estimate, reference) -> tuple[np.ndarray, np.ndarray]:
    est = np.asarray(estimate, dtype=np.float64)
    ref = np.asarray(reference, dtype=np.float64)
    if est.shape != ref.shape:
        raise ShapeError(f"shape mismatch: {est.shape} vs {ref.shape}")
    if est.ndim != 1 or est.size < 2:
        raise ShapeError(f"si_snr needs 1-D vectors of length >= 2, got {est.shape}")
    return est - est.mean(), ref - ref.mean()


def si_snr(estimate, reference) -> float:
    """Scale-invariant SNR of estimate against reference, in dB."""
    est, ref = _zero_mean_pair(estimate, reference)
    ref_power = float(ref @ ref)
    if ref_power == 0.0:
        raise DegenerateInputError("reference has zero power after zero-meaning")
    scale = float(est @ ref) / ref_power
    proj_power = scale * scale * ref_power
    if proj_power == 0.0:
        # Estimate orthogonal to reference: mirror the +80 dB cap downward
        # rather than returning -inf.
        return -CAP_DB
    residual = est - scale * ref
    err_power = max(float(residual @ residual), _ERROR_POWER_FLOOR * proj_power)
    return float(10.0 * np.log10(proj_power / err_power))


def si_snr_improvement(estimate, reference, mixture) -> float:
    """si_snr(estimate, reference) - si_snr(mixture, reference), in dB."""
    return si_snr(estimate, reference) - si_snr(mixture, reference)


def pit_assign(estimates, references) -> PitResult:
    """Exhaustively search all K! pairings and keep the best total SI-SNR.

    Ties break toward the lexicographically smallest permutation (the
    search enumerates in lexicographic order and only strict improvements
    replace the incumbent).
    """
    k = len(references)
    if k < 1 or len(estimates) != k:
        raise ShapeError(
            f"need equal nonempty lists, got {len(estimates)} estimates "
            f"and {k} references"
        )
    # Precompute the K x K table; each permutation then just sums entries.
    table = np.empty((k, k))
    for i, est in enumerate(estimates):
        for j, ref in enumerate(references):
            table[i, j] = si_snr(est, ref)
    best_perm = None
    best_total = -np.inf
    for perm in permutations(range(k)):
        total = float(sum(table[perm[j], j] for j in range(k)))
        if total > best_total:
            best_total = total
            best_perm = perm
    per_source = tuple(float(table[best_perm[j], j]) for j in range(k))
    return PitResult(
        permutation=best_perm, per_source_sisnr=per_source, total=best_total
    )


def pit_loss(estimates, references) -> float:
    """Negated best-permutation total SI-SNR; the separator's objective."""
    return -pit_assign(estimates, references).total
