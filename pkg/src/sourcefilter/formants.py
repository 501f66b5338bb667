"""Polynomial roots, pole/formant conversion, formant tracks and pole relocation."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import median_filter

from .allpole import analyze_envelopes
from .dsp import AudioBuffer, StftConfig
from .errors import DataError, FormantCollisionError, NumericalError

log = logging.getLogger(__name__)

MIN_FREQ_HZ = 50.0
MAX_BANDWIDTH_HZ = 700.0
RELOCATE_MARGIN_HZ = 60.0
NUM_FORMANTS = 4


@dataclass
class RootResult:
    roots: np.ndarray
    converged: np.ndarray
    iterations: int
    residual_ok: np.ndarray | None = None

    @property
    def all_converged(self) -> bool:
        return bool(np.all(self.converged))


def durand_kerner(poly, max_iter=100, tol=1e-12, residual_tol=1e-8) -> RootResult:
    """All roots of ``poly`` (highest power first) by Weierstrass iteration.

    ``poly`` may be batched as ``(..., D + 1)``. Each row stops updating once
    its largest root movement drops below ``tol``. A row is reported as
    converged only if it stopped moving *and* every root satisfies
    ``|p(z)| / ||p||_1 < residual_tol``.
    """
    p = np.asarray(poly, dtype=np.complex128)
    if p.shape[-1] < 2:
        raise DataError("polynomial must have degree >= 1")
    lead = p[..., :1]
    if np.any(lead == 0):
        raise DataError("leading coefficient must be nonzero")
    batch = p.shape[:-1]
    p2 = p.reshape(-1, p.shape[-1])
    monic = p2 / p2[:, :1]
    degree = p.shape[-1] - 1

    z = np.tile((0.4 + 0.9j) ** np.arange(1, degree + 1), (monic.shape[0], 1))
    active = np.ones(monic.shape[0], dtype=bool)
    off_diag = ~np.eye(degree, dtype=bool)
    iterations = 0
    for iterations in range(1, max_iter + 1):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            iterations -= 1
            break
        za = z[idx]
        values = _horner(monic[idx], za)
        diffs = za[:, :, None] - za[:, None, :]
        denom = np.prod(np.where(off_diag, diffs, 1.0), axis=-1)
        step = values / denom
        z[idx] = za - step
        moved = np.max(np.abs(step), axis=-1)
        active[idx[moved < tol]] = False

    resid = np.abs(_horner(monic, z)) / np.sum(np.abs(monic), axis=-1, keepdims=True)
    small = np.all(resid < residual_tol, axis=-1) & np.all(np.isfinite(z), axis=-1)
    ok = ~active & small
    return RootResult(z.reshape(batch + (degree,)), ok.reshape(batch), iterations,
                      small.reshape(batch))


def _horner(coeffs, z):
    out = np.broadcast_to(coeffs[:, :1], z.shape).astype(np.complex128)
    for c in coeffs[:, 1:].T:
        out = out * z + c[:, None]
    return out


@dataclass(frozen=True)
class Formant:
    frequency: float
    bandwidth: float
    pole_radius: float
    pole_angle: float

    @classmethod
    def from_root(cls, root, fs):
        radius = abs(root)
        angle = float(np.angle(root))
        return cls(angle * fs / (2 * np.pi), -np.log(radius) * fs / np.pi, radius, angle)


def _candidate_mask(roots, fs):
    angle = np.angle(roots)
    radius = np.abs(roots)
    freq = angle * fs / (2 * np.pi)
    with np.errstate(divide="ignore"):
        bw = -np.log(radius) * fs / np.pi
    return ((roots.imag > 0) & (freq >= MIN_FREQ_HZ) & (freq <= fs / 2 - MIN_FREQ_HZ)
            & (bw > 0) & (bw <= MAX_BANDWIDTH_HZ))


def roots_to_formants(roots, fs) -> list[Formant]:
    """Formant candidates from polynomial roots, sorted by frequency.

    One root per conjugate pair is kept (positive imaginary part). Roots
    below 50 Hz, above ``fs/2 - 50`` Hz, outside the unit circle, or with
    bandwidth over 700 Hz are dropped.
    """
    roots = np.asarray(roots, dtype=np.complex128).ravel()
    keep = roots[_candidate_mask(roots, fs)]
    return sorted((Formant.from_root(r, fs) for r in keep), key=lambda f: f.frequency)


@dataclass(eq=False)
class FormantTrack:
    """Per-frame F1..F4.

    ``frequencies`` and ``bandwidths`` are postprocessed (gaps interpolated,
    kernel-3 median filtered); ``raw_frequencies`` keep NaN where the frame
    produced fewer than four candidates, and ``valid`` flags those frames.
    """

    frequencies: np.ndarray
    bandwidths: np.ndarray
    raw_frequencies: np.ndarray
    valid: np.ndarray
    fs: int

    @property
    def num_frames(self) -> int:
        return self.frequencies.shape[0]


def fill_gaps(values, valid):
    """Linear interpolation across invalid entries along axis 0, edges held."""
    values = np.asarray(values, dtype=np.float64)
    out = values.copy()
    idx = np.arange(values.shape[0])
    cols = values.reshape(values.shape[0], -1)
    ok = np.asarray(valid).reshape(values.shape[0], -1)
    flat = out.reshape(values.shape[0], -1)
    for c in range(cols.shape[1]):
        good = ok[:, c]
        if not np.any(good):
            raise DataError("no valid values to interpolate from")
        flat[:, c] = np.interp(idx, idx[good], cols[good, c])
    return out


def median_smooth(values, kernel=3):
    """Running median along time; edge frames use nearest-value padding."""
    values = np.asarray(values, dtype=np.float64)
    size = (kernel,) + (1,) * (values.ndim - 1)
    return median_filter(values, size=size, mode="nearest")


def _frame_candidates(roots, fs, n=NUM_FORMANTS):
    """Lowest ``n`` candidates per frame as (freq, bw, index-into-roots), NaN-padded."""
    m = roots.shape[0]
    freqs = np.full((m, n), np.nan)
    bws = np.full((m, n), np.nan)
    where = np.full((m, n), -1, dtype=int)
    mask = _candidate_mask(roots, fs)
    angle = np.angle(roots)
    radius = np.abs(roots)
    for i in range(m):
        sel = np.flatnonzero(mask[i])
        sel = sel[np.argsort(angle[i, sel], kind="stable")][:n]
        freqs[i, :sel.size] = angle[i, sel] * fs / (2 * np.pi)
        bws[i, :sel.size] = -np.log(radius[i, sel]) * fs / np.pi
        where[i, :sel.size] = sel
    return freqs, bws, where


def extract_formant_track(audio: AudioBuffer, config: StftConfig | None = None, order: int = 10,
                          pre_emphasis: float = 0.0) -> FormantTrack:
    """LPC formant track on the STFT frame grid.

    Per frame: pre-emphasis, Hann window, autocorrelation, order-``order``
    Levinson-Durbin, Durand-Kerner roots, candidate gating, lowest four.
    Frames with fewer than four candidates (or silent) are invalid and get
    interpolated before kernel-3 median smoothing.
    """
    config = config or StftConfig()
    env = analyze_envelopes(audio, config, order=order, pre_emphasis=pre_emphasis)
    if np.all(env.silent):
        raise DataError("signal is silent; no formants to extract")
    res = durand_kerner(env.a)
    if not res.all_converged:
        log.debug("root finding did not converge on %d frames", int(np.sum(~res.converged)))
    freqs, bws, _ = _frame_candidates(res.roots, audio.sample_rate)
    valid_frame = np.all(np.isfinite(freqs), axis=1) & ~env.silent
    raw = np.where(valid_frame[:, None], freqs, np.nan)
    if not np.any(valid_frame):
        raise DataError("no frame produced four formant candidates")
    valid = np.repeat(valid_frame[:, None], NUM_FORMANTS, axis=1)
    filled = median_smooth(fill_gaps(raw, valid))
    bw_filled = median_smooth(fill_gaps(np.where(valid, bws, np.nan), valid))
    order_idx = np.argsort(filled, axis=1, kind="stable")
    filled = np.take_along_axis(filled, order_idx, axis=1)
    bw_filled = np.take_along_axis(bw_filled, order_idx, axis=1)
    return FormantTrack(filled, bw_filled, raw, valid, audio.sample_rate)


def relocate_formants(a, fs, scale=None, targets=None, roots=None):
    """Move the formant poles of one predictor polynomial.

    ``scale`` holds per-formant frequency factors (F1..F4) and ``targets``
    absolute frequencies in Hz; NaN or None entries leave a formant where it
    is. Radii and non-formant roots are untouched. New frequencies are
    clamped to ``[60, fs/2 - 60]`` Hz; if the result no longer keeps
    F1 < F2 < F3 < F4 a FormantCollisionError names the pair. Formant slots
    the frame does not have are ignored. Returns a new array; if nothing
    moves, the input coefficients are returned unchanged.
    """
    a = np.asarray(a, dtype=np.float64)
    if roots is None:
        res = durand_kerner(a)
        if not np.all(res.residual_ok):
            raise NumericalError("root finding did not converge during relocation")
        roots = res.roots
    roots = np.array(roots, dtype=np.complex128)
    freqs, _, where = _frame_candidates(roots[None, :], fs)
    freqs, where = freqs[0], where[0]
    present = where >= 0

    new_freqs = freqs.copy()
    for i in range(NUM_FORMANTS):
        if not present[i]:
            continue
        if scale is not None and i < len(scale) and scale[i] is not None and np.isfinite(scale[i]):
            new_freqs[i] = freqs[i] * scale[i]
        if targets is not None and i < len(targets) and targets[i] is not None \
                and np.isfinite(targets[i]):
            new_freqs[i] = targets[i]
    lo, hi = RELOCATE_MARGIN_HZ, fs / 2 - RELOCATE_MARGIN_HZ
    moved = present & (new_freqs != freqs)
    new_freqs[moved] = np.clip(new_freqs[moved], lo, hi)
    if not np.any(moved & (new_freqs != freqs)):
        return a.copy()

    f = new_freqs[present]
    slots = np.flatnonzero(present)
    for j in range(len(f) - 1):
        if not f[j] < f[j + 1]:
            pair = (int(slots[j]) + 1, int(slots[j + 1]) + 1)
            raise FormantCollisionError(
                f"relocation puts F{pair[0]} ({f[j]:.1f} Hz) at or above F{pair[1]} "
                f"({f[j + 1]:.1f} Hz)", pair=pair)

    new_roots, partner = _conjugate_closed(roots)
    for i in np.flatnonzero(moved):
        idx = where[i]
        new_z = abs(new_roots[idx]) * np.exp(1j * 2 * np.pi * new_freqs[i] / fs)
        new_roots[idx] = new_z
        new_roots[partner[idx]] = np.conj(new_z)
    poly = np.poly(new_roots) * a[0]
    imag = np.max(np.abs(poly.imag))
    if imag > 1e-12 * max(1.0, np.max(np.abs(poly.real))):
        raise NumericalError(f"relocated polynomial lost conjugate symmetry (imag {imag:.3g})")
    out = poly.real
    out[0] = a[0]
    return out


def _conjugate_closed(roots, real_tol=1e-7):
    """Snap a root set of a real polynomial to exact conjugate symmetry.

    Upper-half roots are matched to their nearest lower-half roots, which are
    replaced by exact conjugates; near-real roots lose their imaginary part.
    Returns the closed set and, for each upper-half index, its partner index.
    """
    out = roots.copy()
    tol = real_tol * np.maximum(1.0, np.abs(roots))
    upper = np.flatnonzero(roots.imag > tol)
    lower = list(np.flatnonzero(roots.imag < -tol))
    real = np.abs(roots.imag) <= tol
    out[real] = out[real].real
    if len(upper) != len(lower):
        raise NumericalError("root set is not closed under conjugation")
    partner = {}
    for i in upper[np.argsort(-roots[upper].imag)]:
        j = min(lower, key=lambda c: abs(roots[c] - np.conj(roots[i])))
        lower.remove(j)
        out[j] = np.conj(out[i])
        partner[int(i)] = int(j)
    return out, partner


def relocate_frames(a, fs, scale=None, targets=None):
    """Apply :func:`relocate_formants` to every row of ``a``.

    Roots are found for all frames in one batched call. Frames whose roots
    miss the residual bound are left unchanged.
    """
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    res = durand_kerner(a)
    out = a.copy()
    for m in range(a.shape[0]):
        if not res.residual_ok[m]:
            log.warning("frame %d: root finding did not converge, formants left in place", m)
            continue
        try:
            out[m] = relocate_formants(a[m], fs, scale=scale, targets=targets, roots=res.roots[m])
        except FormantCollisionError as exc:
            raise FormantCollisionError(f"frame {m}: {exc}", frame=m, pair=exc.pair) from exc
    return out
