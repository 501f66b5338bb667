"""All-pole envelopes: reflection-coefficient parameterisation, Levinson
recursions, LPC analysis and STFT-domain (inverse) filtering.

Sign conventions
----------------
``levinson_forward`` builds ``A(z) = 1 + sum_j a[j] z^-j`` with the step
``a_i = [a_{i-1}, 0] + k_i * reverse([a_{i-1}, 0])``. ``levinson_durbin``
returns PARCOR coefficients in the analysis convention (``k_1 = r1 / r0``),
which is the negative of the synthesis convention: ``levinson_forward(-k)``
reproduces the analysed polynomial.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dsp import AudioBuffer, ComplexSpectrogram, StftConfig, frame_signal, istft, stft
from .errors import DataError, UnstableFilterError

K_MAX = 1.0 - 1e-7
SILENCE_FLOOR = 1e-20


def reparameterize(theta, log_gain):
    """Map unconstrained parameters to stable reflection coefficients and a
    positive gain: ``k = clip(tanh(theta))``, ``g = exp(log_gain)``."""
    theta = np.asarray(theta, dtype=np.float64)
    log_gain = np.asarray(log_gain, dtype=np.float64)
    if not (np.all(np.isfinite(theta)) and np.all(np.isfinite(log_gain))):
        raise DataError("reparameterize received non-finite parameters")
    k = np.clip(np.tanh(theta), -K_MAX, K_MAX)
    return k, np.exp(log_gain)


def levinson_forward(k, return_steps=False):
    """Step-up recursion from reflection coefficients to predictor polynomial.

    Works on the last axis; ``k`` of shape ``(..., P)`` gives ``a`` of shape
    ``(..., P + 1)`` with ``a[..., 0] == 1``. With ``return_steps`` the list of
    intermediate polynomials ``a_0 .. a_P`` is returned too (used by the
    reverse-mode pass).
    """
    k = np.asarray(k, dtype=np.float64)
    if np.any(np.abs(k) >= 1.0):
        raise UnstableFilterError("reflection coefficient with |k| >= 1")
    a = np.ones(k.shape[:-1] + (1,))
    steps = [a]
    for i in range(k.shape[-1]):
        ext = np.concatenate([a, np.zeros(a.shape[:-1] + (1,))], axis=-1)
        a = ext + k[..., i:i + 1] * ext[..., ::-1]
        steps.append(a)
    return (a, steps) if return_steps else a


def levinson_backward(a):
    """Step-down recursion: predictor polynomial back to reflection coefficients."""
    a = np.array(a, dtype=np.float64)
    if not np.allclose(a[..., 0], 1.0, rtol=0, atol=1e-12):
        raise DataError("predictor polynomial must have a[0] == 1")
    order = a.shape[-1] - 1
    k = np.zeros(a.shape[:-1] + (order,))
    for i in range(order, 0, -1):
        ki = a[..., i]
        if np.any(np.abs(ki) >= 1.0):
            raise UnstableFilterError(f"polynomial is unstable (|k_{i}| >= 1)")
        k[..., i - 1] = ki
        head = a[..., :i]
        a = (head - ki[..., None] * a[..., i:0:-1]) / (1.0 - ki * ki)[..., None]
    return k


@dataclass
class LpcResult:
    a: np.ndarray
    k: np.ndarray
    pred_err: np.ndarray
    clamped: np.ndarray

    @property
    def gain(self):
        return np.sqrt(np.maximum(self.pred_err, 0.0))


def levinson_durbin(autocorr, order=None):
    """Solve the normal equations for a minimum-phase predictor.

    ``autocorr`` has shape ``(..., L)``; ``order`` defaults to ``L - 1``.
    Returns an :class:`LpcResult` with direct-form ``a`` (``a[0] == 1``),
    PARCOR ``k`` and the final prediction error ``r0 * prod(1 - k_i^2)``.
    Coefficients that numerically reach unit magnitude are clamped to
    ``K_MAX`` and the frame is flagged in ``clamped``.
    """
    r = np.asarray(autocorr, dtype=np.float64)
    order = r.shape[-1] - 1 if order is None else order
    if r.shape[-1] < order + 1:
        raise DataError(f"need {order + 1} autocorrelation lags, got {r.shape[-1]}")
    if np.any(r[..., 0] <= 0):
        raise DataError("autocorrelation r[0] must be positive")
    batch = r.shape[:-1]
    a = np.zeros(batch + (order + 1,))
    a[..., 0] = 1.0
    k = np.zeros(batch + (order,))
    err = r[..., 0].copy()
    clamped = np.zeros(batch, dtype=bool)
    for i in range(1, order + 1):
        acc = np.sum(a[..., :i] * r[..., i:0:-1], axis=-1)
        ki = acc / err
        over = np.abs(ki) >= K_MAX
        if np.any(over):
            clamped |= over
            ki = np.clip(ki, -K_MAX, K_MAX)
        k[..., i - 1] = ki
        prev = a[..., :i + 1].copy()
        a[..., 1:i + 1] = prev[..., 1:i + 1] - ki[..., None] * prev[..., i - 1::-1]
        err = err * (1.0 - ki * ki)
    return LpcResult(a=a, k=k, pred_err=err, clamped=clamped)


def autocorrelation(frames, max_lag):
    """Biased (unnormalised) autocorrelation of each row for lags ``0..max_lag``."""
    x = np.asarray(frames, dtype=np.float64)
    n = x.shape[-1]
    return np.stack([np.sum(x[..., :n - lag] * x[..., lag:], axis=-1) for lag in range(max_lag + 1)],
                    axis=-1)


@dataclass(eq=False)
class AllPoleFrameSet:
    """Per-frame all-pole filters ``g / A(z)``.

    ``theta`` is None when the set was not built from unconstrained
    parameters. ``silent`` marks analysis frames that fell below the energy
    floor (identity filter, unit gain).
    """

    k: np.ndarray
    a: np.ndarray
    log_gain: np.ndarray
    theta: np.ndarray | None = None
    silent: np.ndarray | None = None

    def __post_init__(self):
        self.k = np.atleast_2d(np.asarray(self.k, dtype=np.float64))
        self.a = np.atleast_2d(np.asarray(self.a, dtype=np.float64))
        self.log_gain = np.atleast_1d(np.asarray(self.log_gain, dtype=np.float64))
        if self.a.shape != (self.k.shape[0], self.k.shape[1] + 1):
            raise DataError(f"inconsistent shapes k{self.k.shape} a{self.a.shape}")
        if self.log_gain.shape != (self.k.shape[0],):
            raise DataError(f"log_gain shape {self.log_gain.shape} != ({self.k.shape[0]},)")
        if self.silent is None:
            self.silent = np.zeros(self.k.shape[0], dtype=bool)

    @classmethod
    def from_theta(cls, theta, log_gain):
        k, _ = reparameterize(theta, log_gain)
        return cls(k=k, a=levinson_forward(k), log_gain=log_gain, theta=np.asarray(theta, float))

    @classmethod
    def from_reflection(cls, k, log_gain):
        return cls(k=k, a=levinson_forward(k), log_gain=log_gain)

    @classmethod
    def from_polynomial(cls, a, gain):
        gain = np.asarray(gain, dtype=np.float64)
        if np.any(gain <= 0):
            raise DataError("gain must be positive")
        a = np.atleast_2d(a)
        return cls(k=levinson_backward(a), a=a, log_gain=np.log(gain))

    @classmethod
    def identity(cls, num_frames, order):
        a = np.zeros((num_frames, order + 1))
        a[:, 0] = 1.0
        return cls(k=np.zeros((num_frames, order)), a=a, log_gain=np.zeros(num_frames))

    @property
    def order(self) -> int:
        return self.k.shape[1]

    @property
    def num_frames(self) -> int:
        return self.k.shape[0]

    @property
    def gain(self) -> np.ndarray:
        return np.exp(self.log_gain)

    def with_polynomial(self, a):
        """Same gains and flags, new predictor polynomials."""
        a = np.atleast_2d(np.asarray(a, dtype=np.float64))
        return AllPoleFrameSet(k=levinson_backward(a), a=a, log_gain=self.log_gain.copy(),
                               silent=self.silent.copy())

    def check(self, tol=1e-10):
        """Assert the stability, normalisation and k/a consistency invariants."""
        if np.any(np.abs(self.k) >= 1.0):
            raise UnstableFilterError("reflection coefficient with |k| >= 1")
        if not np.all(self.a[:, 0] == 1.0):
            raise DataError("a[:, 0] must be exactly 1")
        if not np.all(np.isfinite(self.log_gain)):
            raise DataError("non-finite gain")
        err = np.max(np.abs(levinson_forward(self.k) - self.a)) if self.a.size else 0.0
        if err > tol:
            raise DataError(f"a is not the Levinson image of k (max error {err:.3g})")


def analyze_envelopes(audio: AudioBuffer, config: StftConfig | None = None, order: int = 10,
                      pre_emphasis: float | None = None) -> AllPoleFrameSet:
    """Autocorrelation-method LPC on the STFT frame grid (Hann-windowed).

    Gain is ``sqrt(prediction error)``; frames under the silence floor get
    the identity filter with unit gain and are marked ``silent``.
    """
    config = config or StftConfig()
    x = audio.samples
    if pre_emphasis:
        x = np.append(x[0], x[1:] - pre_emphasis * x[:-1])
    frames = frame_signal(x, config) * config.window()
    r = autocorrelation(frames, order)
    silent = r[:, 0] <= SILENCE_FLOOR
    r_safe = r.copy()
    r_safe[silent] = 0.0
    r_safe[silent, 0] = 1.0
    lpc = levinson_durbin(r_safe, order)
    a = lpc.a
    log_gain = 0.5 * np.log(np.maximum(lpc.pred_err, SILENCE_FLOOR))
    log_gain[silent] = 0.0
    return AllPoleFrameSet(k=-lpc.k, a=a, log_gain=log_gain, silent=silent)


def envelope_spectrum(frames: AllPoleFrameSet, config: StftConfig | None = None,
                      num_samples: int = 0) -> ComplexSpectrogram:
    """``H[m] = g[m] / (FFT(a[m], N) + eps)``, one-sided."""
    config = config or StftConfig()
    if config.fft_size < frames.order + 1:
        raise DataError(f"fft_size {config.fft_size} too small for order {frames.order}")
    denom = np.fft.rfft(frames.a, n=config.fft_size, axis=1) + config.epsilon
    return ComplexSpectrogram(frames.gain[:, None] / denom, config, num_samples)


def _check_frame_count(spec: ComplexSpectrogram, frames: AllPoleFrameSet):
    if spec.num_frames != frames.num_frames:
        raise DataError(
            f"frame count mismatch: signal has {spec.num_frames} STFT frames, "
            f"filter set has {frames.num_frames}"
        )


def filter_stft(excitation: AudioBuffer, frames: AllPoleFrameSet,
                config: StftConfig | None = None) -> AudioBuffer:
    """Filter by complex multiplication in the STFT domain: ISTFT(H * STFT(e))."""
    config = config or StftConfig()
    e = stft(excitation, config)
    _check_frame_count(e, frames)
    h = envelope_spectrum(frames, config)
    out = ComplexSpectrogram(h.data * e.data, config, e.num_samples)
    return istft(out, config, excitation.sample_rate)


def residual_spectrogram(audio: AudioBuffer, frames: AllPoleFrameSet,
                         config: StftConfig | None = None) -> ComplexSpectrogram:
    """STFT-domain residual ``STFT(x) / H``."""
    config = config or StftConfig()
    x = stft(audio, config)
    _check_frame_count(x, frames)
    h = envelope_spectrum(frames, config)
    return ComplexSpectrogram(x.data / h.data, config, x.num_samples)


def inverse_filter(audio: AudioBuffer, frames: AllPoleFrameSet,
                   config: StftConfig | None = None) -> AudioBuffer:
    """Residual excitation ``ISTFT(STFT(x) / H)``."""
    config = config or StftConfig()
    res = residual_spectrogram(audio, frames, config)
    return istft(res, config, audio.sample_rate)


def synthesize_from_residual(residual: ComplexSpectrogram, frames: AllPoleFrameSet,
                             sample_rate: int) -> AudioBuffer:
    """Refilter an STFT-domain residual with ``frames``: ISTFT(H * R)."""
    _check_frame_count(residual, frames)
    h = envelope_spectrum(frames, residual.config)
    out = ComplexSpectrogram(h.data * residual.data, residual.config, residual.num_samples)
    return istft(out, residual.config, sample_rate)
