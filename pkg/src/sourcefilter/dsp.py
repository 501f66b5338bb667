"""Framing, windowing and weighted overlap-add STFT/ISTFT.

Frames are centred: frame ``m`` is centred on sample ``m * hop``, and the
signal is zero-padded by half a window on both sides. Spectra are stored
one-sided (``fft_size // 2 + 1`` bins); the negative-frequency half is
implied by conjugate symmetry.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.signal import get_window

from .errors import DataError, UsageError

__all__ = [
    "AudioBuffer",
    "StftConfig",
    "ComplexSpectrogram",
    "frame_signal",
    "overlap_add",
    "stft",
    "istft",
    "polynomial_spectrum",
    "snr_db",
]


@dataclass(frozen=True, eq=False)
class AudioBuffer:
    """Mono float64 signal with its sample rate."""

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        x = np.asarray(self.samples, dtype=np.float64)
        if x.ndim != 1:
            raise DataError(f"expected mono 1-D samples, got shape {x.shape}")
        if not np.all(np.isfinite(x)):
            raise DataError("audio contains NaN or Inf samples")
        if int(self.sample_rate) != self.sample_rate or self.sample_rate <= 0:
            raise DataError(f"sample rate must be a positive integer, got {self.sample_rate}")
        object.__setattr__(self, "samples", x)
        object.__setattr__(self, "sample_rate", int(self.sample_rate))

    def __len__(self):
        return self.samples.shape[0]

    @property
    def duration(self) -> float:
        return len(self) / self.sample_rate


@dataclass(frozen=True)
class StftConfig:
    fft_size: int = 2048
    window_size: int = 1024
    hop_size: int = 256
    window_kind: str = "hann"
    epsilon: float = 1e-9

    def __post_init__(self):
        if not 0 < self.hop_size <= self.window_size <= self.fft_size:
            raise UsageError(
                "need 0 < hop_size <= window_size <= fft_size, got "
                f"hop={self.hop_size} window={self.window_size} fft={self.fft_size}"
            )
        if self.window_size % 2:
            raise UsageError("window_size must be even for centred framing")
        if not self.epsilon > 0:
            raise UsageError("epsilon must be positive")
        # WOLA needs every output sample covered by a nonzero analysis*synthesis weight
        w2 = self.window() ** 2
        count = 2 * (-(-self.window_size // self.hop_size)) + 1
        env = np.zeros((count - 1) * self.hop_size + self.window_size)
        for i in range(count):
            env[i * self.hop_size:i * self.hop_size + self.window_size] += w2
        mid = (count // 2) * self.hop_size
        if env[mid:mid + self.hop_size].min() <= 1e-8:
            raise UsageError(
                f"window '{self.window_kind}' with hop {self.hop_size} leaves gaps in overlap-add"
            )

    @property
    def n_bins(self) -> int:
        return self.fft_size // 2 + 1

    def window(self) -> np.ndarray:
        return get_window(self.window_kind, self.window_size, fftbins=True).astype(np.float64)

    def num_frames(self, num_samples: int) -> int:
        return max(1, -(-num_samples // self.hop_size))

    def bin_frequencies(self, sample_rate: float) -> np.ndarray:
        return np.arange(self.n_bins) * sample_rate / self.fft_size

    def to_dict(self) -> dict:
        return {
            "fft_size": self.fft_size,
            "window_size": self.window_size,
            "hop_size": self.hop_size,
            "window_kind": self.window_kind,
            "epsilon": self.epsilon,
        }


@dataclass(frozen=True, eq=False)
class ComplexSpectrogram:
    """One-sided ``M x (N/2 + 1)`` frame spectra of a real signal."""

    data: np.ndarray
    config: StftConfig = field(default_factory=StftConfig)
    num_samples: int = 0

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.complex128)
        if data.ndim != 2 or data.shape[1] != self.config.n_bins:
            raise DataError(
                f"spectrogram shape {data.shape} does not match {self.config.n_bins} one-sided bins"
            )
        object.__setattr__(self, "data", data)

    @property
    def num_frames(self) -> int:
        return self.data.shape[0]

    def magnitude(self) -> np.ndarray:
        return np.abs(self.data)

    def to_full(self) -> np.ndarray:
        """Expand to all ``N`` bins using conjugate symmetry."""
        n = self.config.fft_size
        tail = np.conj(self.data[:, 1:(n + 1) // 2][:, ::-1])
        return np.concatenate([self.data, tail], axis=1)

    def symmetry_error(self) -> float:
        """Largest imaginary part at the self-conjugate bins (DC and Nyquist)."""
        edges = [self.data[:, 0]]
        if self.config.fft_size % 2 == 0:
            edges.append(self.data[:, -1])
        return float(max(np.max(np.abs(e.imag)) for e in edges)) if self.data.size else 0.0


def frame_signal(x: np.ndarray, config: StftConfig, num_frames: int | None = None) -> np.ndarray:
    """Centred, zero-padded, unwindowed frames of shape ``(M, window_size)``."""
    half = config.window_size // 2
    m = config.num_frames(len(x)) if num_frames is None else num_frames
    needed = (m - 1) * config.hop_size + config.window_size
    padded = np.zeros(max(needed, len(x) + 2 * half))
    padded[half:half + len(x)] = x
    view = np.lib.stride_tricks.sliding_window_view(padded, config.window_size)
    return view[::config.hop_size][:m].copy()


def overlap_add(frames: np.ndarray, config: StftConfig, num_samples: int) -> np.ndarray:
    """Sum frames at hop spacing and crop back to the unpadded signal."""
    half = config.window_size // 2
    m, width = frames.shape
    out = np.zeros((m - 1) * config.hop_size + width + 2 * half + num_samples)
    for i in range(m):
        start = i * config.hop_size
        out[start:start + width] += frames[i]
    return out[half:half + num_samples]


def _wola_envelope(config: StftConfig, num_frames: int, num_samples: int) -> np.ndarray:
    w2 = config.window() ** 2
    return overlap_add(np.tile(w2, (num_frames, 1)), config, num_samples)


def stft(audio: AudioBuffer | np.ndarray, config: StftConfig | None = None) -> ComplexSpectrogram:
    """Windowed one-sided FFT of centred frames.

    Signals shorter than one window yield a single zero-padded frame.
    """
    config = config or StftConfig()
    x = audio.samples if isinstance(audio, AudioBuffer) else np.asarray(audio, dtype=np.float64)
    if x.size == 0:
        raise DataError("cannot take the STFT of an empty signal")
    frames = frame_signal(x, config) * config.window()
    data = np.fft.rfft(frames, n=config.fft_size, axis=1)
    return ComplexSpectrogram(data, config, len(x))


def istft(spec: ComplexSpectrogram, config: StftConfig | None = None,
          sample_rate: int = 22050, symmetry_tol: float = 1e-8) -> AudioBuffer:
    """Weighted overlap-add inverse of :func:`stft`.

    Raises DataError if the DC/Nyquist bins carry an imaginary part larger
    than ``symmetry_tol`` relative to the spectrogram's peak magnitude.
    """
    config = config or spec.config
    if config != spec.config:
        raise DataError("spectrogram was built with a different STFT configuration")
    scale = float(np.max(np.abs(spec.data))) if spec.data.size else 0.0
    if spec.symmetry_error() > symmetry_tol * max(scale, 1.0):
        raise DataError(
            f"spectrogram violates conjugate symmetry (imag residue {spec.symmetry_error():.3g})"
        )
    x = _istft_samples(spec.data, config, spec.num_samples)
    return AudioBuffer(x, sample_rate)


def _istft_samples(data: np.ndarray, config: StftConfig, num_samples: int) -> np.ndarray:
    frames = np.fft.irfft(data, n=config.fft_size, axis=1)[:, :config.window_size]
    frames *= config.window()
    env = _wola_envelope(config, data.shape[0], num_samples)
    y = overlap_add(frames, config, num_samples)
    return np.divide(y, env, out=np.zeros_like(y), where=env > 1e-10)


def polynomial_spectrum(coeffs, fft_size: int) -> np.ndarray:
    """Full-length FFT of zero-padded polynomial coefficients (last axis)."""
    a = np.asarray(coeffs, dtype=np.float64)
    if a.shape[-1] > fft_size:
        raise UsageError(f"fft_size {fft_size} shorter than {a.shape[-1]} coefficients")
    return np.fft.fft(a, n=fft_size, axis=-1)


def snr_db(reference, estimate) -> float:
    ref = np.asarray(reference, dtype=np.float64)
    err = ref - np.asarray(estimate, dtype=np.float64)
    num = float(np.sum(ref * ref))
    den = float(np.sum(err * err))
    if den == 0.0:
        return float("inf")
    if num == 0.0:
        return float("-inf")
    return 10.0 * np.log10(num / den)
