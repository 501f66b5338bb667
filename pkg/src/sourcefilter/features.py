"""Nine per-frame speech parameters and their [-1, 1] normalisation.

Feature order: log F0, voicing, F1, F2, F3, F4, spectral tilt, spectral
centroid, log frame energy.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .allpole import SILENCE_FLOOR
from .dsp import AudioBuffer, StftConfig, frame_signal
from .errors import DataError
from .formants import extract_formant_track, fill_gaps

FEATURE_NAMES = ("log_f0", "voicing", "f1", "f2", "f3", "f4", "tilt", "centroid", "log_energy")
ENERGY_FLOOR = 1e-10
F0_MIN_HZ = 75.0
F0_MAX_HZ = 500.0
VOICING_THRESHOLD = 0.3
OCTAVE_COST = 0.01
# uniform-tube resonances, used only when a signal yields no formants at all
NEUTRAL_FORMANTS_HZ = (500.0, 1500.0, 2500.0, 3500.0)


class AutocorrelationPitchTracker:
    """Normalised-autocorrelation F0 estimator on the STFT frame grid.

    The frame autocorrelation is divided by the window's own autocorrelation,
    peaks in the lag band for ``[fmin, fmax]`` are refined by parabolic
    interpolation and scored with a small per-octave preference for higher
    pitch. Frames whose best normalised peak is under ``threshold`` are
    unvoiced.
    """

    def __init__(self, fmin=F0_MIN_HZ, fmax=F0_MAX_HZ, threshold=VOICING_THRESHOLD,
                 octave_cost=OCTAVE_COST):
        self.fmin = fmin
        self.fmax = fmax
        self.threshold = threshold
        self.octave_cost = octave_cost

    def __call__(self, audio: AudioBuffer, config: StftConfig):
        fs = audio.sample_rate
        w = config.window()
        frames = frame_signal(audio.samples, config)
        frames = (frames - frames.mean(axis=1, keepdims=True)) * w
        max_lag = int(np.ceil(fs / self.fmin)) + 1
        min_lag = int(np.floor(fs / self.fmax))
        if max_lag >= config.window_size:
            raise DataError(f"window of {config.window_size} samples too short for {self.fmin} Hz")
        nfft = 1 << int(np.ceil(np.log2(2 * config.window_size)))
        r = np.fft.irfft(np.abs(np.fft.rfft(frames, nfft, axis=1)) ** 2, nfft, axis=1)[:, :max_lag + 2]
        rw = np.fft.irfft(np.abs(np.fft.rfft(w, nfft)) ** 2, nfft)[:max_lag + 2]
        energy = r[:, 0]
        f0 = np.zeros(frames.shape[0])
        voiced = np.zeros(frames.shape[0], dtype=bool)
        lags = np.arange(min_lag, max_lag + 1)
        for m in np.flatnonzero(energy > SILENCE_FLOOR):
            nr = (r[m] / energy[m]) / (rw / rw[0])
            seg = nr[lags]
            peaks = np.flatnonzero((seg[1:-1] > seg[:-2]) & (seg[1:-1] >= seg[2:])) + 1
            if peaks.size == 0:
                continue
            best_score, best_lag, best_val = -np.inf, 0.0, 0.0
            for p in peaks:
                y0, y1, y2 = seg[p - 1], seg[p], seg[p + 1]
                denom = y0 - 2 * y1 + y2
                delta = 0.5 * (y0 - y2) / denom if denom < 0 else 0.0
                lag = lags[p] + delta
                val = y1 - 0.25 * (y0 - y2) * delta
                score = val - self.octave_cost * np.log2(self.fmin * lag / fs)
                if score > best_score:
                    best_score, best_lag, best_val = score, lag, val
            if best_val >= self.threshold:
                freq = fs / best_lag
                if self.fmin <= freq <= self.fmax:
                    f0[m] = freq
                    voiced[m] = True
        return f0, voiced.astype(np.int8)


def estimate_f0(audio: AudioBuffer, config: StftConfig | None = None, tracker=None):
    """Per-frame F0 (Hz, 0 where unvoiced) and binary voicing."""
    tracker = tracker or AutocorrelationPitchTracker()
    return tracker(audio, config or StftConfig())


def interpolate_log_f0(f0, voicing):
    """Log F0 with unvoiced frames linearly interpolated in the log domain."""
    f0 = np.asarray(f0, dtype=np.float64)
    voiced = np.asarray(voicing).astype(bool) & (f0 > 0)
    if not np.any(voiced):
        raise DataError("no voiced frames to interpolate log F0 from")
    logs = np.where(voiced, np.log(np.where(voiced, f0, 1.0)), np.nan)
    return fill_gaps(logs, voiced)


def spectral_tilt(frame) -> float:
    """First-order predictor coefficient ``r(1) / r(0)``; 0 for a silent frame."""
    x = np.asarray(frame, dtype=np.float64)
    r0 = float(np.dot(x, x))
    if r0 <= SILENCE_FLOOR:
        return 0.0
    return float(np.dot(x[:-1], x[1:]) / r0)


def spectral_centroid(magnitude, fs) -> float:
    """Magnitude-weighted mean frequency of a one-sided spectrum; 0 if all-zero."""
    mag = np.asarray(magnitude, dtype=np.float64)
    total = mag.sum()
    if total <= 0:
        return 0.0
    freqs = np.arange(mag.size) * fs / (2 * (mag.size - 1))
    return float(np.dot(freqs, mag) / total)


def frame_energy(frame) -> float:
    x = np.asarray(frame, dtype=np.float64)
    return float(np.log(np.dot(x, x) + ENERGY_FLOOR))


@dataclass(eq=False)
class FeatureTrack:
    """Frame-aligned feature streams.

    ``flags`` records which fallbacks fired (``silent`` frames, whether any
    frame was voiced, whether formants came from the neutral fallback).
    """

    log_f0: np.ndarray
    voicing: np.ndarray
    formants: np.ndarray
    tilt: np.ndarray
    centroid: np.ndarray
    log_energy: np.ndarray
    fs: int
    config: StftConfig = field(default_factory=StftConfig)
    silent: np.ndarray | None = None
    flags: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.silent is None:
            self.silent = np.zeros(len(self.log_f0), dtype=bool)

    @property
    def num_frames(self) -> int:
        return len(self.log_f0)

    @property
    def f0(self) -> np.ndarray:
        return np.exp(self.log_f0)

    def to_matrix(self) -> np.ndarray:
        return np.column_stack([self.log_f0, self.voicing, self.formants, self.tilt,
                                self.centroid, self.log_energy]).astype(np.float64)

    @classmethod
    def from_matrix(cls, matrix, fs, config=None, **kwargs):
        m = np.asarray(matrix, dtype=np.float64)
        if m.ndim != 2 or m.shape[1] != len(FEATURE_NAMES):
            raise DataError(f"feature matrix must be (M, {len(FEATURE_NAMES)}), got {m.shape}")
        return cls(log_f0=m[:, 0], voicing=m[:, 1], formants=m[:, 2:6], tilt=m[:, 6],
                   centroid=m[:, 7], log_energy=m[:, 8], fs=fs, config=config or StftConfig(),
                   **kwargs)

    def with_matrix(self, matrix):
        new = FeatureTrack.from_matrix(matrix, self.fs, self.config)
        return replace(new, silent=self.silent.copy(), flags=dict(self.flags))


def extract_features(audio: AudioBuffer, config: StftConfig | None = None, order: int = 10,
                     pre_emphasis: float = 0.0, tracker=None) -> FeatureTrack:
    """All nine features on the STFT frame grid of ``audio``.

    Never raises for silent, noisy or DC input: unvoiced-only signals get a
    constant log F0 at the tracker's lower bound, formant-free signals get
    the neutral-tube formants, silent frames get zero tilt and an
    interpolated centroid. Each fallback is recorded in ``flags``.
    """
    config = config or StftConfig()
    fs = audio.sample_rate
    frames = frame_signal(audio.samples, config) * config.window()
    m = frames.shape[0]
    energy = np.sum(frames * frames, axis=1)
    silent = energy <= SILENCE_FLOOR
    flags = {}

    f0, voicing = estimate_f0(audio, config, tracker)
    if np.any(voicing):
        log_f0 = interpolate_log_f0(f0, voicing)
    else:
        log_f0 = np.full(m, np.log(F0_MIN_HZ))
        flags["no_voiced_frames"] = True

    try:
        formants = extract_formant_track(audio, config, order=order,
                                         pre_emphasis=pre_emphasis).frequencies
    except DataError:
        formants = np.tile(NEUTRAL_FORMANTS_HZ, (m, 1))
        flags["neutral_formants"] = True

    tilt = np.array([spectral_tilt(f) for f in frames])
    mags = np.abs(np.fft.rfft(frames, n=config.fft_size, axis=1))
    centroid = np.array([spectral_centroid(row, fs) for row in mags])
    if np.all(silent):
        centroid[:] = fs / 4.0
    elif np.any(silent):
        centroid = fill_gaps(centroid, ~silent)
    log_energy = np.log(energy + ENERGY_FLOOR)
    if np.any(silent):
        flags["silent_frames"] = int(np.sum(silent))

    return FeatureTrack(log_f0=log_f0, voicing=voicing.astype(np.float64), formants=formants,
                        tilt=tilt, centroid=centroid, log_energy=log_energy, fs=fs,
                        config=config, silent=silent, flags=flags)


@dataclass
class NormalizationSpec:
    """Per-feature ``[min, max]`` mapped affinely to ``[-1, 1]``."""

    minimum: np.ndarray
    maximum: np.ndarray
    names: tuple = FEATURE_NAMES

    def __post_init__(self):
        self.minimum = np.asarray(self.minimum, dtype=np.float64)
        self.maximum = np.asarray(self.maximum, dtype=np.float64)
        if self.minimum.shape != (len(self.names),) or self.maximum.shape != (len(self.names),):
            raise DataError("normalisation bounds must have one entry per feature")
        bad = [n for n, lo, hi in zip(self.names, self.minimum, self.maximum) if not lo < hi]
        if bad:
            raise DataError(f"normalisation needs min < max; degenerate features: {', '.join(bad)}")

    def to_dict(self) -> dict:
        return {n: {"min": float(lo), "max": float(hi)}
                for n, lo, hi in zip(self.names, self.minimum, self.maximum)}

    @classmethod
    def from_dict(cls, d: dict):
        """Inverse of ``to_dict``; key order is ignored (JSON files store keys sorted)."""
        if set(d) != set(FEATURE_NAMES):
            raise DataError(f"normalisation spec must name exactly {', '.join(FEATURE_NAMES)}")
        try:
            lo = [float(d[n]["min"]) for n in FEATURE_NAMES]
            hi = [float(d[n]["max"]) for n in FEATURE_NAMES]
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"malformed normalisation entry ({exc})") from exc
        return cls(lo, hi, FEATURE_NAMES)


def normalize(track: FeatureTrack, spec: NormalizationSpec) -> FeatureTrack:
    """Affine map to [-1, 1]; values outside the spec's range are not clipped."""
    x = track.to_matrix()
    return track.with_matrix(2.0 * (x - spec.minimum) / (spec.maximum - spec.minimum) - 1.0)


def denormalize(track: FeatureTrack, spec: NormalizationSpec) -> FeatureTrack:
    x = track.to_matrix()
    return track.with_matrix((x + 1.0) * 0.5 * (spec.maximum - spec.minimum) + spec.minimum)
