"""WAV, feature-track and report serialization."""

from __future__ import annotations

import csv
import json
import warnings
from pathlib import Path

import numpy as np
from scipy.io import wavfile

from .dsp import AudioBuffer, StftConfig
from .errors import DataError
from .features import FEATURE_NAMES, FeatureTrack, NormalizationSpec

DEFAULT_SAMPLE_RATE = 22050
PCM16_SCALE = 32768.0


def read_wav(path, expected_rate: int | None = DEFAULT_SAMPLE_RATE) -> AudioBuffer:
    """Mono 16-bit PCM or 32-bit float WAV as float64 in [-1, 1).

    ``expected_rate=None`` accepts any sample rate.
    """
    path = Path(path)
    if not path.is_file():
        raise DataError(f"{path}: no such file")
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", wavfile.WavFileWarning)
            rate, data = wavfile.read(path)
    except (ValueError, OSError) as exc:
        raise DataError(f"{path}: not a readable WAV file ({exc})") from exc
    if data.ndim != 1:
        raise DataError(f"{path}: {data.shape[1]} channels; mix down to mono first")
    if data.dtype == np.int16:
        x = data.astype(np.float64) / PCM16_SCALE
    elif data.dtype == np.float32:
        x = data.astype(np.float64)
    else:
        raise DataError(f"{path}: sample format {data.dtype} unsupported; "
                        "convert to 16-bit PCM or 32-bit float")
    if expected_rate is not None and rate != expected_rate:
        raise DataError(f"{path}: sample rate {rate} Hz, expected {expected_rate} Hz; "
                        "resample the file or pass --allow-any-rate")
    if x.size == 0:
        raise DataError(f"{path}: no samples")
    return AudioBuffer(x, rate)


def to_pcm16(samples) -> np.ndarray:
    """Round to 16-bit PCM without dither, saturating at full scale."""
    q = np.round(np.asarray(samples, dtype=np.float64) * PCM16_SCALE)
    return np.clip(q, -32768, 32767).astype(np.int16)


def write_wav(path, audio: AudioBuffer) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    wavfile.write(path, audio.sample_rate, to_pcm16(audio.samples))
    return path


def write_features_csv(path, track: FeatureTrack) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("frame",) + FEATURE_NAMES)
        for i, row in enumerate(track.to_matrix()):
            w.writerow([i] + [repr(float(v)) for v in row])
    return path


def read_features_csv(path, fs: int, config: StftConfig | None = None) -> FeatureTrack:
    path = Path(path)
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or tuple(rows[0]) != ("frame",) + FEATURE_NAMES:
        raise DataError(f"{path}: header must be {','.join(('frame',) + FEATURE_NAMES)}")
    try:
        m = np.array([[float(v) for v in r[1:]] for r in rows[1:]], dtype=np.float64)
    except ValueError as exc:
        raise DataError(f"{path}: malformed feature row ({exc})") from exc
    return FeatureTrack.from_matrix(m.reshape(-1, len(FEATURE_NAMES)), fs, config)


def features_document(track: FeatureTrack, spec: NormalizationSpec | None = None) -> dict:
    cfg = track.config
    return {
        "fs": track.fs,
        "hop": cfg.hop_size,
        "window": {"kind": cfg.window_kind, "size": cfg.window_size, "fft_size": cfg.fft_size},
        "features": list(FEATURE_NAMES),
        "normalization": spec.to_dict() if spec is not None else None,
        "flags": track.flags,
        "frames": track.to_matrix().tolist(),
    }


def write_json(path, doc) -> Path:
    """Canonical JSON (sorted keys, fixed separators) so equal content is equal bytes."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(canonical_json(doc) + "\n")
    return path


def canonical_json(doc) -> str:
    return json.dumps(doc, sort_keys=True, indent=2, allow_nan=False)


def read_json(path) -> dict:
    path = Path(path)
    try:
        return json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"{path}: cannot read JSON ({exc})") from exc


def write_normalization(path, spec: NormalizationSpec) -> Path:
    return write_json(path, spec.to_dict())


def read_normalization(path) -> NormalizationSpec:
    doc = read_json(path)
    try:
        return NormalizationSpec.from_dict(doc)
    except (KeyError, TypeError) as exc:
        raise DataError(f"{path}: not a normalisation spec ({exc})") from exc
