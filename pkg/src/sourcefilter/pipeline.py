"""Copy synthesis, formant manipulation, evaluation harness and test corpus."""

from __future__ import annotations

import hashlib
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.signal import lfilter

from . import io
from .allpole import analyze_envelopes, residual_spectrogram, synthesize_from_residual
from .dsp import AudioBuffer, StftConfig
from .errors import DataError, SourceFilterError, UsageError
from .features import FEATURE_NAMES, NormalizationSpec, estimate_f0, extract_features
from .formants import NUM_FORMANTS, extract_formant_track, relocate_frames

log = logging.getLogger(__name__)

LPC_ORDER = 10
SCALE_RANGE = (0.5, 2.0)
DEFAULT_SCALES = (0.7, 0.8, 0.9, 1.0, 1.1, 1.2, 1.3)
DEFAULT_FORMANTS = (1, 2, 3, 4)


@dataclass(frozen=True)
class PipelineConfig:
    stft: StftConfig = field(default_factory=StftConfig)
    order: int = LPC_ORDER
    sample_rate: int | None = io.DEFAULT_SAMPLE_RATE

    def to_dict(self) -> dict:
        return {"stft": self.stft.to_dict(), "order": self.order, "sample_rate": self.sample_rate}

    @classmethod
    def from_dict(cls, d: dict):
        unknown = set(d) - {"stft", "order", "sample_rate"}
        if unknown:
            raise UsageError(f"unknown config keys: {', '.join(sorted(unknown))}")
        try:
            stft_cfg = StftConfig(**d.get("stft", {}))
        except TypeError as exc:
            raise UsageError(f"bad stft config: {exc}") from exc
        return cls(stft=stft_cfg, order=int(d.get("order", LPC_ORDER)),
                   sample_rate=d.get("sample_rate", io.DEFAULT_SAMPLE_RATE))


@dataclass(frozen=True)
class ManipulationSpec:
    """Per-formant scale factors and/or absolute targets (Hz) for F1..F4."""

    scales: tuple = (1.0, 1.0, 1.0, 1.0)
    targets: tuple = (None, None, None, None)
    f0_scale: float = 1.0

    def __post_init__(self):
        scales = tuple(1.0 if s is None else float(s) for s in self.scales)
        targets = tuple(None if t is None else float(t) for t in self.targets)
        if len(scales) != NUM_FORMANTS or len(targets) != NUM_FORMANTS:
            raise UsageError(f"need {NUM_FORMANTS} scale and target entries")
        lo, hi = SCALE_RANGE
        for i, s in enumerate(scales):
            if not lo <= s <= hi:
                raise UsageError(f"scale for F{i + 1} is {s}; allowed range is [{lo}, {hi}]")
        for i, t in enumerate(targets):
            if t is not None and not (np.isfinite(t) and t > 0):
                raise UsageError(f"target for F{i + 1} must be a positive frequency, got {t}")
        if not self.f0_scale > 0:
            raise UsageError("f0_scale must be positive")
        object.__setattr__(self, "scales", scales)
        object.__setattr__(self, "targets", targets)

    @property
    def is_identity(self) -> bool:
        return all(s == 1.0 for s in self.scales) and all(t is None for t in self.targets)

    @classmethod
    def single(cls, formant: int, scale: float):
        scales = [1.0] * NUM_FORMANTS
        scales[formant - 1] = scale
        return cls(scales=tuple(scales))


def copy_synthesis(audio: AudioBuffer, config: PipelineConfig | None = None) -> AudioBuffer:
    """Analyze order-10 envelopes, inverse-filter, refilter with the same envelopes."""
    return manipulate(audio, ManipulationSpec(), config)


def manipulate(audio: AudioBuffer, spec: ManipulationSpec,
               config: PipelineConfig | None = None) -> AudioBuffer:
    """Relocate formant poles frame by frame and resynthesize.

    The residual is ``STFT(x) / H`` with the original envelopes; the output
    is ``ISTFT(H' * residual)`` with the relocated envelopes ``H'``.
    """
    config = config or PipelineConfig()
    if spec.f0_scale != 1.0:
        raise UsageError("F0 scaling is not supported; use f0_scale = 1")
    frames = analyze_envelopes(audio, config.stft, order=config.order)
    residual = residual_spectrogram(audio, frames, config.stft)
    if spec.is_identity:
        new_frames = frames
    else:
        a = relocate_frames(frames.a, audio.sample_rate, scale=spec.scales, targets=spec.targets)
        new_frames = frames.with_polynomial(a)
    return synthesize_from_residual(residual, new_frames, audio.sample_rate)


# --- evaluation ------------------------------------------------------------------

def corpus_files(corpus_dir) -> list[Path]:
    corpus_dir = Path(corpus_dir)
    if not corpus_dir.is_dir():
        raise DataError(f"{corpus_dir}: not a directory")
    return sorted(corpus_dir.glob("*.wav"))


def _eval_file(args):
    path, scales, formants, config = args
    out = {"file": path.name, "voiced": 0, "errors": {}, "failures": []}
    try:
        audio = io.read_wav(path, config.sample_rate)
        base = extract_formant_track(audio, config.stft, order=config.order).frequencies
        _, voicing = estimate_f0(audio, config.stft)
    except SourceFilterError as exc:
        out["failures"].append({"file": path.name, "formant": None, "scale": None,
                                "error": str(exc)})
        return out
    voiced = voicing.astype(bool)
    out["voiced"] = int(voiced.sum())
    for f in formants:
        for s in scales:
            try:
                y = manipulate(audio, ManipulationSpec.single(f, s), config)
                est = extract_formant_track(y, config.stft, order=config.order).frequencies
            except SourceFilterError as exc:
                out["failures"].append({"file": path.name, "formant": f, "scale": s,
                                        "error": str(exc)})
                continue
            err = np.abs(est[voiced, f - 1] - s * base[voiced, f - 1])
            out["errors"][(f, s)] = err
    return out


def config_hash(doc) -> str:
    return hashlib.sha256(io.canonical_json(doc).encode()).hexdigest()


def eval_manipulation(corpus_dir, scales=DEFAULT_SCALES, formants=DEFAULT_FORMANTS,
                      config: PipelineConfig | None = None, jobs: int = 1) -> dict:
    """Manipulate every corpus file per formant and scale, re-extract, and
    collect ``|estimated - scale * original|`` over voiced frames.

    The target is the scaled formant track of the unmodified file, so the
    scale-1.0 cell measures the analysis/resynthesis identity path.
    Failures (unreadable files, formant collisions) are skipped and counted.
    """
    config = config or PipelineConfig()
    scales = tuple(float(s) for s in scales)
    formants = tuple(int(f) for f in formants)
    if any(f not in DEFAULT_FORMANTS for f in formants):
        raise UsageError(f"formants must be among {DEFAULT_FORMANTS}")
    files = corpus_files(corpus_dir)
    if not files:
        raise DataError(f"{corpus_dir}: no WAV files")
    tasks = [(p, scales, formants, config) for p in files]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_eval_file, tasks))
    else:
        results = [_eval_file(t) for t in tasks]

    cells = []
    for f in formants:
        for s in scales:
            parts = [r["errors"][(f, s)] for r in results if (f, s) in r["errors"]]
            err = np.concatenate(parts) if parts else np.zeros(0)
            if err.size:
                q25, med, q75 = (float(v) for v in np.percentile(err, [25, 50, 75]))
            else:
                q25 = med = q75 = None
            cells.append({"formant": f, "scale": s, "median_hz": med, "q25_hz": q25,
                          "q75_hz": q75, "n_frames": int(err.size)})
    failures = [x for r in results for x in r["failures"]]
    for x in failures:
        log.warning("%s F%s x%s skipped: %s", x["file"], x["formant"], x["scale"], x["error"])
    settings = {"config": config.to_dict(), "scales": list(scales), "formants": list(formants)}
    return {
        "config_hash": config_hash(settings),
        "corpus": {"name": Path(corpus_dir).name, "files": [p.name for p in files],
                   "voiced_frames": {r["file"]: r["voiced"] for r in results}},
        "scales": list(scales),
        "formants": list(formants),
        "cells": cells,
        "failures": len(failures),
        "failure_details": failures,
    }


def write_eval_csv(path, report: dict) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = ["formant,scale,median_hz,q25_hz,q75_hz,n_frames"]
    for c in report["cells"]:
        vals = ["" if c[k] is None else repr(c[k]) for k in ("median_hz", "q25_hz", "q75_hz")]
        lines.append(",".join([str(c["formant"]), repr(c["scale"])] + vals + [str(c["n_frames"])]))
    path.write_text("\n".join(lines) + "\n")
    return path


# --- normalisation scan ----------------------------------------------------------

def scan_normalization(corpus_dir, config: PipelineConfig | None = None,
                       percentiles=(1.0, 99.0)) -> NormalizationSpec:
    """Per-feature 1st/99th percentile bounds over every frame of the corpus.

    Voicing is binary, so its bounds are fixed at its domain ``[0, 1]``;
    percentiles of a mostly voiced corpus would collapse to ``1 == 1``.
    """
    config = config or PipelineConfig()
    files = corpus_files(corpus_dir)
    if not files:
        raise DataError(f"{corpus_dir}: corpus is empty")
    rows = [extract_features(io.read_wav(p, config.sample_rate), config.stft,
                             order=config.order).to_matrix() for p in files]
    stacked = np.concatenate(rows)
    lo, hi = np.percentile(stacked, percentiles, axis=0)
    v = FEATURE_NAMES.index("voicing")
    lo[v], hi[v] = 0.0, 1.0
    return NormalizationSpec(lo, hi, FEATURE_NAMES)


# --- synthetic corpus --------------------------------------------------------------

# Canonical adult vowel formants (Hz), F1..F4.
VOWELS = {
    "i": (270, 2290, 3010, 3700),
    "e": (400, 2000, 2600, 3500),
    "ae": (660, 1720, 2410, 3500),
    "a": (730, 1090, 2440, 3400),
    "o": (500, 900, 2400, 3400),
    "u": (300, 870, 2240, 3300),
    "er": (490, 1350, 1690, 3300),
}
MIN_FORMANT_RATIO = 1.55


def spaced_formants(formants, ratio=MIN_FORMANT_RATIO):
    """Push each formant up to at least ``ratio`` times the one below.

    Scaling one formant by 0.7..1.3 then cannot make it cross a neighbour.
    """
    out = [float(formants[0])]
    for f in formants[1:]:
        out.append(max(float(f), ratio * out[-1]))
    return out


@dataclass
class VowelParams:
    f0_hz: float
    duration_s: float
    formants_start: list
    formants_end: list
    bandwidths: list
    vowels: list
    sample_rate: int = io.DEFAULT_SAMPLE_RATE

    @property
    def kind(self) -> str:
        return "vowel" if self.formants_start == self.formants_end else "diphthong"


def resonator_coeffs(freq, bw, fs):
    """Denominator of a unit-DC-gain two-pole resonator."""
    r = np.exp(-np.pi * bw / fs)
    return np.array([1.0, -2.0 * r * np.cos(2 * np.pi * freq / fs), r * r])


def synth_vowel(p: VowelParams, block: int = 64) -> AudioBuffer:
    """Impulse train through a cascade of two-pole resonators.

    Formants move linearly from start to end values; coefficients are
    updated every ``block`` samples with filter state carried over.
    """
    fs = p.sample_rate
    n = int(round(p.duration_s * fs))
    period = fs / p.f0_hz
    src = np.zeros(n)
    src[np.round(np.arange(0, n - 0.5, period)).astype(int)] = 1.0
    start, end = np.asarray(p.formants_start, float), np.asarray(p.formants_end, float)
    y = src
    for i, bw in enumerate(p.bandwidths):
        out = np.zeros(n)
        zi = np.zeros(2)
        for b0 in range(0, n, block):
            t = (b0 + block / 2) / max(n, 1)
            den = resonator_coeffs(start[i] + t * (end[i] - start[i]), bw, fs)
            seg, zi = lfilter([den.sum()], den, y[b0:b0 + block], zi=zi)
            out[b0:b0 + block] = seg
        y = out
    y = y - y.mean()
    ramp = min(n // 2, int(0.01 * fs))
    fade = np.ones(n)
    fade[:ramp] = np.linspace(0.0, 1.0, ramp)
    fade[n - ramp:] = np.linspace(1.0, 0.0, ramp)
    y = y * fade
    return AudioBuffer(0.5 * y / np.max(np.abs(y)), fs)


def random_vowel_params(rng, diphthong_prob=0.3) -> VowelParams:
    names = sorted(VOWELS)
    first = names[rng.integers(len(names))]
    jitter = rng.uniform(0.95, 1.05, NUM_FORMANTS)
    start = spaced_formants(np.asarray(VOWELS[first]) * jitter)
    chosen = [first]
    end = start
    if rng.random() < diphthong_prob:
        second = names[rng.integers(len(names))]
        if second != first:
            chosen.append(second)
            end = spaced_formants(np.asarray(VOWELS[second]) * jitter)
    return VowelParams(
        f0_hz=float(rng.uniform(90.0, 300.0)),
        duration_s=float(rng.uniform(1.0, 2.0)),
        formants_start=[round(float(f), 3) for f in start],
        formants_end=[round(float(f), 3) for f in end],
        bandwidths=[round(float(b), 3) for b in rng.uniform(50.0, 120.0, NUM_FORMANTS)],
        vowels=chosen,
    )


def make_test_corpus(out_dir, n: int, seed: int = 0) -> list[Path]:
    """Write ``n`` synthetic vowels/diphthongs plus JSON ground-truth sidecars."""
    if n < 0:
        raise UsageError("corpus size must be non-negative")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if n == 0:
        log.warning("corpus size 0: nothing written to %s", out_dir)
        return []
    paths = []
    for i, child in enumerate(np.random.SeedSequence(seed).spawn(n)):
        params = random_vowel_params(np.random.default_rng(child))
        stem = f"vowel_{i:04d}"
        wav = io.write_wav(out_dir / f"{stem}.wav", synth_vowel(params))
        io.write_json(out_dir / f"{stem}.json", {**asdict(params), "kind": params.kind,
                                                 "seed": seed, "index": i})
        paths.append(wav)
    return paths
