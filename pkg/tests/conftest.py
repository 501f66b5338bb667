import mpmath
import numpy as np
import pytest
from hypothesis import HealthCheck, settings
from scipy.signal import lfilter

from sourcefilter.dsp import AudioBuffer
from sourcefilter.pipeline import VowelParams, resonator_coeffs, synth_vowel

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

FS = 22050
VOWEL_FORMANTS = (700.0, 1220.0, 2600.0, 3400.0)
VOWEL_BANDWIDTHS = (80.0, 90.0, 120.0, 130.0)


def resonator_vowel(f0=120.0, duration=1.0, formants=VOWEL_FORMANTS, bandwidths=VOWEL_BANDWIDTHS,
                    fs=FS):
    """Impulse train through one fixed all-pole filter with the given pole pairs."""
    return synth_vowel(VowelParams(f0_hz=f0, duration_s=duration, formants_start=list(formants),
                                   formants_end=list(formants), bandwidths=list(bandwidths),
                                   vowels=["test"], sample_rate=fs))


def vowel_denominator(formants=VOWEL_FORMANTS, bandwidths=VOWEL_BANDWIDTHS, fs=FS):
    den = np.array([1.0])
    for f, b in zip(formants, bandwidths):
        den = np.convolve(den, resonator_coeffs(f, b, fs))
    return den


def schur_cohn_stable(coeffs, dps=200):
    """Schur-Cohn test of the given (float64) coefficients in 200-digit arithmetic.

    The polynomial has every root strictly inside the unit circle iff each
    step-down reflection coefficient has magnitude below one.
    """
    with mpmath.workdps(dps):
        a = [mpmath.mpf(float(c)) for c in coeffs]
        a = [c / a[0] for c in a]
        for i in range(len(a) - 1, 0, -1):
            k = a[i]
            if abs(k) >= 1:
                return False
            a = [(a[j] - k * a[i - j]) / (1 - k * k) for j in range(i)]
    return True


def iir(b, a, x):
    return lfilter(b, a, x)


@pytest.fixture(scope="session")
def vowel():
    return resonator_vowel()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def noise(rng):
    return AudioBuffer(rng.standard_normal(FS) * 0.1, FS)
