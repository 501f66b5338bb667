"""Reverse-mode gradients of the STFT-domain all-pole synthesis chain.

The chain is ``theta -> tanh -> Levinson -> FFT -> g / (A + eps) -> H * STFT(e)
-> ISTFT -> loss``. Complex adjoints follow the convention
``dL/dz = dL/dRe(z) + 1j * dL/dIm(z)``, so for holomorphic ``w = f(z)`` the
pullback is ``z_bar = w_bar * conj(f'(z))``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .allpole import K_MAX, levinson_forward
from .dsp import AudioBuffer, ComplexSpectrogram, StftConfig, _wola_envelope, frame_signal, \
    overlap_add
from .errors import DataError, NumericalError, UsageError

log = logging.getLogger(__name__)

LOSS_KINDS = ("lsd", "l2", "log_stft_l1")
MAG_FLOOR = 1e-12


@dataclass(frozen=True)
class LossSpec:
    """``lsd`` compares envelopes; ``l2`` and ``log_stft_l1`` compare audio."""

    kind: str = "lsd"
    reduction: str = "mean"

    def __post_init__(self):
        if self.kind not in LOSS_KINDS:
            raise UsageError(f"unknown loss kind {self.kind!r}; choose from {LOSS_KINDS}")
        if self.reduction not in ("mean", "sum"):
            raise UsageError(f"reduction must be 'mean' or 'sum', got {self.reduction!r}")


def hermitian_weights(fft_size: int) -> np.ndarray:
    """Multiplicity of each one-sided bin in the full ``fft_size``-bin spectrum."""
    w = np.full(fft_size // 2 + 1, 2.0)
    w[0] = 1.0
    if fft_size % 2 == 0:
        w[-1] = 1.0
    return w


def _reduce_scale(reduction, num_frames, fft_size):
    return 1.0 / (num_frames * fft_size) if reduction == "mean" else 1.0


def lsd_loss(h_hat, h_target, reduction="mean") -> float:
    """L1 log-spectral distance between two envelopes over all ``M x N`` bins.

    Accepts ComplexSpectrograms or one-sided magnitude/complex arrays.
    Bins are counted over the full spectrum, so ``sum == mean * M * N``.
    """
    a, n_fft = _as_onesided(h_hat)
    b, n_fft_b = _as_onesided(h_target)
    if a.shape != b.shape or n_fft != n_fft_b:
        raise DataError(f"envelope shapes differ: {a.shape} vs {b.shape}")
    d = np.abs(np.log(np.abs(a)) - np.log(np.abs(b)))
    total = float(np.sum(d * hermitian_weights(n_fft)))
    return total * _reduce_scale(reduction, a.shape[0], n_fft)


def _as_onesided(h):
    if isinstance(h, ComplexSpectrogram):
        return h.data, h.config.fft_size
    arr = np.atleast_2d(np.asarray(h))
    return arr, 2 * (arr.shape[1] - 1)


# --- adjoints of the FFT building blocks -------------------------------------

def _rfft_vjp(y_bar, n_fft, length):
    """Adjoint of ``rfft(x, n_fft)`` for real ``x`` of ``length`` samples."""
    c = np.full(y_bar.shape[-1], 0.5)
    c[0] = 1.0
    if n_fft % 2 == 0:
        c[-1] = 1.0
    return n_fft * np.fft.irfft(y_bar * c, n_fft, axis=-1)[..., :length]


def _irfft_vjp(x_bar, n_fft):
    """Adjoint of ``irfft(Y, n_fft)`` w.r.t. the one-sided ``Y``."""
    c = np.full(n_fft // 2 + 1, 2.0)
    c[0] = 1.0
    if n_fft % 2 == 0:
        c[-1] = 1.0
    return np.fft.rfft(x_bar, n_fft, axis=-1) * c / n_fft


def stft_vjp(spec_bar, config: StftConfig, num_samples: int):
    frames_bar = _rfft_vjp(spec_bar, config.fft_size, config.window_size) * config.window()
    return overlap_add(frames_bar, config, num_samples)


def istft_vjp(x_bar, config: StftConfig, num_frames: int):
    env = _wola_envelope(config, num_frames, len(x_bar))
    y_bar = np.divide(x_bar, env, out=np.zeros_like(x_bar), where=env > 1e-10)
    frames_bar = frame_signal(y_bar, config, num_frames) * config.window()
    return _irfft_vjp(frames_bar, config.fft_size)


def _istft(data, config, num_samples):
    frames = np.fft.irfft(data, n=config.fft_size, axis=1)[:, :config.window_size]
    frames *= config.window()
    env = _wola_envelope(config, data.shape[0], num_samples)
    y = overlap_add(frames, config, num_samples)
    return np.divide(y, env, out=np.zeros_like(y), where=env > 1e-10)


def _stft(x, config, num_frames=None):
    frames = frame_signal(x, config, num_frames) * config.window()
    return np.fft.rfft(frames, n=config.fft_size, axis=1)


def levinson_forward_vjp(a_bar, k, steps):
    """Pull the adjoint of the order-P polynomial back through the step-up recursion."""
    k_bar = np.zeros_like(k)
    bar = a_bar
    for i in range(k.shape[-1], 0, -1):
        prev = steps[i - 1]
        ext = np.concatenate([prev, np.zeros(prev.shape[:-1] + (1,))], axis=-1)
        k_bar[..., i - 1] = np.sum(bar * ext[..., ::-1], axis=-1)
        ext_bar = bar + k[..., i - 1:i] * bar[..., ::-1]
        bar = ext_bar[..., :i]
    return k_bar


# --- tape ---------------------------------------------------------------------

def _finite(name, *arrays):
    for arr in arrays:
        if not np.all(np.isfinite(arr)):
            raise NumericalError(f"non-finite values at stage '{name}'")


@dataclass
class Gradients:
    loss: float
    theta: np.ndarray
    log_gain: np.ndarray
    excitation: np.ndarray


class GradientTape:
    """One recorded forward pass plus adjoint buffers.

    >>> tape = GradientTape(theta, log_gain, excitation, config)
    >>> value = tape.forward(target, LossSpec("l2"))
    >>> grads = tape.backward()

    Adjoints start at zero with the shapes of their primals. A tape is for a
    single backward pass at a time; use a fresh tape per thread.
    """

    def __init__(self, theta, log_gain, excitation=None, config: StftConfig | None = None):
        self.config = config or StftConfig()
        self.theta = np.atleast_2d(np.asarray(theta, dtype=np.float64))
        self.log_gain = np.atleast_1d(np.asarray(log_gain, dtype=np.float64))
        m = self.theta.shape[0]
        if self.log_gain.shape != (m,):
            raise DataError(f"log_gain shape {self.log_gain.shape} != ({m},)")
        if excitation is None:
            self.excitation = None
        else:
            e = excitation.samples if isinstance(excitation, AudioBuffer) else excitation
            self.excitation = np.asarray(e, dtype=np.float64)
            frames = self.config.num_frames(len(self.excitation))
            if frames != m:
                raise DataError(f"excitation gives {frames} STFT frames, parameters have {m}")
        self.adjoints = {
            "theta": np.zeros_like(self.theta),
            "log_gain": np.zeros_like(self.log_gain),
            "excitation": None if self.excitation is None else np.zeros_like(self.excitation),
        }
        self._rec = {}
        self.value = None

    def envelope(self):
        t = np.tanh(self.theta)
        k = np.clip(t, -K_MAX, K_MAX)
        a, steps = levinson_forward(k, return_steps=True)
        denom = np.fft.rfft(a, n=self.config.fft_size, axis=1) + self.config.epsilon
        g = np.exp(self.log_gain)
        h = g[:, None] / denom
        _finite("envelope", a, h)
        self._rec.update(t=t, k=k, a=a, steps=steps, denom=denom, g=g, h=h)
        return h

    def forward(self, target, loss: LossSpec | None = None) -> float:
        loss = loss or LossSpec()
        cfg = self.config
        h = self.envelope()
        m, n = h.shape[0], cfg.fft_size
        scale = _reduce_scale(loss.reduction, m, n)
        wts = hermitian_weights(n)
        self._rec.update(loss=loss)

        if loss.kind == "lsd":
            target_mag = np.abs(target.data if isinstance(target, ComplexSpectrogram) else target)
            if target_mag.shape != h.shape:
                raise DataError(f"target envelope shape {target_mag.shape} != {h.shape}")
            diff = np.log(np.abs(h)) - np.log(target_mag)
            _finite("lsd", diff)
            self._rec.update(diff=diff)
            self.value = float(np.sum(wts * np.abs(diff))) * scale
            return self.value

        if self.excitation is None:
            raise UsageError(f"loss '{loss.kind}' needs an excitation signal")
        tgt = np.asarray(target.samples if isinstance(target, AudioBuffer) else target, float)
        if tgt.shape != self.excitation.shape:
            raise DataError(f"target length {tgt.shape} != excitation length {self.excitation.shape}")
        e_spec = _stft(self.excitation, cfg, m)
        x_spec = h * e_spec
        x = _istft(x_spec, cfg, len(self.excitation))
        _finite("istft", x)
        self._rec.update(e_spec=e_spec, x=x)
        if loss.kind == "l2":
            resid = x - tgt
            self._rec.update(resid=resid)
            denom = len(x) if loss.reduction == "mean" else 1.0
            self.value = float(np.sum(resid * resid)) / denom
        else:
            s = _stft(x, cfg, m)
            st = _stft(tgt, cfg, m)
            p = np.abs(s) ** 2 + MAG_FLOOR
            diff = 0.5 * np.log(p) - 0.5 * np.log(np.abs(st) ** 2 + MAG_FLOOR)
            self._rec.update(s=s, p=p, diff=diff)
            self.value = float(np.sum(wts * np.abs(diff))) * scale
        return self.value

    def sign_pattern(self):
        """Signs of the L1 residuals (None for smooth losses); used to spot kinks."""
        if "diff" not in self._rec:
            return None
        return np.sign(self._rec["diff"])

    def backward(self, seed: float = 1.0) -> Gradients:
        if self.value is None:
            raise UsageError("backward() called before forward()")
        r = self._rec
        cfg = self.config
        loss = r["loss"]
        h = r["h"]
        m, n = h.shape[0], cfg.fft_size
        scale = _reduce_scale(loss.reduction, m, n) * seed
        wts = hermitian_weights(n)

        e_bar = None
        if loss.kind == "lsd":
            h_bar = wts * np.sign(r["diff"]) * h / np.abs(h) ** 2 * scale
        else:
            if loss.kind == "l2":
                denom = len(r["x"]) if loss.reduction == "mean" else 1.0
                x_bar = 2.0 * r["resid"] / denom * seed
            else:
                s_bar = wts * np.sign(r["diff"]) * r["s"] / r["p"] * scale
                x_bar = stft_vjp(s_bar, cfg, len(r["x"]))
            xs_bar = istft_vjp(x_bar, cfg, m)
            h_bar = xs_bar * np.conj(r["e_spec"])
            e_bar = stft_vjp(xs_bar * np.conj(h), cfg, len(self.excitation))

        denom = r["denom"]
        g_bar = np.sum(np.real(h_bar * np.conj(1.0 / denom)), axis=1)
        a_spec_bar = h_bar * np.conj(-h / denom)
        a_bar = _rfft_vjp(a_spec_bar, n, r["a"].shape[1])
        k_bar = levinson_forward_vjp(a_bar, r["k"], r["steps"])
        t = r["t"]
        theta_bar = k_bar * (np.abs(t) < K_MAX) * (1.0 - t * t)
        lg_bar = g_bar * r["g"]
        _finite("backward", theta_bar, lg_bar)

        self.adjoints["theta"] = theta_bar
        self.adjoints["log_gain"] = lg_bar
        if self.excitation is not None:
            self.adjoints["excitation"] = (e_bar if e_bar is not None
                                           else np.zeros_like(self.excitation))
        return Gradients(self.value, theta_bar, lg_bar, self.adjoints["excitation"])


def forward_backward(theta, log_gain, excitation, target, loss: LossSpec | None = None,
                     config: StftConfig | None = None) -> Gradients:
    """Loss value and exact gradients w.r.t. theta, log gain and excitation."""
    tape = GradientTape(theta, log_gain, excitation, config)
    tape.forward(target, loss)
    return tape.backward()


# --- finite-difference certification --------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_error: float
    worst: tuple | None
    groups: dict = field(default_factory=dict)
    skipped_kinks: int = 0
    checked: int = 0

    def passed(self, tol=1e-4) -> bool:
        return self.max_rel_error < tol

    def to_dict(self) -> dict:
        return {
            "max_rel_error": self.max_rel_error,
            "worst": None if self.worst is None else {"group": self.worst[0],
                                                      "index": list(self.worst[1])},
            "groups": self.groups,
            "skipped_kinks": self.skipped_kinks,
            "checked": self.checked,
        }


def relative_error(analytic, numeric, floor=1e-12):
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def finite_diff_check(theta, log_gain, excitation, target, loss: LossSpec | None = None,
                      config: StftConfig | None = None, coords: int = 100, h: float = 1e-5,
                      seed: int = 0, grad_fn=None,
                      groups=("theta", "log_gain", "excitation")) -> GradCheckReport:
    """Compare analytic gradients against central differences.

    Up to ``coords`` coordinates per argument group are drawn with a seeded
    generator. The step is ``h * max(1, |x|)``. A coordinate is skipped when
    the two perturbations leave some L1 residual on opposite sides of zero,
    i.e. the difference quotient straddles a kink. ``grad_fn`` overrides the
    analytic gradient (used to test the harness itself).

    The relative error's denominator is floored at ``1e4 * eps * max(|L|, 1) / step``,
    so a difference quotient that is pure rounding noise (an exactly
    vanishing partial) cannot register more than 1e-4 on its own.
    """
    loss = loss or LossSpec()
    config = config or StftConfig()
    params = {
        "theta": np.array(theta, dtype=np.float64),
        "log_gain": np.array(log_gain, dtype=np.float64),
        "excitation": None if excitation is None else np.array(
            excitation.samples if isinstance(excitation, AudioBuffer) else excitation,
            dtype=np.float64),
    }
    eps = np.finfo(np.float64).eps
    grads = (grad_fn or forward_backward)(params["theta"], params["log_gain"],
                                          params["excitation"], target, loss, config)
    analytic = {"theta": grads.theta, "log_gain": grads.log_gain, "excitation": grads.excitation}
    rng = np.random.default_rng(seed)

    def evaluate(p):
        tape = GradientTape(p["theta"], p["log_gain"], p["excitation"], config)
        value = tape.forward(target, loss)
        return value, tape.sign_pattern()

    report = GradCheckReport(max_rel_error=0.0, worst=None)
    for name in groups:
        arr = params[name]
        if arr is None:
            continue
        count = min(coords, arr.size)
        flat_idx = rng.choice(arr.size, size=count, replace=False)
        worst, worst_idx, skipped = 0.0, None, 0
        for fi in flat_idx:
            idx = np.unravel_index(fi, arr.shape)
            orig = arr[idx]
            step = h * max(1.0, abs(orig))
            arr[idx] = orig + step
            f_plus, sign_plus = evaluate(params)
            arr[idx] = orig - step
            f_minus, sign_minus = evaluate(params)
            arr[idx] = orig
            if sign_plus is not None and np.any(sign_plus != sign_minus):
                skipped += 1
                continue
            numeric = (f_plus - f_minus) / (2 * step)
            floor = 1e4 * eps * max(abs(grads.loss), 1.0) / step
            err = relative_error(float(analytic[name][idx]), numeric, floor)
            if err > worst:
                worst, worst_idx = err, tuple(int(i) for i in idx)
        report.groups[name] = {"max_rel_error": worst, "worst_index": worst_idx,
                               "checked": count - skipped, "skipped": skipped}
        report.skipped_kinks += skipped
        report.checked += count - skipped
        if worst >= report.max_rel_error:
            report.max_rel_error = worst
            report.worst = (name, worst_idx) if worst_idx is not None else report.worst
    return report


def random_point(rng, order: int, num_frames: int, config: StftConfig | None = None):
    """A random stable parameter point: ``theta_i ~ U(-1, 1) / sqrt(i)``.

    The ``1/sqrt(i)`` decay keeps high-order reflection coefficients small,
    as in analyzed speech, so the random envelopes have realistic dynamic
    range instead of near-unit-circle poles at every order.
    """
    theta = rng.uniform(-1.0, 1.0, (num_frames, order)) / np.sqrt(np.arange(1, order + 1))
    log_gain = rng.normal(0.0, 0.3, num_frames)
    return theta, log_gain


def certify(seed: int = 0, points: int = 10, coords: int = 100, order: int = 30,
            num_frames: int = 8, config: StftConfig | None = None, losses=LOSS_KINDS,
            h: float = 1e-5) -> dict:
    """Finite-difference check of every loss at ``points`` random stable points.

    Signals are ``num_frames * hop`` samples long. LSD targets are random
    envelopes of the same order; waveform targets are white noise.
    """
    config = config or StftConfig()
    rng = np.random.default_rng(seed)
    n = num_frames * config.hop_size
    per_loss = {kind: {"max_rel_error": 0.0, "worst": None, "checked": 0, "skipped_kinks": 0}
                for kind in losses}
    for pt in range(points):
        theta, log_gain = random_point(rng, order, num_frames, config)
        excitation = rng.standard_normal(n)
        for kind in losses:
            if kind == "lsd":
                tt, tg = random_point(rng, order, num_frames, config)
                target = np.abs(GradientTape(tt, tg, None, config).envelope())
            else:
                target = rng.standard_normal(n)
            rep = finite_diff_check(theta, log_gain, excitation, target, LossSpec(kind), config,
                                    coords=coords, h=h, seed=pt)
            entry = per_loss[kind]
            entry["checked"] += rep.checked
            entry["skipped_kinks"] += rep.skipped_kinks
            if rep.max_rel_error >= entry["max_rel_error"]:
                entry["max_rel_error"] = rep.max_rel_error
                entry["worst"] = {"point": pt, **(rep.to_dict()["worst"] or {})}
    return {"seed": seed, "points": points, "coords": coords, "order": order,
            "num_frames": num_frames, "h": h, "losses": per_loss,
            "max_rel_error": max(v["max_rel_error"] for v in per_loss.values())}


# --- gradient-descent fitting ---------------------------------------------------

@dataclass
class FitResult:
    losses: list
    theta: np.ndarray | None = None
    log_gain: np.ndarray | None = None
    excitation: np.ndarray | None = None
    iterations: int = 0

    def to_dict(self) -> dict:
        return {"losses": [float(v) for v in self.losses], "iterations": self.iterations,
                "final_loss": float(self.losses[-1]) if self.losses else None}


def _descend(value_and_grad, x0, iters, step, armijo=1e-4, max_halvings=60, tol=0.0,
             divergence=10.0):
    """Gradient descent with Armijo backtracking (halving).

    Each iteration first tries twice the previously accepted step (capped
    at ``step``), so the step size can recover after a hard backtrack.
    """
    x = x0
    f, g = value_and_grad(x)
    f0 = f
    losses = [f]
    trial = step
    it = 0
    for it in range(1, iters + 1):
        gg = float(np.sum(g * g))
        if gg == 0.0 or f <= tol:
            it -= 1
            break
        t = min(step, 2.0 * trial)
        for _ in range(max_halvings):
            x_new = x - t * g
            f_new, g_new = value_and_grad(x_new)
            if np.isfinite(f_new) and f_new <= f - armijo * t * gg:
                break
            t *= 0.5
        else:
            it -= 1
            break
        x, f, g, trial = x_new, f_new, g_new, t
        losses.append(f)
        if f > divergence * max(f0, 1e-300):
            raise NumericalError(f"descent diverged: loss {f:.3g} > {divergence} x initial {f0:.3g}")
    return x, losses, it


def fit_envelope(target_envelope, order: int, iters: int = 500, step: float = 10.0,
                 config: StftConfig | None = None, tol: float = 0.0) -> FitResult:
    """Fit theta and log gain to a target envelope magnitude by descent on mean LSD.

    Starts from ``theta = 0``, ``log_gain = 0``. The loss curve is
    non-increasing by construction of the line search.
    """
    config = config or StftConfig()
    target = np.abs(target_envelope.data if isinstance(target_envelope, ComplexSpectrogram)
                    else np.asarray(target_envelope))
    if target.ndim != 2 or target.shape[1] != config.n_bins:
        raise DataError(f"target envelope must be (M, {config.n_bins}), got {target.shape}")
    m = target.shape[0]
    spec = LossSpec("lsd", "mean")

    def value_and_grad(x):
        th, lg = x[:, :order], x[:, order]
        tape = GradientTape(th, lg, None, config)
        v = tape.forward(target, spec)
        g = tape.backward()
        return v, np.column_stack([g.theta, g.log_gain])

    x, losses, it = _descend(value_and_grad, np.zeros((m, order + 1)), iters, step, tol=tol)
    return FitResult(losses=losses, theta=x[:, :order], log_gain=x[:, order], iterations=it)


def fit_excitation(target_audio, frames, iters: int = 1000, step: float = 1e4,
                   config: StftConfig | None = None, tol: float = 0.0) -> FitResult:
    """Recover an excitation by descent on the mean squared waveform error.

    ``frames`` is an AllPoleFrameSet; the excitation starts at zero.
    """
    config = config or StftConfig()
    tgt = np.asarray(target_audio.samples if isinstance(target_audio, AudioBuffer)
                     else target_audio, dtype=np.float64)
    if config.num_frames(len(tgt)) != frames.num_frames:
        raise DataError(f"target gives {config.num_frames(len(tgt))} frames, filter set has "
                        f"{frames.num_frames}")
    g = frames.gain
    h = g[:, None] / (np.fft.rfft(frames.a, n=config.fft_size, axis=1) + config.epsilon)
    m = frames.num_frames

    def value_and_grad(e):
        x = _istft(h * _stft(e, config, m), config, len(tgt))
        resid = x - tgt
        v = float(np.sum(resid * resid)) / len(tgt)
        xs_bar = istft_vjp(2.0 * resid / len(tgt), config, m)
        return v, stft_vjp(xs_bar * np.conj(h), config, len(tgt))

    e, losses, it = _descend(value_and_grad, np.zeros_like(tgt), iters, step, tol=tol)
    return FitResult(losses=losses, excitation=e, iterations=it)
