"""Signal conditioning: Butterworth bandpass, notch, and rational resampling.

Filters are held as cascades of second-order sections. Each section is the
tuple ``(b0, b1, b2, a1, a2)`` with ``a0 = 1``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np
from scipy import signal as sps

from .dataset import Recording, Trial, TrialSet

POLE_MARGIN = 1e-9


class FilterDesignError(ValueError):
    pass


class ResampleError(ValueError):
    pass


def _section_poles(section) -> np.ndarray:
    _, _, _, a1, a2 = section
    return np.roots([1.0, a1, a2]) if (a1 or a2) else np.zeros(0)


@dataclass(frozen=True, eq=False)
class IirFilter:
    sections: np.ndarray  # [n_sections, 5] = (b0, b1, b2, a1, a2)
    description: str = ""
    rate_hz: float | None = None

    def __post_init__(self):
        sec = np.array(self.sections, dtype=np.float64).reshape(-1, 5)
        if sec.shape[0] == 0:
            raise FilterDesignError("filter needs at least one section")
        for i, s in enumerate(sec):
            r = np.abs(_section_poles(s))
            if r.size and r.max() >= 1.0 - POLE_MARGIN:
                raise FilterDesignError(f"section {i} is unstable (pole radius {r.max():.12f})")
        sec.flags.writeable = False
        object.__setattr__(self, "sections", sec)

    @property
    def sos(self) -> np.ndarray:
        """Sections in the ``[b0, b1, b2, 1, a1, a2]`` layout scipy expects."""
        s = self.sections
        return np.column_stack([s[:, 0], s[:, 1], s[:, 2], np.ones(len(s)), s[:, 3], s[:, 4]])

    def poles(self) -> np.ndarray:
        return np.concatenate([_section_poles(s) for s in self.sections])

    def response(self, omega) -> np.ndarray:
        """Complex response H(e^{jw}) at normalised angular frequencies ``omega``."""
        z1 = np.exp(-1j * np.asarray(omega, dtype=np.float64))
        z2 = z1 * z1
        h = np.ones_like(z1)
        for b0, b1, b2, a1, a2 in self.sections:
            h = h * (b0 + b1 * z1 + b2 * z2) / (1.0 + a1 * z1 + a2 * z2)
        return h

    def response_hz(self, freqs_hz, rate_hz: float | None = None) -> np.ndarray:
        fs = self.rate_hz if rate_hz is None else rate_hz
        if fs is None:
            raise FilterDesignError("sampling rate unknown; pass rate_hz")
        return self.response(2.0 * np.pi * np.asarray(freqs_hz, dtype=np.float64) / fs)

    def gain_db(self, freqs_hz, rate_hz: float | None = None) -> np.ndarray:
        mag = np.abs(self.response_hz(freqs_hz, rate_hz))
        with np.errstate(divide="ignore"):
            return 20.0 * np.log10(mag)


def _pair_poles(poles: np.ndarray) -> list[tuple[float, float]]:
    """Group poles into real-coefficient quadratics ``z^2 + a1 z + a2``."""
    tol = 1e-10
    is_real = np.abs(poles.imag) <= tol * np.maximum(np.abs(poles), 1.0)
    upper = poles[~is_real & (poles.imag > 0)]
    reals = np.sort(poles[is_real].real)
    if len(reals) % 2:
        raise FilterDesignError("odd number of real poles")
    out = [(-2.0 * p.real, abs(p) ** 2) for p in upper[np.argsort(np.angle(upper))]]
    out += [(-(r1 + r2), r1 * r2) for r1, r2 in zip(reals[::2], reals[1::2])]
    return out


def design_butterworth_bandpass(order: int, low_hz: float, high_hz: float, rate_hz: float) -> IirFilter:
    """Order-``order`` Butterworth bandpass via prewarped bilinear transform.

    The analog lowpass prototype is shifted to the band with
    ``s -> (s^2 + W0^2) / (s * BW)`` which doubles the pole count, so the
    result has ``order`` second-order sections with zeros at z = +1 and -1.
    """
    if int(order) != order or order < 1:
        raise FilterDesignError(f"order must be a positive integer, got {order}")
    nyq = rate_hz / 2.0
    if not (0.0 < low_hz < high_hz < nyq):
        raise FilterDesignError(
            f"band edges must satisfy 0 < low < high < Nyquist ({nyq} Hz); got {low_hz}, {high_hz}"
        )
    fs2 = 2.0 * rate_hz
    w_lo = fs2 * math.tan(math.pi * low_hz / rate_hz)
    w_hi = fs2 * math.tan(math.pi * high_hz / rate_hz)
    bw = w_hi - w_lo
    w0sq = w_lo * w_hi

    k = np.arange(1, order + 1)
    proto = np.exp(1j * np.pi * (2 * k + order - 1) / (2 * order))
    # each prototype pole p -> roots of s^2 - p*BW*s + W0^2
    pb = proto * bw / 2.0
    disc = np.sqrt(pb * pb - w0sq)
    analog = np.concatenate([pb + disc, pb - disc])
    digital = (fs2 + analog) / (fs2 - analog)

    sections = np.array([[1.0, 0.0, -1.0, a1, a2] for a1, a2 in _pair_poles(digital)])
    if len(sections) != order:
        raise FilterDesignError("pole pairing failed; band too narrow for double precision")

    # |H| = 1 at the digital image of the analog centre frequency
    omega0 = 2.0 * math.atan(math.sqrt(w0sq) / fs2)
    filt = IirFilter(sections, rate_hz=rate_hz)
    g = 1.0 / abs(filt.response(omega0))
    sections[:, :3] *= g ** (1.0 / order)
    return IirFilter(
        sections,
        description=f"butterworth bandpass order={order} {low_hz}-{high_hz} Hz @ {rate_hz} Hz",
        rate_hz=rate_hz,
    )


def design_notch(center_hz: float, q: float, rate_hz: float) -> IirFilter:
    """Second-order notch with zeros on the unit circle at +-center_hz.

    The -3 dB width is ``center_hz / q`` and the gain at DC and Nyquist is 1.
    """
    if not (0.0 < center_hz < rate_hz / 2.0):
        raise FilterDesignError(f"notch centre must lie in (0, {rate_hz / 2.0}) Hz, got {center_hz}")
    if not q > 0:
        raise FilterDesignError(f"q must be positive, got {q}")
    w0 = 2.0 * math.pi * center_hz / rate_hz
    bw = w0 / q
    gain = 1.0 / (1.0 + math.tan(bw / 2.0))
    c = math.cos(w0)
    sec = [gain, -2.0 * gain * c, gain, -2.0 * gain * c, 2.0 * gain - 1.0]
    return IirFilter(
        np.array([sec]),
        description=f"notch {center_hz} Hz Q={q} @ {rate_hz} Hz",
        rate_hz=rate_hz,
    )


def filter_forward(filt: IirFilter, rec: Recording) -> Recording:
    """Causal single pass over every channel, zero initial conditions."""
    y = sps.sosfilt(filt.sos, rec.samples, axis=1)
    return rec.with_samples(y)


def filter_array(filt: IirFilter, x: np.ndarray, axis: int = -1) -> np.ndarray:
    return sps.sosfilt(filt.sos, np.asarray(x, dtype=np.float64), axis=axis)


@dataclass(frozen=True, eq=False)
class ResamplerSpec:
    up: int
    down: int
    fir_taps: np.ndarray

    def __post_init__(self):
        if self.up < 1 or self.down < 1:
            raise ResampleError("up and down must be positive")
        if math.gcd(self.up, self.down) != 1:
            raise ResampleError(f"{self.up}/{self.down} is not in lowest terms")
        h = np.asarray(self.fir_taps, dtype=np.float64)
        if h.ndim != 1 or h.size % 2 == 0:
            raise ResampleError("kernel must be 1-D with odd length")
        if not np.array_equal(h, h[::-1]):
            raise ResampleError("kernel must be symmetric")
        h.flags.writeable = False
        object.__setattr__(self, "fir_taps", h)

    @property
    def half_len(self) -> int:
        return (self.fir_taps.size - 1) // 2


def rational_ratio(rate_hz: float, target_hz: float, limit: int = 1000) -> tuple[int, int]:
    if not (target_hz > 0 and rate_hz > 0):
        raise ResampleError("rates must be positive")
    ratio = target_hz / rate_hz
    frac = Fraction(ratio).limit_denominator(limit)
    if frac.numerator > limit or frac.numerator < 1 or abs(float(frac) - ratio) > 1e-12 * ratio:
        raise ResampleError(
            f"{target_hz}/{rate_hz} is not a ratio of integers up, down <= {limit}"
        )
    return frac.numerator, frac.denominator


def kaiser_sinc_kernel(up: int, down: int, beta: float = 8.6, half_len_factor: int = 10) -> np.ndarray:
    """Kaiser-windowed sinc lowpass, cutoff pi/max(up, down), unit DC gain."""
    m = max(up, down)
    half = half_len_factor * m
    n = np.arange(-half, half + 1)
    h = np.sinc(n / m) * np.kaiser(2 * half + 1, beta)
    h = 0.5 * (h + h[::-1])
    return h / h.sum()


def design_resampler(rate_hz: float, target_hz: float) -> ResamplerSpec:
    up, down = rational_ratio(rate_hz, target_hz)
    return ResamplerSpec(up, down, kaiser_sinc_kernel(up, down))


def resample_array(x: np.ndarray, spec: ResamplerSpec) -> np.ndarray:
    """Polyphase resample along the last axis with the kernel's delay removed."""
    x = np.asarray(x, dtype=np.float64)
    up, down = spec.up, spec.down
    if up == down == 1:
        return x.copy()
    n_in = x.shape[-1]
    n_out = -(-n_in * up // down)
    half = spec.half_len
    # prepend zeros so the kernel centre lands on a multiple of `down`
    pre = (-half) % down
    h = np.concatenate([np.zeros(pre), spec.fir_taps * up])
    offset = (half + pre) // down
    # enough trailing zeros for n_out samples past the offset
    need = (offset + n_out) * down - (n_in - 1) * up - h.size + 1
    post = max(0, -(-need // up))
    if post:
        pad = [(0, 0)] * (x.ndim - 1) + [(0, post)]
        x = np.pad(x, pad)
    y = sps.upfirdn(h, x, up, down, axis=-1)
    return y[..., offset:offset + n_out]


def resample(rec: Recording, target_hz: float) -> Recording:
    spec = design_resampler(rec.rate_hz, target_hz)
    if spec.up == spec.down == 1:
        return rec.with_samples(rec.samples)
    return rec.with_samples(resample_array(rec.samples, spec), rate_hz=target_hz)


@dataclass(frozen=True)
class PreprocessConfig:
    resample_hz: float | None = 256.0
    bandpass: tuple[float, float] | None = (8.0, 70.0)
    bandpass_order: int = 5
    notch_hz: float | None = 60.0
    notch_q: float = 30.0


def preprocess_recording(rec: Recording, cfg: PreprocessConfig) -> tuple[Recording, list[str]]:
    """Resample, then bandpass, then notch; returns the steps actually applied."""
    steps = []
    if cfg.resample_hz is not None:
        rec = resample(rec, cfg.resample_hz)
        steps.append(f"resample {cfg.resample_hz} Hz")
    if cfg.bandpass is not None:
        lo, hi = cfg.bandpass
        filt = design_butterworth_bandpass(cfg.bandpass_order, lo, hi, rec.rate_hz)
        rec = filter_forward(filt, rec)
        steps.append(filt.description)
    if cfg.notch_hz is not None:
        filt = design_notch(cfg.notch_hz, cfg.notch_q, rec.rate_hz)
        rec = filter_forward(filt, rec)
        steps.append(filt.description)
    return rec, steps


def preprocess_trials(ts: TrialSet, cfg: PreprocessConfig) -> TrialSet:
    """Apply :func:`preprocess_recording` to every epoch of a trial set.

    The applied steps are appended to ``ts.preprocessing``. An empty set is
    run through a zero probe so its declared rate and length still update.
    """
    probe = Recording(np.zeros((ts.n_channels, ts.epoch_samples)), ts.rate_hz, ts.channel_names)
    shape_rec, steps = preprocess_recording(probe, cfg)
    trials = [Trial(t.trial_id, t.label, preprocess_recording(t.epoch, cfg)[0]) for t in ts.trials]
    return ts.replace_trials(
        trials,
        rate_hz=shape_rec.rate_hz,
        epoch_samples=shape_rec.n_samples,
        preprocessing=tuple(ts.preprocessing) + tuple(steps),
    )
