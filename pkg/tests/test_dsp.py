import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import signal as sps

from neurodecode import dsp
from neurodecode.dataset import Recording


def poly_response(filt, freqs, fs):
    """Expand the cascade into one b/a pair and evaluate it directly."""
    b, a = np.array([1.0]), np.array([1.0])
    for b0, b1, b2, a1, a2 in filt.sections:
        b = np.polymul(b, [b0, b1, b2])
        a = np.polymul(a, [1.0, a1, a2])
    z = np.exp(1j * 2 * np.pi * np.asarray(freqs) / fs)
    # b, a are in powers of z^-1: H = sum b_k z^-k / sum a_k z^-k
    return np.polyval(b[::-1], 1 / z) / np.polyval(a[::-1], 1 / z)


def db(h):
    with np.errstate(divide="ignore"):
        return 20 * np.log10(np.abs(h))


@pytest.fixture(scope="module")
def bandpass():
    return dsp.design_butterworth_bandpass(5, 8, 70, 256)


def test_bandpass_edges_at_minus_3db(bandpass):
    g = db(poly_response(bandpass, [8.0, 70.0], 256))
    assert np.all(np.abs(g + 3.0) <= 0.25)


def test_bandpass_flat_at_centre(bandpass):
    assert abs(db(poly_response(bandpass, [np.sqrt(8 * 70)], 256))[0]) <= 0.1


def test_bandpass_stopband(bandpass):
    assert db(poly_response(bandpass, [1.0], 256))[0] <= -40
    assert db(poly_response(bandpass, [120.0], 256))[0] <= -40
    grid = np.linspace(0.01, 1.0, 50)
    assert np.all(db(poly_response(bandpass, grid, 256)) <= -40)


def test_bandpass_matches_reference_design(bandpass):
    ref = sps.butter(5, [8, 70], btype="band", fs=256, output="sos")
    f = np.linspace(0.05, 127.95, 2000)
    _, h = sps.sosfreqz(ref, worN=f, fs=256)
    np.testing.assert_allclose(np.abs(bandpass.response_hz(f)), np.abs(h), atol=1e-10)


def test_cascade_response_equals_expanded_polynomial(bandpass):
    f = np.linspace(0.5, 127.5, 300)
    np.testing.assert_allclose(bandpass.response_hz(f), poly_response(bandpass, f, 256), rtol=1e-9, atol=1e-12)


def test_bandpass_structure(bandpass):
    assert bandpass.sections.shape == (5, 5)
    assert np.abs(bandpass.poles()).max() < 1 - 1e-9


@pytest.mark.parametrize("args", [(5, 0, 70, 256), (5, 70, 8, 256), (5, 8, 128, 256), (5, 8, 200, 256), (0, 8, 70, 256)])
def test_bandpass_rejects_bad_edges(args):
    with pytest.raises(dsp.FilterDesignError):
        dsp.design_butterworth_bandpass(*args)


@settings(max_examples=60, deadline=None)
@given(
    order=st.integers(1, 6),
    lo=st.floats(0.01, 0.45),
    width=st.floats(0.05, 0.95),
    fs=st.sampled_from([128.0, 256.0, 1000.0]),
)
def test_designs_are_stable(order, lo, width, fs):
    low = lo * fs / 2
    high = low + width * (fs / 2 - low) * 0.98
    if high - low < 1e-3 * fs:
        return
    filt = dsp.design_butterworth_bandpass(order, low, high, fs)
    assert np.abs(filt.poles()).max() < 1 - 1e-9
    assert np.allclose(filt.gain_db([low, high]), -3.0103, atol=0.25)


@pytest.fixture(scope="module")
def notch():
    return dsp.design_notch(60, 30, 256)


def test_notch_kills_centre(notch):
    h = abs(poly_response(notch, [60.0], 256)[0])
    assert h == 0 or db(h) <= -50


def test_notch_dc_and_shoulders(notch):
    assert abs(db(poly_response(notch, [0.0], 256))[0]) <= 0.01
    assert np.all(db(poly_response(notch, [55.0, 65.0], 256)) >= -1)


def test_notch_zeros_on_unit_circle(notch):
    b0, b1, b2, _, _ = notch.sections[0]
    zeros = np.roots([b0, b1, b2])
    np.testing.assert_allclose(np.abs(zeros), 1.0, atol=1e-12)
    np.testing.assert_allclose(np.sort(np.abs(np.angle(zeros))), [2 * np.pi * 60 / 256] * 2, atol=1e-12)


def test_notch_bandwidth(notch):
    f = np.linspace(50, 70, 20001)
    g = db(notch.response_hz(f))
    inside = f[g <= -3.0103]
    assert inside.max() - inside.min() == pytest.approx(60 / 30, rel=0.02)


def test_notch_rejects_bad_centre():
    with pytest.raises(dsp.FilterDesignError):
        dsp.design_notch(128, 30, 256)
    with pytest.raises(dsp.FilterDesignError):
        dsp.design_notch(0, 30, 256)


def rec(x, fs=256.0):
    x = np.atleast_2d(x)
    return Recording(x, fs, [f"c{i}" for i in range(x.shape[0])])


def test_filter_zero_in_zero_out(bandpass):
    assert np.all(dsp.filter_forward(bandpass, rec(np.zeros((3, 100)))).samples == 0)


def test_identity_filter():
    ident = dsp.IirFilter([[1, 0, 0, 0, 0]])
    x = np.random.default_rng(0).standard_normal((2, 50))
    np.testing.assert_array_equal(dsp.filter_forward(ident, rec(x)).samples, x)


def test_impulse_spectrum_matches_transfer_function(bandpass):
    n = 4096
    imp = np.zeros((2, n))
    imp[:, 0] = 1
    y = dsp.filter_forward(bandpass, rec(imp)).samples[0]
    spec = np.abs(np.fft.rfft(y))
    f = np.fft.rfftfreq(n, 1 / 256)
    assert np.abs(spec - np.abs(poly_response(bandpass, f, 256))).max() <= 1e-6


@pytest.mark.parametrize("maker", [
    lambda: dsp.design_butterworth_bandpass(5, 8, 70, 256),
    lambda: dsp.design_butterworth_bandpass(3, 1, 10, 256),
    lambda: dsp.design_notch(60, 30, 256),
    lambda: dsp.design_notch(50, 5, 1000),
])
def test_frequency_response_property(maker):
    filt = maker()
    n = 1 << 15
    imp = np.zeros(n)
    imp[0] = 1
    y = dsp.filter_array(filt, imp)
    f = np.fft.rfftfreq(n, 1 / filt.rate_hz)
    assert np.abs(np.abs(np.fft.rfft(y)) - np.abs(filt.response_hz(f))).max() <= 1e-4


def test_filter_linearity(bandpass):
    rng = np.random.default_rng(3)
    x, y = rng.standard_normal((2, 4, 300))
    a, b = 2.5, -0.75
    lhs = dsp.filter_forward(bandpass, rec(a * x + b * y)).samples
    rhs = a * dsp.filter_forward(bandpass, rec(x)).samples + b * dsp.filter_forward(bandpass, rec(y)).samples
    assert np.abs(lhs - rhs).max() <= 1e-9 * np.abs(rhs).max()


def test_unstable_section_rejected():
    with pytest.raises(dsp.FilterDesignError):
        dsp.IirFilter([[1, 0, 0, 0, 1.0]])


def test_resample_ratio_1000_to_256():
    spec = dsp.design_resampler(1000, 256)
    assert (spec.up, spec.down) == (32, 125)
    assert spec.fir_taps.size == 2 * 10 * 125 + 1
    np.testing.assert_array_equal(spec.fir_taps, spec.fir_taps[::-1])


def test_resample_identity():
    x = np.random.default_rng(0).standard_normal((3, 77))
    out = dsp.resample(rec(x, 500.0), 500.0)
    np.testing.assert_array_equal(out.samples, x)
    assert out.rate_hz == 500.0


def test_resample_length_and_rate():
    out = dsp.resample(rec(np.zeros((2, 1001)), 1000.0), 256.0)
    assert out.rate_hz == 256.0
    assert out.n_samples == int(np.ceil(1001 * 32 / 125))


def test_resample_rejects_irrational_ratio():
    with pytest.raises(dsp.ResampleError):
        dsp.design_resampler(1000, 1000 * np.sqrt(2) / 3)
    with pytest.raises(dsp.ResampleError):
        dsp.design_resampler(1000, 0)


def test_resample_sinusoid_alignment():
    t_in = np.arange(4000) / 1000
    out = dsp.resample(rec(np.vstack([np.sin(2 * np.pi * 10 * t_in)] * 2), 1000.0), 256.0).samples[0]
    t_out = np.arange(out.size) / 256
    ideal = np.sin(2 * np.pi * 10 * t_out)
    lo, hi = int(0.1 * out.size), int(0.9 * out.size)
    assert np.corrcoef(out[lo:hi], ideal[lo:hi])[0, 1] >= 0.999
    assert np.abs(out[lo:hi] - ideal[lo:hi]).max() < 1e-3


def test_resample_matches_reference_polyphase():
    x = np.random.default_rng(5).standard_normal((2, 999))
    spec = dsp.design_resampler(1000, 256)
    ref = sps.resample_poly(x, spec.up, spec.down, axis=1, window=spec.fir_taps)
    np.testing.assert_allclose(dsp.resample_array(x, spec), ref, atol=1e-12)


@pytest.mark.parametrize("rates", [(1000.0, 256.0), (256.0, 1000.0), (512.0, 256.0), (300.0, 256.0)])
def test_resampler_passband_fidelity(rates):
    fs, target = rates
    limit = 0.4 * min(fs, target) / 2
    t = np.arange(int(6 * fs)) / fs
    for f0 in np.linspace(1.0, limit, 6):
        out = dsp.resample(rec(np.vstack([np.cos(2 * np.pi * f0 * t)] * 2), fs), target).samples[0]
        tt = np.arange(out.size) / target
        lo, hi = int(0.2 * out.size), int(0.8 * out.size)
        basis = np.column_stack([np.cos(2 * np.pi * f0 * tt), np.sin(2 * np.pi * f0 * tt)])[lo:hi]
        coef, *_ = np.linalg.lstsq(basis, out[lo:hi], rcond=None)
        assert abs(np.hypot(*coef) - 1) <= 0.01


def test_preprocess_chain_removes_line_noise():
    t = np.arange(4000) / 1000
    x = np.vstack([np.sin(2 * np.pi * 60 * t), np.sin(2 * np.pi * 20 * t)])
    out, steps = dsp.preprocess_recording(rec(x, 1000.0), dsp.PreprocessConfig())
    assert out.rate_hz == 256.0 and len(steps) == 3
    tail = out.samples[:, out.n_samples // 2:]
    p60 = np.mean(tail[0] ** 2) / 0.5
    p20 = np.mean(tail[1] ** 2) / 0.5
    assert 10 * np.log10(p60) <= -50
    assert abs(10 * np.log10(p20)) < 0.5
