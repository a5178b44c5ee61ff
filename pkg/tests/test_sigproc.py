import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import signal

from pimt.errors import BandUnrealizableError, EmptyOutputError, InvalidParameterError
from pimt.sigproc import (BandDefinition, BandStack, FilterBank, Recording, augment_noise, band_sos, decompose,
                          default_filter_bank, notch, preprocess, realize_band, resample, window, window_array,
                          zscore_normalize)

FS = 200.0


def tone(freq, seconds, fs=FS, channels=1, phase=0.0):
    t = np.arange(int(round(seconds * fs))) / fs
    return np.tile(np.sin(2 * np.pi * freq * t + phase), (channels, 1))


def fft_bin_amplitude(x, fs, freq):
    spec = np.abs(np.fft.rfft(x, axis=-1))
    k = int(round(freq * x.shape[-1] / fs))
    return spec[..., k]


# ------------------------------------------------------------- filter bank

def test_default_bank_has_twelve_bands_with_named_edges():
    bank = default_filter_bank()
    assert len(bank) == 12
    assert bank[0] == ("EEG-delta", 0.5, 4.0)
    assert bank[11] == ("QRS", 8.0, 50.0)
    assert all(b.lo < b.hi for b in bank)
    assert len(set(bank.names)) == 12


def test_bank_round_trips_through_list():
    bank = default_filter_bank()
    assert FilterBank.from_list(bank.to_list()) == bank


@pytest.mark.parametrize("bands", [[], [("a", 5, 5)], [("a", 1, 2), ("a", 3, 4)]])
def test_bad_bank_rejected(bands):
    with pytest.raises(InvalidParameterError):
        FilterBank(tuple(bands))


def test_band_clamping_at_200hz():
    bank = default_filter_bank()
    realized = {b.name: realize_band(b, FS) for b in bank}
    assert realized["EEG-gamma"] == (30.0, 90.0)
    assert realized["EMG-MF"] == (45.0, 90.0)
    assert realized["EMG-HF"] == (85.0, 90.0)
    assert realized["EEG-alpha"] == (8.0, 13.0)


def test_band_guard_fires_above_nyquist_only():
    with pytest.raises(BandUnrealizableError) as exc:
        realize_band(BandDefinition("x", 120.0, 130.0), FS)
    assert exc.value.band_name == "x"
    for b in default_filter_bank():
        realize_band(b, FS)


def _half_power_edges(sos, fs):
    freqs = np.linspace(0.01, fs / 2 - 0.01, 200_000)
    _, h = signal.sosfreqz(sos, worN=freqs, fs=fs)
    above = np.nonzero(np.abs(h) ** 2 >= 0.5)[0]
    return freqs[above[0]], freqs[above[-1]]


def test_gamma_band_effective_passband_after_clamp():
    lo, hi = _half_power_edges(band_sos(default_filter_bank()[4], FS), FS)
    assert lo == pytest.approx(30.0, abs=0.2)
    assert hi == pytest.approx(90.0, abs=0.2)


def _tone_gain(band_index, freq, seconds=200.0):
    # long tone so the slowest bands settle; gain measured as FFT-bin ratio
    x = tone(freq, seconds)
    y = decompose(Recording(x, FS), default_filter_bank()).data[band_index]
    return fft_bin_amplitude(y, FS, freq)[0] / fft_bin_amplitude(x, FS, freq)[0]


def test_filter_bank_center_gain_and_octave_rejection():
    bank = default_filter_bank()
    for f, band in enumerate(bank):
        lo, hi = realize_band(band, FS)
        center = np.sqrt(lo * hi)
        sos = band_sos(band, FS)
        probes = [center, lo / 2, 2 * hi] if 2 * hi < FS / 2 else [center, lo / 2]
        _, h = signal.sosfreqz(sos, worN=np.array(probes), fs=FS)
        zero_phase_gain = np.abs(h) ** 2
        assert zero_phase_gain[0] >= 0.7, band.name
        assert np.all(20 * np.log10(zero_phase_gain[1:]) <= -20), band.name


@pytest.mark.parametrize("band_index,freq", [(2, 10.0), (3, 20.0), (0, 2.0), (4, 55.0)])
def test_tone_sweep_oracle_agrees_with_frequency_response(band_index, freq):
    band = default_filter_bank()[band_index]
    _, h = signal.sosfreqz(band_sos(band, FS), worN=np.array([freq]), fs=FS)
    assert _tone_gain(band_index, freq, seconds=60.0) == pytest.approx(abs(h[0]) ** 2, abs=0.02)


# ------------------------------------------------------------- notch / resample / normalize

def test_notch_removes_mains_tone():
    # 60 s so the forward-backward edge transient is a small share of the record
    x = tone(60.0, 60.0)
    y = notch(Recording(x, FS), 60.0).data
    assert fft_bin_amplitude(y, FS, 60.0)[0] <= 0.01 * fft_bin_amplitude(x, FS, 60.0)[0]
    interior = slice(int(5 * FS), -int(5 * FS))
    assert np.sqrt(np.mean(y[:, interior] ** 2)) <= 0.01 * np.sqrt(np.mean(x ** 2))


def test_notch_preserves_passband_tone():
    x = tone(10.0, 10.0)
    y = notch(Recording(x, FS), 60.0).data
    rms_in, rms_out = np.sqrt(np.mean(x ** 2)), np.sqrt(np.mean(y ** 2))
    assert abs(rms_out / rms_in - 1) <= 0.02


def test_notch_zero_input_and_bad_frequency():
    z = Recording(np.zeros((2, 400)), FS)
    assert np.array_equal(notch(z, 50.0).data, z.data)
    for bad in (0.0, 100.0, 150.0):
        with pytest.raises(InvalidParameterError):
            notch(z, bad)


def test_resample_length_and_sine_fidelity():
    x = tone(5.0, 4.0, fs=1000.0)
    out = resample(Recording(x, 1000.0), 200.0)
    assert out.data.shape == (1, 800) and out.fs == 200.0
    expected = tone(5.0, 4.0, fs=200.0)
    assert np.corrcoef(out.data[0], expected[0])[0, 1] >= 0.999


def test_resample_identity_when_rate_matches():
    x = np.random.default_rng(0).standard_normal((3, 500))
    out = resample(Recording(x, 200.0), 200.0)
    assert np.array_equal(out.data, x)
    assert out.data is not x


@given(st.sampled_from([250.0, 256.0, 500.0, 512.0, 1000.0]), st.integers(400, 3000))
@settings(max_examples=20, deadline=None)
def test_resample_length_rule(fs, n):
    out = resample(Recording(np.ones((1, n)), fs), 200.0)
    assert out.n_samples == int(round(n * 200.0 / fs))


def test_zscore_examples():
    out = zscore_normalize(Recording(np.array([[1.0, 2.0, 3.0, 4.0], [5.0, 5.0, 5.0, 5.0]]), FS)).data
    assert out[0].mean() == pytest.approx(0, abs=1e-6)
    assert out[0].std() == pytest.approx(1, abs=1e-6)
    assert np.array_equal(out[1], np.zeros(4))


@given(st.integers(1, 5), st.integers(8, 64), st.integers(0, 10_000))
@settings(max_examples=30, deadline=None)
def test_zscore_matches_per_channel_oracle(C, T, seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((C, T)) * rng.uniform(0.1, 10, (C, 1)) + rng.uniform(-5, 5, (C, 1))
    out = zscore_normalize(Recording(x, FS)).data
    for c in range(C):
        row = x[c]
        np.testing.assert_allclose(out[c], (row - row.mean()) / row.std(), atol=1e-9)


def test_preprocess_skips_mains_above_nyquist():
    rec = Recording(np.random.default_rng(1).standard_normal((2, 1000)), 100.0)
    out = preprocess(rec, (50.0, 60.0), 200.0)
    assert out.fs == 200.0 and out.n_samples == 2000
    np.testing.assert_allclose(out.data.std(axis=1), 1.0, atol=1e-9)


# ------------------------------------------------------------- decomposition

def test_decompose_alpha_tone_band_powers():
    x = tone(10.0, 20.0)
    stack = decompose(Recording(x, FS), default_filter_bank())
    power_in = fft_bin_amplitude(x, FS, 10.0)[0] ** 2
    bank = default_filter_bank()
    alpha = bank.names.index("EEG-alpha")
    delta = bank.names.index("EEG-delta")
    assert fft_bin_amplitude(stack.data[alpha], FS, 10.0)[0] ** 2 >= 0.7 * power_in
    assert np.sum(stack.data[delta] ** 2) <= 0.01 * np.sum(x ** 2)


def test_decompose_zero_input_and_shape():
    stack = decompose(Recording(np.zeros((3, 1000)), FS))
    assert stack.data.shape == (12, 3, 1000)
    assert not np.any(stack.data)


def test_decompose_is_zero_phase():
    x = tone(10.0, 20.0)
    y = decompose(Recording(x, FS)).data[2, 0]
    core = slice(400, -400)
    a, b = x[0, core], y[core]
    lags = signal.correlation_lags(len(a), len(b))
    assert lags[np.argmax(signal.correlate(b, a))] == 0


@given(st.floats(-3, 3), st.floats(-3, 3), st.integers(0, 1000))
@settings(max_examples=10, deadline=None)
def test_decompose_linearity(a, b, seed):
    rng = np.random.default_rng(seed)
    x, y = rng.standard_normal((2, 2, 600))
    lhs = decompose(Recording(a * x + b * y, FS)).data
    rhs = a * decompose(Recording(x, FS)).data + b * decompose(Recording(y, FS)).data
    scale = max(np.abs(rhs).max(), 1e-12)
    assert np.abs(lhs - rhs).max() <= 1e-6 * scale


# ------------------------------------------------------------- windowing and augmentation

def _stack(T, F=2, C=3):
    bank = FilterBank(tuple(BandDefinition(f"b{i}", 1.0 + i, 2.0 + i) for i in range(F)))
    return BandStack(np.arange(F * C * T, dtype=float).reshape(F, C, T), FS, bank)


def test_window_counts():
    assert len(window(_stack(4000))) == 5
    wins = window(_stack(900))
    assert len(wins) == 1 and wins[0].n_samples == 800
    with pytest.raises(EmptyOutputError):
        window(_stack(799))


@given(st.integers(800, 5000))
@settings(max_examples=25, deadline=None)
def test_windows_tile_truncated_signal(T):
    stack = _stack(T, F=1, C=1)
    wins = window_array(stack)
    n = (T // 800) * 800
    assert np.array_equal(np.concatenate(list(wins), axis=-1), stack.data[..., :n])


def test_augment_noise_contract():
    x = np.random.default_rng(3).standard_normal((1, 10_000))
    assert np.array_equal(augment_noise(x, 0.0, seed=1), x)
    y = augment_noise(x, 0.05, seed=7)
    assert 0.04 <= np.std(y - x) <= 0.06
    assert np.array_equal(y, augment_noise(x, 0.05, seed=7))
    assert not np.array_equal(y, augment_noise(x, 0.05, seed=8))
    stack = _stack(800)
    out = augment_noise(stack, 0.05, seed=0)
    assert isinstance(out, BandStack) and out.data.shape == stack.data.shape


def test_augment_noise_rejects_negative_sigma():
    with pytest.raises(InvalidParameterError):
        augment_noise(np.zeros((1, 10)), -0.1)
