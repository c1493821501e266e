"""Spatial rendering tests: geometry, delay kernels, head-shadow filtering,
bank construction/serialization and the convolution render path."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ovkws import spatial
from ovkws.spatial import ImpulseResponsePair, IrGeometry


def direct_convolution(x, h, n):
    """O(N*M) convolution sum, the oracle for the FFT-based render path."""
    out = np.zeros(n)
    for k, hk in enumerate(h):
        if k >= n:
            break
        out[k:n] += hk * x[: n - k]
    return out


class TestGeometry:
    def test_angle_grid(self):
        grid = spatial.angle_grid()
        assert len(grid) == 48
        assert grid[0] == 0.0 and grid[-1] == 352.5
        assert np.allclose(np.diff(grid), 7.5)

    def test_mic_layout_endfire_at_90(self):
        g = IrGeometry()
        front, rear = spatial.mic_positions(g)
        # both microphones on the +y ray, front outermost
        assert front[0] == rear[0] == 0.0
        assert front[1] - rear[1] == pytest.approx(g.mic_spacing_m)
        src = spatial.source_position(90.0, g)
        d_front = np.linalg.norm(src - front)
        d_rear = np.linalg.norm(src - rear)
        # at 90 deg the pair is endfire: full spacing delay difference
        assert d_rear - d_front == pytest.approx(g.mic_spacing_m)

    def test_broadside_angles_have_near_zero_delay_difference(self):
        g = IrGeometry()
        front, rear = spatial.mic_positions(g)
        for angle in (0.0, 180.0):
            src = spatial.source_position(angle, g)
            diff = np.linalg.norm(src - front) - np.linalg.norm(src - rear)
            assert abs(diff) < 0.1 * g.mic_spacing_m

    def test_shadow_cutoff_interpolation(self):
        g = IrGeometry()
        assert spatial._shadow_cutoff(90.0, g) == pytest.approx(g.shadow_near_hz)
        assert spatial._shadow_cutoff(270.0, g) == pytest.approx(g.shadow_far_hz)
        # geometric midpoint of the exponential interpolation at delta = 90
        mid = np.sqrt(g.shadow_near_hz * g.shadow_far_hz)
        assert spatial._shadow_cutoff(0.0, g) == pytest.approx(mid)
        assert spatial._shadow_cutoff(180.0, g) == pytest.approx(mid)

    def test_invalid_geometry_rejected(self):
        with pytest.raises(ValueError):
            IrGeometry(mic_spacing_m=-0.01).validate()
        with pytest.raises(ValueError):
            IrGeometry(source_distance_m=0.05).validate()


class TestDelayKernel:
    @pytest.mark.parametrize("delay", [3.0, 10.25, 40.5, 77.8])
    def test_delay_recovered_by_cross_correlation(self, delay):
        rng = np.random.default_rng(int(delay * 8))
        x = rng.standard_normal(4096)
        kernel = spatial._fractional_delay(delay, 1024)
        y = np.convolve(x, kernel)[: len(x)]
        lags = np.arange(0, 128)
        corr = [np.dot(y[lag:], x[: len(x) - lag]) for lag in lags]
        # the peak lag matches the requested delay within one sample; the
        # fractional part lives between integer lags
        assert abs(lags[int(np.argmax(corr))] - delay) <= 0.5 + 1e-9

    def test_integer_delay_is_near_unit_pulse(self):
        kernel = spatial._fractional_delay(12.0, 64)
        assert kernel[12] == pytest.approx(1.0, abs=1e-9)
        off = np.delete(kernel, 12)
        assert np.max(np.abs(off)) < 1e-9


class TestLowpass:
    def test_dc_gain_is_unity(self):
        for cutoff in (700.0, 1200.0, 3500.0, 6000.0):
            kernel = spatial._onepole_lowpass(cutoff, 44100, 4096)
            assert kernel.sum() == pytest.approx(1.0, abs=1e-6)

    def test_second_order_slope(self):
        # the cascaded pole rolls off 12 dB per octave well above cutoff
        kernel = spatial._onepole_lowpass(500.0, 44100, 8192)
        spectrum = np.abs(np.fft.rfft(kernel, n=16384))
        freqs = np.fft.rfftfreq(16384, d=1 / 44100)
        g4k = spectrum[np.argmin(np.abs(freqs - 4000.0))]
        g8k = spectrum[np.argmin(np.abs(freqs - 8000.0))]
        assert 20 * np.log10(g4k / g8k) == pytest.approx(12.0, abs=1.0)

    def test_lower_cutoff_darker(self):
        bright = spatial._onepole_lowpass(6000.0, 44100, 1024)
        dark = spatial._onepole_lowpass(700.0, 44100, 1024)
        hi_band = lambda k: np.abs(np.fft.rfft(k, 4096))[1200:]
        assert hi_band(dark).max() < hi_band(bright).max()


class TestBank:
    def test_bank_composition(self, ir_bank):
        assert len(ir_bank) == 49
        kinds = [ir.kind for ir in ir_bank]
        assert kinds.count(spatial.KIND_OVTF) == 1
        assert kinds.count(spatial.KIND_HRTF) == 48
        ovtf, hrtfs = spatial.bank_by_angle(ir_bank)
        assert ovtf.angle_deg is None
        assert sorted(hrtfs) == list(spatial.angle_grid())

    def test_pairs_unit_energy(self, ir_bank):
        for ir in ir_bank:
            energy = float(np.sum(ir.front.astype(np.float64) ** 2)
                           + np.sum(ir.rear.astype(np.float64) ** 2))
            assert energy == pytest.approx(1.0, abs=1e-5)

    def test_hrtf_endfire_delay(self, ir_bank):
        # at 90 deg the rear channel lags the front by spacing/c exactly
        g = IrGeometry()
        _, hrtfs = spatial.bank_by_angle(ir_bank)
        pair = hrtfs[90.0]
        lag_samples = g.mic_spacing_m / spatial.SPEED_OF_SOUND * g.sample_rate
        corr = np.correlate(pair.rear.astype(np.float64),
                            pair.front.astype(np.float64), mode="full")
        best = int(np.argmax(corr)) - (len(pair.front) - 1)
        assert abs(best - lag_samples) <= 1.0

    def test_ovtf_channels_differ_spectrally(self, ir_pairs):
        ovtf, _ = ir_pairs
        front_spec = np.abs(np.fft.rfft(ovtf.front.astype(np.float64), 4096))
        rear_spec = np.abs(np.fft.rfft(ovtf.rear.astype(np.float64), 4096))
        freqs = np.fft.rfftfreq(4096, d=1 / 44100)
        band = (freqs > 2000) & (freqs < 4000)
        # the rear microphone is shadowed: less high-frequency energy
        assert rear_spec[band].sum() < 0.5 * front_spec[band].sum()

    def test_hrtf_channels_share_cutoff(self, ir_pairs):
        # HRTF front/rear differ by delay only, so their magnitude spectra
        # agree closely; that is the property making the OVTF separable
        _, hrtfs = ir_pairs
        pair = hrtfs[202.5]
        f = np.abs(np.fft.rfft(pair.front.astype(np.float64), 4096))
        r = np.abs(np.fft.rfft(pair.rear.astype(np.float64), 4096))
        keep = f > f.max() * 1e-3
        assert np.median(np.abs(f[keep] - r[keep]) / f[keep]) < 0.05

    def test_safety_scale_prevents_clipping(self, ir_bank):
        scale = spatial.bank_safety_scale(ir_bank)
        target = 10.0 ** (-1.0 / 20.0)
        worst = max(max(np.abs(ir.front).sum(), np.abs(ir.rear).sum())
                    for ir in ir_bank)
        assert scale * worst == pytest.approx(target)
        # a full-scale square wave cannot exceed the headroom target
        x = np.sign(np.sin(np.arange(4096) * 0.07)) * 1.0
        for ir in (ir_bank[0], ir_bank[13]):
            y = spatial.convolve_pair(x, ir) * scale
            assert np.max(np.abs(y)) <= target + 1e-6

    def test_bank_determinism(self):
        a = spatial.synth_ir_bank()
        b = spatial.synth_ir_bank()
        for pa, pb in zip(a, b):
            assert np.array_equal(pa.front, pb.front)
            assert np.array_equal(pa.rear, pb.rear)


class TestRender:
    def test_convolution_matches_direct_sum(self, rng):
        x = rng.standard_normal(2000)
        ir = ImpulseResponsePair(
            kind=spatial.KIND_HRTF, angle_deg=0.0,
            front=rng.standard_normal(100).astype(np.float32),
            rear=rng.standard_normal(100).astype(np.float32),
            sample_rate=44100)
        out = spatial.convolve_pair(x, ir)
        ref_front = direct_convolution(x, ir.front.astype(np.float64), 2000)
        ref_rear = direct_convolution(x, ir.rear.astype(np.float64), 2000)
        assert np.allclose(out[0], ref_front, rtol=1e-6, atol=1e-9)
        assert np.allclose(out[1], ref_rear, rtol=1e-6, atol=1e-9)

    def test_render_shape_dtype_and_scale_linearity(self, ir_bank):
        rng = np.random.default_rng(5)
        x = rng.standard_normal(16000) * 0.05
        y1 = spatial.render_spatial(x, 16000, ir_bank[3], level_scale=1.0)
        y2 = spatial.render_spatial(x, 16000, ir_bank[3], level_scale=0.25)
        assert y1.shape == (2, 16000) and y1.dtype == np.float32
        assert np.allclose(y2, 0.25 * y1, atol=1e-6)

    def test_render_linearity_in_source(self, ir_bank):
        rng = np.random.default_rng(6)
        a = rng.standard_normal(8000) * 0.1
        b = rng.standard_normal(8000) * 0.1
        ya = spatial.render_spatial(a, 16000, ir_bank[9]).astype(np.float64)
        yb = spatial.render_spatial(b, 16000, ir_bank[9]).astype(np.float64)
        yab = spatial.render_spatial(a + b, 16000, ir_bank[9]).astype(np.float64)
        assert np.allclose(yab, ya + yb, atol=1e-5)

    def test_render_rejects_stereo_input(self, ir_bank):
        with pytest.raises(ValueError):
            spatial.render_spatial(np.zeros((2, 100)), 16000, ir_bank[0])

    @given(st.integers(min_value=0, max_value=2 ** 16))
    @settings(max_examples=10, deadline=None)
    def test_direct_sum_property(self, seed):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(64, 512))
        m = int(rng.integers(4, 64))
        x = rng.standard_normal(n)
        h = rng.standard_normal(m).astype(np.float32)
        ir = ImpulseResponsePair(kind=spatial.KIND_HRTF, angle_deg=7.5,
                                 front=h, rear=h, sample_rate=44100)
        out = spatial.convolve_pair(x, ir)
        ref = direct_convolution(x, h.astype(np.float64), n)
        assert np.allclose(out[0], ref, rtol=1e-6, atol=1e-9)


class TestBankFile:
    def test_round_trip_bit_exact(self, ir_bank, tmp_path):
        path = tmp_path / "bank.bin"
        spatial.write_ir_bank(path, ir_bank)
        back = spatial.read_ir_bank(path)
        assert len(back) == len(ir_bank)
        for orig, loaded in zip(ir_bank, back):
            assert loaded.kind == orig.kind
            assert loaded.angle_deg == orig.angle_deg
            assert loaded.sample_rate == orig.sample_rate
            assert np.array_equal(loaded.front, orig.front)
            assert np.array_equal(loaded.rear, orig.rear)

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "junk.bin"
        path.write_bytes(b"JUNK" + b"\x00" * 32)
        with pytest.raises(ValueError):
            spatial.read_ir_bank(path)
