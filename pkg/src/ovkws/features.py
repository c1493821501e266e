"""Acoustic front-end: band-pass filtering, MFCC extraction, normalization
and multi-channel quefrency stacking.

All operations are pure functions over numpy arrays, so they are safe to run
in parallel across utterances. The model input is a T x (40*N) matrix built
by processing each microphone channel independently (band-pass -> MFCC ->
normalize) and stacking the per-channel matrices along the coefficient axis.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from functools import lru_cache

import numpy as np
from scipy import signal
from scipy.fft import dct

_FEATURE_MAGIC = b"OVKF"
_FEATURE_VERSION = 1


@dataclass(frozen=True)
class FrontendConfig:
    """Front-end parameters. Defaults: 30 ms Hann frames with a 10 ms shift
    at 16 kHz, 40 MFCCs from 40 mel filters spanning 20-4000 Hz."""

    sample_rate: int = 16000
    frame_length: int = 480
    hop_length: int = 160
    nfft: int = 512
    num_coeffs: int = 40
    mel_low_hz: float = 20.0
    mel_high_hz: float = 4000.0
    log_floor: float = 1e-10
    std_floor: float = 1e-8
    # Band-pass realization. A 6th-order Butterworth applied forward-backward
    # is the minimum order whose zero-phase response stays within 1 dB up to
    # 3.6 kHz while attenuating 5.5 kHz by more than 20 dB; the upper edge is
    # placed slightly above the nominal 4 kHz band so the passband target is
    # met after the two passes.
    bandpass_order: int = 6
    bandpass_low_hz: float = 20.0
    bandpass_high_hz: float = 4200.0

    @property
    def frame_rate(self) -> float:
        return self.sample_rate / self.hop_length


@dataclass
class FeatureMatrix:
    """T x (num_coeffs * N) feature matrix for one utterance."""

    values: np.ndarray
    num_channels: int = 1
    normalized: bool = False
    frame_rate: float = 100.0

    @property
    def num_frames(self) -> int:
        return self.values.shape[0]


def num_frames(num_samples: int, config: FrontendConfig) -> int:
    """Frame count for an input of `num_samples` samples (no padding)."""
    if num_samples < config.frame_length:
        raise ValueError(
            f"input of {num_samples} samples is shorter than one "
            f"{config.frame_length}-sample analysis window"
        )
    return 1 + (num_samples - config.frame_length) // config.hop_length


@lru_cache(maxsize=8)
def _bandpass_sos(order: int, low_hz: float, high_hz: float, sample_rate: int):
    return signal.butter(
        order, [low_hz, high_hz], btype="bandpass", fs=sample_rate, output="sos"
    )


def bandpass(wave: np.ndarray, config: FrontendConfig = FrontendConfig()) -> np.ndarray:
    """Zero-phase band-pass of a mono waveform; output length equals input length."""
    wave = np.asarray(wave, dtype=np.float64)
    if wave.ndim != 1 or wave.size == 0:
        raise ValueError("bandpass expects a non-empty 1-D waveform")
    sos = _bandpass_sos(
        config.bandpass_order,
        config.bandpass_low_hz,
        config.bandpass_high_hz,
        config.sample_rate,
    )
    return signal.sosfiltfilt(sos, wave)


def _hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def _mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


@lru_cache(maxsize=8)
def _mel_filterbank(num_filters: int, nfft: int, sample_rate: int,
                    low_hz: float, high_hz: float) -> np.ndarray:
    """Triangular mel filterbank, shape (num_filters, nfft//2 + 1)."""
    edges = _mel_to_hz(np.linspace(_hz_to_mel(low_hz), _hz_to_mel(high_hz),
                                   num_filters + 2))
    bin_hz = np.arange(nfft // 2 + 1) * sample_rate / nfft
    fbank = np.zeros((num_filters, nfft // 2 + 1))
    for j in range(num_filters):
        lo, center, hi = edges[j], edges[j + 1], edges[j + 2]
        rising = (bin_hz - lo) / (center - lo)
        falling = (hi - bin_hz) / (hi - center)
        fbank[j] = np.clip(np.minimum(rising, falling), 0.0, None)
    return fbank


@lru_cache(maxsize=4)
def _hann(frame_length: int) -> np.ndarray:
    return signal.get_window("hann", frame_length, fftbins=True)


def mfcc(wave: np.ndarray, config: FrontendConfig = FrontendConfig()) -> FeatureMatrix:
    """MFCC matrix of a (band-passed) mono waveform.

    Framing uses a periodic Hann window with no edge padding, so
    T = 1 + floor((L - frame_length) / hop_length). Per frame: 512-point
    power spectrum, 40 mel filter energies, log with an absolute floor,
    orthonormal DCT-II keeping all coefficients.
    """
    wave = np.asarray(wave, dtype=np.float64)
    if wave.ndim != 1:
        raise ValueError("mfcc expects a 1-D waveform")
    num_frames(wave.size, config)  # rejects inputs shorter than one window
    frames = np.lib.stride_tricks.sliding_window_view(
        wave, config.frame_length)[::config.hop_length]
    frames = frames * _hann(config.frame_length)
    power = np.abs(np.fft.rfft(frames, n=config.nfft, axis=1)) ** 2
    fbank = _mel_filterbank(config.num_coeffs, config.nfft, config.sample_rate,
                            config.mel_low_hz, config.mel_high_hz)
    energies = power @ fbank.T
    logmel = np.log(np.maximum(energies, config.log_floor))
    coeffs = dct(logmel, type=2, norm="ortho", axis=1)
    return FeatureMatrix(values=coeffs.astype(np.float32),
                         num_channels=1, normalized=False,
                         frame_rate=config.frame_rate)


def normalize(features: FeatureMatrix,
              config: FrontendConfig = FrontendConfig()) -> FeatureMatrix:
    """Whole-matrix mean/std normalization (single mu and sigma per channel
    matrix, sigma floored so constant inputs map to zeros)."""
    if features.num_frames < 2:
        raise ValueError("normalization needs at least 2 frames")
    x = features.values.astype(np.float64)
    mu = x.mean()
    sigma = max(x.std(), config.std_floor)
    return replace(features, values=((x - mu) / sigma).astype(np.float32),
                   normalized=True)


def stack_channels(per_channel: list[FeatureMatrix]) -> FeatureMatrix:
    """Stack per-channel matrices along the quefrency axis, first channel in
    columns 0..39. Stacking happens after per-channel normalization, so the
    per-channel statistics are preserved exactly."""
    if not per_channel:
        raise ValueError("stack_channels needs at least one channel")
    frame_counts = {fm.num_frames for fm in per_channel}
    if len(frame_counts) > 1:
        raise ValueError(f"channels disagree on frame count: {sorted(frame_counts)}")
    if len(per_channel) == 1:
        return per_channel[0]
    return FeatureMatrix(
        values=np.concatenate([fm.values for fm in per_channel], axis=1),
        num_channels=sum(fm.num_channels for fm in per_channel),
        normalized=all(fm.normalized for fm in per_channel),
        frame_rate=per_channel[0].frame_rate,
    )


def extract_features(samples: np.ndarray,
                     config: FrontendConfig = FrontendConfig()) -> FeatureMatrix:
    """Full front-end for a mono (L,) or multi-channel (N, L) waveform:
    band-pass -> MFCC -> normalize per channel, then stack."""
    samples = np.asarray(samples)
    if samples.ndim == 1:
        samples = samples[np.newaxis, :]
    channels = [normalize(mfcc(bandpass(ch, config), config), config)
                for ch in samples]
    return stack_channels(channels)


# Feature cache file: fixed little-endian header followed by the row-major
# float32 matrix; reads back bit-exactly.
_HEADER = struct.Struct("<4sHIIIIIIIffB")


def write_features(path, features: FeatureMatrix,
                   config: FrontendConfig = FrontendConfig()) -> None:
    t, f = features.values.shape
    header = _HEADER.pack(
        _FEATURE_MAGIC, _FEATURE_VERSION, t, f, features.num_channels,
        config.sample_rate, config.frame_length, config.hop_length,
        config.nfft, config.mel_low_hz, config.mel_high_hz,
        1 if features.normalized else 0,
    )
    data = np.ascontiguousarray(features.values, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(data.tobytes())


def read_features(path) -> tuple[FeatureMatrix, dict]:
    with open(path, "rb") as fh:
        raw = fh.read(_HEADER.size)
        if len(raw) < _HEADER.size:
            raise ValueError(f"{path}: truncated feature file")
        (magic, version, t, f, n, rate, frame_len, hop, nfft,
         mel_low, mel_high, normalized) = _HEADER.unpack(raw)
        if magic != _FEATURE_MAGIC:
            raise ValueError(f"{path}: not a feature cache file")
        if version != _FEATURE_VERSION:
            raise ValueError(f"{path}: unsupported feature file version {version}")
        values = np.frombuffer(fh.read(t * f * 4), dtype="<f4").reshape(t, f)
    meta = {"sample_rate": rate, "frame_length": frame_len, "hop_length": hop,
            "nfft": nfft, "mel_low_hz": mel_low, "mel_high_hz": mel_high}
    return FeatureMatrix(values=values.copy(), num_channels=n,
                         normalized=bool(normalized),
                         frame_rate=rate / hop), meta
