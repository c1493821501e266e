"""Spatial rendering of mono utterances through two-microphone impulse
responses, plus a synthetic impulse-response bank that stands in for
measured device transfer functions.

The bank holds one own-voice transfer function (OVTF) and 48 head-related
transfer functions (HRTFs) on a 7.5-degree grid. Synthetic HRTFs carry two
interaural-style cues: a fractional propagation delay from exact path-length
geometry and a first-order "head shadow" low-pass whose cutoff falls with
angular distance from the device side. The synthetic OVTF is a short
near-field path with its own spectral tilt per microphone (the rear
microphone is the more shadowed one for the wearer's own voice).
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, replace

import numpy as np
from scipy import signal

SPEED_OF_SOUND = 343.0
NUM_ANGLES = 48
ANGLE_STEP_DEG = 360.0 / NUM_ANGLES

KIND_OVTF = "ovtf"
KIND_HRTF = "hrtf"


def angle_grid() -> np.ndarray:
    return np.arange(NUM_ANGLES) * ANGLE_STEP_DEG


@dataclass
class ImpulseResponsePair:
    """Acoustic transfer from one source position to the front and rear
    device microphones."""

    kind: str
    angle_deg: float | None
    front: np.ndarray
    rear: np.ndarray
    sample_rate: int

    def validate(self) -> None:
        if self.kind not in (KIND_OVTF, KIND_HRTF):
            raise ValueError(f"unknown impulse response kind {self.kind!r}")
        if (self.angle_deg is None) != (self.kind == KIND_OVTF):
            raise ValueError("angle_deg must be present exactly for HRTFs")
        if self.front.shape != self.rear.shape or self.front.ndim != 1:
            raise ValueError("front/rear impulse responses must be 1-D and equal length")
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")
        if not (np.isfinite(self.front).all() and np.isfinite(self.rear).all()):
            raise ValueError("impulse responses must be finite")


@dataclass(frozen=True)
class IrGeometry:
    """Geometry and voicing parameters for the synthetic bank.

    The two microphones sit on the device-side ray (toward +90 deg, the
    wearer's left), the front microphone outermost, so a source at 90 deg is
    endfire to the pair and carries the full spacing/c delay difference.
    """

    head_radius_m: float = 0.0875
    mic_spacing_m: float = 0.012
    source_distance_m: float = 1.9
    sample_rate: int = 44100
    ir_length: int = 1024
    # head-shadow low-pass cutoffs, interpolated against angular distance
    # from the device side (90 deg)
    shadow_near_hz: float = 6000.0
    shadow_far_hz: float = 700.0
    # own-voice path: mouth to device, rear microphone shadowed by the pinna
    ovtf_path_m: float = 0.10
    ovtf_front_cutoff_hz: float = 3500.0
    ovtf_rear_cutoff_hz: float = 1200.0

    def validate(self) -> None:
        for name in ("head_radius_m", "mic_spacing_m", "source_distance_m",
                     "sample_rate", "ir_length", "shadow_near_hz",
                     "shadow_far_hz", "ovtf_path_m", "ovtf_front_cutoff_hz",
                     "ovtf_rear_cutoff_hz"):
            if getattr(self, name) <= 0:
                raise ValueError(f"geometry parameter {name} must be positive")
        if self.source_distance_m <= self.head_radius_m + self.mic_spacing_m:
            raise ValueError("source distance must exceed the device radius")


def _fractional_delay(delay_samples: float, length: int) -> np.ndarray:
    """Windowed-sinc fractional delay kernel (Blackman window, 65 taps)."""
    n = np.arange(length)
    kernel = np.sinc(n - delay_samples)
    half = 32
    window = np.zeros(length)
    center = int(round(delay_samples))
    # keep the window centered on the pulse even when the buffer clips it,
    # so the main tap is never attenuated by an off-center taper
    full = np.blackman(2 * half + 1)
    lo, hi = max(0, center - half), min(length, center + half + 1)
    window[lo:hi] = full[lo - (center - half):hi - (center - half)]
    return kernel * window


def _onepole_lowpass(cutoff_hz: float, sample_rate: int, length: int) -> np.ndarray:
    a = math.exp(-2.0 * math.pi * cutoff_hz / sample_rate)
    kernel = (1.0 - a) * a ** np.arange(length)
    # cascade the pole once: a 12 dB/octave slope keeps the per-path tilt
    # above the talker-to-talker spectral variation it must be told from
    return np.convolve(kernel, kernel)[:length]


def _shadow_cutoff(angle_deg: float, geometry: IrGeometry) -> float:
    # angular distance from the device side, 0 at 90 deg, 180 at 270 deg
    delta = abs((angle_deg - 90.0 + 180.0) % 360.0 - 180.0)
    ratio = geometry.shadow_far_hz / geometry.shadow_near_hz
    return geometry.shadow_near_hz * ratio ** (delta / 180.0)


def mic_positions(geometry: IrGeometry) -> tuple[np.ndarray, np.ndarray]:
    """(front, rear) microphone coordinates; head center at the origin,
    0 deg along +x (facing direction), 90 deg along +y (device side)."""
    r, s = geometry.head_radius_m, geometry.mic_spacing_m
    return (np.array([0.0, r + s / 2.0]), np.array([0.0, r - s / 2.0]))


def source_position(angle_deg: float, geometry: IrGeometry) -> np.ndarray:
    theta = math.radians(angle_deg)
    return geometry.source_distance_m * np.array([math.cos(theta), math.sin(theta)])


def _channel_ir(delay_s: float, cutoff_hz: float, geometry: IrGeometry) -> np.ndarray:
    fs, length = geometry.sample_rate, geometry.ir_length
    pulse = _fractional_delay(delay_s * fs, length)
    shaped = signal.fftconvolve(pulse, _onepole_lowpass(cutoff_hz, fs, 256))
    return shaped[:length]


def _unit_energy(pair: ImpulseResponsePair) -> ImpulseResponsePair:
    norm = math.sqrt(float(np.sum(pair.front ** 2) + np.sum(pair.rear ** 2)))
    return replace(pair, front=(pair.front / norm).astype(np.float32),
                   rear=(pair.rear / norm).astype(np.float32))


def synth_ir_bank(geometry: IrGeometry = IrGeometry()) -> list[ImpulseResponsePair]:
    """Synthesize the full bank: one OVTF followed by 48 HRTFs in angle
    order. Every pair is energy-normalized to unit L2 (front and rear
    jointly, preserving the interaural level relation)."""
    geometry.validate()
    front_pos, rear_pos = mic_positions(geometry)
    bank = []

    ov_front = _channel_ir(geometry.ovtf_path_m / SPEED_OF_SOUND,
                           geometry.ovtf_front_cutoff_hz, geometry)
    ov_rear = _channel_ir((geometry.ovtf_path_m + geometry.mic_spacing_m) / SPEED_OF_SOUND,
                          geometry.ovtf_rear_cutoff_hz, geometry)
    bank.append(_unit_energy(ImpulseResponsePair(
        kind=KIND_OVTF, angle_deg=None, front=ov_front, rear=ov_rear,
        sample_rate=geometry.sample_rate)))

    for angle in angle_grid():
        src = source_position(angle, geometry)
        cutoff = _shadow_cutoff(angle, geometry)
        front = _channel_ir(np.linalg.norm(src - front_pos) / SPEED_OF_SOUND,
                            cutoff, geometry)
        rear = _channel_ir(np.linalg.norm(src - rear_pos) / SPEED_OF_SOUND,
                           cutoff, geometry)
        bank.append(_unit_energy(ImpulseResponsePair(
            kind=KIND_HRTF, angle_deg=float(angle), front=front, rear=rear,
            sample_rate=geometry.sample_rate)))
    return bank


def bank_by_angle(bank: list[ImpulseResponsePair]) -> tuple[ImpulseResponsePair, dict]:
    """Split a bank into (ovtf, {angle_deg: hrtf}); validates coverage."""
    ovtf = [ir for ir in bank if ir.kind == KIND_OVTF]
    hrtfs = {ir.angle_deg: ir for ir in bank if ir.kind == KIND_HRTF}
    if len(ovtf) != 1:
        raise ValueError(f"bank must hold exactly one OVTF, found {len(ovtf)}")
    missing = [a for a in angle_grid() if float(a) not in hrtfs]
    if missing:
        raise ValueError(f"bank misses HRTF angles: {missing}")
    return ovtf[0], hrtfs


def bank_safety_scale(bank: list[ImpulseResponsePair], headroom_db: float = 1.0) -> float:
    """Global output scale guarding against clipping: worst-case convolution
    peak (L1 norm of any channel) lands `headroom_db` below full scale."""
    worst = max(max(np.abs(ir.front).sum(), np.abs(ir.rear).sum()) for ir in bank)
    return float(10.0 ** (-headroom_db / 20.0) / worst)


def _resample(wave: np.ndarray, rate_in: int, rate_out: int) -> np.ndarray:
    if rate_in == rate_out:
        return wave
    g = math.gcd(rate_in, rate_out)
    return signal.resample_poly(wave, rate_out // g, rate_in // g)


def convolve_pair(wave: np.ndarray, ir: ImpulseResponsePair) -> np.ndarray:
    """Linear convolution of a mono source with both IR channels, truncated
    to the source length. Returns shape (2, len(wave))."""
    ir.validate()
    n = len(wave)
    # convolve at float64 regardless of the stored tap precision; scipy
    # otherwise computes the FFT at the float32 of the narrower operand
    out = np.empty((2, n), dtype=np.float64)
    out[0] = signal.fftconvolve(wave, ir.front.astype(np.float64))[:n]
    out[1] = signal.fftconvolve(wave, ir.rear.astype(np.float64))[:n]
    return out


def render_spatial(samples: np.ndarray, sample_rate: int,
                   ir: ImpulseResponsePair, working_rate: int = 16000,
                   level_scale: float = 1.0) -> np.ndarray:
    """Render a mono waveform through an impulse-response pair.

    The source is resampled to the IR rate, convolved per channel, truncated
    to the source length, resampled to the working rate and scaled by the
    bank-level safety factor. No per-utterance normalization is applied, so
    level relations between renderings are preserved.
    """
    samples = np.asarray(samples, dtype=np.float64)
    if samples.ndim != 1:
        raise ValueError("render_spatial expects a mono waveform")
    up = _resample(samples, sample_rate, ir.sample_rate)
    rendered = convolve_pair(up, ir)
    down = np.stack([_resample(ch, ir.sample_rate, working_rate) for ch in rendered])
    return (down * level_scale).astype(np.float32)


# Bank file: u32 record count, then per IR a fixed header (kind byte,
# angle f64, sample rate u32, channel length u32) followed by the two
# little-endian float32 channel arrays.
_BANK_MAGIC = b"OVIR"
_REC_HEADER = struct.Struct("<BdII")


def write_ir_bank(path, bank: list[ImpulseResponsePair]) -> None:
    with open(path, "wb") as fh:
        fh.write(_BANK_MAGIC)
        fh.write(struct.pack("<I", len(bank)))
        for ir in bank:
            ir.validate()
            kind = 0 if ir.kind == KIND_OVTF else 1
            angle = -1.0 if ir.angle_deg is None else float(ir.angle_deg)
            fh.write(_REC_HEADER.pack(kind, angle, ir.sample_rate, len(ir.front)))
            fh.write(np.ascontiguousarray(ir.front, dtype="<f4").tobytes())
            fh.write(np.ascontiguousarray(ir.rear, dtype="<f4").tobytes())


def read_ir_bank(path) -> list[ImpulseResponsePair]:
    bank = []
    with open(path, "rb") as fh:
        if fh.read(4) != _BANK_MAGIC:
            raise ValueError(f"{path}: not an impulse-response bank file")
        (count,) = struct.unpack("<I", fh.read(4))
        for _ in range(count):
            kind_code, angle, rate, length = _REC_HEADER.unpack(fh.read(_REC_HEADER.size))
            front = np.frombuffer(fh.read(length * 4), dtype="<f4").copy()
            rear = np.frombuffer(fh.read(length * 4), dtype="<f4").copy()
            pair = ImpulseResponsePair(
                kind=KIND_OVTF if kind_code == 0 else KIND_HRTF,
                angle_deg=None if kind_code == 0 else angle,
                front=front, rear=rear, sample_rate=rate)
            pair.validate()
            bank.append(pair)
    return bank
