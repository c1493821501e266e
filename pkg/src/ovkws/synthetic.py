"""Deterministic synthetic speech-commands corpus.

Stands in for the real recordings during tests and dry runs: every word is
voiced as noise-excited formant bands on a word-specific frequency lattice
with a word-specific two-state trajectory, every speaker gets a timbre
(fundamental buzz, formant scale, tilt, level) so that words remain
recognizable across unseen speakers, and the standard layout (word
directories, speaker hash before the underscore, a background-noise
directory) is reproduced so the corpus scanner treats it like the real
thing. All material derives from the seed alone.

Noise excitation matters: a harmonic source would sample the formant
envelope at multiples of the talker fundamental, so the visible peak
positions would depend on the talker and word templates would not carry
over to unseen speakers.
"""

from __future__ import annotations

import os

import numpy as np
from scipy import signal
from scipy.io import wavfile

from .corpus import KEYWORDS, NOISE_DIR, WORKING_RATE

UNKNOWN_WORDS = (
    "backward", "bed", "bird", "cat", "dog", "eight", "five", "follow",
    "forward", "four", "happy", "house", "learn", "marvin", "nine", "one",
    "seven", "sheila", "six", "three", "tree", "two", "visual", "wow", "zero",
)
WORDS = KEYWORDS + UNKNOWN_WORDS  # 35 words, matching the source vocabulary

_STREAM_SPEAKER = 100
_STREAM_UTTERANCE = 101
_STREAM_NOISE = 102

# word formants live on a lattice with wide spacing so the classes stay
# separable after mel smearing; all below the 4 kHz analysis band
_F1 = (250.0, 400.0, 550.0, 700.0, 850.0)
_F2 = (1050.0, 1350.0, 1650.0, 1950.0, 2250.0)
_F3 = (2600.0, 3000.0, 3400.0)
_AM_RATES = (2.0, 4.0, 7.0)


def _rng(*keys: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(list(keys)))


def _word_params(word_index: int) -> dict:
    return {
        "f1": _F1[word_index % 5],
        "f2": _F2[(word_index // 5) % 5],
        "f3": _F3[(word_index // 25) % 3],
        "am_rate": _AM_RATES[word_index % 3],
        # second-half jump of the second formant, cycled so neighbors on the
        # lattice also differ in their trajectory
        "jump": (-250.0, 0.0, 250.0)[(word_index // 3) % 3],
        "transition": 0.35 + 0.1 * ((word_index // 9) % 3),
        "duration": 0.58 + 0.05 * (word_index % 4),
    }


def _speaker_params(seed: int, speaker_index: int) -> dict:
    # speaker identity lives in the voicing buzz, a mild spectral tilt, and
    # the level; formants stay near the word lattice so classes generalize
    # across unseen speakers
    rng = _rng(seed, _STREAM_SPEAKER, speaker_index)
    return {
        "f0": float(rng.uniform(90.0, 240.0)),
        "formant_scale": float(rng.uniform(0.97, 1.03)),
        "tilt": float(rng.uniform(0.75, 1.0)),
        "level": float(rng.uniform(0.3, 0.6)),
        "buzz_mix": float(rng.uniform(0.15, 0.35)),
    }


def _narrowband(freq_hz, bandwidth_hz: float, n: int,
                rng: np.random.Generator, sample_rate: int) -> np.ndarray:
    """Noise band around a (possibly time-varying) carrier: two slow noise
    envelopes in quadrature, unit RMS."""
    sos = signal.butter(2, bandwidth_hz, btype="lowpass", fs=sample_rate,
                        output="sos")
    a = signal.sosfilt(sos, rng.standard_normal(n))
    b = signal.sosfilt(sos, rng.standard_normal(n))
    phase = 2.0 * np.pi * np.cumsum(np.broadcast_to(freq_hz, n)) / sample_rate
    band = a * np.cos(phase) + b * np.sin(phase)
    return band / max(band.std(), 1e-12)


def synth_word(word_index: int, speaker: dict,
               rng: np.random.Generator, sample_rate: int = WORKING_RATE) -> np.ndarray:
    """One clip: three noise-excited formant bands, the second following the
    word's two-state trajectory, over a weak speaker buzz, placed at a
    random onset inside one second."""
    word = _word_params(word_index)
    duration = word["duration"] + rng.uniform(-0.04, 0.04)
    n = int(duration * sample_rate)
    t = np.arange(n) / sample_rate

    envelope = np.sin(np.pi * np.arange(n) / n) ** 0.5
    am = 1.0 + 0.4 * np.sin(2.0 * np.pi * word["am_rate"] * t)
    scale = speaker["formant_scale"] * rng.uniform(0.99, 1.01)

    # second formant holds its first state, then moves to the jumped state
    # over a fixed tenth of the word
    split = word["transition"]
    f2 = word["f2"] + word["jump"] * np.clip((t / duration - split) / 0.1, 0.0, 1.0)

    sig = np.zeros(n)
    for freq, amp in ((word["f1"], 1.0),
                      (f2, 0.7),
                      (word["f3"], 0.45 * speaker["tilt"])):
        bandwidth = 60.0 + 0.03 * float(np.mean(freq))
        sig += amp * _narrowband(np.asarray(freq) * scale, bandwidth, n, rng,
                                 sample_rate)
    f0 = speaker["f0"] * rng.uniform(0.97, 1.03)
    sig /= np.abs(sig).max()
    sig += speaker["buzz_mix"] * np.sin(2.0 * np.pi * f0 * t)
    sig *= envelope * am

    clip = np.zeros(sample_rate, dtype=np.float64)
    onset = int(rng.integers(0, sample_rate - n + 1))
    clip[onset:onset + n] = sig
    peak = np.abs(clip).max()
    return (clip * speaker["level"] / peak).astype(np.float32)


def _synth_noise(kind: int, rng: np.random.Generator, num_samples: int) -> np.ndarray:
    white = rng.standard_normal(num_samples)
    if kind == 0:
        out = white
    elif kind == 1:
        # brownish: integrated white noise, detrended
        out = np.cumsum(white)
        out -= np.linspace(out[0], out[-1], num_samples)
    elif kind == 2:
        out = np.convolve(white, np.ones(32) / 32.0, mode="same")
    elif kind == 3:
        t = np.arange(num_samples) / WORKING_RATE
        out = np.sin(2.0 * np.pi * 50.0 * t) + 0.3 * white
    elif kind == 4:
        t = np.arange(num_samples) / WORKING_RATE
        out = sum(np.sin(2.0 * np.pi * f * t + rng.uniform(0, 2 * np.pi))
                  * (1.0 + np.sin(2.0 * np.pi * rng.uniform(0.5, 3.0) * t)) / 2.0
                  for f in rng.uniform(200.0, 2000.0, size=8))
    else:
        out = np.convolve(white, np.ones(8) / 8.0, mode="same") * np.sin(
            2.0 * np.pi * 0.25 * np.arange(num_samples) / WORKING_RATE)
    return (0.3 * out / np.abs(out).max()).astype(np.float32)


def _write_pcm16(path, samples: np.ndarray) -> None:
    wavfile.write(path, WORKING_RATE,
                  np.clip(samples * 32767.0, -32768, 32767).astype(np.int16))


def speaker_ids(num_speakers: int, seed: int) -> list[str]:
    rng = _rng(seed, _STREAM_SPEAKER)
    ids: list[str] = []
    seen = set()
    while len(ids) < num_speakers:
        sid = f"{rng.integers(0, 2**32):08x}"
        if sid not in seen:
            seen.add(sid)
            ids.append(sid)
    return ids


def generate_corpus(root, num_speakers: int = 60, seed: int = 0,
                    words=WORDS, noise_seconds: float = 10.0,
                    num_noise_files: int = 6) -> None:
    """Write the full synthetic corpus tree under `root`."""
    if num_speakers < 3:
        raise ValueError("need at least 3 speakers to cover all splits")
    missing = [k for k in KEYWORDS if k not in words]
    if missing:
        raise ValueError(f"word list must contain all keywords, missing {missing}")
    ids = speaker_ids(num_speakers, seed)
    for word_index, word in enumerate(words):
        word_dir = os.path.join(root, word)
        os.makedirs(word_dir, exist_ok=True)
        for speaker_index, sid in enumerate(ids):
            rng = _rng(seed, _STREAM_UTTERANCE, speaker_index, word_index)
            clip = synth_word(word_index, _speaker_params(seed, speaker_index), rng)
            _write_pcm16(os.path.join(word_dir, f"{sid}_nohash_0.wav"), clip)

    noise_dir = os.path.join(root, NOISE_DIR)
    os.makedirs(noise_dir, exist_ok=True)
    n = int(noise_seconds * WORKING_RATE)
    for kind in range(num_noise_files):
        _write_pcm16(os.path.join(noise_dir, f"noise_{kind}.wav"),
                     _synth_noise(kind, _rng(seed, _STREAM_NOISE, kind), n))
