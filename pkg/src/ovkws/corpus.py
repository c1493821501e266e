"""Corpus construction: speaker splits, own-voice/external role assignment,
angle draws, unknown-class balancing, manifest serialization, and rendering
of mono sources into two-channel device recordings.

The source corpus follows the speech-commands layout: one directory per
word, file names carrying the speaker hash before the first underscore, and
a ``_background_noise_`` directory with longer noise recordings.
"""

from __future__ import annotations

import json
import math
import os
from collections import defaultdict
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.io import wavfile

from . import spatial

KEYWORDS = ("yes", "no", "up", "down", "left", "right", "on", "off", "stop", "go")
UNKNOWN_INDEX = len(KEYWORDS)
NUM_CLASSES = len(KEYWORDS) + 1

SPLITS = ("train", "validation", "test")
SPLIT_FRACTIONS = (0.8, 0.1, 0.1)
OWN_FRACTION = 0.75

ROLE_OWN = "own_voice"
ROLE_EXTERNAL = "external"

WORKING_RATE = 16000
CLIP_SAMPLES = WORKING_RATE  # every utterance is padded/trimmed to 1 s

NOISE_DIR = "_background_noise_"

# rng stream ids, combined with the root seed through SeedSequence
_STREAM_SPLIT = 0
_STREAM_ROLE = 1
_STREAM_UNKNOWN = 2
_STREAM_ANGLE = 3


def _rng(*keys: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(list(keys)))


def label_index(word: str) -> int:
    return KEYWORDS.index(word) if word in KEYWORDS else UNKNOWN_INDEX


# -- waveform file IO --------------------------------------------------------

_PCM_SCALE = {np.dtype(np.int16): 32768.0, np.dtype(np.int32): 2147483648.0}


def load_wav(path) -> tuple[np.ndarray, int]:
    """Read a WAV file as float32 in [-1, 1], shaped (L,) or (channels, L)."""
    rate, data = wavfile.read(path)
    if data.dtype in _PCM_SCALE:
        data = data / _PCM_SCALE[data.dtype]
    elif data.dtype == np.uint8:
        data = (data.astype(np.float64) - 128.0) / 128.0
    data = np.asarray(data, dtype=np.float32)
    if data.ndim == 2:
        data = data.T
    return data, int(rate)


def save_wav(path, samples: np.ndarray, sample_rate: int) -> None:
    samples = np.asarray(samples, dtype=np.float32)
    if samples.ndim == 2:
        samples = samples.T
    wavfile.write(path, sample_rate, samples)


def pad_or_trim(samples: np.ndarray, length: int = CLIP_SAMPLES) -> np.ndarray:
    """Force a mono waveform to exactly `length` samples (trailing zeros /
    trailing cut)."""
    if samples.ndim != 1:
        raise ValueError("pad_or_trim expects a mono waveform")
    if len(samples) >= length:
        return samples[:length]
    out = np.zeros(length, dtype=samples.dtype)
    out[: len(samples)] = samples
    return out


# -- source corpus scanning --------------------------------------------------

@dataclass(frozen=True)
class SourceFile:
    word: str
    speaker_id: str
    path: str  # relative to the corpus root


def scan_source_corpus(root) -> list[SourceFile]:
    """Collect word-labeled mono recordings from a speech-commands style
    tree. Rejects a corpus that lacks any of the ten keywords."""
    files = []
    words = sorted(d for d in os.listdir(root)
                   if os.path.isdir(os.path.join(root, d)) and not d.startswith("_"))
    for word in words:
        for name in sorted(os.listdir(os.path.join(root, word))):
            if not name.endswith(".wav"):
                continue
            files.append(SourceFile(word=word, speaker_id=name.split("_")[0],
                                    path=f"{word}/{name}"))
    missing = [k for k in KEYWORDS if k not in {f.word for f in files}]
    if missing:
        raise ValueError(f"source corpus misses keywords: {', '.join(missing)}")
    return files


def load_noise_bank(root, min_samples: int = CLIP_SAMPLES) -> list[np.ndarray]:
    """Load background noise recordings; each must supply at least one full
    clip-length segment."""
    noise_root = os.path.join(root, NOISE_DIR)
    if not os.path.isdir(noise_root):
        raise FileNotFoundError(f"no {NOISE_DIR} directory under {root}")
    bank = []
    for name in sorted(os.listdir(noise_root)):
        if not name.endswith(".wav"):
            continue
        samples, rate = load_wav(os.path.join(noise_root, name))
        if rate != WORKING_RATE:
            raise ValueError(f"{name}: noise must be sampled at {WORKING_RATE} Hz")
        if len(samples) < min_samples:
            raise ValueError(f"{name}: noise file shorter than one clip "
                             f"({len(samples)} < {min_samples} samples)")
        bank.append(samples)
    if not bank:
        raise ValueError(f"no .wav files in {noise_root}")
    return bank


# -- speaker splits and roles ------------------------------------------------

def _largest_remainder(total: int, fractions) -> list[int]:
    quotas = [f * total for f in fractions]
    counts = [math.floor(q) for q in quotas]
    order = sorted(range(len(fractions)),
                   key=lambda i: (counts[i] - quotas[i], i))
    for i in range(total - sum(counts)):
        counts[order[i]] += 1
    # keep every bucket populated whenever the input permits
    while total >= len(fractions) and 0 in counts:
        counts[max(range(len(counts)), key=counts.__getitem__)] -= 1
        counts[counts.index(0)] += 1
    return counts


def split_speakers(speaker_ids, fractions=SPLIT_FRACTIONS, seed: int = 0) -> dict[str, str]:
    """Assign each speaker to train/validation/test with largest-remainder
    rounding of the requested fractions."""
    ids = sorted(speaker_ids)
    if len(ids) < len(SPLITS):
        raise ValueError(f"need at least {len(SPLITS)} speakers, got {len(ids)}")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"split fractions must sum to 1, got {sum(fractions)}")
    _rng(seed, _STREAM_SPLIT).shuffle(ids)
    counts = _largest_remainder(len(ids), fractions)
    assignment, offset = {}, 0
    for split, n in zip(SPLITS, counts):
        for sid in ids[offset:offset + n]:
            assignment[sid] = split
        offset += n
    return assignment


def assign_roles(speaker_ids, own_fraction: float = OWN_FRACTION,
                 seed: int = 0) -> dict[str, str]:
    """Mark ceil(own_fraction * n) of one split's speakers as the device
    wearer's own voice; the rest are external talkers."""
    ids = sorted(speaker_ids)
    if not ids:
        raise ValueError("cannot assign roles to an empty speaker set")
    if not 0.0 < own_fraction < 1.0:
        raise ValueError(f"own_fraction must lie in (0, 1), got {own_fraction}")
    _rng(seed, _STREAM_ROLE).shuffle(ids)
    num_own = math.ceil(own_fraction * len(ids))
    return {sid: (ROLE_OWN if i < num_own else ROLE_EXTERNAL)
            for i, sid in enumerate(ids)}


def pick_angle(rng: np.random.Generator) -> float:
    return float(rng.integers(0, spatial.NUM_ANGLES) * spatial.ANGLE_STEP_DEG)


# -- manifest ----------------------------------------------------------------

@dataclass
class ManifestEntry:
    id: str
    speaker_id: str
    word: str
    label_class: int
    role: str
    angle_deg: float | None
    split: str
    audio_path: str   # rendered two-channel clip, relative to the corpus dir
    source_path: str  # mono source, relative to the source root


@dataclass
class CorpusManifest:
    entries: list[ManifestEntry]
    keywords: tuple = KEYWORDS
    seed: int = 0
    split_fractions: tuple = SPLIT_FRACTIONS
    own_fraction: float = OWN_FRACTION

    def by_split(self, split: str) -> list[ManifestEntry]:
        if split not in SPLITS:
            raise ValueError(f"unknown split {split!r}")
        return [e for e in self.entries if e.split == split]

    def validate(self) -> None:
        speaker_splits, speaker_roles = {}, {}
        for e in self.entries:
            if e.role not in (ROLE_OWN, ROLE_EXTERNAL):
                raise ValueError(f"{e.id}: bad role {e.role!r}")
            if (e.angle_deg is None) != (e.role == ROLE_OWN):
                raise ValueError(f"{e.id}: angle must be present iff external")
            if e.angle_deg is not None and e.angle_deg not in spatial.angle_grid():
                raise ValueError(f"{e.id}: angle {e.angle_deg} off the 7.5-degree grid")
            if e.label_class != label_index(e.word):
                raise ValueError(f"{e.id}: label {e.label_class} does not match {e.word!r}")
            if speaker_splits.setdefault(e.speaker_id, e.split) != e.split:
                raise ValueError(f"speaker {e.speaker_id} appears in multiple splits")
            if speaker_roles.setdefault(e.speaker_id, e.role) != e.role:
                raise ValueError(f"speaker {e.speaker_id} carries multiple roles")


def build_manifest(source_files: list[SourceFile], seed: int = 0,
                   fractions=SPLIT_FRACTIONS, own_fraction: float = OWN_FRACTION,
                   ir_bank=None) -> CorpusManifest:
    """Assemble the corpus manifest: speaker-disjoint splits, per-split
    own/external roles, unknown-class subsampling to roughly one tenth of
    each split, and a uniformly drawn angle per external utterance."""
    if ir_bank is not None:
        spatial.bank_by_angle(ir_bank)  # fail early on incomplete coverage
    missing = [k for k in KEYWORDS if k not in {f.word for f in source_files}]
    if missing:
        raise ValueError(f"source corpus misses keywords: {', '.join(missing)}")

    splits = split_speakers({f.speaker_id for f in source_files},
                            fractions=fractions, seed=seed)
    roles: dict[str, str] = {}
    per_split_speakers = defaultdict(set)
    for sid, split in splits.items():
        per_split_speakers[split].add(sid)
    for i, split in enumerate(SPLITS):
        split_seed = int(np.random.SeedSequence([seed, _STREAM_ROLE, i]).generate_state(1)[0])
        roles.update(assign_roles(per_split_speakers[split],
                                  own_fraction=own_fraction, seed=split_seed))

    by_split_keyword = defaultdict(list)
    by_split_unknown = defaultdict(list)
    for f in sorted(source_files, key=lambda f: f.path):
        bucket = by_split_keyword if f.word in KEYWORDS else by_split_unknown
        bucket[splits[f.speaker_id]].append(f)

    chosen: list[SourceFile] = []
    sub_rng = _rng(seed, _STREAM_UNKNOWN)
    for split in SPLITS:
        chosen.extend(by_split_keyword[split])
        pool = by_split_unknown[split]
        # k keyword clips + k/9 unknown clips puts unknown at ~10% of the split
        target = min(len(pool), round(len(by_split_keyword[split]) / 9.0))
        if target:
            picks = sub_rng.choice(len(pool), size=target, replace=False)
            chosen.extend(pool[i] for i in sorted(picks))

    angle_rng = _rng(seed, _STREAM_ANGLE)
    entries = []
    for f in sorted(chosen, key=lambda f: f.path):
        role = roles[f.speaker_id]
        angle = pick_angle(angle_rng) if role == ROLE_EXTERNAL else None
        stem = f.path[:-4] if f.path.endswith(".wav") else f.path
        entries.append(ManifestEntry(
            id=stem, speaker_id=f.speaker_id, word=f.word,
            label_class=label_index(f.word), role=role, angle_deg=angle,
            split=splits[f.speaker_id], audio_path=f"rendered/{stem}.wav",
            source_path=f.path))

    manifest = CorpusManifest(entries=entries, seed=seed,
                              split_fractions=tuple(fractions),
                              own_fraction=own_fraction)
    manifest.validate()
    return manifest


def _canonical(record: dict) -> str:
    return json.dumps(record, sort_keys=True, separators=(",", ":"))


def write_manifest(path, manifest: CorpusManifest) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(_canonical({
            "format": "corpus-manifest-v1",
            "keywords": list(manifest.keywords),
            "seed": manifest.seed,
            "split_fractions": list(manifest.split_fractions),
            "own_fraction": manifest.own_fraction,
        }) + "\n")
        for e in manifest.entries:
            fh.write(_canonical({
                "id": e.id, "speaker_id": e.speaker_id, "word": e.word,
                "label_class": e.label_class, "role": e.role,
                "angle_deg": e.angle_deg, "split": e.split,
                "audio_path": e.audio_path, "source_path": e.source_path,
            }) + "\n")


def read_manifest(path) -> CorpusManifest:
    with open(path, "r", encoding="utf-8") as fh:
        header = json.loads(fh.readline())
        if header.get("format") != "corpus-manifest-v1":
            raise ValueError(f"{path}: not a corpus manifest")
        entries = [ManifestEntry(**json.loads(line)) for line in fh if line.strip()]
    manifest = CorpusManifest(
        entries=entries, keywords=tuple(header["keywords"]), seed=header["seed"],
        split_fractions=tuple(header["split_fractions"]),
        own_fraction=header["own_fraction"])
    manifest.validate()
    return manifest


# -- rendering ---------------------------------------------------------------

def entry_ir(entry: ManifestEntry, ovtf, hrtfs):
    return ovtf if entry.role == ROLE_OWN else hrtfs[entry.angle_deg]


def render_entry(entry: ManifestEntry, source_root, out_root,
                 ovtf, hrtfs, level_scale: float) -> None:
    samples, rate = load_wav(os.path.join(source_root, entry.source_path))
    if rate != WORKING_RATE:
        raise ValueError(f"{entry.source_path}: expected {WORKING_RATE} Hz, got {rate}")
    rendered = spatial.render_spatial(pad_or_trim(samples), WORKING_RATE,
                                      entry_ir(entry, ovtf, hrtfs),
                                      working_rate=WORKING_RATE,
                                      level_scale=level_scale)
    out_path = os.path.join(out_root, entry.audio_path)
    os.makedirs(os.path.dirname(out_path), exist_ok=True)
    save_wav(out_path, rendered, WORKING_RATE)


_POOL_STATE: dict = {}


def _pool_init(source_root, out_root, bank, level_scale):
    ovtf, hrtfs = spatial.bank_by_angle(bank)
    _POOL_STATE.update(source_root=source_root, out_root=out_root,
                       ovtf=ovtf, hrtfs=hrtfs, level_scale=level_scale)


def _pool_render(entry: ManifestEntry) -> None:
    render_entry(entry, _POOL_STATE["source_root"], _POOL_STATE["out_root"],
                 _POOL_STATE["ovtf"], _POOL_STATE["hrtfs"],
                 _POOL_STATE["level_scale"])


def render_manifest(manifest: CorpusManifest, source_root, out_root,
                    bank, workers: int = 1) -> None:
    """Render every manifest entry to a two-channel clip on disk. Entries
    are independent, so the work distributes over processes when asked."""
    level_scale = spatial.bank_safety_scale(bank)
    if workers <= 1:
        ovtf, hrtfs = spatial.bank_by_angle(bank)
        for entry in manifest.entries:
            render_entry(entry, source_root, out_root, ovtf, hrtfs, level_scale)
        return
    with ProcessPoolExecutor(max_workers=workers, initializer=_pool_init,
                             initargs=(source_root, out_root, bank, level_scale)) as pool:
        for _ in pool.map(_pool_render, manifest.entries, chunksize=16):
            pass
