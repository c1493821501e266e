"""Corpus assembly tests: WAV IO, speaker splits, role assignment, unknown
subsampling, manifest construction and serialization."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ovkws import corpus, spatial


class TestWavIo:
    def test_int16_round_trip_scaling(self, tmp_path):
        from scipy.io import wavfile
        pcm = np.array([-32768, -16384, 0, 16384, 32767], dtype=np.int16)
        path = tmp_path / "pcm.wav"
        wavfile.write(path, 16000, pcm)
        samples, rate = corpus.load_wav(path)
        assert rate == 16000 and samples.dtype == np.float32
        assert np.allclose(samples, pcm / 32768.0, atol=1e-7)

    def test_float_round_trip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(0)
        stereo = (rng.standard_normal((2, 500)) * 0.1).astype(np.float32)
        path = tmp_path / "f32.wav"
        corpus.save_wav(path, stereo, 16000)
        back, rate = corpus.load_wav(path)
        assert back.shape == (2, 500)
        assert np.array_equal(back, stereo)

    def test_pad_or_trim(self):
        short = np.ones(100, dtype=np.float32)
        padded = corpus.pad_or_trim(short, 160)
        assert padded.shape == (160,)
        assert np.all(padded[:100] == 1.0) and np.all(padded[100:] == 0.0)
        long = np.arange(200, dtype=np.float32)
        assert np.array_equal(corpus.pad_or_trim(long, 160), long[:160])
        with pytest.raises(ValueError):
            corpus.pad_or_trim(np.zeros((2, 10)), 160)


class TestLabels:
    def test_keywords_map_to_their_index(self):
        for i, word in enumerate(corpus.KEYWORDS):
            assert corpus.label_index(word) == i

    def test_everything_else_is_unknown(self):
        assert corpus.label_index("zebra") == corpus.UNKNOWN_INDEX
        assert corpus.label_index("happy") == corpus.UNKNOWN_INDEX
        assert corpus.UNKNOWN_INDEX == len(corpus.KEYWORDS) == 10


class TestLargestRemainder:
    def test_exact_fractions(self):
        assert corpus._largest_remainder(100, (0.8, 0.1, 0.1)) == [80, 10, 10]

    def test_small_totals_keep_buckets_populated(self):
        assert corpus._largest_remainder(3, (0.8, 0.1, 0.1)) == [1, 1, 1]
        assert sorted(corpus._largest_remainder(4, (0.8, 0.1, 0.1))) == [1, 1, 2]

    def test_sums_match_total(self):
        for n in range(3, 200):
            counts = corpus._largest_remainder(n, (0.8, 0.1, 0.1))
            assert sum(counts) == n
            assert all(c > 0 for c in counts)

    @given(st.integers(min_value=3, max_value=5000),
           st.tuples(st.floats(0.05, 0.9), st.floats(0.05, 0.9),
                     st.floats(0.05, 0.9)))
    @settings(max_examples=50, deadline=None)
    def test_property_total_and_rounding(self, n, raw):
        total = sum(raw)
        fractions = tuple(r / total for r in raw)
        counts = corpus._largest_remainder(n, fractions)
        assert sum(counts) == n
        # rounding moves each bucket at most one off its quota, except where
        # the keep-populated repair had to intervene
        if 0 not in [int(f * n) for f in fractions]:
            for c, f in zip(counts, fractions):
                assert abs(c - f * n) <= 1.0 + 1e-9


class TestSplitsAndRoles:
    def test_split_partition_sizes(self):
        ids = [f"s{i:03d}" for i in range(100)]
        assignment = corpus.split_speakers(ids, seed=0)
        sizes = {s: sum(1 for v in assignment.values() if v == s)
                 for s in corpus.SPLITS}
        assert sizes == {"train": 80, "validation": 10, "test": 10}
        assert set(assignment) == set(ids)

    def test_split_determinism_and_seed_sensitivity(self):
        ids = [f"s{i}" for i in range(30)]
        a = corpus.split_speakers(ids, seed=5)
        b = corpus.split_speakers(list(reversed(ids)), seed=5)
        assert a == b  # input order must not matter
        c = corpus.split_speakers(ids, seed=6)
        assert a != c

    def test_too_few_speakers_rejected(self):
        with pytest.raises(ValueError):
            corpus.split_speakers(["a", "b"])

    def test_role_counts(self):
        ids = [f"s{i}" for i in range(40)]
        roles = corpus.assign_roles(ids, seed=1)
        own = sum(1 for r in roles.values() if r == corpus.ROLE_OWN)
        assert own == 30  # ceil(0.75 * 40)
        assert len(roles) == 40

    def test_single_speaker_is_own(self):
        roles = corpus.assign_roles(["only"], seed=0)
        assert roles == {"only": corpus.ROLE_OWN}

    def test_role_ceil_rounding(self):
        for n, expected in ((2, 2), (3, 3), (4, 3), (5, 4), (8, 6)):
            roles = corpus.assign_roles([f"s{i}" for i in range(n)], seed=2)
            own = sum(1 for r in roles.values() if r == corpus.ROLE_OWN)
            assert own == expected

    def test_bad_fraction_rejected(self):
        with pytest.raises(ValueError):
            corpus.assign_roles(["a"], own_fraction=1.0)


class TestAngleDraw:
    def test_uniform_over_grid(self):
        rng = np.random.default_rng(9)
        draws = np.array([corpus.pick_angle(rng) for _ in range(48000)])
        grid = spatial.angle_grid()
        assert set(np.unique(draws)) <= set(grid)
        counts = np.array([(draws == a).sum() for a in grid])
        # 48,000 draws over 48 angles: each bin within
        # six standard deviations of the expected 1,000
        assert counts.min() >= 800 and counts.max() <= 1200


class TestScan:
    def test_scan_layout(self, source_root, source_files):
        words = {f.word for f in source_files}
        assert set(corpus.KEYWORDS) <= words
        assert len(words) == 35
        # noise directory is not a word
        assert all(not f.word.startswith("_") for f in source_files)
        sample = source_files[0]
        assert sample.path.startswith(f"{sample.word}/{sample.speaker_id}_")
        assert sample.path.endswith(".wav")

    def test_missing_keyword_rejected(self, tmp_path):
        for word in ("left", "zebra"):
            d = tmp_path / word
            d.mkdir()
            (d / "spk0_x.wav").write_bytes(b"")
        with pytest.raises(ValueError, match="misses keywords"):
            corpus.scan_source_corpus(tmp_path)

    def test_noise_bank_loaded(self, noise_bank):
        assert len(noise_bank) == 6
        for noise in noise_bank:
            assert len(noise) >= corpus.CLIP_SAMPLES

    def test_noise_bank_missing_dir(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            corpus.load_noise_bank(tmp_path)


class TestManifest:
    def test_validates(self, manifest):
        manifest.validate()
        assert len(manifest.entries) > 0

    def test_speaker_disjoint_splits(self, manifest):
        seen = {}
        for e in manifest.entries:
            assert seen.setdefault(e.speaker_id, e.split) == e.split

    def test_angle_present_iff_external(self, manifest):
        for e in manifest.entries:
            if e.role == corpus.ROLE_EXTERNAL:
                assert e.angle_deg in spatial.angle_grid()
            else:
                assert e.angle_deg is None

    def test_unknown_fraction_near_ten_percent(self, source_files, ir_bank):
        # at 6 speakers each split carries 10 keyword clips per speaker, so
        # the one-in-nine unknown target lands between 8% and 12%
        manifest = corpus.build_manifest(source_files, seed=3, ir_bank=ir_bank)
        for split in corpus.SPLITS:
            entries = manifest.by_split(split)
            unknown = sum(1 for e in entries
                          if e.label_class == corpus.UNKNOWN_INDEX)
            fraction = unknown / len(entries)
            assert 0.08 <= fraction <= 0.12, (split, fraction)

    def test_deterministic_bytes(self, source_files, tmp_path):
        a = corpus.build_manifest(source_files, seed=11)
        b = corpus.build_manifest(source_files, seed=11)
        pa, pb = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
        corpus.write_manifest(pa, a)
        corpus.write_manifest(pb, b)
        assert pa.read_bytes() == pb.read_bytes()

    def test_seed_changes_assignment(self, source_files):
        a = corpus.build_manifest(source_files, seed=0)
        b = corpus.build_manifest(source_files, seed=1)
        roles_a = {e.speaker_id: e.role for e in a.entries}
        roles_b = {e.speaker_id: e.role for e in b.entries}
        splits_a = {e.speaker_id: e.split for e in a.entries}
        splits_b = {e.speaker_id: e.split for e in b.entries}
        assert roles_a != roles_b or splits_a != splits_b

    def test_round_trip(self, manifest, tmp_path):
        path = tmp_path / "m.jsonl"
        corpus.write_manifest(path, manifest)
        back = corpus.read_manifest(path)
        assert back.seed == manifest.seed
        assert back.keywords == manifest.keywords
        assert len(back.entries) == len(manifest.entries)
        for x, y in zip(manifest.entries, back.entries):
            assert x == y
        back.validate()

    def test_read_rejects_wrong_header(self, tmp_path):
        path = tmp_path / "bad.jsonl"
        path.write_text('{"format":"something-else"}\n')
        with pytest.raises(ValueError):
            corpus.read_manifest(path)


class TestRenderEntry:
    def test_entry_ir_selection(self, manifest, ir_pairs):
        ovtf, hrtfs = ir_pairs
        own = next(e for e in manifest.entries if e.role == corpus.ROLE_OWN)
        ext = next(e for e in manifest.entries if e.role == corpus.ROLE_EXTERNAL)
        assert corpus.entry_ir(own, ovtf, hrtfs) is ovtf
        assert corpus.entry_ir(ext, ovtf, hrtfs) is hrtfs[ext.angle_deg]

    def test_render_entry_writes_dual_channel_clip(self, manifest, source_root,
                                                   ir_bank, tmp_path):
        entry = manifest.entries[0]
        ovtf, hrtfs = spatial.bank_by_angle(ir_bank)
        scale = spatial.bank_safety_scale(ir_bank)
        corpus.render_entry(entry, source_root, tmp_path,
                            ovtf=ovtf, hrtfs=hrtfs, level_scale=scale)
        samples, rate = corpus.load_wav(tmp_path / entry.audio_path)
        assert rate == corpus.WORKING_RATE
        assert samples.shape == (2, corpus.CLIP_SAMPLES)
        assert np.max(np.abs(samples)) <= 10.0 ** (-1.0 / 20.0) + 1e-5
