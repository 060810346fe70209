"""Corpus synthesis, pairing rules, oracle labels, manifest round trips."""

import numpy as np
import pytest

from cdpam.audio import rms
from cdpam.datagen import (JudgmentRecord, build_common_area_sets, build_mono_series,
                           build_mos_set, build_retrieval_set, make_contrastive_batch,
                           oracle_jnd, oracle_triplets, read_manifest, spec_with_severity,
                           synth_corpus, write_manifest)
from cdpam.errors import CapacityError, ContractError
from cdpam.perturb import magnitude

SR = 4000
CLIP = 4000


@pytest.fixture(scope="module")
def corpus():
    return synth_corpus(40, 4, seed=0, sample_rate=SR, clip_samples=CLIP)


class TestSynthCorpus:
    def test_counts_and_speakers(self, corpus):
        assert len(corpus) == 40
        assert len({u.speaker_id for u in corpus}) == 4
        assert len({u.id for u in corpus}) == 40

    def test_deterministic(self):
        a = synth_corpus(4, 2, seed=9, sample_rate=SR, clip_samples=CLIP)
        b = synth_corpus(4, 2, seed=9, sample_rate=SR, clip_samples=CLIP)
        for ua, ub in zip(a, b):
            assert np.array_equal(ua.clean.samples, ub.clean.samples)

    def test_rms_within_band(self, corpus):
        for utt in corpus:
            assert 0.02 <= rms(utt.clean) <= 0.5

    def test_canonical_shape(self, corpus):
        for utt in corpus:
            assert len(utt.clean) == CLIP
            assert utt.clean.sample_rate == SR

    def test_wav_directory_source(self, corpus, tmp_path):
        from cdpam.audio import write_wav
        for utt in corpus[:3]:
            write_wav(utt.clean, tmp_path / f"{utt.id}.wav")
        loaded = synth_corpus(3, 2, seed=0, sample_rate=SR, clip_samples=CLIP,
                              from_dir=tmp_path)
        assert len(loaded) == 3
        assert all(len(u.clean) == CLIP for u in loaded)


class TestContrastivePairs:
    def test_acoustic_mode_shares_spec(self, corpus):
        pairs = make_contrastive_batch(corpus, "acoustic", batch_size=8, seed=1)
        assert len(pairs) == 8
        seen = set()
        for pair in pairs:
            assert pair.spec_i.to_json() == pair.spec_j.to_json()
            assert pair.utt_i != pair.utt_j
            seen.update((pair.utt_i, pair.utt_j))
        assert len(seen) == 16  # all distinct across the batch

    def test_content_mode_shares_utterance(self, corpus):
        pairs = make_contrastive_batch(corpus, "content", batch_size=8, seed=2)
        for pair in pairs:
            assert pair.utt_i == pair.utt_j
            assert pair.spec_i.to_json() != pair.spec_j.to_json()

    def test_batch_of_16_has_32_waveforms(self, corpus):
        pairs = make_contrastive_batch(corpus, "acoustic", batch_size=16, seed=3)
        waves = [w for pair in pairs for w in (pair.wave_i, pair.wave_j)]
        assert len(waves) == 32

    def test_capacity_error(self, corpus):
        with pytest.raises(CapacityError):
            make_contrastive_batch(corpus[:10], "acoustic", batch_size=8, seed=0)

    def test_deterministic(self, corpus):
        a = make_contrastive_batch(corpus, "content", batch_size=4, seed=11)
        b = make_contrastive_batch(corpus, "content", batch_size=4, seed=11)
        for pa, pb in zip(a, b):
            assert np.array_equal(pa.wave_i.samples, pb.wave_i.samples)
            assert pa.spec_j == pb.spec_j


class TestSpecWithSeverity:
    def test_hits_target_for_continuous_families(self):
        rng = np.random.default_rng(0)
        for target in (0.0, 0.25, 0.5, 0.9, 1.0):
            spec = spec_with_severity(("noise",), target, rng)
            assert magnitude(spec) == pytest.approx(target, abs=1e-12)

    def test_multi_family_mean(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            spec = spec_with_severity(("noise", "reverb", "eq"), 0.6, rng)
            assert magnitude(spec) == pytest.approx(0.6, abs=0.13)  # mulaw absent: exact or near


class TestOracleJnd:
    def test_zero_magnitude_is_same(self, corpus):
        records = oracle_jnd(corpus, 50, threshold=0.15, noise_sigma=0.0, seed=0)
        for record in records:
            mag = magnitude(record.spec_a)
            assert record.label == ("different" if mag > 0.15 else "same")

    def test_label_balance(self, corpus):
        records = oracle_jnd(corpus, 400, seed=1)
        different = sum(1 for r in records if r.label == "different")
        assert 0.3 <= different / len(records) <= 0.7

    def test_threshold_crossing_rate(self, corpus):
        # at magnitude == threshold the flip noise makes labels a coin toss
        from cdpam.datagen import DEFAULT_JND_SIGMA
        rng = np.random.default_rng(2)
        flips = [rng.normal(0.0, DEFAULT_JND_SIGMA) > 0.0 for _ in range(1000)]
        assert 0.45 <= np.mean(flips) <= 0.55

    def test_determinism(self, corpus):
        a = oracle_jnd(corpus, 10, seed=5)
        b = oracle_jnd(corpus, 10, seed=5)
        assert [r.to_dict() for r in a] == [r.to_dict() for r in b]


class TestOracleTriplets:
    def test_preferred_is_smaller_magnitude(self, corpus):
        for record in oracle_triplets(corpus, 60, seed=3):
            mag_a = magnitude(record.spec_a)
            mag_b = magnitude(record.spec_b)
            assert record.label == ("A" if mag_a < mag_b else "B")

    def test_eval_split_gap(self, corpus):
        for record in oracle_triplets(corpus, 40, seed=4, min_magnitude_gap=0.2):
            assert abs(magnitude(record.spec_a) - magnitude(record.spec_b)) >= 0.2

    def test_distinct_comparison_clips(self, corpus):
        for record in oracle_triplets(corpus, 10, seed=5):
            assert record.a_id != record.b_id

    def test_determinism(self, corpus):
        a = oracle_triplets(corpus, 12, seed=6)
        b = oracle_triplets(corpus, 12, seed=6)
        assert [r.to_dict() for r in a] == [r.to_dict() for r in b]


class TestManifests:
    def test_round_trip_lossless(self, corpus, tmp_path):
        records = oracle_jnd(corpus, 8, seed=7) + oracle_triplets(corpus, 8, seed=8)
        path = tmp_path / "records.jsonl"
        write_manifest(records, path)
        back = read_manifest(path)
        assert [r.to_dict() for r in back] == [r.to_dict() for r in records]

    def test_record_validation(self):
        from cdpam.perturb import PerturbSpec
        spec = PerturbSpec(noise_snr_db=10.0, seed=0)
        with pytest.raises(ContractError):
            JudgmentRecord(kind="jnd_pair", ref_id="u", a_id="a", spec_a=spec, label="A")
        with pytest.raises(ContractError):
            JudgmentRecord(kind="triplet", ref_id="u", a_id="a", spec_a=spec, label="A")


class TestEvalSets:
    def test_mono_series_structure(self, corpus):
        items = build_mono_series(corpus, ("noise", "reverb"), n_levels=4, n_contents=3, seed=0)
        families = {item.family for item in items}
        assert families == {"noise", "reverb", "combined"}
        noise_items = [i for i in items if i.family == "noise"]
        assert len(noise_items) == 12
        by_level = {}
        for item in noise_items:
            by_level.setdefault(item.level, []).append(magnitude(item.spec))
        levels = sorted(by_level)
        means = [np.mean(by_level[level]) for level in levels]
        assert all(a < b for a, b in zip(means, means[1:]))

    def test_common_area_groups(self, corpus):
        pairs = build_common_area_sets(corpus, n_pairs=20, seed=1)
        same = [p for p in pairs if p.group == "same"]
        diff = [p for p in pairs if p.group == "diff"]
        assert len(same) == len(diff) == 20
        for p in same:
            assert p.spec_a.to_json() == p.spec_b.to_json()
            assert p.utt_a != p.utt_b
        assert any(p.spec_a.to_json() != p.spec_b.to_json() for p in diff)

    def test_retrieval_groups(self, corpus):
        items = build_retrieval_set(corpus, n_groups=5, group_size=8, seed=2)
        assert len(items) == 40
        for group_id in range(5):
            specs = {i.spec.to_json() for i in items if i.group_id == group_id}
            assert len(specs) == 1

    def test_mos_cells_filled(self, corpus):
        rows = build_mos_set(corpus, n_conditions=4, clips_per_cell=2, seed=3)
        speakers = {u.speaker_id for u in corpus}
        cells = {(r.speaker_id, r.condition_id) for r in rows}
        assert cells == {(s, c) for s in speakers for c in range(4)}
        for row in rows:
            assert 1.0 <= row.rating <= 5.0
