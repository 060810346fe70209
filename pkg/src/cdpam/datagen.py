"""Synthetic corpora, contrastive pairing, and oracle-labeled judgments.

The corpus generator produces speech-like clips (a harmonic source with
speaker-specific pitch and vibrato, shaped by time-varying formant
resonances, with silence gaps) so no external audio is needed.  A directory
of user WAVs can substitute for it.

Two pairing rules feed contrastive pretraining: *acoustic* pairs share one
perturbation record across two different utterances, *content* pairs apply
two independent records to one utterance.

Human annotation is replaced by an oracle that thresholds the perturbation
magnitude: near-threshold pairs labelled same/different stand in for a JND
dataset, and triplets preferring the smaller-magnitude perturbation stand in
for two-alternative comparisons across the full severity range.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .audio import CANONICAL_RATE, CANONICAL_SAMPLES, Waveform, fix_length, read_wav, resample
from .errors import CapacityError, ContractError
from .perturb import (FAMILIES, EQ_GAIN_RANGE_DB, MULAW_BITS_RANGE, NOISE_SNR_RANGE_DB,
                      PerturbSpec, REVERB_RT60_RANGE_S, apply, magnitude, sample_spec)

DEFAULT_JND_THRESHOLD = 0.15
DEFAULT_JND_SIGMA = 0.03
EVAL_TRIPLET_GAP = 0.2


@dataclass(frozen=True)
class Utterance:
    """One synthetic (or imported) clean clip plus its generator parameters."""

    id: str
    clean: Waveform
    speaker_id: int
    params: dict = field(default_factory=dict)


@dataclass(frozen=True)
class JudgmentRecord:
    """A labeled JND pair or triplet; the supervision unit for training.

    ``ref_id`` names the clean utterance; the compared clips are defined by
    perturbation specs so they can be regenerated bit-exactly.  ``paths``
    holds relative WAV paths once the record has been materialized on disk.
    """

    kind: str
    ref_id: str
    a_id: str
    spec_a: PerturbSpec
    label: str
    label_source: str = "oracle"
    b_id: str | None = None
    spec_b: PerturbSpec | None = None
    paths: dict | None = None

    def __post_init__(self):
        if self.kind == "jnd_pair":
            if self.label not in ("same", "different"):
                raise ContractError(f"jnd label must be same/different, got {self.label!r}")
            if self.b_id is not None or self.spec_b is not None:
                raise ContractError("jnd pairs have a single comparison clip")
        elif self.kind == "triplet":
            if self.label not in ("A", "B"):
                raise ContractError(f"triplet label must be A or B, got {self.label!r}")
            if self.b_id is None or self.spec_b is None:
                raise ContractError("triplets need two comparison clips")
            if self.b_id == self.a_id:
                raise ContractError("triplet comparison clips must be distinct")
        else:
            raise ContractError(f"unknown record kind {self.kind!r}")
        if self.label_source not in ("oracle", "file"):
            raise ContractError(f"unknown label source {self.label_source!r}")

    def to_dict(self) -> dict:
        d = {
            "kind": self.kind,
            "ref_id": self.ref_id,
            "a_id": self.a_id,
            "spec_a": json.loads(self.spec_a.to_json()),
            "label": self.label,
            "label_source": self.label_source,
        }
        if self.kind == "triplet":
            d["b_id"] = self.b_id
            d["spec_b"] = json.loads(self.spec_b.to_json())
        if self.paths is not None:
            d["paths"] = dict(self.paths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "JudgmentRecord":
        return cls(
            kind=d["kind"],
            ref_id=d["ref_id"],
            a_id=d["a_id"],
            spec_a=PerturbSpec.from_json(json.dumps(d["spec_a"])),
            label=d["label"],
            label_source=d.get("label_source", "oracle"),
            b_id=d.get("b_id"),
            spec_b=PerturbSpec.from_json(json.dumps(d["spec_b"])) if d.get("spec_b") else None,
            paths=d.get("paths"),
        )


def write_manifest(records, path) -> None:
    tmp = str(path) + ".tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        for record in records:
            fh.write(json.dumps(record.to_dict(), sort_keys=True))
            fh.write("\n")
    os.replace(tmp, path)


def read_manifest(path) -> list:
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                records.append(JudgmentRecord.from_dict(json.loads(line)))
    return records


# -- corpus synthesis -----------------------------------------------------------


def _speaker_params(seed: int, speaker_id: int) -> dict:
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(1, speaker_id)))
    n_formants = int(rng.integers(2, 4))
    formants = [float(rng.uniform(*band)) for band in
                ((280.0, 750.0), (900.0, 2100.0), (2300.0, 3200.0))][:n_formants]
    return {
        "f0_base": float(rng.uniform(80.0, 250.0)),
        "vibrato_hz": float(rng.uniform(4.5, 6.5)),
        "vibrato_depth": float(rng.uniform(0.01, 0.03)),
        "formants": formants,
        "bandwidths": [float(rng.uniform(80.0, 150.0)) for _ in formants],
    }


def _anchored_track(rng, n, n_anchors, lo, hi):
    anchors = rng.uniform(lo, hi, size=n_anchors)
    return np.interp(np.linspace(0.0, 1.0, n), np.linspace(0.0, 1.0, n_anchors), anchors)


def _synth_utterance(spk: dict, rng: np.random.Generator, n: int, sr: int) -> np.ndarray:
    t = np.arange(n) / sr
    # pitch contour: slow anchored drift (+-2 semitones) plus vibrato
    drift = _anchored_track(rng, n, 6, -2.0, 2.0)
    f0 = spk["f0_base"] * 2.0 ** (drift / 12.0)
    f0 *= 1.0 + spk["vibrato_depth"] * np.sin(2.0 * np.pi * spk["vibrato_hz"] * t)
    base_phase = 2.0 * np.pi * np.cumsum(f0) / sr

    formant_tracks = [f * (1.0 + _anchored_track(rng, n, 5, -0.18, 0.18))
                      for f in spk["formants"]]

    f_max = 0.45 * sr
    n_harm = max(3, int(f_max / float(np.max(f0))))
    out = np.zeros(n)
    for k in range(1, n_harm + 1):
        freq_k = k * f0
        amp = np.zeros(n)
        for track, bw in zip(formant_tracks, spk["bandwidths"]):
            amp += 1.0 / (1.0 + ((freq_k - track) / bw) ** 2)
        amp *= 1.0 / k
        amp[freq_k > f_max] = 0.0
        out += amp * np.sin(k * base_phase + rng.uniform(0.0, 2.0 * np.pi))

    # syllable-like energy contour with silence gaps and raised-cosine edges
    envelope = np.zeros(n)
    n_segments = int(rng.integers(2, 5))
    edges = np.sort(rng.uniform(0.02, 0.98, size=2 * n_segments))
    fade = max(1, int(0.03 * sr))
    ramp = 0.5 - 0.5 * np.cos(np.linspace(0.0, np.pi, fade))
    for a, b in zip(edges[0::2], edges[1::2]):
        i, j = int(a * n), int(b * n)
        if j - i < 2 * fade + 1:
            continue
        envelope[i:j] = 1.0
        envelope[i:i + fade] = np.minimum(envelope[i:i + fade], ramp)
        envelope[j - fade:j] = np.minimum(envelope[j - fade:j], ramp[::-1])
    if not envelope.any():
        envelope[:] = 1.0
    out *= envelope

    out += 10.0 ** (-35.0 / 20.0) * rng.standard_normal(n)  # breath-noise floor

    target_rms = rng.uniform(0.05, 0.2)
    out *= target_rms / np.sqrt(np.mean(np.square(out)))
    peak = np.max(np.abs(out))
    if peak > 0.95:
        out *= 0.95 / peak
    return out


def synth_corpus(n: int, n_speakers: int, seed: int = 0,
                 sample_rate: int = CANONICAL_RATE, clip_samples: int = CANONICAL_SAMPLES,
                 id_prefix: str = "utt", from_dir=None) -> list:
    """Generate n seeded utterances across n_speakers synthetic voices.

    With ``from_dir``, WAV files from that directory are conditioned to the
    target format and used instead (speakers assigned round-robin).
    """
    if n < 1 or n_speakers < 1:
        raise ContractError("corpus needs at least one utterance and one speaker")
    if from_dir is not None:
        names = sorted(f for f in os.listdir(from_dir) if f.lower().endswith(".wav"))
        if not names:
            raise CapacityError(f"{from_dir} holds no WAV files")
        corpus = []
        for i, name in enumerate(names[:n]):
            w = read_wav(os.path.join(from_dir, name))
            w = fix_length(resample(w, sample_rate), clip_samples)
            corpus.append(Utterance(id=f"{id_prefix}{i:04d}", clean=w,
                                    speaker_id=i % n_speakers, params={"source": name}))
        return corpus

    speakers = [_speaker_params(seed, s) for s in range(n_speakers)]
    corpus = []
    for i in range(n):
        speaker_id = i % n_speakers
        rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(2, i)))
        samples = _synth_utterance(speakers[speaker_id], rng, clip_samples, sample_rate)
        corpus.append(Utterance(id=f"{id_prefix}{i:04d}", clean=Waveform(samples, sample_rate),
                                speaker_id=speaker_id, params=dict(speakers[speaker_id])))
    return corpus


def corpus_by_id(corpus) -> dict:
    return {utt.id: utt for utt in corpus}


# -- contrastive pairing ---------------------------------------------------------


@dataclass(frozen=True)
class ContrastivePair:
    wave_i: Waveform
    wave_j: Waveform
    spec_i: PerturbSpec
    spec_j: PerturbSpec
    utt_i: str
    utt_j: str


def make_contrastive_batch(corpus, mode: str, batch_size: int = 16, seed: int = 0,
                           families=("noise", "reverb")) -> list:
    """Build one batch of positive pairs under the requested pairing rule.

    acoustic mode: two different utterances share one perturbation record.
    content mode: one utterance is perturbed with two independent records.
    """
    if mode not in ("acoustic", "content"):
        raise ContractError(f"unknown contrastive mode {mode!r}")
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(3,)))
    needed = 2 * batch_size if mode == "acoustic" else batch_size
    if len(corpus) < needed:
        raise CapacityError(
            f"{mode} batches of {batch_size} need {needed} distinct utterances, "
            f"corpus has {len(corpus)}")
    picks = rng.choice(len(corpus), size=needed, replace=False)
    pairs = []
    for b in range(batch_size):
        if mode == "acoustic":
            u1, u2 = corpus[picks[2 * b]], corpus[picks[2 * b + 1]]
            spec = sample_spec(int(rng.integers(0, 2 ** 63)), families)
            pairs.append(ContrastivePair(apply(spec, u1.clean), apply(spec, u2.clean),
                                         spec, spec, u1.id, u2.id))
        else:
            utt = corpus[picks[b]]
            spec_1 = sample_spec(int(rng.integers(0, 2 ** 63)), families)
            spec_2 = sample_spec(int(rng.integers(0, 2 ** 63)), families)
            pairs.append(ContrastivePair(apply(spec_1, utt.clean), apply(spec_2, utt.clean),
                                         spec_1, spec_2, utt.id, utt.id))
    return pairs


# -- severity-targeted spec construction -----------------------------------------


def spec_with_severity(families, target: float, rng: np.random.Generator,
                       max_families: int = 2) -> PerturbSpec:
    """A spec whose present families each sit at the given normalized severity."""
    pool = tuple(families)
    if not pool:
        raise ContractError("no families to draw from")
    t = float(np.clip(target, 0.0, 1.0))
    n_fam = 1 if len(pool) == 1 or max_families == 1 or rng.random() < 0.5 else 2
    chosen = rng.choice(pool, size=min(n_fam, len(pool)), replace=False)
    kwargs: dict = {}
    for fam in chosen:
        if fam == "noise":
            lo, hi = NOISE_SNR_RANGE_DB
            kwargs["noise_snr_db"] = hi - t * (hi - lo)
            kwargs["noise_color"] = str(rng.choice(["white", "pink"]))
        elif fam == "reverb":
            lo, hi = REVERB_RT60_RANGE_S
            kwargs["reverb_rt60_s"] = lo + t * (hi - lo)
        elif fam == "eq":
            signs = rng.choice([-1.0, 1.0], size=8)
            kwargs["eq_gains_db"] = tuple(signs * t * EQ_GAIN_RANGE_DB[1])
        elif fam == "compression":
            lo, hi = MULAW_BITS_RANGE
            kwargs["mulaw_bits"] = int(round(hi - t * (hi - lo)))
        elif fam == "dropouts":
            kwargs["dropout_rate"] = t * 0.1
        elif fam == "pops":
            kwargs["pop_rate"] = t * 10.0
        else:
            raise ContractError(f"unknown family {fam!r}")
    kwargs["seed"] = int(rng.integers(0, 2 ** 63))
    return PerturbSpec(**kwargs)


# -- oracle annotators -----------------------------------------------------------


def oracle_jnd(corpus, n_pairs: int, threshold: float = DEFAULT_JND_THRESHOLD,
               noise_sigma: float = DEFAULT_JND_SIGMA, seed: int = 0,
               families=("noise", "reverb")) -> list:
    """Near-threshold clean/perturbed pairs labelled by the magnitude oracle.

    Magnitudes are drawn uniformly over [0, 2*threshold] (capped at 1) so the
    labels come out roughly balanced; a pair is "different" when
    magnitude + N(0, noise_sigma) exceeds the threshold.
    """
    if not 0.0 < threshold < 1.0:
        raise ContractError("threshold must lie in (0, 1)")
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(4,)))
    records = []
    for i in range(n_pairs):
        utt = corpus[int(rng.integers(0, len(corpus)))]
        target = rng.uniform(0.0, min(1.0, 2.0 * threshold))
        spec = spec_with_severity(families, target, rng)
        noisy_magnitude = magnitude(spec) + (rng.normal(0.0, noise_sigma) if noise_sigma > 0 else 0.0)
        label = "different" if noisy_magnitude > threshold else "same"
        records.append(JudgmentRecord(kind="jnd_pair", ref_id=utt.id,
                                      a_id=f"{utt.id}#jnd{i:05d}", spec_a=spec, label=label))
    return records


def oracle_triplets(corpus, n: int, seed: int = 0, families=("noise", "reverb"),
                    min_magnitude_gap: float = 0.0) -> list:
    """Triplets (clean reference, two perturbations); the smaller magnitude wins.

    Magnitudes are sampled uniformly over [0, 1] so the set spans small to
    far-beyond-threshold perturbations; eval splits pass a minimum magnitude
    gap to keep the labels unambiguous.
    """
    if n < 1:
        raise ContractError("need at least one triplet")
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(5,)))
    records = []
    for i in range(n):
        utt = corpus[int(rng.integers(0, len(corpus)))]
        while True:
            t_a, t_b = rng.uniform(0.0, 1.0, size=2)
            spec_a = spec_with_severity(families, t_a, rng)
            spec_b = spec_with_severity(families, t_b, rng)
            mag_a, mag_b = magnitude(spec_a), magnitude(spec_b)
            if abs(mag_a - mag_b) >= max(min_magnitude_gap, 1e-9):
                break
        records.append(JudgmentRecord(
            kind="triplet", ref_id=utt.id,
            a_id=f"{utt.id}#t{i:05d}a", spec_a=spec_a,
            b_id=f"{utt.id}#t{i:05d}b", spec_b=spec_b,
            label="A" if mag_a < mag_b else "B"))
    return records


# -- evaluation datasets ----------------------------------------------------------


@dataclass(frozen=True)
class MonoSeriesItem:
    utt_id: str
    family: str  # one family name, or "combined"
    level: int
    spec: PerturbSpec

    def to_dict(self) -> dict:
        return {"utt_id": self.utt_id, "family": self.family, "level": self.level,
                "spec": json.loads(self.spec.to_json())}

    @classmethod
    def from_dict(cls, d):
        return cls(d["utt_id"], d["family"], d["level"],
                   PerturbSpec.from_json(json.dumps(d["spec"])))


@dataclass(frozen=True)
class GroupedPair:
    utt_a: str
    utt_b: str
    spec_a: PerturbSpec
    spec_b: PerturbSpec
    group: str  # "same" or "diff"

    def to_dict(self) -> dict:
        return {"utt_a": self.utt_a, "utt_b": self.utt_b,
                "spec_a": json.loads(self.spec_a.to_json()),
                "spec_b": json.loads(self.spec_b.to_json()), "group": self.group}

    @classmethod
    def from_dict(cls, d):
        return cls(d["utt_a"], d["utt_b"],
                   PerturbSpec.from_json(json.dumps(d["spec_a"])),
                   PerturbSpec.from_json(json.dumps(d["spec_b"])), d["group"])


@dataclass(frozen=True)
class RetrievalItem:
    utt_id: str
    group_id: int
    spec: PerturbSpec

    def to_dict(self) -> dict:
        return {"utt_id": self.utt_id, "group_id": self.group_id,
                "spec": json.loads(self.spec.to_json())}

    @classmethod
    def from_dict(cls, d):
        return cls(d["utt_id"], d["group_id"], PerturbSpec.from_json(json.dumps(d["spec"])))


@dataclass(frozen=True)
class MosRow:
    speaker_id: int
    condition_id: int
    utt_id: str
    spec: PerturbSpec
    rating: float

    def to_dict(self) -> dict:
        return {"speaker_id": self.speaker_id, "condition_id": self.condition_id,
                "utt_id": self.utt_id, "spec": json.loads(self.spec.to_json()),
                "rating": self.rating}

    @classmethod
    def from_dict(cls, d):
        return cls(d["speaker_id"], d["condition_id"], d["utt_id"],
                   PerturbSpec.from_json(json.dumps(d["spec"])), d["rating"])


def write_jsonl(items, path) -> None:
    tmp = str(path) + ".tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        for item in items:
            fh.write(json.dumps(item.to_dict(), sort_keys=True))
            fh.write("\n")
    os.replace(tmp, path)


def read_jsonl(path, cls) -> list:
    items = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                items.append(cls.from_dict(json.loads(line)))
    return items


def build_mono_series(corpus, families=("noise", "reverb"), n_levels: int = 6,
                      n_contents: int = 8, seed: int = 0) -> list:
    """Per-content series at increasing severities, per family plus combined."""
    if n_levels < 3 or n_contents < 2:
        raise ContractError("monotonicity needs >= 3 levels and >= 2 content items")
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(6,)))
    severities = np.linspace(0.15, 0.9, n_levels)
    contents = [corpus[int(i)] for i in
                rng.choice(len(corpus), size=min(n_contents, len(corpus)), replace=False)]
    items = []
    series = [(fam, (fam,)) for fam in families]
    if len(families) > 1:
        series.append(("combined", tuple(families)))
    for fam_name, fam_pool in series:
        for utt in contents:
            for level, severity_target in enumerate(severities):
                spec = spec_with_severity(fam_pool, float(severity_target), rng,
                                          max_families=len(fam_pool))
                items.append(MonoSeriesItem(utt.id, fam_name, level, spec))
    return items


def build_common_area_sets(corpus, n_pairs: int = 150, seed: int = 0,
                           families=("noise", "reverb")) -> list:
    """Two groups of cross-content pairs: shared perturbation record vs independent ones."""
    if len(corpus) < 2:
        raise CapacityError("common-area pairs need at least 2 utterances")
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(7,)))
    pairs = []
    for group in ("same", "diff"):
        for _ in range(n_pairs):
            ia, ib = rng.choice(len(corpus), size=2, replace=False)
            spec_a = sample_spec(int(rng.integers(0, 2 ** 63)), families)
            spec_b = spec_a if group == "same" else sample_spec(int(rng.integers(0, 2 ** 63)),
                                                                families)
            pairs.append(GroupedPair(corpus[int(ia)].id, corpus[int(ib)].id,
                                     spec_a, spec_b, group))
    return pairs


def build_retrieval_set(corpus, n_groups: int = 10, group_size: int = 20, seed: int = 0,
                        families=("noise", "reverb")) -> list:
    """n_groups perturbation records, each applied to group_size different utterances."""
    if len(corpus) < group_size:
        raise CapacityError("retrieval groups need group_size distinct utterances")
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(8,)))
    items = []
    for group_id in range(n_groups):
        spec = sample_spec(int(rng.integers(0, 2 ** 63)), families)
        picks = rng.choice(len(corpus), size=group_size, replace=False)
        for i in picks:
            items.append(RetrievalItem(corpus[int(i)].id, group_id, spec))
    return items


def build_mos_set(corpus, n_conditions: int = 10, clips_per_cell: int = 3, seed: int = 0,
                  families=("noise", "reverb"), rating_noise: float = 0.1) -> list:
    """Synthetic MOS table: rating = 5 - 4*magnitude + noise, clipped to [1, 5]."""
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(9,)))
    speakers = sorted({utt.speaker_id for utt in corpus})
    by_speaker = {s: [u for u in corpus if u.speaker_id == s] for s in speakers}
    conditions = [sample_spec(int(rng.integers(0, 2 ** 63)), families)
                  for _ in range(n_conditions)]
    rows = []
    for condition_id, spec in enumerate(conditions):
        for speaker in speakers:
            pool = by_speaker[speaker]
            for _ in range(clips_per_cell):
                utt = pool[int(rng.integers(0, len(pool)))]
                rating = float(np.clip(5.0 - 4.0 * magnitude(spec)
                                       + rng.normal(0.0, rating_noise), 1.0, 5.0))
                rows.append(MosRow(speaker, condition_id, utt.id, spec, rating))
    return rows
