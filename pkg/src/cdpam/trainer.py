"""The three training stages and their orchestration.

Stage a (pretrain): contrastive learning on the encoder, alternating
acoustic-mode and content-mode batches; each embedding half has its own
projection head and the NT-Xent loss is taken over the projected half that
matches the batch mode.

Stage b (jnd): the loss network and judgment classifier are fit with binary
cross-entropy against oracle same/different labels.  The encoder is frozen
by default, so each epoch encodes the (augmented) clips once in inference
mode and the cheap loss-network optimization runs over cached embeddings.

Stage c (finetune): margin ranking on triplet comparisons, loss network
only, encoder still frozen.

Stages must run in order; checkpoints carry a stage tag that is checked on
entry.  All randomness (batch composition, augmentation, perturbation draws)
derives from the config seed, so identical configs give byte-identical
checkpoints.
"""

from __future__ import annotations

import csv
import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import losses, tensor as T
from .audio import Waveform, apply_gain_db
from .datagen import corpus_by_id, make_contrastive_batch
from .errors import ContractError, NumericError, TrainingError
from .model import ModelConfig, PerceptualModel
from .perturb import apply
from .tensor import AdamState, Tensor, adam_step

EPOCH_DEFAULTS = {"pretrain": 250, "jnd": 250, "finetune": 100}
SHIFT_SECONDS = 0.25
GAIN_RANGE_DB = (-20.0, 0.0)


@dataclass
class TrainConfig:
    """Hyperparameters for one training stage.

    Defaults follow the reference recipe (batch 16, Adam at 1e-4, 250/250/100
    epochs, temperature 0.5, margin 0.1); desk-scale runs override epochs,
    learning rate and dataset sizes.
    """

    stage: str = "pretrain"
    epochs: int | None = None
    batch_size: int = 16
    lr: float = 1e-4
    tau: float = 0.5
    margin: float = 0.1
    seed: int = 0
    augment: bool = True
    encoder_frozen_in_jnd: bool = True
    families: tuple = ("noise", "reverb")
    batches_per_mode: int | None = None

    def __post_init__(self):
        if self.stage not in EPOCH_DEFAULTS:
            raise ContractError(f"unknown stage {self.stage!r}")
        if self.epochs is None:
            self.epochs = EPOCH_DEFAULTS[self.stage]
        if self.epochs < 1:
            raise ContractError("epochs must be >= 1")


# -- online augmentation ----------------------------------------------------------


def _augment(w: Waveform, rng: np.random.Generator) -> Waveform:
    """Random 0.25 s silence shift (head or tail) plus a gain in [-20, 0] dB."""
    silence = int(round(SHIFT_SECONDS * w.sample_rate))
    n = len(w)
    samples = np.zeros(n)
    if rng.random() < 0.5:
        keep = max(0, n - silence)
        samples[silence:] = w.samples[:keep]  # content shifted right, head silent
    else:
        samples[:max(0, n - silence)] = w.samples[silence:]  # shifted left, tail silent
    gain_db = rng.uniform(*GAIN_RANGE_DB)
    return apply_gain_db(Waveform(samples, w.sample_rate), gain_db)


def augment_online(w: Waveform, seed: int) -> Waveform:
    """Seeded standalone form of the per-clip training augmentation."""
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(10,)))
    return _augment(w, rng)


def _maybe_augment(waves, rng, enabled: bool):
    return [_augment(w, rng) for w in waves] if enabled else list(waves)


# -- shared helpers ----------------------------------------------------------------


def _collect_grads(model: PerceptualModel) -> dict:
    return {name: t.grad for name, t in model.params.items()
            if t.requires_grad and t.grad is not None}


def _zero_grads(model: PerceptualModel) -> None:
    for t in model.params.values():
        t.grad = None


def _step_group(model: PerceptualModel, grads: dict, prefix: str, state: AdamState) -> AdamState:
    group_params = {n: t.data for n, t in model.params.items()
                    if n.startswith(prefix) and t.requires_grad}
    group_grads = {n: g for n, g in grads.items() if n.startswith(prefix)}
    if not group_params:
        return state
    new_arrays, state = adam_step(group_params, group_grads, state)
    model.apply_updates(new_arrays)
    return state


def save_loss_log(rows, path) -> None:
    tmp = str(path) + ".tmp"
    with open(tmp, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "stage", "loss", "wall_ms"])
        for row in rows:
            writer.writerow([row["epoch"], row["stage"], f"{row['loss']:.10g}",
                             f"{row['wall_ms']:.1f}"])
    os.replace(tmp, path)


def _log_row(epoch: int, stage: str, loss: float, t0: float) -> dict:
    return {"epoch": epoch, "stage": stage, "loss": loss,
            "wall_ms": (time.perf_counter() - t0) * 1000.0}


# -- stage a: contrastive pretraining ------------------------------------------------


def pretrain_contrastive(corpus, config: TrainConfig, model_config: ModelConfig,
                         progress=None) -> tuple:
    """Train the encoder (plus both projection heads) with NT-Xent batches.

    Returns (model tagged "pretrained", per-epoch loss rows).  Acoustic and
    content batches alternate; each mode covers the corpus batches_per_mode
    times per epoch.  NaN losses abort with the epoch index.
    """
    if config.stage != "pretrain":
        raise ContractError(f"config stage is {config.stage!r}, expected 'pretrain'")
    model = PerceptualModel.initialize(model_config, seed=config.seed)
    model.set_trainable(("enc.", "proj."))
    per_mode = config.batches_per_mode or max(1, len(corpus) // (4 * config.batch_size))
    states = {"enc.": AdamState(lr=config.lr),
              "proj.acoustic.": AdamState(lr=config.lr),
              "proj.content.": AdamState(lr=config.lr)}
    # the pretraining set is fixed up front; only augmentation varies per epoch
    seeder = np.random.default_rng(np.random.SeedSequence(config.seed, spawn_key=(20,)))
    batches = [(mode, make_contrastive_batch(corpus, mode, config.batch_size,
                                             seed=int(seeder.integers(0, 2 ** 63)),
                                             families=config.families))
               for mode in ["acoustic", "content"] * per_mode]
    rows = []
    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        epoch_rng = np.random.default_rng(
            np.random.SeedSequence(config.seed, spawn_key=(21, epoch)))
        epoch_losses = []
        try:
            for mode, pairs in batches:
                waves = _maybe_augment([p.wave_i for p in pairs], epoch_rng, config.augment) \
                    + _maybe_augment([p.wave_j for p in pairs], epoch_rng, config.augment)
                x = model.waves_to_tensor(waves)
                acoustic, content = model.encode(x, train=True)
                half = acoustic if mode == "acoustic" else content
                z = model.project(half, mode)
                n = len(pairs)
                loss = losses.nt_xent(T.narrow(z, 0, 0, n), T.narrow(z, 0, n, n), tau=config.tau)
                loss.backward()
                grads = _collect_grads(model)
                states["enc."] = _step_group(model, grads, "enc.", states["enc."])
                head = f"proj.{mode}."
                states[head] = _step_group(model, grads, head, states[head])
                _zero_grads(model)
                epoch_losses.append(loss.item())
        except NumericError as err:
            raise TrainingError(f"pretraining diverged at epoch {epoch}: {err}",
                                epoch=epoch) from err
        rows.append(_log_row(epoch, "pretrain", float(np.mean(epoch_losses)), t0))
        if progress:
            progress(rows[-1])
    model.stage = "pretrained"
    model.set_trainable(())
    return model, rows


# -- stage b: JND training ------------------------------------------------------------


def _jnd_items(corpus, records):
    by_id = corpus_by_id(corpus) if not isinstance(corpus, dict) else corpus
    items = []
    for record in records:
        if record.kind != "jnd_pair":
            raise ContractError("train_jnd expects jnd_pair records")
        clean = by_id[record.ref_id].clean
        items.append((clean, apply(record.spec_a, clean),
                      1.0 if record.label == "different" else 0.0))
    return items


def train_jnd(model: PerceptualModel, corpus, records, config: TrainConfig,
              progress=None) -> tuple:
    """Fit the loss network + classifier on oracle same/different pairs with BCE."""
    if config.stage != "jnd":
        raise ContractError(f"config stage is {config.stage!r}, expected 'jnd'")
    if model.stage != "pretrained":
        raise ContractError(f"train_jnd needs a 'pretrained' checkpoint, got {model.stage!r}")
    model = model.clone()
    frozen = config.encoder_frozen_in_jnd
    model.set_trainable(("lossnet.", "clf.") if frozen else ("enc.", "lossnet.", "clf."))
    items = _jnd_items(corpus, records)
    labels = np.array([label for _, _, label in items])
    state = AdamState(lr=config.lr)
    rows = []
    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        rng = np.random.default_rng(np.random.SeedSequence(config.seed, spawn_key=(22, epoch)))
        order = rng.permutation(len(items))
        epoch_losses = []
        try:
            refs = _maybe_augment([items[i][0] for i in order], rng, config.augment)
            pers = _maybe_augment([items[i][1] for i in order], rng, config.augment)
            if frozen:
                emb_ref = model.embed_waves(refs)
                emb_per = model.embed_waves(pers)
            for start in range(0, len(items), config.batch_size):
                stop = min(len(items), start + config.batch_size)
                if frozen:
                    e_ref = Tensor(emb_ref[start:stop])
                    e_per = Tensor(emb_per[start:stop])
                else:
                    a_ref, _ = model.encode(model.waves_to_tensor(refs[start:stop]), train=True)
                    a_per, _ = model.encode(model.waves_to_tensor(pers[start:stop]), train=True)
                    e_ref, e_per = a_ref, a_per
                d = model.distance_from_embeddings(e_ref, e_per)
                p = model.judge_from_distance(T.reshape(d, (stop - start, 1)))
                loss = losses.bce(p, labels[order[start:stop]].reshape(-1, 1))
                loss.backward()
                grads = _collect_grads(model)
                state = _step_group(model, grads, "", state)
                _zero_grads(model)
                epoch_losses.append(loss.item())
        except NumericError as err:
            raise TrainingError(f"jnd training diverged at epoch {epoch}: {err}",
                                epoch=epoch) from err
        rows.append(_log_row(epoch, "jnd", float(np.mean(epoch_losses)), t0))
        if progress:
            progress(rows[-1])
    model.stage = "jnd"
    model.set_trainable(())
    return model, rows


# -- stage c: triplet fine-tuning -------------------------------------------------------


def finetune_triplet(model: PerceptualModel, corpus, records, config: TrainConfig,
                     progress=None) -> tuple:
    """Fine-tune the loss network with margin ranking on triplet comparisons."""
    if config.stage != "finetune":
        raise ContractError(f"config stage is {config.stage!r}, expected 'finetune'")
    if model.stage != "jnd":
        raise ContractError(f"finetune_triplet needs a 'jnd' checkpoint, got {model.stage!r}")
    model = model.clone()
    model.set_trainable(("lossnet.",))
    by_id = corpus_by_id(corpus) if not isinstance(corpus, dict) else corpus
    items = []
    for record in records:
        if record.kind != "triplet":
            raise ContractError("finetune_triplet expects triplet records")
        clean = by_id[record.ref_id].clean
        items.append((clean, apply(record.spec_a, clean), apply(record.spec_b, clean),
                      1.0 if record.label == "A" else 0.0))
    prefer_a = np.array([item[3] for item in items])
    state = AdamState(lr=config.lr)
    rows = []
    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        rng = np.random.default_rng(np.random.SeedSequence(config.seed, spawn_key=(23, epoch)))
        order = rng.permutation(len(items))
        epoch_losses = []
        try:
            refs = _maybe_augment([items[i][0] for i in order], rng, config.augment)
            a_clips = _maybe_augment([items[i][1] for i in order], rng, config.augment)
            b_clips = _maybe_augment([items[i][2] for i in order], rng, config.augment)
            emb_ref = model.embed_waves(refs)
            emb_a = model.embed_waves(a_clips)
            emb_b = model.embed_waves(b_clips)
            for start in range(0, len(items), config.batch_size):
                stop = min(len(items), start + config.batch_size)
                d_a = model.distance_from_embeddings(Tensor(emb_ref[start:stop]),
                                                     Tensor(emb_a[start:stop]))
                d_b = model.distance_from_embeddings(Tensor(emb_ref[start:stop]),
                                                     Tensor(emb_b[start:stop]))
                mask = Tensor(prefer_a[order[start:stop]])
                one = Tensor(np.ones(stop - start))
                d_pref = T.add(T.mul(d_a, mask), T.mul(d_b, T.sub(one, mask)))
                d_other = T.add(T.mul(d_b, mask), T.mul(d_a, T.sub(one, mask)))
                loss = T.mean_(losses.margin_rank(d_pref, d_other, margin=config.margin))
                loss.backward()
                grads = _collect_grads(model)
                state = _step_group(model, grads, "", state)
                _zero_grads(model)
                epoch_losses.append(loss.item())
        except NumericError as err:
            raise TrainingError(f"fine-tuning diverged at epoch {epoch}: {err}",
                                epoch=epoch) from err
        rows.append(_log_row(epoch, "finetune", float(np.mean(epoch_losses)), t0))
        if progress:
            progress(rows[-1])
    model.stage = "finetuned"
    model.set_trainable(())
    return model, rows
