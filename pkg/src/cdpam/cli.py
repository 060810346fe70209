"""Command-line pipeline: data synthesis, the three training stages,
evaluation, and pairwise distance queries.

Subcommands read a JSON config file (``--config``) merged over built-in
desk-scale defaults, with individual flags (``--seed``, ``--out``,
``--epochs``) winning over both.  Every run writes a manifest echoing the
fully resolved configuration, so a run is reproducible from its manifest
alone.

Exit codes: 0 success, 1 internal error, 2 usage or input error.  Setting
``CDPAM_THREADS`` caps the BLAS worker pool (it must be decided before numpy
loads, so the cap is applied at CLI startup).
"""

from __future__ import annotations

import argparse
import copy
import json
import os
import sys

DEFAULT_RUN_CONFIG = {
    "seed": 0,
    "out": "runs/desk",
    "model": "desk",
    "data": {
        "n_utterances": 128,
        "n_eval_utterances": 32,
        "n_speakers": 8,
        "n_jnd_pairs": 160,
        "n_triplets": 96,
        "families": ["noise", "reverb"],
        "jnd_threshold": 0.15,
        "jnd_sigma": 0.03,
        "eval": {
            "n_triplets": 200,
            "triplet_gap": 0.2,
            "mono_levels": 6,
            "mono_contents": 8,
            "common_area_pairs": 150,
            "retrieval_groups": 10,
            "retrieval_group_size": 20,
            "mos_conditions": 10,
            "mos_clips_per_cell": 3,
            "k": 5,
        },
    },
    "train": {
        "batch_size": 16,
        "epochs": {"pretrain": 20, "jnd": 50, "finetune": 30},
        "lr": {"pretrain": 2e-3, "jnd": 2e-3, "finetune": 2e-3},
        "tau": 0.5,
        "margin": 0.1,
        "augment": {"pretrain": False, "jnd": True, "finetune": True},
        "encoder_frozen_in_jnd": True,
        "batches_per_mode": None,
    },
}

CHECKPOINT_NAMES = {"pretrain": "pretrained.ckpt", "jnd": "jnd.ckpt", "finetune": "finetuned.ckpt"}


def _configure_threads() -> None:
    cap = os.environ.get("CDPAM_THREADS")
    if not cap:
        return
    if "numpy" in sys.modules:
        return  # too late to cap the BLAS pool; library users set env themselves
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(var, cap)


def _deep_merge(base: dict, override: dict) -> dict:
    merged = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _deep_merge(merged[key], value)
        else:
            merged[key] = copy.deepcopy(value)
    return merged


def resolve_config(config_path=None, seed=None, out=None, epochs=None, stage=None) -> dict:
    cfg = copy.deepcopy(DEFAULT_RUN_CONFIG)
    if config_path:
        with open(config_path, "r", encoding="utf-8") as fh:
            cfg = _deep_merge(cfg, json.load(fh))
    if seed is not None:
        cfg["seed"] = seed
    if out is not None:
        cfg["out"] = out
    if epochs is not None and stage is not None:
        cfg["train"]["epochs"][stage] = epochs
    return cfg


def _model_config(cfg: dict):
    from .model import ModelConfig, default_config, desk_config

    spec = cfg["model"]
    if spec == "desk":
        return desk_config()
    if spec == "default":
        return default_config()
    return ModelConfig.from_dict(spec)


def _train_config(cfg: dict, stage: str):
    from .trainer import TrainConfig

    t = cfg["train"]
    return TrainConfig(
        stage=stage,
        epochs=t["epochs"][stage],
        batch_size=t["batch_size"],
        lr=t["lr"][stage] if isinstance(t["lr"], dict) else t["lr"],
        tau=t["tau"],
        margin=t["margin"],
        seed=cfg["seed"],
        augment=t["augment"][stage] if isinstance(t["augment"], dict) else t["augment"],
        encoder_frozen_in_jnd=t["encoder_frozen_in_jnd"],
        families=tuple(cfg["data"]["families"]),
        batches_per_mode=t["batches_per_mode"],
    )


def _write_manifest(cfg: dict, out_dir: str, command: str) -> None:
    path = os.path.join(out_dir, f"{command}_manifest.json")
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump({"command": command, "config": cfg}, fh, sort_keys=True, indent=2)
        fh.write("\n")
    os.replace(tmp, path)


# -- corpus persistence ------------------------------------------------------------


def _write_corpus(corpus, root: str, subdir: str) -> None:
    from .audio import write_wav

    corpus_dir = os.path.join(root, subdir)
    os.makedirs(corpus_dir, exist_ok=True)
    rows = []
    for utt in corpus:
        rel = os.path.join(subdir, f"{utt.id}.wav")
        write_wav(utt.clean, os.path.join(root, rel))
        rows.append({"id": utt.id, "speaker_id": utt.speaker_id, "path": rel})
    tmp = os.path.join(root, subdir + ".jsonl.tmp")
    with open(tmp, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True))
            fh.write("\n")
    os.replace(tmp, os.path.join(root, subdir + ".jsonl"))


def _read_corpus(root: str, subdir: str) -> list:
    from .audio import read_wav
    from .datagen import Utterance

    manifest = os.path.join(root, subdir + ".jsonl")
    corpus = []
    with open(manifest, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            row = json.loads(line)
            corpus.append(Utterance(id=row["id"], clean=read_wav(os.path.join(root, row["path"])),
                                    speaker_id=row["speaker_id"]))
    return corpus


def _materialize_records(records, corpus, root: str, subdir: str) -> list:
    """Write each record's perturbed clips as WAVs; returns records with paths."""
    import dataclasses

    from .audio import write_wav
    from .datagen import corpus_by_id
    from .perturb import apply

    by_id = corpus_by_id(corpus)
    os.makedirs(os.path.join(root, subdir), exist_ok=True)
    out = []
    for i, record in enumerate(records):
        clean = by_id[record.ref_id].clean
        paths = {"ref": os.path.join("corpus", f"{record.ref_id}.wav")}
        rel_a = os.path.join(subdir, f"{i:05d}_a.wav")
        write_wav(apply(record.spec_a, clean), os.path.join(root, rel_a))
        paths["a"] = rel_a
        if record.kind == "triplet":
            rel_b = os.path.join(subdir, f"{i:05d}_b.wav")
            write_wav(apply(record.spec_b, clean), os.path.join(root, rel_b))
            paths["b"] = rel_b
        out.append(dataclasses.replace(record, paths=paths))
    return out


# -- subcommands ----------------------------------------------------------------------


def cmd_synth_data(cfg: dict) -> int:
    from . import datagen
    from .datagen import write_jsonl, write_manifest

    out = cfg["out"]
    os.makedirs(out, exist_ok=True)
    model_cfg = _model_config(cfg)
    data = cfg["data"]
    families = tuple(data["families"])
    seed = cfg["seed"]

    corpus = datagen.synth_corpus(data["n_utterances"], data["n_speakers"], seed=seed,
                                  sample_rate=model_cfg.sample_rate,
                                  clip_samples=model_cfg.clip_samples, id_prefix="utt")
    _write_corpus(corpus, out, "corpus")

    jnd = datagen.oracle_jnd(corpus, data["n_jnd_pairs"], threshold=data["jnd_threshold"],
                             noise_sigma=data["jnd_sigma"], seed=seed, families=families)
    jnd = _materialize_records(jnd, corpus, out, "jnd_clips")
    write_manifest(jnd, os.path.join(out, "jnd.jsonl"))

    triplets = datagen.oracle_triplets(corpus, data["n_triplets"], seed=seed, families=families)
    triplets = _materialize_records(triplets, corpus, out, "triplet_clips")
    write_manifest(triplets, os.path.join(out, "triplets.jsonl"))

    ev = data["eval"]
    eval_dir = os.path.join(out, "eval")
    os.makedirs(eval_dir, exist_ok=True)
    eval_corpus = datagen.synth_corpus(data["n_eval_utterances"], data["n_speakers"],
                                       seed=seed + 1, sample_rate=model_cfg.sample_rate,
                                       clip_samples=model_cfg.clip_samples, id_prefix="ev")
    _write_corpus(eval_corpus, eval_dir, "corpus")
    eval_triplets = datagen.oracle_triplets(eval_corpus, ev["n_triplets"], seed=seed + 2,
                                            families=families,
                                            min_magnitude_gap=ev["triplet_gap"])
    eval_triplets = _materialize_records(eval_triplets, eval_corpus, eval_dir, "triplet_clips")
    write_manifest(eval_triplets, os.path.join(eval_dir, "triplets.jsonl"))
    write_jsonl(datagen.build_mono_series(eval_corpus, families, ev["mono_levels"],
                                          ev["mono_contents"], seed=seed + 3),
                os.path.join(eval_dir, "mono.jsonl"))
    write_jsonl(datagen.build_common_area_sets(eval_corpus, ev["common_area_pairs"],
                                               seed=seed + 4, families=families),
                os.path.join(eval_dir, "common_area.jsonl"))
    write_jsonl(datagen.build_retrieval_set(eval_corpus, ev["retrieval_groups"],
                                            ev["retrieval_group_size"], seed=seed + 5,
                                            families=families),
                os.path.join(eval_dir, "retrieval.jsonl"))
    write_jsonl(datagen.build_mos_set(eval_corpus, ev["mos_conditions"],
                                      ev["mos_clips_per_cell"], seed=seed + 6,
                                      families=families),
                os.path.join(eval_dir, "mos.jsonl"))

    _write_manifest(cfg, out, "synth_data")
    print(f"corpus, manifests and eval splits written under {out}")
    return 0


def cmd_pretrain(cfg: dict, progress: bool = True) -> int:
    from .model import save_checkpoint
    from .trainer import pretrain_contrastive, save_loss_log

    out = cfg["out"]
    corpus = _read_corpus(out, "corpus")
    train_cfg = _train_config(cfg, "pretrain")
    callback = _progress_printer("pretrain") if progress else None
    model, rows = pretrain_contrastive(corpus, train_cfg, _model_config(cfg), progress=callback)
    save_checkpoint(model, os.path.join(out, CHECKPOINT_NAMES["pretrain"]))
    save_loss_log(rows, os.path.join(out, "pretrain_log.csv"))
    _write_manifest(cfg, out, "pretrain")
    return 0


def cmd_train_jnd(cfg: dict, progress: bool = True) -> int:
    from .datagen import read_manifest
    from .model import load_checkpoint, save_checkpoint
    from .trainer import save_loss_log, train_jnd

    out = cfg["out"]
    corpus = _read_corpus(out, "corpus")
    records = read_manifest(os.path.join(out, "jnd.jsonl"))
    model = load_checkpoint(os.path.join(out, CHECKPOINT_NAMES["pretrain"]))
    callback = _progress_printer("jnd") if progress else None
    model, rows = train_jnd(model, corpus, records, _train_config(cfg, "jnd"), progress=callback)
    save_checkpoint(model, os.path.join(out, CHECKPOINT_NAMES["jnd"]))
    save_loss_log(rows, os.path.join(out, "jnd_log.csv"))
    _write_manifest(cfg, out, "train_jnd")
    return 0


def cmd_finetune(cfg: dict, progress: bool = True) -> int:
    from .datagen import read_manifest
    from .model import load_checkpoint, save_checkpoint
    from .trainer import finetune_triplet, save_loss_log

    out = cfg["out"]
    corpus = _read_corpus(out, "corpus")
    records = read_manifest(os.path.join(out, "triplets.jsonl"))
    model = load_checkpoint(os.path.join(out, CHECKPOINT_NAMES["jnd"]))
    callback = _progress_printer("finetune") if progress else None
    model, rows = finetune_triplet(model, corpus, records, _train_config(cfg, "finetune"),
                                   progress=callback)
    save_checkpoint(model, os.path.join(out, CHECKPOINT_NAMES["finetune"]))
    save_loss_log(rows, os.path.join(out, "finetune_log.csv"))
    _write_manifest(cfg, out, "finetune")
    return 0


def cmd_distance(ckpt_path: str, path_a: str, path_b: str, as_json: bool = False) -> int:
    from .audio import read_wav
    from .model import load_checkpoint

    model = load_checkpoint(ckpt_path)
    d = model.distance(read_wav(path_a), read_wav(path_b))
    if as_json:
        print(json.dumps({"distance": d}))
    else:
        print(f"{d:.6f}")
    return 0


def load_eval_datasets(eval_dir: str) -> tuple:
    from .datagen import (GroupedPair, MonoSeriesItem, MosRow, RetrievalItem, read_jsonl,
                          read_manifest)
    from .errors import DataError

    if not os.path.isdir(eval_dir):
        raise DataError(f"missing eval split directory {eval_dir}")
    corpus = _read_corpus(eval_dir, "corpus")
    datasets = {
        "triplets": read_manifest(os.path.join(eval_dir, "triplets.jsonl")),
        "mono_items": read_jsonl(os.path.join(eval_dir, "mono.jsonl"), MonoSeriesItem),
        "grouped_pairs": read_jsonl(os.path.join(eval_dir, "common_area.jsonl"), GroupedPair),
        "retrieval_items": read_jsonl(os.path.join(eval_dir, "retrieval.jsonl"), RetrievalItem),
        "mos_rows": read_jsonl(os.path.join(eval_dir, "mos.jsonl"), MosRow),
    }
    return corpus, datasets


def cmd_eval(cfg: dict, ckpt_path: str | None = None, metrics=None, as_json: bool = False) -> int:
    from .evaluate import ALL_METRICS, run_full_eval, write_reports_csv, write_reports_json
    from .model import load_checkpoint

    out = cfg["out"]
    ckpt_path = ckpt_path or os.path.join(out, CHECKPOINT_NAMES["finetune"])
    model = load_checkpoint(ckpt_path)
    eval_corpus, datasets = load_eval_datasets(os.path.join(out, "eval"))
    wanted = tuple(metrics) if metrics else ALL_METRICS
    echo = {"seed": cfg["seed"], "families": list(cfg["data"]["families"]),
            "stage": model.stage}
    reports = run_full_eval(model, eval_corpus, datasets, metrics=wanted,
                            k=cfg["data"]["eval"]["k"], config_echo=echo,
                            histogram_path=os.path.join(out, "common_area_hist.svg")
                            if "common_area" in wanted else None)
    write_reports_json(reports, os.path.join(out, "reports.json"))
    write_reports_csv(reports, os.path.join(out, "reports.csv"))
    _write_manifest(cfg, out, "eval")
    if as_json:
        print(json.dumps({r.metric: r.value for r in reports}, sort_keys=True))
    else:
        for report in reports:
            print(f"{report.metric}: {report.value:.4f} (n={report.n})")
    return 0


def _progress_printer(stage: str):
    def callback(row):
        print(f"[{stage}] epoch {row['epoch']}: loss {row['loss']:.5f}", flush=True)

    return callback


def run_pipeline(cfg: dict, progress: bool = False) -> None:
    """synth-data + all three stages + eval, as one deterministic sequence."""
    cmd_synth_data(cfg)
    cmd_pretrain(cfg, progress=progress)
    cmd_train_jnd(cfg, progress=progress)
    cmd_finetune(cfg, progress=progress)
    cmd_eval(cfg)


# -- argument parsing --------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cdpam",
                                     description="perceptual audio metric pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON config file merged over defaults")
        p.add_argument("--seed", type=int, help="master RNG seed")
        p.add_argument("--out", help="run output directory")
        p.add_argument("--json", action="store_true", help="machine-readable stdout")

    p = sub.add_parser("synth-data", help="synthesize corpus, manifests and eval splits")
    common(p)

    for name, stage in (("pretrain", "pretrain"), ("train-jnd", "jnd"), ("finetune", "finetune")):
        p = sub.add_parser(name, help=f"run the {stage} training stage")
        common(p)
        p.add_argument("--epochs", type=int, help="override epoch count for this stage")
        p.add_argument("--quiet", action="store_true", help="suppress per-epoch progress")

    p = sub.add_parser("distance", help="print the perceptual distance between two WAVs")
    p.add_argument("checkpoint")
    p.add_argument("wav_a")
    p.add_argument("wav_b")
    p.add_argument("--json", action="store_true")

    p = sub.add_parser("eval", help="run the evaluation suite against a checkpoint")
    common(p)
    p.add_argument("--checkpoint", help="checkpoint path (default: <out>/finetuned.ckpt)")
    p.add_argument("--metrics", help="comma-separated subset of metrics to run")

    p = sub.add_parser("pipeline", help="synth-data, all three stages, then eval")
    common(p)
    return parser


def main(argv=None) -> int:
    _configure_threads()
    parser = build_parser()
    args = parser.parse_args(argv)
    from .errors import CdpamError

    try:
        if args.command == "distance":
            return cmd_distance(args.checkpoint, args.wav_a, args.wav_b, as_json=args.json)
        stage_of = {"pretrain": "pretrain", "train-jnd": "jnd", "finetune": "finetune"}
        cfg = resolve_config(args.config, args.seed, args.out,
                             getattr(args, "epochs", None), stage_of.get(args.command))
        if args.command == "synth-data":
            return cmd_synth_data(cfg)
        if args.command == "pretrain":
            return cmd_pretrain(cfg, progress=not args.quiet)
        if args.command == "train-jnd":
            return cmd_train_jnd(cfg, progress=not args.quiet)
        if args.command == "finetune":
            return cmd_finetune(cfg, progress=not args.quiet)
        if args.command == "eval":
            metrics = args.metrics.split(",") if args.metrics else None
            return cmd_eval(cfg, ckpt_path=args.checkpoint, metrics=metrics, as_json=args.json)
        if args.command == "pipeline":
            run_pipeline(cfg, progress=True)
            return 0
        parser.error(f"unknown command {args.command}")
    except (CdpamError, FileNotFoundError, NotADirectoryError, json.JSONDecodeError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except Exception as err:  # internal failure
        print(f"internal error: {type(err).__name__}: {err}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
