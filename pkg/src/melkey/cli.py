"""Command-line pipeline: synth-data, pretrain, extract, train-probe,
grid-search, evaluate, analyze-aug.

Every command resolves its configuration (file values overridden by
flags), validates inputs up front, writes its artifacts plus a RunRecord
JSON describing exactly how they were produced, and exits 0 on success,
1 on usage errors, 2 on data errors, 3 on numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import datetime
import fcntl
import hashlib
import json
import logging
import os
import sys
from dataclasses import replace

import numpy as np

from . import checkpoint as ckpt
from . import linmap
from .audio import Waveform, read_wav, write_wav
from .config import PipelineConfig, derive_seed, load_config, parse_mixup
from .contrastive import PretrainConfig, pretrain
from .encoder import Encoder, EncoderConfig, MelStats
from .errors import DataError, MelkeyError, NumericalError, UsageError
from .keys import (ALL_KEYS, Key, evaluate, load_labeled_manifest, parse_key,
                   predict_track, write_report_csv)
from .probe import (BB_REFERENCE, GS_REFERENCE, LINEAR_PROBE, LabeledFeature, MlpProbe,
                    ProbeArch, enumerate_probe_archs, enumerate_train_configs,
                    expand_with_shifts, grid_search, split_by_track, train_probe)
from .synth import SynthSpec, synth_clip

log = logging.getLogger("melkey")

ARCH_PRESETS = {"linear": LINEAR_PROBE, "bb": BB_REFERENCE, "gs": GS_REFERENCE}


def _utc_now() -> str:
    return datetime.datetime.now(datetime.timezone.utc).isoformat()


def write_run_record(out_path, command: str, args: dict, config_snapshot: dict,
                     inputs: list, outputs: list, started: str) -> None:
    record = {
        "command": command,
        "args": {k: v for k, v in args.items() if k not in ("func",)},
        "config": config_snapshot,
        "started": started,
        "finished": _utc_now(),
        "inputs": {str(p): ckpt.file_sha256(p) for p in inputs if os.path.exists(p)},
        "outputs": [str(p) for p in outputs],
    }
    with open(out_path, "w", encoding="utf-8") as fh:
        json.dump(record, fh, indent=2, sort_keys=True, default=str)
        fh.write("\n")


class CacheLock:
    """Advisory lock file guarding concurrent writes to a cache directory."""

    def __init__(self, directory):
        os.makedirs(directory, exist_ok=True)
        self._fh = open(os.path.join(directory, ".lock"), "w")

    def __enter__(self):
        fcntl.flock(self._fh, fcntl.LOCK_EX)
        return self

    def __exit__(self, *exc):
        fcntl.flock(self._fh, fcntl.LOCK_UN)
        self._fh.close()


def _resolve_config(args) -> PipelineConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else PipelineConfig()
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "context", None) is not None:
        cfg.context_len = args.context
    enc_overrides = {}
    for name in ("depth", "mask_ratio"):
        val = getattr(args, name, None)
        if val is not None:
            enc_overrides[name] = val
    if enc_overrides:
        cfg.encoder = replace(cfg.encoder, **enc_overrides)
    pre_overrides = {}
    for arg_name, field_name in (("steps", "steps"), ("batch_size", "batch_size"),
                                 ("tau", "temperature"), ("clip_length", "clip_length"),
                                 ("lr", "lr"), ("mask_ratio", "mask_ratio")):
        val = getattr(args, arg_name, None)
        if val is not None:
            pre_overrides[field_name] = val
    if pre_overrides:
        cfg.pretrain = replace(cfg.pretrain, **pre_overrides)
    return cfg


def parse_shift_range(text: str) -> list:
    """Parse "-6..6" or "0,2,-3" into a shift list."""
    text = text.strip()
    try:
        if ".." in text:
            lo, hi = text.split("..")
            lo, hi = int(lo), int(hi)
            if lo > hi:
                raise ValueError
            return list(range(lo, hi + 1))
        return [int(tok) for tok in text.split(",") if tok.strip() != ""]
    except ValueError as err:
        raise UsageError(f"cannot parse shift range {text!r}; use 'lo..hi' or a comma list") from err


def _parse_keys_arg(text: str) -> list:
    if text.strip().lower() == "all":
        return list(ALL_KEYS)
    return [parse_key(tok) for tok in text.split(",")]


# commands ------------------------------------------------------------


def cmd_synth_data(args) -> int:
    started = _utc_now()
    cfg = _resolve_config(args)
    keys = _parse_keys_arg(args.keys)
    os.makedirs(args.out, exist_ok=True)
    seed_root = derive_seed(cfg.seed, "synth-data")
    manifest_rows = []
    wav_paths = []
    for key in keys:
        for i in range(args.clips_per_key):
            clip_seed = derive_seed(seed_root, f"{key.class_index}/{i}") % (2**31)
            spec = SynthSpec(key=key, duration_s=args.duration, seed=clip_seed,
                             noise_db=args.noise_db)
            wave = synth_clip(spec)
            fname = f"{key.name().replace(' ', '_')}_{i:04d}.wav"
            write_wav(os.path.join(args.out, fname), wave)
            manifest_rows.append((fname, key.name()))
            wav_paths.append(fname)
    manifest = os.path.join(args.out, "manifest.csv")
    with open(manifest, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["path", "key"])
        writer.writerows(manifest_rows)
    listing = os.path.join(args.out, "clips.txt")
    with open(listing, "w", encoding="utf-8") as fh:
        fh.write("\n".join(wav_paths) + "\n")
    write_run_record(os.path.join(args.out, "synth-data.run.json"), "synth-data",
                     vars(args), cfg.snapshot(), [], [manifest, listing], started)
    print(f"wrote {len(manifest_rows)} clips across {len(keys)} keys to {args.out}")
    return 0


class _ManifestCorpus:
    """Lazy WAV loader behind the corpus protocol (len + getitem)."""

    def __init__(self, manifest_path):
        base = os.path.dirname(os.path.abspath(manifest_path))
        with open(manifest_path, "r", encoding="utf-8") as fh:
            self.paths = [os.path.join(base, line.strip()) for line in fh
                          if line.strip() and not line.startswith("#")]
        if not self.paths:
            raise DataError(f"pretraining manifest {manifest_path} lists no files")

    def __len__(self):
        return len(self.paths)

    def __getitem__(self, i) -> Waveform:
        return read_wav(self.paths[i])


def save_pretrain_checkpoint(path, result, cfg: PipelineConfig) -> None:
    meta = {
        "kind": "encoder",
        "format_version": ckpt.FORMAT_VERSION,
        "encoder": result.encoder_config.to_dict(),
        "pretrain": result.pretrain_config.to_dict(),
        "mel_mean": result.stats.mean,
        "mel_std": result.stats.std,
        "status": result.status,
        "seed": cfg.seed,
    }
    ckpt.save_blob(path, result.encoder_state, meta)


def load_encoder_checkpoint(path):
    tensors, meta = ckpt.load_blob(path)
    if meta.get("kind") != "encoder":
        raise DataError(f"{path} is not an encoder checkpoint")
    enc_cfg = EncoderConfig(**meta["encoder"])
    encoder = Encoder(enc_cfg, seed=0)
    encoder.load_state_dict(tensors)
    stats = MelStats(meta["mel_mean"], meta["mel_std"])
    return encoder, stats, meta


def cmd_pretrain(args) -> int:
    started = _utc_now()
    cfg = _resolve_config(args)
    corpus = _ManifestCorpus(args.manifest)
    result = pretrain(corpus, cfg.pretrain, cfg.encoder, seed=derive_seed(cfg.seed, "pretrain"))
    save_pretrain_checkpoint(args.out, result, cfg)
    loss_csv = args.loss_csv or (args.out + ".loss.csv")
    with open(loss_csv, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["step", "loss", "positive_pair_cosine"])
        for step, loss, align in result.curve:
            writer.writerow([step, f"{loss:.6f}", f"{align:.6f}"])
    write_run_record(args.out + ".run.json", "pretrain", vars(args), cfg.snapshot(),
                     [args.manifest], [args.out, loss_csv], started)
    print(f"pretrained {len(result.curve)} steps, status={result.status}, checkpoint {args.out}")
    if result.status == "diverged":
        raise NumericalError("pretraining diverged; last good checkpoint was saved")
    return 0


def cmd_extract(args) -> int:
    started = _utc_now()
    cfg = _resolve_config(args)
    encoder, stats, meta = load_encoder_checkpoint(args.ckpt)
    if meta["encoder"]["n_mels"] != cfg.encoder.n_mels:
        raise DataError("checkpoint/frontend mismatch: different mel band count")
    entries = load_labeled_manifest(args.manifest)
    shifts = parse_shift_range(args.shifts)
    ckpt_hash = ckpt.file_sha256(args.ckpt)[:16]
    cache_dir = os.path.join(args.out, f"{ckpt_hash}_ctx{cfg.context_len}")
    written = skipped = 0
    with CacheLock(args.out):
        os.makedirs(cache_dir, exist_ok=True)
        for audio_path, key in entries:
            track_id = os.path.splitext(os.path.basename(audio_path))[0]
            wave = read_wav(audio_path)
            for shift in shifts:
                fname = ckpt.feature_cache_name(track_id, shift)
                fpath = os.path.join(cache_dir, fname)
                if os.path.exists(fpath):
                    log.info("cache hit for %s shift %+d, skipping", track_id, shift)
                    skipped += 1
                    continue
                variants = expand_with_shifts([(track_id, wave, key)], encoder, stats,
                                              cfg.context_len, shifts=(shift,))
                matrix = np.stack([f.embedding for f in variants])
                ckpt.write_feature_file(fpath, matrix, track_id=track_id,
                                        context_len=cfg.context_len,
                                        checkpoint_hash=ckpt_hash, shift=shift,
                                        label_index=variants[0].label)
                written += 1
    write_run_record(os.path.join(cache_dir, "extract.run.json"), "extract", vars(args),
                     cfg.snapshot(), [args.manifest, args.ckpt], [cache_dir], started)
    print(f"extracted {written} feature files ({skipped} cache hits) into {cache_dir}")
    return 0


def load_feature_dir(cache_dir) -> list:
    """Read every feature file in a cache directory into LabeledFeatures."""
    features = []
    for fname in sorted(os.listdir(cache_dir)):
        if not fname.endswith(".feat"):
            continue
        meta, matrix = ckpt.read_feature_file(os.path.join(cache_dir, fname))
        for w_idx in range(matrix.shape[0]):
            features.append(LabeledFeature(matrix[w_idx], meta["label_index"],
                                           meta["track_id"], w_idx, meta["shift"]))
    if not features:
        raise DataError(f"no feature files found in {cache_dir}")
    return features


def _resolve_arch(args) -> ProbeArch:
    if args.arch in ARCH_PRESETS:
        return ARCH_PRESETS[args.arch]
    try:
        layers, dim, p = args.arch.split(":")
        return ProbeArch(hidden_layers=int(layers), hidden_dim=int(dim), dropout_p=float(p))
    except (ValueError, DataError) as err:
        raise UsageError(
            f"unknown arch {args.arch!r}; use linear|bb|gs or layers:dim:dropout"
        ) from err


def cmd_train_probe(args) -> int:
    started = _utc_now()
    cfg = _resolve_config(args)
    arch = _resolve_arch(args)
    features = load_feature_dir(args.cache)
    train_cfg = replace(
        cfg.train,
        seed=derive_seed(cfg.seed, "train-probe"),
        **{k: v for k, v in (("batch_size", args.batch_size), ("lr", args.lr),
                             ("weight_decay", args.weight_decay), ("epochs", args.epochs),
                             ("patience", args.patience)) if v is not None},
    )
    if args.mixup is not None:
        train_cfg = replace(train_cfg, mixup=parse_mixup(args.mixup))
    train_set, val_set = split_by_track(features, val_fraction=args.val_fraction,
                                        seed=derive_seed(cfg.seed, "split"))
    result = train_probe(train_set, val_set, arch, train_cfg)
    meta = {
        "kind": "probe",
        "arch": {"hidden_layers": arch.hidden_layers, "hidden_dim": arch.hidden_dim,
                 "dropout_p": arch.dropout_p, "input_dim": arch.input_dim,
                 "classes": arch.classes},
        "best_epoch": result.best_epoch,
        "val_weighted": result.best_val_weighted,
        "val_correct_pct": result.best_val_correct_pct,
        "seed": train_cfg.seed,
    }
    ckpt.save_blob(args.out, result.probe.state_dict(), meta)
    write_run_record(args.out + ".run.json", "train-probe", vars(args), cfg.snapshot(),
                     [args.cache], [args.out], started)
    print(f"trained {arch.describe()} probe: val weighted {result.best_val_weighted:.2f} "
          f"(correct {result.best_val_correct_pct:.2f}%) at epoch {result.best_epoch}")
    return 0


def load_probe_checkpoint(path) -> MlpProbe:
    tensors, meta = ckpt.load_blob(path)
    if meta.get("kind") != "probe":
        raise DataError(f"{path} is not a probe checkpoint")
    arch_meta = meta["arch"]
    arch = ProbeArch(hidden_layers=arch_meta["hidden_layers"], hidden_dim=arch_meta["hidden_dim"],
                     dropout_p=arch_meta["dropout_p"], input_dim=arch_meta["input_dim"],
                     classes=arch_meta["classes"])
    probe = MlpProbe(arch)
    probe.load_state_dict(tensors)
    return probe


def cmd_grid_search(args) -> int:
    started = _utc_now()
    cfg = _resolve_config(args)
    archs = enumerate_probe_archs()
    configs = enumerate_train_configs(epochs=args.epochs or 200, patience=args.patience or 20)
    if args.dry_run:
        for arch in archs:
            for tc in configs:
                mixup = "none" if tc.mixup is None else f"{tc.mixup[0]}:{tc.mixup[1]}"
                print(f"arch={arch.describe():28s} batch={tc.batch_size:<4d} lr={tc.lr:<7g} "
                      f"wd={tc.weight_decay:<7g} mixup={mixup}")
        print(f"total cells: {len(archs) * len(configs)} "
              f"({len(configs)} optimizer combinations x {len(archs)} architectures)")
        return 0
    features = load_feature_dir(args.cache)
    train_set, val_set = split_by_track(features, val_fraction=args.val_fraction,
                                        seed=derive_seed(cfg.seed, "split"))
    if args.max_cells is not None:
        n_archs = max(1, min(len(archs), args.max_cells))
        archs = archs[:n_archs]
        configs = configs[: max(1, args.max_cells // n_archs)]
    rows = grid_search(train_set, val_set, args.dataset, archs=archs, configs=configs,
                       seed=derive_seed(cfg.seed, "grid"), out_csv=args.out)
    write_run_record(args.out + ".run.json", "grid-search", vars(args), cfg.snapshot(),
                     [args.cache], [args.out], started)
    best = rows[0]
    print(f"grid searched {len(rows)} cells; best {best.arch.describe()} "
          f"-> val weighted {best.val_weighted:.2f} ({args.out})")
    return 0


def cmd_evaluate(args) -> int:
    started = _utc_now()
    probe = load_probe_checkpoint(args.probe)
    features = load_feature_dir(args.cache)
    groups: dict = {}
    for f in features:
        if f.shift != 0:
            continue
        groups.setdefault(f.track_id, []).append(f)
    if not groups:
        raise DataError("no shift-0 features to evaluate")
    predictions, references = [], []
    for track_id in sorted(groups):
        fs = sorted(groups[track_id], key=lambda f: f.window_index)
        emb = np.stack([f.embedding for f in fs])
        predictions.append(predict_track(emb, probe))
        references.append(Key.from_class_index(fs[0].label))
    report = evaluate(predictions, references, fifth_both_directions=args.fifth_both)
    write_report_csv(report, args.out)
    write_run_record(args.out + ".run.json", "evaluate", vars(args), {},
                     [args.cache, args.probe], [args.out], started)
    print(report.table())
    print(f"report written to {args.out}")
    return 0


def cmd_analyze_aug(args) -> int:
    started = _utc_now()
    cfg = _resolve_config(args)
    encoder, stats, _ = load_encoder_checkpoint(args.ckpt)
    entries = load_labeled_manifest(args.manifest)
    if args.max_clips is not None:
        entries = entries[: args.max_clips]
    clips = [read_wav(path) for path, _ in entries]
    reports = linmap.aug_linearity_report(clips, encoder, stats, cfg.context_len,
                                          seed=derive_seed(cfg.seed, "analyze-aug"))
    linmap.write_aug_report_csv(reports, args.out)
    if args.coords:
        clean = linmap.embed_clips(clips, encoder, stats, cfg.context_len)
        name, params, fn = linmap.default_augmentations()[0]
        augmented = linmap.embed_clips((fn(c) for c in clips), encoder, stats, cfg.context_len)
        linmap.write_pca_csv(linmap.pca_coordinates(clean, augmented), args.coords)
    write_run_record(args.out + ".run.json", "analyze-aug", vars(args), cfg.snapshot(),
                     [args.manifest, args.ckpt], [args.out], started)
    for r in reports:
        print(f"{r.augmentation:12s} {r.params:8s} fitted mse {r.heldout_mse:10.6f} "
              f"vs identity {r.identity_heldout_mse:10.6f}")
    print(f"report written to {args.out}")
    return 0


# parser --------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="melkey",
                                     description="masked-contrastive key detection pipeline")
    parser.add_argument("-v", "--verbose", action="store_true", help="INFO-level logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-data", help="generate a synthetic keyed corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--clips-per-key", type=int, default=10)
    p.add_argument("--keys", default="all", help='"all" or a comma list like "C major,A minor"')
    p.add_argument("--duration", type=float, default=8.0)
    p.add_argument("--noise-db", type=float, default=-30.0)
    p.add_argument("--seed", type=int)
    p.add_argument("--config")
    p.set_defaults(func=cmd_synth_data)

    p = sub.add_parser("pretrain", help="masked contrastive pretraining")
    p.add_argument("--manifest", required=True, help="text file, one WAV path per line")
    p.add_argument("--out", required=True, help="encoder checkpoint path")
    p.add_argument("--loss-csv")
    p.add_argument("--steps", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--tau", type=float)
    p.add_argument("--mask-ratio", type=float)
    p.add_argument("--clip-length", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--depth", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--config")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("extract", help="cache frozen features for labeled tracks")
    p.add_argument("--manifest", required=True, help="path,key manifest CSV")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--context", type=int)
    p.add_argument("--shifts", default="0..0", help='"lo..hi" or comma list of semitones')
    p.add_argument("--out", required=True, help="cache root directory")
    p.add_argument("--seed", type=int)
    p.add_argument("--config")
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("train-probe", help="train a probe on cached features")
    p.add_argument("--cache", required=True, help="feature cache directory")
    p.add_argument("--arch", default="bb", help="linear|bb|gs or layers:dim:dropout")
    p.add_argument("--out", required=True, help="probe checkpoint path")
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--weight-decay", type=float)
    p.add_argument("--mixup", help='"none" or "alpha:beta"')
    p.add_argument("--epochs", type=int)
    p.add_argument("--patience", type=int)
    p.add_argument("--val-fraction", type=float, default=0.1)
    p.add_argument("--seed", type=int)
    p.add_argument("--config")
    p.set_defaults(func=cmd_train_probe)

    p = sub.add_parser("grid-search", help="sweep the optimizer and architecture grids")
    p.add_argument("--cache")
    p.add_argument("--dataset", default="synthetic")
    p.add_argument("--out", default="grid_results.csv")
    p.add_argument("--dry-run", action="store_true", help="print the enumeration only")
    p.add_argument("--max-cells", type=int, help="cap the number of trained cells")
    p.add_argument("--epochs", type=int)
    p.add_argument("--patience", type=int)
    p.add_argument("--val-fraction", type=float, default=0.1)
    p.add_argument("--seed", type=int)
    p.add_argument("--config")
    p.set_defaults(func=cmd_grid_search)

    p = sub.add_parser("evaluate", help="score a probe over a feature cache")
    p.add_argument("--cache", required=True)
    p.add_argument("--probe", required=True)
    p.add_argument("--out", required=True, help="report CSV path")
    p.add_argument("--fifth-both", action="store_true",
                   help="count fifths in both directions")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("analyze-aug", help="fit linear augmentation maps in embedding space")
    p.add_argument("--manifest", required=True, help="path,key manifest CSV")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True, help="report CSV path")
    p.add_argument("--coords", help="optional 2-D principal-component dump CSV")
    p.add_argument("--context", type=int)
    p.add_argument("--max-clips", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--config")
    p.set_defaults(func=cmd_analyze_aug)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as err:
        return 1 if err.code not in (0, None) else 0
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as err:
        print(f"usage error: {err}", file=sys.stderr)
        return 1
    except DataError as err:
        print(f"data error: {err}", file=sys.stderr)
        return 2
    except NumericalError as err:
        print(f"numerical failure: {err}", file=sys.stderr)
        return 3
    except MelkeyError as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except FileNotFoundError as err:
        print(f"data error: {err}", file=sys.stderr)
        return 2


def console_entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    console_entry()
