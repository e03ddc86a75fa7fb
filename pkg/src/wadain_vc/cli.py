"""Command-line entry point: extract, subset, train, convert, evaluate."""
import argparse
import json
import logging
import os
import sys
from pathlib import Path

from . import acoustic_features as af
from .config import CACHE_ENV, ConfigError, RunConfig, config_keys, load_config
from .data_manifest import (EVAL, ManifestError, build_manifest, cache_features, load_manifest,
                            load_record_features, save_manifest, subset_low_resource)

logger = logging.getLogger("wadain_vc")

# config keys each subcommand reads (prefix match)
READS = {
    "extract": ["out_dir", "data.audio_root", "data.manifest", "data.cache_dir", "data.holdout_fraction",
                "data.workers", "features."],
    "subset": ["out_dir", "data.manifest", "data.n_speakers", "data.m_samples", "data.subset_seed",
               "data.subset_manifest"],
    "train": ["out_dir", "seed", "data.manifest", "data.subset_manifest", "model.", "training."],
    "convert": ["out_dir", "data.manifest", "data.subset_manifest", "convert.", "features.loudness_target"],
    "evaluate": ["out_dir", "data.manifest", "data.subset_manifest", "evaluate.", "features."],
}


def _keys_for(cmd):
    keys = [k for k in config_keys() if any(k == p or (p.endswith(".") and k.startswith(p))
                                            for p in READS[cmd])]
    return ("config keys read:\n  " + "\n  ".join(keys) +
            f"\n\nenvironment:\n  {CACHE_ENV}  feature cache root when data.cache_dir is unset")


def _manifest_path(cfg: RunConfig) -> str:
    return cfg.data.manifest or os.path.join(cfg.out_dir, "manifest.jsonl")


def _training_manifest_path(cfg: RunConfig) -> str:
    return cfg.data.subset_manifest or _manifest_path(cfg)


def cmd_extract(cfg: RunConfig, args) -> int:
    if not cfg.data.audio_root:
        raise ConfigError("data.audio_root is required for extract")
    m = build_manifest(cfg.data.audio_root, cfg.data.holdout_fraction, cfg.features.sample_rate)
    m = cache_features(m, cfg.cache_dir(), cfg.features, cfg.data.workers)
    out = _manifest_path(cfg)
    Path(out).parent.mkdir(parents=True, exist_ok=True)
    save_manifest(m, out)
    logger.info("wrote %s (%d records, %d skipped)", out, len(m), len(m.skipped))
    return 0


def cmd_subset(cfg: RunConfig, args) -> int:
    if cfg.data.n_speakers is None:
        raise ConfigError("data.n_speakers is required for subset")
    m = load_manifest(_manifest_path(cfg))
    sub = subset_low_resource(m, cfg.data.n_speakers, cfg.data.m_samples, cfg.data.subset_seed)
    out = cfg.data.subset_manifest or os.path.join(cfg.out_dir, "subset_manifest.jsonl")
    Path(out).parent.mkdir(parents=True, exist_ok=True)
    save_manifest(sub, out)
    logger.info("wrote %s (%d records, %d speakers)", out, len(sub), sub.n_speakers)
    return 0


def cmd_train(cfg: RunConfig, args) -> int:
    from .training import train

    m = load_manifest(_training_manifest_path(cfg))
    if cfg.model.n_speakers != m.n_speakers:
        logger.info("model.n_speakers set to %d from the manifest", m.n_speakers)
        cfg.model.n_speakers = m.n_speakers
    ckpt = train(m, cfg.training, cfg.model, os.path.join(cfg.out_dir, "checkpoints"), resume=args.resume)
    logger.info("final checkpoint %s", ckpt)
    print(ckpt)
    return 0


def cmd_convert(cfg: RunConfig, args) -> int:
    from .convert import convert_utterance, default_reference
    from .networks import load_models

    c = cfg.convert
    if not c.checkpoint:
        raise ConfigError("convert.checkpoint is required")
    train_m = load_manifest(_training_manifest_path(cfg))
    full_m = load_manifest(_manifest_path(cfg)) if os.path.exists(_manifest_path(cfg)) else train_m
    models, mcfg, _ = load_models(c.checkpoint)
    if mcfg.n_speakers != train_m.n_speakers:
        raise ManifestError("checkpoint speaker count disagrees with the training manifest")

    def lookup(utt_id):
        for mm in (train_m, full_m):
            try:
                return mm.record(utt_id)
            except KeyError:
                pass
        raise ManifestError(f"unknown utterance {utt_id!r}")

    if c.sources:
        sources = [lookup(u) for u in c.sources]
    else:
        sources = [r for r in full_m.split(EVAL) if r.speaker in train_m.speaker_table]
    if not sources:
        raise ManifestError("no source utterances to convert")
    if c.target_speaker is not None and c.target_speaker not in train_m.speaker_table:
        raise ManifestError(f"unknown target speaker {c.target_speaker!r}")
    ref = lookup(c.reference) if c.reference else None
    out_dir = Path(cfg.out_dir) / "converted"
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for src in sources:
        if src.speaker not in train_m.speaker_table:
            raise ManifestError(f"source speaker {src.speaker!r} was not trained")
        targets = [c.target_speaker] if c.target_speaker else [s for s in train_m.speakers if s != src.speaker]
        for tgt in targets:
            r = ref or default_reference(train_m, tgt)
            w = convert_utterance(models, train_m, src, tgt, r, cfg.features)
            path = out_dir / f"{src.utt_id.replace('/', '_')}__to__{tgt}.wav"
            af.write_wav(path, w)
            rows.append({"name": path.stem, "wav": str(path), "source_utt": src.utt_id,
                         "source_speaker": src.speaker, "target_speaker": tgt, "reference": r.utt_id})
    conv_path = Path(cfg.out_dir) / "conversions.jsonl"
    with open(conv_path, "w") as fh:
        for row in rows:
            fh.write(json.dumps(row) + "\n")
            print(row["wav"])
    logger.info("wrote %d conversions, list in %s", len(rows), conv_path)
    return 0


def load_conversions(path):
    with open(path) as fh:
        return [json.loads(ln) for ln in fh if ln.strip()]


def cmd_evaluate(cfg: RunConfig, args) -> int:
    from . import evaluation as ev

    conv_path = cfg.evaluate.conversion_manifest or os.path.join(cfg.out_dir, "conversions.jsonl")
    rows = load_conversions(conv_path)
    if not rows:
        raise ManifestError(f"{conv_path}: empty conversion set")
    m = load_manifest(_training_manifest_path(cfg))
    feats, labels = [], []
    for r in m.records:
        feats.append(load_record_features(r)["mcep"])
        labels.append(r.speaker_index)
    clf = ev.train_speaker_classifier(feats, labels, m.n_speakers, cfg.evaluate.classifier)
    enrollment = {}
    for f, lab in zip(feats, labels):
        enrollment.setdefault(lab, []).append(f)
    items = []
    fc = cfg.features
    for row in rows:
        w = af.read_wav(row["wav"])
        a = af.analyze(w, fc.frame_period, fc.fft_size, fc.f0_floor, fc.f0_ceil, fc.f0_method, row["name"])
        items.append(ev.ConvertedItem(row["name"], af.envelope_to_mcep(a, fc.mcep_order).coeffs,
                                      m.speaker_table[row["target_speaker"]]))
    report = ev.evaluate(clf, items, enrollment, m.speakers, cfg.evaluate.condition)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ev.write_report(report, out / "eval_report.json", out / "eval_report.txt")
    sys.stdout.write(report.table())
    return 0


COMMANDS = {"extract": cmd_extract, "subset": cmd_subset, "train": cmd_train,
            "convert": cmd_convert, "evaluate": cmd_evaluate}

HELP = {
    "extract": "scan <audio_root>/<speaker>/*.wav, analyse and cache features, write the manifest",
    "subset": "draw a low-resource subset (N speakers x M training utterances)",
    "train": "train generator, discriminator and speaker encoder",
    "convert": "convert source utterances to a target speaker and write 16-bit WAVs",
    "evaluate": "speaker identification accuracy and verification EER of converted WAVs",
}


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML config file")
    common.add_argument("--seed", type=int, help="overrides seed and training.seed")
    common.add_argument("--override", "-o", action="append", default=[], metavar="KEY=VALUE",
                        help="dotted config override, repeatable (e.g. training.batch_size=4)")
    common.add_argument("--out-dir", help="overrides out_dir")
    common.add_argument("--verbose", "-v", action="store_true")
    p = argparse.ArgumentParser(prog="wadain-vc", description="Low-resource many-to-many voice conversion")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name, parents=[common], help=HELP[name], description=HELP[name],
                            epilog=_keys_for(name), formatter_class=argparse.RawDescriptionHelpFormatter)
        if name == "train":
            sp.add_argument("--resume", help="checkpoint to resume from")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, args.override, args.seed, args.out_dir)
        return COMMANDS[args.command](cfg, args)
    except (ConfigError, ManifestError, af.AnalysisError, af.FeatureError, FileNotFoundError, ValueError) as exc:
        logger.error("%s: %s", args.command, exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())
