"""Command-line entry point: ``reconamt <command> ...``.

Exit codes: 0 success, 1 a check or run failed, 2 usage or configuration error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import dataset, dsp, formats, metrics, synth
from .model import MODES, ModelConfig, infer, normalize_mode
from .trainer import TrainConfig, TrainingDiverged, load_checkpoint, train

log = logging.getLogger("reconamt")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class ConfigError(ValueError):
    def __init__(self, field_name: str, message: str):
        super().__init__(f"config field '{field_name}': {message}")
        self.field_name = field_name


# --------------------------------------------------------------------------- config

_TRAIN_FIELDS = {f.name for f in fields(TrainConfig)}
_PATH_FIELDS = ("manifest", "out_dir")


def resolve_run_config(path, overrides: dict) -> dict:
    """Merge a JSON config file with command-line overrides and validate it."""
    try:
        raw = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError("config", f"file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError("config", f"invalid JSON ({exc})") from None
    if not isinstance(raw, dict):
        raise ConfigError("config", "must be a JSON object")
    raw.update({k: v for k, v in overrides.items() if v is not None})
    base = Path(path).resolve().parent

    unknown = set(raw) - _TRAIN_FIELDS - set(_PATH_FIELDS)
    if unknown:
        raise ConfigError(sorted(unknown)[0], "unknown field")
    if "manifest" not in raw:
        raise ConfigError("manifest", "required")
    manifest = (base / raw["manifest"]).resolve()
    if not manifest.is_file():
        raise ConfigError("manifest", f"file not found: {manifest}")
    raw["manifest"] = str(manifest)
    raw["out_dir"] = str((base / raw.get("out_dir", "run")).resolve())
    if raw.get("frontend", "mel") not in ("mel", "cqt"):
        raise ConfigError("frontend", f"must be 'mel' or 'cqt', got {raw['frontend']!r}")
    try:
        raw["mode"] = normalize_mode(raw.get("mode", "proposed"))
    except ValueError as exc:
        raise ConfigError("mode", str(exc)) from None
    for name in ("epochs", "batch_size", "decay_steps", "lstm_hidden", "seed", "checkpoint_every"):
        if name in raw and (not isinstance(raw[name], int) or isinstance(raw[name], bool)):
            raise ConfigError(name, f"must be an integer, got {raw[name]!r}")
    for name in ("lr0", "decay"):
        if name in raw and not isinstance(raw[name], (int, float)):
            raise ConfigError(name, f"must be a number, got {raw[name]!r}")
    train_kw = {k: v for k, v in raw.items() if k in _TRAIN_FIELDS}
    try:
        cfg = TrainConfig(**train_kw)
        cfg.model_config()
    except (TypeError, ValueError) as exc:
        msg = str(exc)
        name = next((f for f in _TRAIN_FIELDS if f in msg), "config")
        raise ConfigError(name, msg) from None
    resolved = cfg.to_dict()
    resolved["manifest"] = raw["manifest"]
    resolved["out_dir"] = raw["out_dir"]
    return resolved


# --------------------------------------------------------------------------- commands


def cmd_train(args) -> int:
    resolved = resolve_run_config(args.config, {"frontend": args.frontend, "mode": args.mode, "seed": args.seed})
    out_dir = Path(resolved["out_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "resolved_config.json").write_text(json.dumps(resolved, indent=2, sort_keys=True) + "\n")
    cfg = TrainConfig(**{k: v for k, v in resolved.items() if k in _TRAIN_FIELDS})
    recordings = dataset.load_split(resolved["manifest"], "train")
    if not recordings:
        raise ConfigError("manifest", "no recordings with split 'train'")
    try:
        store, tlog = train(recordings, cfg, out_dir=out_dir)
    except TrainingDiverged as exc:
        print(f"training aborted: {exc}", file=sys.stderr)
        return EXIT_FAIL
    print(f"{len(tlog.steps)} optimiser step(s); checkpoint {out_dir / 'checkpoint.bin'}")
    return EXIT_OK


def _load_model(checkpoint, frontend=None):
    store, cfg = load_checkpoint(checkpoint)
    if frontend is not None and frontend != cfg.frontend:
        raise ConfigError("frontend", f"checkpoint was trained on {cfg.frontend!r}, not {frontend!r}")
    return store, cfg


def _spectrogram(wav_path, frontend):
    clip = dataset.resample(formats.read_wav(wav_path), dsp.SAMPLE_RATE)
    if len(clip) < dsp.HOP:
        raise ValueError(f"{wav_path}: shorter than one frame")
    return dsp.compute_frontend(clip, frontend)


def transcribe_file(store, cfg: ModelConfig, wav_path, out_prefix):
    spec = _spectrogram(wav_path, cfg.frontend)
    out = infer(spec.values, store, cfg.mode)
    post = out.post1 if cfg.mode == "baseline" else out.post2
    roll = metrics.threshold_roll(post)
    notes = metrics.roll_to_notes(roll)
    out_prefix = Path(out_prefix)
    out_prefix.parent.mkdir(parents=True, exist_ok=True)
    dataset.write_note_csv(out_prefix.with_name(out_prefix.name + ".csv"), notes)
    formats.write_matrix(
        out_prefix.with_name(out_prefix.name + ".post"),
        post,
        kind="posteriorgram",
        hop_seconds=spec.hop_seconds,
        bin_frequencies=[float(synth.midi_to_hz(p)) for p in range(dataset.MIN_PITCH, dataset.MAX_PITCH + 1)],
        source="post1" if cfg.mode == "baseline" else "post2",
    )
    return notes, post


def cmd_transcribe(args) -> int:
    store, cfg = _load_model(args.checkpoint, args.frontend)
    notes, _ = transcribe_file(store, cfg, args.wav, args.out_prefix)
    print(f"{len(notes)} note(s) -> {args.out_prefix}.csv")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    rows = []
    if args.manifest:
        if not args.checkpoint:
            raise ConfigError("checkpoint", "required with --manifest")
        store, cfg = _load_model(args.checkpoint, args.frontend)
        for entry in dataset.load_manifest(args.manifest):
            if entry.split != args.split:
                continue
            rec = dataset.load_recording(entry)
            spec = dsp.compute_frontend(rec.audio, cfg.frontend)
            out = infer(spec.values, store, cfg.mode)
            post = out.post1 if cfg.mode == "baseline" else out.post2
            rows.append(metrics.evaluate_recording(rec.notes, post, rec.id))
    else:
        refs, ests = args.ref or [], args.est or []
        if not refs:
            raise ConfigError("ref", "give --ref/--est note CSVs or --manifest with --checkpoint")
        if len(refs) != len(ests):
            raise ConfigError("est", f"{len(refs)} reference file(s) but {len(ests)} estimate file(s)")
        posts = args.est_post or []
        if posts and len(posts) != len(ests):
            raise ConfigError("est_post", "need one posteriorgram per estimate")
        for i, (r, e) in enumerate(zip(refs, ests)):
            scores = formats.read_matrix(posts[i])[0] if posts else None
            rows.append(metrics.evaluate_notes(dataset.load_notes(r), dataset.load_notes(e), Path(e).stem, scores))
    if not rows:
        raise ConfigError("manifest", f"no recordings in split {args.split!r}")
    report = metrics.evaluate_dataset(rows)
    print(report.table())
    if args.out:
        report.to_json(args.out)
    return EXIT_OK


def cmd_dump_features(args) -> int:
    store, cfg = _load_model(args.checkpoint, args.frontend)
    spec = _spectrogram(args.wav, cfg.frontend)
    out = infer(spec.values, store, cfg.mode)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    meta = dict(hop_seconds=spec.hop_seconds, bin_frequencies=[float(f) for f in spec.bin_frequencies])
    files = {"input": spec.values, "unet1_features": out.features}
    if out.x_rec is not None:
        files["reconstruction"] = out.x_rec
    for name, values in files.items():
        formats.write_matrix(out_dir / f"{name}.f32", values, kind=f"{cfg.frontend}-{name}", **meta)
        if args.png:
            write_png(out_dir / f"{name}.png", values)
    print(f"wrote {', '.join(sorted(files))} to {out_dir}")
    return EXIT_OK


def write_png(path, values) -> None:
    from PIL import Image

    img = np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0)[::-1]  # low frequencies at the bottom
    Image.fromarray(np.round(img * 255).astype(np.uint8), mode="L").save(path)


def cmd_selfcheck(args) -> int:
    from .selfcheck import run_checks

    start = time.perf_counter()
    results = run_checks(mutate=tuple(args.mutate or ()), model_seeds=args.model_seeds)
    for r in results:
        print(f"{'PASS' if r.ok else 'FAIL'} {r.name}: {r.detail}")
    failed = [r.name for r in results if not r.ok]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed in {time.perf_counter() - start:.1f}s")
    if failed:
        print("failed: " + ", ".join(failed), file=sys.stderr)
        return EXIT_FAIL
    return EXIT_OK


def cmd_synth(args) -> int:
    if args.notes:
        if not args.out:
            raise ConfigError("out", "required with --notes")
        notes = dataset.load_notes(args.notes)
        seconds = args.seconds or max((n.offset for n in notes), default=0.0) + 0.5
        clip = synth.render_notes(notes, int(round(seconds * dsp.SAMPLE_RATE)))
        formats.write_wav(args.out, clip)
        print(f"rendered {len(notes)} note(s) to {args.out}")
        return EXIT_OK
    if not args.out_dir:
        raise ConfigError("out_dir", "give --out-dir (random corpus) or --notes/--out")
    n_samples = int(round(args.seconds * dsp.SAMPLE_RATE)) if args.seconds else dataset.SEGMENT_SAMPLES
    manifest = synth.write_corpus(args.out_dir, args.count, seed=args.seed or 0, n_samples=n_samples, n_test=args.n_test)
    print(f"wrote {args.count} clip(s); manifest {manifest}")
    return EXIT_OK


# --------------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--frontend", choices=("mel", "cqt"))
    hyphenated = [m.replace("_", "-") for m in MODES]
    common.add_argument("--mode", choices=sorted(set(hyphenated) | set(MODES)), metavar="{" + ",".join(hyphenated) + "}")
    common.add_argument("--seed", type=int)
    common.add_argument("--checkpoint")
    common.add_argument("--config")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="reconamt", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", parents=[common], help="train a model from a manifest")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("transcribe", parents=[common], help="WAV -> note CSV + posteriorgram")
    p.add_argument("wav")
    p.add_argument("out_prefix")
    p.set_defaults(func=cmd_transcribe)

    p = sub.add_parser("evaluate", parents=[common], help="score note CSVs or a checkpoint on a manifest")
    p.add_argument("--ref", nargs="+")
    p.add_argument("--est", nargs="+")
    p.add_argument("--est-post", nargs="+", dest="est_post")
    p.add_argument("--manifest")
    p.add_argument("--split", default="test", choices=("train", "test"))
    p.add_argument("--out", help="write the JSON report here")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("dump-features", parents=[common], help="export U-net 1 feature maps")
    p.add_argument("wav")
    p.add_argument("out", help="output directory")
    p.add_argument("--png", action="store_true", help="also render grayscale PNGs")
    p.set_defaults(func=cmd_dump_features)

    p = sub.add_parser("selfcheck", parents=[common], help="gradient, DSP and matching oracles")
    p.add_argument("--mutate", nargs="+", metavar="OP", help=argparse.SUPPRESS)
    p.add_argument("--model-seeds", type=int, default=3)
    p.set_defaults(func=cmd_selfcheck)

    p = sub.add_parser("synth", parents=[common], help="render additive-sine clips")
    p.add_argument("--out-dir", dest="out_dir")
    p.add_argument("--count", type=int, default=4)
    p.add_argument("--n-test", type=int, default=0, dest="n_test")
    p.add_argument("--seconds", type=float)
    p.add_argument("--notes", help="render this note CSV/MIDI instead of random notes")
    p.add_argument("--out", help="output WAV for --notes")
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    if args.command == "train" and not args.config:
        print("config field 'config': --config is required for train", file=sys.stderr)
        return EXIT_USAGE
    if args.command in ("transcribe", "dump-features") and not args.checkpoint:
        print("config field 'checkpoint': --checkpoint is required", file=sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except ConfigError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_USAGE
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
