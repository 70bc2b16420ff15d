"""Command-line entry points: ``train``, ``separate``, ``evaluate`` and ``report``.

Exit status is 0 on success, 1 for user errors (bad arguments, missing files,
invalid configuration) and 2 for runtime faults.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import torch

from .audio import read_wav, write_wav
from .bandscheme import SOURCES
from .checkpoint import load_model
from .config import DATA_ROOT_ENV, ConfigError, PipelineConfig
from .datagen import load_trackset
from .energymeter import format_table, read_reports, summarize
from .inference import InferenceConfig, Separator, separate
from .metrics import EvaluationReport
from .trainer import TrainingFault, train

log = logging.getLogger("bsrnn")


class UserError(Exception):
    pass


def _config(args) -> PipelineConfig:
    overrides = list(args.set or [])
    if getattr(args, "data_root", None):
        overrides.append(f"data_root={args.data_root}")
    return PipelineConfig.load(args.config, overrides)


def _data_root(cfg: PipelineConfig) -> Path:
    root = cfg.data_root
    if root is None:
        raise UserError(f"no dataset root: pass --data-root, set data_root in the config, or export {DATA_ROOT_ENV}")
    if not root.is_dir():
        raise UserError(f"dataset root {root} does not exist")
    return root


def _sources(label: str) -> list[str]:
    if label == "all":
        return list(SOURCES)
    if label not in SOURCES:
        raise UserError(f"unknown source {label!r}; choose from {', '.join(SOURCES)} or 'all'")
    return [label]


def _parse_checkpoints(items) -> dict[str, Path]:
    out = {}
    for item in items or []:
        if "=" not in item:
            raise UserError(f"checkpoint {item!r} must look like SOURCE=PATH")
        src, path = item.split("=", 1)
        if src not in SOURCES:
            raise UserError(f"unknown source {src!r} in --checkpoint")
        path = Path(path)
        if not path.is_file():
            raise UserError(f"checkpoint {path} not found")
        out[src] = path
    return out


def _song_name(path: Path) -> str:
    # dataset layouts name every mixture "mixture.wav"; the folder carries the song name
    return path.parent.name if path.stem == "mixture" else path.stem


def _inference_config(cfg: PipelineConfig, args) -> InferenceConfig:
    d = cfg.inference_config().to_dict()
    if args.method:
        d["method"] = args.method
    if args.hop is not None:
        d["ola_hop"] = args.hop
    if args.segment is not None:
        d["ola_segment" if d["method"] == "ola" else "fader_segment"] = args.segment
    return InferenceConfig(**d)


# --- commands -----------------------------------------------------------------


def cmd_train(args) -> int:
    if args.patience is not None:
        args.set = list(args.set or []) + [f"train.patience={args.patience}"]
    cfg = _config(args)
    sources = _sources(args.source)
    root = _data_root(cfg)
    train_tracks = load_trackset(root, "train")
    valid_tracks = load_trackset(root, "valid")
    if not len(train_tracks) or not len(valid_tracks):
        raise UserError(f"{root}: need at least one training and one validation song")
    for source in sources:
        train_cfg = cfg.train_config()
        run_dir = Path(args.run_dir) if args.run_dir and len(sources) == 1 else (
            cfg.output_dir / f"{cfg.label}-{source}-seed{train_cfg.seed}"
        )
        run_dir.mkdir(parents=True, exist_ok=True)
        cfg.dump(run_dir / "pipeline.yaml", source)
        result = train(
            cfg.model_config(source),
            train_cfg,
            cfg.data_config(source),
            train_tracks,
            valid_tracks,
            run_dir,
            hardware=cfg.hardware(),
            inference_cfg=cfg.inference_config(),
            label=cfg.label,
        )
        r = result.report
        print(f"{source}: best uSDR {r.best_metric:.3f} dB at epoch {r.best_epoch}, {r.epochs} epochs, "
              f"{r.energy_kwh:.4f} kWh -> {result.best_checkpoint}")
    return 0


def cmd_separate(args) -> int:
    cfg = _config(args)
    checkpoints = _parse_checkpoints(args.checkpoint)
    if not checkpoints:
        raise UserError("at least one --checkpoint SOURCE=PATH is required")
    inf = _inference_config(cfg, args)
    models = {src: load_model(p) for src, p in checkpoints.items()}
    out_dir = Path(args.out_dir)
    for path in map(Path, args.inputs):
        if not path.is_file():
            raise UserError(f"input {path} not found")
        audio, rate = read_wav(path)
        mix = torch.from_numpy(audio)
        for src, model in models.items():
            if model.cfg.sample_rate != rate:
                raise UserError(f"{path}: sample rate {rate} differs from the {src} model's {model.cfg.sample_rate}")
            est = separate(mix, Separator(model), inf, rate)
            write_wav(out_dir / _song_name(path) / f"{src}.wav", est, rate)
        print(f"{path}: wrote {len(models)} stems to {out_dir / _song_name(path)}")
    return 0


def cmd_evaluate(args) -> int:
    cfg = _config(args)
    tracks = load_trackset(_data_root(cfg), args.split)
    if not len(tracks):
        raise UserError(f"split {args.split!r} has no songs")
    report = EvaluationReport()
    if args.estimates:
        est_dir = Path(args.estimates)
        found = sorted(est_dir.glob("*/*.wav")) if est_dir.is_dir() else []
        if not found:
            raise UserError(f"no estimates found under {est_dir} (expected <song>/<source>.wav)")
        for song in tracks.songs:
            for src in SOURCES:
                f = est_dir / song.name / f"{src}.wav"
                if not f.exists():
                    continue
                est, _ = read_wav(f)
                ref = song.stems[src].read()
                n = min(ref.shape[-1], est.shape[-1])
                report.add(song.name, src, ref[:, :n], est[:, :n], song.sample_rate)
    else:
        checkpoints = _parse_checkpoints(args.checkpoint)
        if not checkpoints:
            raise UserError("pass --estimates DIR or at least one --checkpoint SOURCE=PATH")
        inf = _inference_config(cfg, args)
        for src, p in checkpoints.items():
            sep = Separator(load_model(p))
            for song in tracks.songs:
                est = separate(torch.from_numpy(song.load_mixture()), sep, inf, song.sample_rate)
                report.add(song.name, src, song.stems[src].read(), est, song.sample_rate)
    if not report.scores:
        raise UserError("no estimate matched a song of the split")
    report.write(args.out_dir)
    print(report.to_table())
    return 0


def cmd_report(args) -> int:
    reports = []
    for item in map(Path, args.inputs):
        files = sorted(item.rglob("reports.jsonl")) if item.is_dir() else [item]
        if not files or not all(f.is_file() for f in files):
            raise UserError(f"no run reports found at {item}")
        for f in files:
            reports.extend(read_reports(f))
    if not reports:
        raise UserError("no run reports to merge")
    rows = summarize(reports)
    table = format_table(rows)
    pareto = [r["model"] for r in rows if r["pareto"]]
    print(table)
    print("pareto: " + ", ".join(pareto))
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "table.txt").write_text(table + "\n")
        (out / "summary.json").write_text(json.dumps({"rows": rows, "pareto": pareto}, indent=2))
    return 0


# --- parser -------------------------------------------------------------------


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="YAML pipeline configuration")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="dotted-path override, e.g. train.patience=30")
    p.add_argument("--data-root", help=f"dataset root (default: ${DATA_ROOT_ENV})")


def _inference_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--method", choices=("ola", "fader"))
    p.add_argument("--hop", type=float, help="OLA hop in seconds")
    p.add_argument("--segment", type=float, help="segment length in seconds")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bsrnn", description="Band-split RNN music source separation.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train one model per source")
    _common(p)
    p.add_argument("source", help="vocals, bass, drums, other, or all")
    p.add_argument("--patience", type=int, help="early-stopping patience (shorthand for --set train.patience=N)")
    p.add_argument("--run-dir", help="run directory (single source only)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("separate", help="separate audio files into stems")
    _common(p)
    _inference_args(p)
    p.add_argument("inputs", nargs="+", help="input WAV files")
    p.add_argument("--checkpoint", action="append", metavar="SOURCE=PATH", required=True)
    p.add_argument("--out-dir", default="separated")
    p.set_defaults(func=cmd_separate)

    p = sub.add_parser("evaluate", help="score estimates against a dataset split")
    _common(p)
    _inference_args(p)
    p.add_argument("--split", default="test", choices=("train", "valid", "test"))
    p.add_argument("--estimates", help="directory of <song>/<source>.wav estimates")
    p.add_argument("--checkpoint", action="append", metavar="SOURCE=PATH")
    p.add_argument("--out-dir", default="evaluation")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("report", help="merge run reports into a performance/energy table")
    p.add_argument("inputs", nargs="+", help="reports.jsonl files or directories to search")
    p.add_argument("--out", help="directory for table.txt and summary.json")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 0 if e.code == 0 else 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UserError, ConfigError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except TrainingFault as e:
        print(f"training fault: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # noqa: BLE001 - any other failure is a runtime fault
        log.debug("runtime fault", exc_info=True)
        print(f"runtime fault: {type(e).__name__}: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
