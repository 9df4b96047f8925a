"""Command-line entry points wiring the pipeline together.

Verbs: ``make-data``, ``train --stage {1,2}``, ``retrieve [--coarse-only]``,
``evaluate`` and ``plot``. Every command snapshots its effective config next
to its outputs and is bitwise-reproducible from (config, seed). Exit codes:
0 success, 1 runtime failure, 2 validation, 3 configuration, 4 archive/I-O.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np
import torch

from . import data as data_mod
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig
from .diffusion import NoiseSchedule, build_stage2, refine, train_stage2
from .errors import (
    ArchiveError,
    ConfigurationError,
    MissingEventError,
    Sat2RadError,
    TrainingDivergedError,
    ValidationError,
)
from .metrics import VIL_THRESHOLDS, MetricReport, report, save_report
from .wtformer import build_wtformer, train_stage1

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_VALIDATION = 2
EXIT_CONFIGURATION = 3
EXIT_IO = 4


def _load_config(args) -> RunConfig:
    cfg = RunConfig.from_yaml(args.config) if args.config else RunConfig()
    cfg.apply_overrides(getattr(args, "set", None))
    if getattr(args, "seed", None) is not None:
        cfg.run.seed = args.seed
    if getattr(args, "steps", None) is not None:
        cfg.run.steps = args.steps
    return cfg


def _load_records(cfg: RunConfig, archive: str | None):
    path = archive or cfg.data.archive_path
    if cfg.data.source == "archive" or path:
        if not path:
            raise ConfigurationError(
                "data.source is 'archive' but no archive path was given "
                "(set data.archive_path or pass --data)"
            )
        cfg.data.source = "archive"
        cfg.data.archive_path = str(path)
        return data_mod.load_archive(path)
    return data_mod.generate_synthetic(cfg.data.storm_spec(), cfg.data.n_events)


def _train_split(cfg: RunConfig, records):
    train, _, _ = data_mod.split(records, cfg.data.split_fractions, cfg.data.split_seed)
    if not train:
        raise ValidationError("train split is empty; adjust data.split_fractions")
    return [data_mod.normalize(r) for r in train]


def _write_log(path: Path, rows) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for row in rows:
            fh.write(json.dumps(row.to_dict(), sort_keys=True) + "\n")


def cmd_make_data(args) -> int:
    cfg = _load_config(args)
    n = args.n if args.n is not None else cfg.data.n_events
    if n < 1:
        raise ValidationError(f"need n >= 1 events, got {n}")
    cfg.data.n_events = n
    records = data_mod.generate_synthetic(cfg.data.storm_spec(), n)
    out = Path(args.out)
    data_mod.write_fixture(records, out)
    cfg.snapshot(out.parent)
    counts = data_mod.threshold_pixel_counts(records, VIL_THRESHOLDS)
    print(f"wrote {len(records)} events to {out}")
    for thr, count in counts.items():
        print(f"pixels >= {thr:g}: {count}")
    return EXIT_OK


def _stage1_from_checkpoint(path):
    state, cfg_dict, step = load_checkpoint(path, "stage1")
    cfg = RunConfig.from_dict(cfg_dict)
    model = build_wtformer(cfg)
    model.load_state_dict(state)
    model.eval()
    return model, cfg, step


def _stage2_from_checkpoint(path):
    state, cfg_dict, step = load_checkpoint(path, "stage2")
    cfg = RunConfig.from_dict(cfg_dict)
    model = build_stage2(cfg)
    model.load_state_dict(state)
    model.eval()
    return model, cfg, step


def cmd_train(args) -> int:
    cfg = _load_config(args)
    out_dir = Path(args.out) if args.out else Path(cfg.run.checkpoint_dir)
    records = _train_split(cfg, _load_records(cfg, args.data))
    cfg.snapshot(out_dir)
    started = time.perf_counter()

    if args.stage == 1:
        model, history, _ = train_stage1(
            records, cfg, diag_path=out_dir / "stage1_diagnostic.h5"
        )
        save_checkpoint(out_dir / "stage1.h5", "stage1", model, cfg.to_dict(), len(history))
        _write_log(out_dir / "stage1_log.jsonl", history)
    else:
        stage1_path = args.stage1 or (out_dir / "stage1.h5")
        if not Path(stage1_path).exists():
            raise ConfigurationError(
                f"stage 2 needs a stage-1 checkpoint; none at {stage1_path} "
                "(train stage 1 first or pass --stage1)"
            )
        stage1_model, _, _ = _stage1_from_checkpoint(stage1_path)
        if not cfg.diffusion.use_dedr:
            raise ConfigurationError(
                "diffusion.use_dedr is false; nothing to train for stage 2"
            )
        model, history = train_stage2(
            records, stage1_model, cfg, diag_path=out_dir / "stage2_diagnostic.h5"
        )
        save_checkpoint(out_dir / "stage2.h5", "stage2", model, cfg.to_dict(), len(history))
        _write_log(out_dir / "stage2_log.jsonl", history)

    elapsed = time.perf_counter() - started
    first, last = history[0].loss, history[-1].loss
    print(
        f"stage {args.stage}: {len(history)} steps on {len(records)} records, "
        f"loss {first:.6f} -> {last:.6f} ({elapsed:.1f}s)"
    )
    return EXIT_OK


def _event_generator_seed(seed: int, index: int) -> int:
    return (seed * 1_000_003 + index) % (2**63 - 1)


def cmd_retrieve(args) -> int:
    cfg = _load_config(args)
    stage1_model, ckpt_cfg, _ = _stage1_from_checkpoint(args.stage1)
    # The checkpoint snapshot defines the model and sampler shape; the
    # command-line config only overrides run-level knobs.
    cfg.model = ckpt_cfg.model
    stage2_model = None
    if not args.coarse_only:
        if not args.stage2:
            raise ConfigurationError(
                "refined retrieval needs --stage2 (or pass --coarse-only)"
            )
        stage2_model, stage2_cfg, _ = _stage2_from_checkpoint(args.stage2)
        cfg.diffusion = stage2_cfg.diffusion
    schedule = NoiseSchedule.from_config(cfg.diffusion) if stage2_model else None

    records = data_mod.load_archive(args.input, args.events)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg.snapshot(out_dir)
    steps = args.steps if args.steps is not None else cfg.diffusion.sampler_steps

    failures = 0
    for i, rec in enumerate(records):
        try:
            norm = data_mod.normalize(rec)
            x, _ = data_mod.to_tensors([norm], use_vis=cfg.model.use_vis)
            with torch.no_grad():
                mu = stage1_model(x)
                if args.coarse_only:
                    result = mu
                else:
                    gen = torch.Generator().manual_seed(
                        _event_generator_seed(cfg.run.seed, i)
                    )
                    result = refine(
                        mu,
                        x,
                        stage2_model,
                        schedule,
                        generator=gen,
                        steps=steps,
                        residual=cfg.diffusion.residual,
                    )
            data_mod.save_tensor(
                out_dir / f"{rec.event_id}.st", result[0].numpy().astype(np.float32)
            )
        except Sat2RadError as e:
            failures += 1
            print(f"error: event {rec.event_id}: {e}", file=sys.stderr)
    kind = "coarse" if args.coarse_only else "refined"
    print(f"wrote {len(records) - failures}/{len(records)} {kind} predictions to {out_dir}")
    return EXIT_IO if failures else EXIT_OK


def cmd_evaluate(args) -> int:
    targets = data_mod.load_archive(args.target)
    pred_dir = Path(args.pred)
    preds_raw, targets_raw = [], []
    for rec in targets:
        pred_path = pred_dir / f"{rec.event_id}.st"
        if not pred_path.exists():
            raise MissingEventError(
                f"no prediction for event {rec.event_id!r} in {pred_dir}"
            )
        pred = np.squeeze(data_mod.load_tensor(pred_path))
        preds_raw.append(pred * data_mod.RAW_MAX)  # predictions are stored in [0, 1]
        targets_raw.append(rec.target)
    rep = report(preds_raw, targets_raw, VIL_THRESHOLDS)
    out_dir = Path(args.out)
    paths = save_report(rep, out_dir)
    if args.plots:
        from .plotting import save_score_bars

        save_score_bars(out_dir / "scores.png", rep)
    print(rep.to_text(), end="")
    print(f"report written to {paths['json']}")
    return EXIT_OK


def cmd_plot(args) -> int:
    from .plotting import save_event_panels, save_score_bars

    out_dir = Path(args.out)
    wrote = []
    if args.report:
        rep = MetricReport.from_dict(json.loads(Path(args.report).read_text()))
        wrote.append(save_score_bars(out_dir / "scores.png", rep))
    if args.input:
        records = data_mod.load_archive(args.input, args.events)
        for rec in records:
            coarse = refined = None
            if args.coarse_dir:
                p = Path(args.coarse_dir) / f"{rec.event_id}.st"
                if not p.exists():
                    raise MissingEventError(f"no coarse prediction for {rec.event_id!r}")
                coarse = data_mod.load_tensor(p) * data_mod.RAW_MAX
            if args.pred_dir:
                p = Path(args.pred_dir) / f"{rec.event_id}.st"
                if not p.exists():
                    raise MissingEventError(f"no prediction for {rec.event_id!r}")
                refined = data_mod.load_tensor(p) * data_mod.RAW_MAX
            wrote.append(
                save_event_panels(
                    out_dir / f"{rec.event_id}.png",
                    rec.stack,
                    rec.target,
                    VIL_THRESHOLDS,
                    coarse_raw=coarse,
                    refined_raw=refined,
                    title=rec.event_id,
                )
            )
    if not wrote:
        raise ValidationError("nothing to plot: pass --report and/or --input")
    for p in wrote:
        print(f"wrote {p}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sat2rad",
        description="Two-stage satellite-to-radar retrieval pipeline",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--config", help="YAML run configuration")
        p.add_argument(
            "--set",
            action="append",
            metavar="SECTION.KEY=VALUE",
            help="override a config value (repeatable)",
        )
        p.add_argument("--seed", type=int, help="override run.seed")

    p = sub.add_parser("make-data", help="write a synthetic event archive")
    add_common(p)
    p.add_argument("--out", required=True, help="archive file to write")
    p.add_argument("--n", type=int, help="number of events (default from config)")
    p.set_defaults(func=cmd_make_data)

    p = sub.add_parser("train", help="train one pipeline stage")
    add_common(p)
    p.add_argument("--stage", type=int, choices=(1, 2), required=True)
    p.add_argument("--data", help="event archive (default: synthetic from config)")
    p.add_argument("--out", help="output directory (default: run.checkpoint_dir)")
    p.add_argument("--steps", type=int, help="override run.steps")
    p.add_argument("--stage1", help="stage-1 checkpoint (stage 2 only)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("retrieve", help="run retrieval over an archive")
    add_common(p)
    p.add_argument("--stage1", required=True, help="stage-1 checkpoint")
    p.add_argument("--stage2", help="stage-2 checkpoint")
    p.add_argument("--input", required=True, help="input event archive")
    p.add_argument("--out", required=True, help="directory for prediction tensors")
    p.add_argument("--events", nargs="*", default=None, help="subset of event ids")
    p.add_argument("--coarse-only", action="store_true", help="emit the coarse estimate")
    p.add_argument("--steps", type=int, help="override diffusion.sampler_steps")
    p.set_defaults(func=cmd_retrieve)

    p = sub.add_parser("evaluate", help="score predictions against an archive")
    p.add_argument("--pred", required=True, help="directory of prediction tensors")
    p.add_argument("--target", required=True, help="target event archive")
    p.add_argument("--out", required=True, help="directory for report files")
    p.add_argument(
        "--no-plots", dest="plots", action="store_false", help="skip figure emission"
    )
    p.set_defaults(func=cmd_evaluate, plots=True)

    p = sub.add_parser("plot", help="render figures from reports or events")
    p.add_argument("--report", help="report.json to render score bars from")
    p.add_argument("--input", help="event archive for side-by-side panels")
    p.add_argument("--events", nargs="*", default=None, help="subset of event ids")
    p.add_argument("--pred-dir", help="refined prediction tensors")
    p.add_argument("--coarse-dir", help="coarse prediction tensors")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_plot)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ValidationError as e:
        print(f"validation error: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    except ConfigurationError as e:
        print(f"configuration error: {e}", file=sys.stderr)
        return EXIT_CONFIGURATION
    except (ArchiveError, OSError) as e:
        print(f"archive error: {e}", file=sys.stderr)
        return EXIT_IO
    except TrainingDivergedError as e:
        print(f"training diverged: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
