import logging
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional

import numpy as np
import orjson
import typer
from rich.console import Console
from rich.logging import RichHandler
from rich.table import Table
from typing_extensions import Annotated

from config import ExperimentConfig, Mode, load_config, parse_overrides
from errors import ConfigError, ExperimentError, IrisSwapError, UnknownSubcommand
from gaze import accuracy, precision
from harness import (
    DiskRecording,
    FrameSink,
    check_report,
    compare_recordings,
    evaluate_split,
    extract_victim_texture,
    load_report,
    load_schedule,
    run_attack,
    run_experiment,
    split_subjects,
    track_gaze,
)
from imaging import image_to_mask, load_pgm, mask_to_image, save_pgm
from iriscode import IrisTemplate, decide, encode_frame, load_template, save_template
from iriscode import authenticate as authenticate_templates
from liveness import load_windows, save_model
from rubbersheet import PolarTexture, load_texture, save_texture, swap_iris, unwrap
from segmentation import BinaryMask, dice_score, geometry_to_mask, segment
from synth import write_dataset

logger = logging.getLogger(__name__)

app = typer.Typer(
    name="irisswap",
    help="Iris swapping attack on eye-tracking pipelines: synthesis, attack runs and liveness evaluation.",
    add_completion=False,
    pretty_exceptions_enable=False,
)
console = Console()

ModeOption = Annotated[Optional[str], typer.Option("--mode", help="offline or online")]

# usage errors come from the click build typer runs on, not necessarily the standalone package
UsageError = next(c for c in typer.BadParameter.__mro__ if c.__name__ == "UsageError")


def _emit(payload: Dict[str, Any]) -> None:
    typer.echo(orjson.dumps(payload, option=orjson.OPT_SORT_KEYS).decode())


def _config(ctx: typer.Context, **flags) -> ExperimentConfig:
    """Resolve the config from the global options plus the flags given to one command."""
    options = dict(ctx.obj or {})
    overrides = parse_overrides(options.get("set") or [])
    merged = {**options.get("flags", {}), **{k: v for k, v in flags.items() if v is not None}}
    if "mode" in merged:
        mode = merged.pop("mode")
        if mode not in ("offline", "online"):
            raise ConfigError(f"unknown mode '{mode}'", {"mode": mode})
        overrides["modes"] = [mode]
    overrides.update(merged)
    return load_config(options.get("config"), overrides)


def _single_mode(cfg: ExperimentConfig) -> Mode:
    return cfg.modes[0]


def _template(path: Path, cfg: ExperimentConfig) -> IrisTemplate:
    if path.suffix.lower() == ".pgm":
        img = load_pgm(path)
        return encode_frame(img, segment(img, cfg.segmentation), cfg.rubbersheet, cfg.gabor)
    return load_template(path)


def _victim_texture(path: Path, cfg: ExperimentConfig, frame: int = 0) -> PolarTexture:
    if path.is_dir():
        return extract_victim_texture(DiskRecording(path), cfg, frame)
    if path.suffix.lower() == ".pgm":
        img = load_pgm(path)
        return unwrap(img, segment(img, cfg.segmentation), cfg.rubbersheet.radial_res, cfg.rubbersheet.angular_res)
    return load_texture(path)


@app.callback()
def main_options(
    ctx: typer.Context,
    config: Annotated[Optional[Path], typer.Option("--config", help="YAML config file")] = None,
    set_: Annotated[Optional[List[str]], typer.Option("--set", help="dotted.key=value override, repeatable")] = None,
    seed: Annotated[Optional[int], typer.Option("--seed")] = None,
    subjects: Annotated[Optional[int], typer.Option("--subjects")] = None,
    splits: Annotated[Optional[int], typer.Option("--splits")] = None,
    out: Annotated[Optional[Path], typer.Option("--out", help="Output directory")] = None,
    workers: Annotated[Optional[int], typer.Option("--workers")] = None,
    verbose: Annotated[bool, typer.Option("--verbose", "-v")] = False,
):
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(message)s",
        handlers=[RichHandler(console=Console(stderr=True), show_path=False)],
        force=True,
    )
    flags = {"seed": seed, "subjects": subjects, "splits": splits, "out_dir": out, "workers": workers}
    ctx.obj = {
        "config": config,
        "set": set_,
        "flags": {k: v for k, v in flags.items() if v is not None},
    }


@app.command()
def synth(
    ctx: typer.Context,
    mode: ModeOption = None,
    seed: Annotated[Optional[int], typer.Option("--seed")] = None,
    out: Annotated[Optional[Path], typer.Option("--out")] = None,
):
    """Render the synthetic dataset of every subject, one directory per mode."""
    cfg = _config(ctx, mode=mode, seed=seed, out_dir=out)
    root = Path(cfg.out_dir)
    written = {m: str(write_dataset(cfg, root / m, m)) for m in cfg.modes}
    _emit({"status": "ok", "datasets": written})


@app.command("segment")
def segment_frame(
    ctx: typer.Context,
    frame: Path,
    mask_out: Annotated[Optional[Path], typer.Option("--mask-out", help="Write the annulus mask as a PGM")] = None,
    truth: Annotated[Optional[Path], typer.Option("--truth", help="Ground-truth mask PGM for a Dice score")] = None,
):
    """Detect pupil and limbus circles in one frame."""
    cfg = _config(ctx)
    geom = segment(load_pgm(frame), cfg.segmentation)
    mask = geometry_to_mask(geom)
    payload = {
        "pupil": {"x": geom.pupil.center.x, "y": geom.pupil.center.y, "r": geom.pupil.radius},
        "limbus": {"x": geom.limbus.center.x, "y": geom.limbus.center.y, "r": geom.limbus.radius},
    }
    if mask_out is not None:
        save_pgm(mask_to_image(mask.bits), mask_out)
    if truth is not None:
        payload["dice"] = dice_score(mask, BinaryMask(image_to_mask(load_pgm(truth))))
    _emit(payload)


@app.command()
def swap(
    ctx: typer.Context,
    frame: Path,
    victim: Annotated[Path, typer.Argument(help="Victim texture (.ptex), frame (.pgm) or recording directory")],
    output: Path,
):
    """Replace the iris of one frame with the victim's pattern."""
    cfg = _config(ctx)
    texture = _victim_texture(victim, cfg)
    img = load_pgm(frame)
    result = swap_iris(img, segment(img, cfg.segmentation), texture, cfg.rubbersheet.match_intensity)
    save_pgm(result.image, output)
    _emit({"output": str(output), "fill_ratio": result.fill_ratio, "written": result.written})


@app.command("extract-texture")
def extract_texture(
    ctx: typer.Context,
    source: Annotated[Path, typer.Argument(help="Recording directory or frame (.pgm)")],
    output: Path,
    frame: Annotated[int, typer.Option("--frame")] = 0,
):
    """Unwrap one frame into a victim texture file."""
    cfg = _config(ctx)
    texture = _victim_texture(source, cfg, frame)
    save_texture(texture, output)
    _emit({"output": str(output), "valid_fraction": texture.valid_fraction})


@app.command()
def encode(ctx: typer.Context, frame: Path, output: Path):
    """Encode one frame into an iris template file."""
    cfg = _config(ctx)
    template = _template(frame, cfg)
    save_template(template, output)
    _emit({"output": str(output), "coverage": template.coverage, "bits": template.n_bits})


@app.command()
def authenticate(
    ctx: typer.Context,
    presented: Annotated[Path, typer.Argument(help="Template, frame (.pgm) or recording directory")],
    enrolled: Path,
):
    """Compare two irises and decide accept / reject at the configured threshold."""
    cfg = _config(ctx)
    threshold = cfg.gabor.threshold
    if presented.is_dir() and enrolled.is_dir():
        frames, values = compare_recordings(DiskRecording(presented), DiskRecording(enrolled), cfg)
        if not values:
            context = {"presented": str(presented), "enrolled": str(enrolled)}
            raise ExperimentError("no frame pair could be encoded", context)
        hd = float(np.mean(values))
        _emit(
            {
                "hd": hd,
                "decision": "accept" if decide(hd, threshold) else "reject",
                "threshold": threshold,
                "frames": frames,
                "hd_values": values,
            }
        )
        return
    result = authenticate_templates(_template(presented, cfg), _template(enrolled, cfg), threshold, cfg.gabor.max_shift)
    _emit(result.to_dict())


@app.command()
def gaze(
    ctx: typer.Context,
    recording: Annotated[Path, typer.Argument(help="subject_<id> directory of a dataset")],
    output: Annotated[Optional[Path], typer.Option("--output", help="Gaze trace CSV")] = None,
):
    """Track gaze through a recording and score it on the validation targets."""
    cfg = _config(ctx)
    schedule = load_schedule(recording.parent)
    trace, skipped = track_gaze(DiskRecording(recording), schedule, cfg)
    if output is not None:
        trace.to_csv(output)
    _emit(
        {
            "samples": len(trace),
            "skipped": skipped,
            "accuracy_deg": accuracy(trace, schedule, cfg.gaze.onset_trim_s),
            "precision_deg": precision(trace, schedule, cfg.gaze.onset_trim_s),
        }
    )


@app.command()
def attack(
    ctx: typer.Context,
    recording: Annotated[Path, typer.Argument(help="Attacker subject_<id> directory of a dataset")],
    victim: Annotated[Path, typer.Argument(help="Victim texture (.ptex), frame (.pgm) or recording directory")],
    mode: ModeOption = None,
    out: Annotated[Optional[Path], typer.Option("--out")] = None,
):
    """Run the iris swap over a recorded sequence, offline or with online frame drops."""
    cfg = _config(ctx, mode=mode, out_dir=out)
    attack_mode = _single_mode(cfg)
    out_dir = Path(cfg.out_dir)
    schedule = load_schedule(recording.parent)
    sink = FrameSink(out_dir / "spoofed")
    run = run_attack(DiskRecording(recording), _victim_texture(victim, cfg), schedule, cfg, attack_mode, sink)
    run.unswapped.to_csv(out_dir / "gaze_unswapped.csv")
    run.swapped.to_csv(out_dir / "gaze_swapped.csv")
    _emit(
        {
            "mode": attack_mode,
            "frames": run.n_frames,
            "kept": int(len(run.kept)),
            "skipped_swapped": run.skipped_swapped,
            "sampling_factor": run.sampling_factor,
            "accuracy_unswapped": accuracy(run.unswapped, schedule, cfg.gaze.onset_trim_s),
            "accuracy_swapped": accuracy(run.swapped, schedule, cfg.gaze.onset_trim_s),
            "digest": run.digest,
        }
    )


@app.command("train-liveness")
def train_liveness(
    ctx: typer.Context,
    windows: Annotated[Path, typer.Argument(help="Window CSV written by an experiment")],
    output: Annotated[Path, typer.Argument(help="Model file")],
    split: Annotated[int, typer.Option("--split", help="Split index the partition is drawn for")] = 0,
):
    """Train one liveness model on a subject-disjoint split and report its test ASR."""
    cfg = _config(ctx)
    data = load_windows(windows)
    plan = split_subjects(
        sorted({w.subject for w in data}),
        [cfg.seed, split],
        cfg.test_fraction,
        cfg.validation_fraction,
        cfg.test_count,
    )
    model, report, _ = evaluate_split(cfg, data, plan, split, [cfg.seed, split, 1])
    save_model(model, output)
    _emit(report.model_dump(mode="json"))


@app.command()
def experiment(
    ctx: typer.Context,
    mode: ModeOption = None,
    seed: Annotated[Optional[int], typer.Option("--seed")] = None,
    out: Annotated[Optional[Path], typer.Option("--out")] = None,
):
    """Full attack and liveness evaluation; writes report.json and the raw dumps."""
    cfg = _config(ctx, mode=mode, seed=seed, out_dir=out)
    report = run_experiment(cfg)
    _print_report(report)


def _fmt(stat) -> str:
    if stat.mean is None:
        return "-"
    return f"{stat.mean:.3f} ± {stat.std:.3f}"


def _print_report(report) -> None:
    table = Table(title=f"IrisSwap seed {report.seed} (config {report.config_hash[:12]})")
    for column in ("mode", "HD", "auth", "acc unswapped", "acc swapped", "prec unswapped", "prec swapped", "condition", "ASR window", "ASR user"):
        table.add_column(column)
    for mode, mode_report in report.modes.items():
        head = [
            mode,
            _fmt(mode_report.hd),
            f"{mode_report.authenticated_fraction:.2f}",
            _fmt(mode_report.accuracy_unswapped),
            _fmt(mode_report.accuracy_swapped),
            _fmt(mode_report.precision_unswapped),
            _fmt(mode_report.precision_swapped),
        ]
        for condition, liveness in mode_report.liveness.items():
            table.add_row(*head, condition, _fmt(liveness.asr_window), _fmt(liveness.asr_user))
            head = [""] * len(head)
    console.print(table)


@app.command()
def report(ctx: typer.Context, directory: Annotated[Path, typer.Argument(help="Experiment output directory")]):
    """Print a finished report and verify its ASR figures against predictions.csv."""
    loaded = load_report(directory)
    _print_report(loaded)
    problems = check_report(loaded, directory / "predictions.csv")
    if problems:
        raise ExperimentError("report does not match its prediction dump", {"problems": problems})
    console.print("[green]report consistent with predictions.csv[/green]")


def _exit_code(ex: IrisSwapError) -> int:
    return 2 if isinstance(ex, (ConfigError, UnknownSubcommand)) else 1


def main(argv: Optional[List[str]] = None) -> int:
    try:
        result = app(args=argv, standalone_mode=False)
    except IrisSwapError as ex:
        logger.debug(f"{ex.code}: {ex.message}")
        sys.stderr.write(orjson.dumps(ex.to_dict()).decode() + "\n")
        return _exit_code(ex)
    except UsageError as ex:
        if "No such command" in ex.format_message():
            error = UnknownSubcommand(ex.format_message(), {"argv": list(argv or sys.argv[1:])})
            sys.stderr.write(orjson.dumps(error.to_dict()).decode() + "\n")
            return 2
        ex.show()
        return 2
    except typer.Abort:
        return 1
    return result if isinstance(result, int) else 0


if __name__ == "__main__":
    sys.exit(main())
