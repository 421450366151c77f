"""Conversion-based DCO pipeline: simulate, train, p2d and report subcommands."""

import argparse
import logging
import sys
from pathlib import Path

# Add parent directory to path
sys.path.insert(0, str(Path(__file__).parent.parent))

from core.catalog import Catalog, load_catalog
from core.config import ExperimentConfig, load_experiment, override_p2d
from core.errors import CatalogMismatchError, ConfigError, DcoError
from core.events import read_events
from core.metrics import compute_reports, render_report
from core.p2d import P2DGenerator
from core.simulator import run_experiment
from core.snapshot import load_model, save_model
from core.telemetry import Telemetry
from core.training import AuxiliaryTrainer
from core.utils import safe_makedirs, write_jsonl
from core.world import WorldModel

logger = logging.getLogger(__name__)

DEFAULT_CONFIG = "configs/experiment-default.yaml"


def setup_logging(log_level: str = "INFO", log_file: str | Path | None = None):
    """Configure logging."""
    handlers = [logging.StreamHandler()]
    if log_file is not None:
        safe_makedirs(Path(log_file).parent)
        handlers.append(logging.FileHandler(log_file))
    logging.basicConfig(
        level=getattr(logging, log_level),
        format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
        handlers=handlers,
        force=True,
    )


def parse_window(text: str | None):
    """START:END in ticks, either side may be empty."""
    if text is None:
        return None
    start, sep, end = text.partition(":")
    if not sep:
        raise ConfigError("window", f"expected START:END, got '{text}'")
    try:
        window = (int(start) if start else None, int(end) if end else None)
    except ValueError as e:
        raise ConfigError("window", f"ticks must be integers, got '{text}'") from e
    if window[0] is not None and window[1] is not None and window[1] < window[0]:
        raise ConfigError("window", "END must not be before START")
    return window


def _load(args) -> ExperimentConfig:
    config = load_experiment(args.config, seed=args.seed)
    if args.out_dir:
        config.output.out_dir = args.out_dir
    window = parse_window(getattr(args, "window", None))
    if window is not None:
        config.report.window_start, config.report.window_end = window
    return config


def write_report(report, out_dir: Path) -> Path:
    """report.md and report.jsonl in the output directory."""
    safe_makedirs(out_dir)
    path = out_dir / "report.md"
    path.write_text(render_report(report))
    write_jsonl(out_dir / "report.jsonl", report.records())
    logger.info(f"Report written to {path}")
    return path


def cmd_simulate(args) -> int:
    """Run the A/B experiment and write every artifact."""
    config = _load(args)
    out_dir = Path(config.output.out_dir)
    setup_logging(config.output.log_level, out_dir / "dco.log")
    config.to_yaml(out_dir / "config.yaml")

    telemetry = Telemetry()
    result = run_experiment(config, out_dir=out_dir, telemetry=telemetry)
    write_report(result.report, out_dir)
    telemetry.write(out_dir / "telemetry.prom")
    print(render_report(result.report))
    return 0


def check_compatible(model, catalog: Catalog, config: ExperimentConfig) -> None:
    """Snapshot, catalog and config must describe the same model."""
    user_features = tuple(model.structure.user_features)
    if catalog.model_version is not None and catalog.model_version != model.version:
        raise CatalogMismatchError(
            f"catalog was exported for model v{catalog.model_version}, snapshot is v{model.version}"
        )
    if catalog.user_features and tuple(catalog.user_features) != user_features:
        raise CatalogMismatchError(
            f"catalog user features {list(catalog.user_features)} != model {list(user_features)}"
        )
    if tuple(config.segments.keys) != user_features:
        raise CatalogMismatchError(f"config segment keys {config.segments.keys} != model {list(user_features)}")


def cmd_p2d(args) -> int:
    """Generate a distribution table from a snapshot and a catalog."""
    config = override_p2d(_load(args), beta=args.beta, lambda_mix=args.lambda_mix)
    out_dir = Path(config.output.out_dir)
    setup_logging(config.output.log_level)

    model = load_model(args.model)
    catalog = load_catalog(args.catalog)
    check_compatible(model, catalog, config)
    table = P2DGenerator(config).generate(model, catalog)
    table.save(Path(args.output) if args.output else out_dir / "table-conversion-dco.jsonl")
    return 0


def cmd_train(args) -> int:
    """Replay an event log through the periodic trainer and save the snapshot."""
    config = _load(args)
    out_dir = Path(config.output.out_dir)
    setup_logging(config.output.log_level)

    catalog = load_catalog(args.catalog) if args.catalog else WorldModel.from_config(config).catalog
    events = read_events(args.events)
    until = args.until if args.until is not None else config.ticks
    trainer = AuxiliaryTrainer(config, catalog)
    snapshot = trainer.train_log(events, until)
    save_model(snapshot, Path(args.output) if args.output else out_dir / "model.jsonl")
    return 0


def cmd_report(args) -> int:
    """Render the lift report of an event log."""
    config = _load(args)
    out_dir = Path(config.output.out_dir)
    setup_logging(config.output.log_level)

    events = read_events(args.events)
    report = compute_reports(events, config.bucket_shares(), config.report_window(), config.report.treatment)
    write_report(report, out_dir)
    print(render_report(report))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="Conversion-based DCO pipeline")
    subparsers = parser.add_subparsers(dest="command", required=True)

    def common(sub):
        sub.add_argument("--config", type=str, default=DEFAULT_CONFIG, help="Experiment config file")
        sub.add_argument("--out-dir", type=str, help="Output directory (overrides config)")
        sub.add_argument("--seed", type=int, help="Experiment seed (overrides config)")

    simulate = subparsers.add_parser("simulate", help="Run the A/B marketplace simulation")
    common(simulate)
    simulate.add_argument("--window", type=str, help="Report window START:END in ticks")
    simulate.set_defaults(func=cmd_simulate)

    p2d = subparsers.add_parser("p2d", help="Generate a distribution table from a model snapshot")
    common(p2d)
    p2d.add_argument("--model", type=str, required=True, help="Model snapshot file")
    p2d.add_argument("--catalog", type=str, required=True, help="Ad catalog file")
    p2d.add_argument("--beta", type=float, help="SoftMax inverse temperature")
    p2d.add_argument("--lambda-mix", type=float, help="Uniform component mass")
    p2d.add_argument("--output", type=str, help="Table file (default: <out-dir>/table-conversion-dco.jsonl)")
    p2d.set_defaults(func=cmd_p2d)

    train = subparsers.add_parser("train", help="Train the auxiliary model on an event log")
    common(train)
    train.add_argument("--events", type=str, required=True, help="Event log file")
    train.add_argument("--catalog", type=str, help="Ad catalog file (default: generated world)")
    train.add_argument("--until", type=int, help="Train on report ticks before this tick (default: config ticks)")
    train.add_argument("--output", type=str, help="Snapshot file (default: <out-dir>/model.jsonl)")
    train.set_defaults(func=cmd_train)

    report = subparsers.add_parser("report", help="Render the lift report of an event log")
    common(report)
    report.add_argument("--events", type=str, required=True, help="Event log file")
    report.add_argument("--window", type=str, help="Report window START:END in ticks")
    report.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    """CLI entry point."""
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (DcoError, OSError, ValueError) as e:
        logger.error(f"{args.command} failed: {e}")
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
