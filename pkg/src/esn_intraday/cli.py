"""Command line entry point: ``esn-intraday <command> --config run.json``.

Every command reads the same configuration file, writes into the output
directory and leaves a ``manifest_<command>.json`` with the configuration
hash, seed, package version and a checksum for each file it wrote.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .config import ConfigError, RunConfig
from .evaluation import EvaluationError
from .market_data import BarDataError
from .pipeline import (InvariantViolation, MissingInputError, backtest, build_panel, load_forecasts, load_or_build_signals,
                       load_panel, mapper_for, merge_fragments, run_evaluation, run_tuning, save_forecasts, save_panel,
                       save_signals, write_manifest)
from .signals import SignalError, build_signal_panel
from .storage import CacheError
from .tuning import TuningError

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_INVARIANT = 0, 2, 3, 4

logger = logging.getLogger("esn_intraday")


def _csv_list(text: str) -> list[str]:
    return [x.strip() for x in text.split(",") if x.strip()]


def cmd_simulate(cfg: RunConfig) -> list[Path]:
    if cfg.raw["data"]["source"] != "synthetic":
        raise ConfigError("simulate needs data.source = 'synthetic'")
    panel, _ = build_panel(cfg)
    files = save_panel(panel, cfg.output)
    write_manifest(cfg.output, "simulate", cfg, files)
    return files


def cmd_ingest(cfg: RunConfig) -> list[Path]:
    if cfg.raw["data"]["source"] != "bars":
        raise ConfigError("ingest needs data.source = 'bars'")
    panel, report = build_panel(cfg)
    files = save_panel(panel, cfg.output)
    rej = cfg.output / "rejected_rows.json"
    rej.write_text(json.dumps(report["rejected_rows"], indent=2) + "\n", encoding="utf-8")
    write_manifest(cfg.output, "ingest", cfg, [*files, rej])
    return files


def cmd_signals(cfg: RunConfig) -> list[Path]:
    panel = load_panel(cfg.output)
    sig = build_signal_panel(panel, cfg.signal_config())
    files = save_signals(sig, cfg.output)
    write_manifest(cfg.output, "signals", cfg, files, diagnostics=sig.diagnostics)
    return files


def cmd_backtest(cfg: RunConfig) -> list[Path]:
    panel = load_panel(cfg.output)
    sig = load_or_build_signals(cfg, panel, cfg.output)
    with mapper_for(cfg.jobs) as mapper:
        sets = backtest(cfg, panel, sig, mapper)
    files = save_forecasts(sets, cfg.output)
    skipped = {f"{fs.model}_{fs.horizon}": fs.skipped for fs in sets}
    write_manifest(cfg.output, "backtest", cfg, files, skipped=skipped)
    return files


def cmd_evaluate(cfg: RunConfig) -> list[Path]:
    panel = load_panel(cfg.output)
    sets = load_forecasts(cfg, panel, cfg.output)
    report = run_evaluation(cfg, panel, sets)
    files = report.write(cfg.output / "evaluation")
    write_manifest(cfg.output, "evaluate", cfg, files)
    return files


def cmd_tune(cfg: RunConfig) -> list[Path]:
    panel = load_panel(cfg.output)
    sig = load_or_build_signals(cfg, panel, cfg.output)
    out = cfg.output / "tuning"
    out.mkdir(parents=True, exist_ok=True)
    with mapper_for(cfg.jobs) as mapper:
        results = run_tuning(cfg, panel, sig, mapper)
    files = []
    for r in results:
        log = out / f"trials_{r.horizon}.csv"
        r.write_log(log)
        spec = out / f"spec_{r.horizon}.json"
        spec.write_text(json.dumps(r.fragment(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
        files += [log, spec]
    merged = out / "tuned.json"
    merged.write_text(json.dumps(merge_fragments(results), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    files.append(merged)
    write_manifest(cfg.output, "tune", cfg, files)
    return files


def format_report(report: dict) -> str:
    lines = [f"relative MSFE change against {report['baseline']}"]
    for h, r in report["horizons"].items():
        lines.append(f"\n{h}  ({r['events']} events, {r['cells']} forecasts)")
        mcs = r.get("model_confidence_set")
        for m in r["models"]:
            flag = ""
            if mcs:
                flag = f"  MCS {'in ' if mcs['included'][m] else 'out'} p={mcs['p_values'][m]:.4f}"
            r2 = r["r2_zero_benchmark"][m]
            r2s = "n/a" if r2 is None else f"{r2:.4f}"
            lines.append(f"  {m:<10} MSFE {r['msfe'][m]:.6e} {r['relative_reduction'][m]:>12}  R2 {r2s}{flag}")
    return "\n".join(lines) + "\n"


def cmd_report(cfg: RunConfig) -> list[Path]:
    p = cfg.output / "evaluation" / "report.json"
    if not p.exists():
        raise MissingInputError(f"missing {p} (run evaluate)")
    text = format_report(json.loads(p.read_text(encoding="utf-8")))
    out = cfg.output / "evaluation" / "report.txt"
    out.write_text(text, encoding="utf-8")
    write_manifest(cfg.output, "report", cfg, [out])
    sys.stdout.write(text)
    return [out]


COMMANDS = {
    "simulate": cmd_simulate,
    "ingest": cmd_ingest,
    "signals": cmd_signals,
    "backtest": cmd_backtest,
    "evaluate": cmd_evaluate,
    "tune": cmd_tune,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="esn-intraday", description="Intraday return forecasting with echo state networks")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, type=Path, help="JSON run configuration")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", type=Path, help="output directory (overrides 'output')")
        p.add_argument("--horizons", type=_csv_list, help="comma-separated horizons")
        p.add_argument("--models", type=_csv_list, help="comma-separated models")
        p.add_argument("--jobs", type=int)
        p.add_argument("-v", "--verbose", action="store_true")
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = RunConfig.load(args.config).override(
            seed=args.seed, output=str(args.out) if args.out else None, horizons=args.horizons, models=args.models,
            jobs=args.jobs)
        COMMANDS[args.command](cfg)
    except ConfigError as exc:
        logger.error("configuration error: %s", exc)
        return EXIT_CONFIG
    except (MissingInputError, BarDataError, CacheError, SignalError, EvaluationError, TuningError, ValueError) as exc:
        logger.error("data error: %s", exc)
        return EXIT_DATA
    except InvariantViolation as exc:
        logger.error("invariant violation: %s", exc)
        return EXIT_INVARIANT
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
