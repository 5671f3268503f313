"""Command-line entry point: ``hyperlearn run | grad-check | replay``.

Exit codes: 0 success, 1 validation error, 2 numeric abort, 3 I/O error.
"""
from __future__ import annotations

import argparse
import filecmp
import json
import logging
import sys
import tempfile
from pathlib import Path

from .config import PRESETS, ConfigError, ExperimentConfig, build_config, load_data, parse_config
from .datasets import DataFormatError
from .gradcheck import TOLERANCE, passed, run_grad_check
from .loop import run_experiment
from .model import NumericError
from .report import emit_csv, emit_svg, load_log, save_log, write_manifest

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 1, 2, 3

log = logging.getLogger("hyperlearn")


def _parse_set(items):
    out = {}
    for item in items or []:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def write_outputs(cfg: ExperimentConfig, run_log, out_dir: Path, status: str) -> None:
    emit_csv(run_log, out_dir)
    save_log(run_log, out_dir / "runlog.json")
    write_manifest(out_dir, cfg.to_dict(), {"status": status})
    if cfg.emit_svg:
        emit_svg(run_log, out_dir)


def execute(cfg: ExperimentConfig, out_dir: Path) -> int:
    train, val, _ = load_data(cfg)
    try:
        run_log = run_experiment(cfg.meta, train, val)
    except NumericError as exc:
        log.error("numeric abort: %s", exc)
        partial = getattr(exc, "log", None)
        if partial is not None:
            write_outputs(cfg, partial, out_dir, "aborted")
        return EXIT_NUMERIC
    write_outputs(cfg, run_log, out_dir, "completed")
    print(f"wrote {out_dir}")
    return EXIT_OK


def cmd_run(args) -> int:
    overrides = _parse_set(args.set)
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.emit_svg:
        overrides["emit_svg"] = True
    cfg = parse_config(args.config, args.preset, overrides)
    return execute(cfg, cfg.output_dir(args.out))


def cmd_grad_check(args) -> int:
    report = run_grad_check(args.seed)
    width = max(len(k) for k in report)
    for name, err in report.items():
        status = "ok" if err <= TOLERANCE else "FAIL"
        print(f"{name:<{width}}  max_rel_err={err:.3e}  {status}")
    ok = passed(report)
    print("all suites passed" if ok else f"gradient check failed (tolerance {TOLERANCE:g})")
    return EXIT_OK if ok else EXIT_NUMERIC


def cmd_replay(args) -> int:
    path = Path(args.log)
    run_dir = path if path.is_dir() else path.parent
    log_path = path / "runlog.json" if path.is_dir() else path
    run_log = load_log(log_path)
    if args.rerun:
        manifest = json.loads((run_dir / "manifest.json").read_text())
        config = dict(manifest["config"])
        config.pop("out", None)
        cfg = build_config(config)
        with tempfile.TemporaryDirectory() as tmp:
            code = execute(cfg, Path(tmp))
            if code != EXIT_OK:
                return code
            same = all(filecmp.cmp(run_dir / n, Path(tmp) / n, shallow=False)
                       for n in ("steps.csv", "epochs.csv"))
        print("replay identical" if same else "replay DIFFERS from recorded run")
        return EXIT_OK if same else EXIT_NUMERIC
    out = Path(args.out) if args.out else run_dir
    emit_csv(run_log, out)
    written = emit_svg(run_log, out)
    print(f"re-emitted {len(written) + 2} files to {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hyperlearn", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="train with a batch-size scheduler")
    r.add_argument("--config", help="flat YAML config file")
    r.add_argument("--preset", help=f"one of: {', '.join(PRESETS)}")
    r.add_argument("--seed", type=int)
    r.add_argument("--out", help="output root (overrides HYPERLEARN_OUT and the config)")
    r.add_argument("--emit-svg", action="store_true")
    r.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override any config key (repeatable)")
    r.set_defaults(func=cmd_run)

    g = sub.add_parser("grad-check", help="finite-difference checks of all gradient paths")
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_grad_check)

    rp = sub.add_parser("replay", help="re-emit CSV/SVG from a saved run log")
    rp.add_argument("--log", required=True, help="run directory or runlog.json")
    rp.add_argument("--out", help="where to write (default: alongside the log)")
    rp.add_argument("--rerun", action="store_true",
                    help="re-execute from manifest.json and compare CSVs byte for byte")
    rp.set_defaults(func=cmd_replay)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, DataFormatError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
