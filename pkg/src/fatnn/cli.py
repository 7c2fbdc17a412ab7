"""Command-line entry point.

Exit codes: 0 success, 1 invalid config, 2 runtime failure, 3 verification failure.
"""

from __future__ import annotations

import argparse
import sys
import time

from . import __version__
from .config import OUTPUT_ROOT_ENV, ConfigError, load_config, resolve_config, shipped_configs

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_VERIFY = 0, 1, 2, 3


def _log(msg: str) -> None:
    print(msg, flush=True)


def _err(msg: str) -> None:
    print(msg, file=sys.stderr, flush=True)


def _load(name: str, command: str):
    cfg, digest = load_config(resolve_config(name))
    if cfg.command != command:
        raise ConfigError(f"{name}:1: config is for '{cfg.command}', not '{command}'")
    return cfg, digest


def cmd_solve(args) -> int:
    from .experiments import run_solve

    cfg, digest = _load(args.config, "solve")
    if cfg.long_running:
        _log(f"[{cfg.experiment}] full-scale config; expect a long run")
    result = run_solve(cfg, digest, _log)
    for step in result.steps:
        _log(f"It={step.It} rel_l2={step.rel_l2:.4e}")
    _log(f"artifacts in {cfg.output_path()}")
    return EXIT_OK


def cmd_fit(args) -> int:
    from .experiments import run_fit

    cfg, digest = _load(args.config, "fit")
    run_fit(cfg, digest, _log)
    _log(f"artifacts in {cfg.output_path()}")
    return EXIT_OK


def cmd_verify(args) -> int:
    from .verify import run_verify

    results = run_verify(_log)
    return EXIT_OK if all(r.passed for r in results) else EXIT_VERIFY


def cmd_spectrum(args) -> int:
    from .experiments import run_spectrum

    run_spectrum(args.checkpoint, args.n_dft, args.top_m, args.cap, args.out, _log)
    return EXIT_OK


def cmd_configs(args) -> int:
    for name, path in shipped_configs().items():
        cfg, _ = load_config(path)
        tag = " (long-running)" if cfg.long_running else ""
        _log(f"{name:24s} {cfg.command:5s} {cfg.anchor}{tag}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fatnn", description="Frequency-adaptive tensor neural network PDE solver.",
                                epilog=f"Outputs go under ${OUTPUT_ROOT_ENV} (default ./runs).")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("solve", help="run the adaptive solver from a config")
    s.add_argument("config", help="config file or shipped config name")
    s.set_defaults(func=cmd_solve)

    s = sub.add_parser("fit", help="run a fitting experiment from a config")
    s.add_argument("config", help="config file or shipped config name")
    s.set_defaults(func=cmd_fit)

    s = sub.add_parser("verify", help="run the property suite")
    s.set_defaults(func=cmd_verify)

    s = sub.add_parser("spectrum", help="frequency analysis of a saved checkpoint")
    s.add_argument("checkpoint")
    s.add_argument("--n-dft", type=int, default=4096)
    s.add_argument("--top-m", type=int, default=10)
    s.add_argument("--cap", type=int, default=200)
    s.add_argument("--out", default=None, help="directory for spectrum.csv")
    s.set_defaults(func=cmd_spectrum)

    s = sub.add_parser("configs", help="list shipped configs")
    s.set_defaults(func=cmd_configs)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    from .experiments import VerificationFailed

    t0 = time.perf_counter()
    try:
        code = args.func(args)
    except ConfigError as exc:
        _err(f"config error:\n{exc}")
        return EXIT_CONFIG
    except VerificationFailed as exc:
        _err(f"verification failed: {exc}")
        return EXIT_VERIFY
    except KeyboardInterrupt:
        _err("interrupted")
        return EXIT_RUNTIME
    except Exception as exc:
        _err(f"runtime failure: {type(exc).__name__}: {exc}")
        return EXIT_RUNTIME
    if args.command in ("solve", "fit"):
        _log(f"done in {time.perf_counter() - t0:.1f} s")
    return code


if __name__ == "__main__":
    sys.exit(main())
