"""Experiment runners behind the command line: each turns a validated config into artifacts."""

from __future__ import annotations

import datetime as _dt
from dataclasses import replace
from pathlib import Path

from . import __version__
from .config import FFComparisonSection, ProbeSection, RunConfig, ToyFitSection
from .fprinciple import REFERENCE_PROBE, ToyFitConfig, small_weight_dominance_fraction, toy_fit, write_probe, write_toy_fit
from .io import fmt, write_csv, write_manifest
from .model import ModelConfig, TnnModel, init_model
from .problems import make_problem, verify_manufactured
from .spectrum import extract_frequencies
from .training import TrainOptions, adaptive_solve, relative_l2, train


class VerificationFailed(RuntimeError):
    """The manufactured solution does not satisfy its PDE."""


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def _finish(out: Path, cfg_hash: str, started: str, files, status="ok", error=None) -> Path:
    return write_manifest(out / "manifest.json", config_hash=cfg_hash, version=__version__, started=started,
                          finished=_now(), files=files, status=status, error=error)


def run_solve(cfg: RunConfig, cfg_hash: str, log=print):
    out = cfg.output_path()
    started = _now()
    problem = cfg.build_problem()
    report = verify_manufactured(problem)
    if not report.ok:
        raise VerificationFailed(f"{problem.name}: manufactured solution residual "
                                 f"{max(report.max_closed_form, report.max_finite_diff):.3g} exceeds {report.tol}")
    model_cfg = cfg.build_model_config(problem)
    adaptive = cfg.build_adaptive(problem)
    result = None
    try:
        result = adaptive_solve(problem, model_cfg, adaptive, cfg.seed, out, cfg.experiment, log)
    except Exception as exc:
        _finish(out, cfg_hash, started, sorted(out.rglob("*")) if out.exists() else [], "failed", repr(exc))
        raise
    _finish(out, cfg_hash, started, result.files)
    return result


def _ff_model_config(sec: FFComparisonSection, variant: str) -> ModelConfig:
    combiner = variant.split("-")[0]
    tt = (1,) + (sec.tt_rank,) * (sec.d - 1) + (1,) if combiner == "tt" else None
    ff = variant.endswith("-ff")
    hidden = sec.hidden_ff if ff and sec.hidden_ff is not None else sec.hidden
    return ModelConfig(combiner=combiner, d=sec.d, rank=sec.rank, tt_ranks=tt, hidden=tuple(hidden),
                       activation=sec.activation, feature_mode="random" if ff else "none",
                       m=sec.m, sigma=sec.sigma)


def ff_comparison(sec: FFComparisonSection, seed: int, opts: TrainOptions, log=print) -> list[list]:
    """Relative L2 of each architecture variant per frequency, identical budgets and seed."""
    rows = []
    for k in sec.ks:
        problem = make_problem("poisson-ff", k=k, d=sec.d).with_(
            n_interior=sec.n_interior, n_boundary_per_face=sec.n_boundary_per_face,
            boundary_weight=sec.boundary_weight)
        for variant in sec.variants:
            model = init_model(_ff_model_config(sec, variant), seed)
            train(problem, model, replace(opts, epochs=sec.epochs), seed)
            err = relative_l2(model, problem, sec.n_eval, seed=20240601)
            log(f"[ff] k={k:g} {variant}: rel_l2={err:.4e}")
            rows.append([k, variant, err])
    return rows


def run_fit(cfg: RunConfig, cfg_hash: str, log=print) -> dict:
    out = cfg.output_path()
    started = _now()
    sec = cfg.fit
    files = []
    summary: dict = {}
    try:
        if isinstance(sec, ToyFitSection):
            tf = ToyFitConfig(ks=tuple(sec.ks), rank=sec.rank, epochs=sec.epochs, lr0=sec.lr0, decay=sec.decay,
                              decay_every=sec.decay_every, grid=sec.grid, eval_every=sec.eval_every,
                              threshold=sec.threshold, seed=cfg.seed)
            result = toy_fit(tf)
            files += write_toy_fit(result, out)
            summary = {"ordering_holds": result.ordering_holds(),
                       "first_converged": {d: [result.first_converged(d, k) for k in result.ks] for d in "xy"}}
        elif isinstance(sec, FFComparisonSection):
            o = cfg.optimizer
            opts = TrainOptions(lr0=o.lr0, decay=o.decay, decay_every=o.decay_every, resample=o.resample,
                                log_every=o.log_every)
            rows = ff_comparison(sec, cfg.seed, opts, log)
            files.append(write_csv(out / "ff_comparison.csv", ["k", "variant", "rel_l2"], rows))
            summary = {f"{v}@{k:g}": e for k, v, e in rows}
        elif isinstance(sec, ProbeSection):
            rows = [[d, small_weight_dominance_fraction(REFERENCE_PROBE, d, sec.n, cfg.seed)] for d in sec.deltas]
            files += write_probe(rows, out)
            summary = {fmt(d): f for d, f in rows}
        for key, val in summary.items():
            log(f"[{cfg.experiment}] {key}: {val}")
    except Exception as exc:
        _finish(out, cfg_hash, started, files, "failed", repr(exc))
        raise
    _finish(out, cfg_hash, started, files)
    return summary


def run_spectrum(checkpoint, n_dft: int = 4096, top_m: int = 10, cap: int = 200, out_dir=None, log=print):
    """Frequency analysis of a saved model: averaged spectra and the extracted sets."""
    model = TnnModel.load(checkpoint)
    ext = extract_frequencies(model, top_m, cap, n_dft)
    for i, s in enumerate(ext.freqs.sets):
        log(f"dim {i}: {len(s)} frequencies: {list(s)[:20]}{' ...' if len(s) > 20 else ''}")
    if out_dir is not None:
        out = Path(out_dir)
        rows = [[0, i, k, m] for i, mags in enumerate(ext.mean_magnitudes) for k, m in enumerate(mags)]
        write_csv(out / "spectrum.csv", ["It", "i", "k", "mean_magnitude"], rows)
    return ext
