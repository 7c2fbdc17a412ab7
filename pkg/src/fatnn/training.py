"""PINN loss assembly, Adam, the causal time gate, error metrics and the frequency-adaptive loop."""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .io import atomic_write_text, fmt, write_csv, write_json
from .model import ModelConfig, TnnModel, init_model, rebuild_with_frequencies
from .problems import (
    FieldDerivs,
    ProblemSpec,
    on_boundary,
    residual,
    sample_boundary,
    sample_initial,
    sample_interior,
)
from .spectrum import Extraction, FrequencySet, extract_frequencies, freqsets_equal, jaccard


class TrainingDiverged(RuntimeError):
    """Raised when a loss or gradient turns non-finite; carries the last finite model."""

    def __init__(self, message: str, model: TnnModel, epoch: int):
        super().__init__(message)
        self.model = model
        self.epoch = epoch


# -- optimizer ----------------------------------------------------------------


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, n: int) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n))


def adam_step(state: AdamState, params: np.ndarray, grads, lr: float) -> tuple[np.ndarray, AdamState]:
    """Bias-corrected Adam update, applied to ``params`` in place.

    A non-finite gradient aborts before any state is touched.
    """
    g = np.asarray(grads, dtype=np.float64)
    if g.shape != params.shape or state.m.shape != params.shape:
        raise ValueError(f"length mismatch: params {params.shape}, grads {g.shape}, state {state.m.shape}")
    if not np.all(np.isfinite(g)):
        bad = int(np.flatnonzero(~np.isfinite(g))[0])
        raise ad.NonFiniteError(f"non-finite gradient at flat index {bad}; Adam step skipped")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    state.m *= b1
    state.m += (1.0 - b1) * g
    state.v *= b2
    state.v += (1.0 - b2) * g * g
    mhat = state.m / (1.0 - b1**state.step)
    vhat = state.v / (1.0 - b2**state.step)
    params -= lr * mhat / (np.sqrt(vhat) + state.eps)
    return params, state


def lr_at(step: int, lr0: float = 1e-3, decay: float = 0.95, every: int = 1000) -> float:
    """Staircase exponential decay: ``lr0 * decay ** (step // every)``."""
    if step < 0:
        raise ValueError("step must be >= 0")
    return lr0 * decay ** (step // every)


# -- causal gate ----------------------------------------------------------------


@dataclass(frozen=True)
class GateState:
    mu: float = 0.0
    slope: float = 5.0
    rate: float = 0.002
    decay: float = 0.005


def gate_weight(t, g: GateState):
    """Per-point residual weight ``(1 - tanh(slope (t - mu))) / 2``."""
    return 0.5 * (1.0 - np.tanh(g.slope * (np.asarray(t, dtype=np.float64) - g.mu)))


def update_mu(g: GateState, L_r: float) -> GateState:
    if not L_r >= 0:
        raise ValueError(f"residual loss must be >= 0, got {L_r}")
    return replace(g, mu=g.mu + g.rate * math.exp(-g.decay * L_r))


# -- solution ansatz ------------------------------------------------------------


def field_derivs(problem: ProblemSpec, model: TnnModel, points, want: int = 2, params=None) -> FieldDerivs:
    """Derivatives of the candidate solution at ``points``.

    Evolution problems use ``u = h(x) + t N(x, t)`` with ``h`` the initial
    condition and ``N`` the network, so ``u(x, 0) = h`` holds exactly.
    Entries may be tape nodes when ``params`` are tape leaves.
    """
    ev = model.forward(points, want, params)
    if not problem.time_dependent:
        return FieldDerivs(ev.u, ev.d2u if want >= 2 else None)
    d = problem.d
    x, t = problem.split(points)
    h, _, hh = problem.initial_value(x)
    u = ad.add(h, ad.mul(ev.u, t))
    if want == 0:
        return FieldDerivs(u)
    n_t = ev.du[d]
    ut = ad.add(ev.u, ad.mul(n_t, t))
    if want == 1:
        return FieldDerivs(u, None, ut)
    hess = [ad.add(hh[:, k], ad.mul(ev.d2u[k], t)) for k in range(d)]
    utt = ad.add(ad.mul(n_t, 2.0), ad.mul(ev.d2u[d], t))
    return FieldDerivs(u, hess, ut, utt)


def predict(problem: ProblemSpec, model, points) -> np.ndarray:
    """Numeric solution values; ``model`` may also be any callable on points."""
    if isinstance(model, TnnModel):
        if np.shape(points)[0] == 0:
            return np.zeros(0)
        return np.asarray(ad.value_of(field_derivs(problem, model, points, want=0).u))
    return np.asarray(model(points), dtype=np.float64)


def boundary_residual(problem: ProblemSpec, model, points) -> np.ndarray:
    """``u_net - g`` on the spatial boundary (Dirichlet)."""
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    if not np.all(on_boundary(problem, points)):
        raise ValueError("boundary residual requested at an interior point")
    return predict(problem, model, points) - problem.exact_value(points)


def initial_time_derivative_residual(problem: ProblemSpec, model: TnnModel, points) -> np.ndarray:
    """``u_t(x, 0) - u_t^exact(x, 0)``; under the time ansatz ``u_t(x, 0) = N(x, 0)``."""
    if problem.kind != "wave":
        raise ValueError("initial velocity residual only applies to the wave problem")
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    if np.any(points[:, -1] != 0.0):
        raise ValueError("initial velocity residual needs t = 0")
    ut = np.asarray(ad.value_of(field_derivs(problem, model, points, want=1).ut))
    x, t = problem.split(points)
    return ut - problem.exact.evaluate(x, t)[3]


# -- loss -----------------------------------------------------------------------


@dataclass
class Batches:
    interior: np.ndarray
    boundary: np.ndarray | None = None
    initial: np.ndarray | None = None


def draw_batches(problem: ProblemSpec, seed, n_interior: int | None = None,
                 n_boundary_per_face: int | None = None, n_initial: int | None = None) -> Batches:
    """One epoch's collocation points; ``seed`` may be an int or a sequence of ints."""
    base = [int(s) for s in np.atleast_1d(seed)]
    n_r = n_interior or problem.n_interior
    if problem.kind == "fit":
        return Batches(sample_interior(problem, n_r, base + [0]))
    n_b = (n_boundary_per_face or problem.n_boundary_per_face) * 2 * problem.d
    initial = None
    if problem.kind == "wave":
        initial = sample_initial(problem, n_initial or problem.n_initial, base + [2])
    return Batches(sample_interior(problem, n_r, base + [0]), sample_boundary(problem, n_b, base + [1]), initial)


def _msq(x):
    return ad.mean(ad.square(x))


def assemble_loss(problem: ProblemSpec, model: TnnModel, batches: Batches, gate: GateState | None = None,
                  params=None):
    """Scalar training loss and its components (as floats).

    Returns ``(loss, parts)``; ``loss`` is a tape node when ``params`` are tape
    leaves.  Stationary and heat problems use ``L_r + lambda L_b``; the wave
    problem uses ``omega_u L_u + omega_ut L_ut + L_r`` with per-point gate
    weights on the residual.
    """
    if batches.interior is None or len(batches.interior) == 0:
        raise ValueError("empty interior batch")
    pts = batches.interior
    if problem.kind == "fit":
        u = field_derivs(problem, model, pts, want=0, params=params).u
        loss = _msq(ad.sub(u, problem.exact_value(pts)))
        return loss, {"L_fit": float(ad.value_of(loss))}
    if batches.boundary is None or len(batches.boundary) == 0:
        raise ValueError("empty boundary batch")
    res = residual(problem, field_derivs(problem, model, pts, want=2, params=params), pts)
    ub = field_derivs(problem, model, batches.boundary, want=0, params=params).u
    L_b = _msq(ad.sub(ub, problem.exact_value(batches.boundary)))
    parts = {}
    if problem.kind == "wave":
        if batches.initial is None or len(batches.initial) == 0:
            raise ValueError("wave loss needs an initial-time batch")
        w = np.ones(len(pts)) if gate is None else gate_weight(pts[:, -1], gate)
        L_r = ad.mean(ad.mul(ad.square(res), w))
        ut0 = field_derivs(problem, model, batches.initial, want=1, params=params).ut
        x0, t0 = problem.split(batches.initial)
        L_ut = _msq(ad.sub(ut0, problem.exact.evaluate(x0, t0)[3]))
        loss = ad.add(ad.add(ad.mul(L_b, problem.omega_u), ad.mul(L_ut, problem.omega_ut)), L_r)
        parts["L_ut"] = float(ad.value_of(L_ut))
    else:
        L_r = _msq(res)
        loss = ad.add(L_r, ad.mul(L_b, problem.boundary_weight))
    parts["L_r"] = float(ad.value_of(L_r))
    parts["L_b"] = float(ad.value_of(L_b))
    return loss, parts


def loss_and_grad(problem: ProblemSpec, model: TnnModel, batches: Batches, gate: GateState | None = None):
    """Loss value, components and flat gradient aligned with ``model.flat``."""
    tape = ad.Tape()
    leaves = [tape.leaf(a) for a in model.arrays()]
    loss, parts = assemble_loss(problem, model, batches, gate, leaves)
    grads = ad.grad_of_scalar(tape, loss, leaves)
    return float(loss.value), parts, grads.data


# -- history ----------------------------------------------------------------------


@dataclass
class RunHistory:
    """Epoch-block and adaptive-step records; persisted as JSON lines."""

    epochs: list[dict] = field(default_factory=list)
    steps: list[dict] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def records(self) -> list[dict]:
        out = [{"type": "meta", **self.meta}] if self.meta else []
        out += [{"type": "epoch", **r} for r in self.epochs]
        out += [{"type": "step", **r} for r in self.steps]
        return out

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.records())

    def write(self, path) -> Path:
        return atomic_write_text(path, self.to_jsonl())

    @classmethod
    def read(cls, path) -> "RunHistory":
        h = cls()
        for line in Path(path).read_text().splitlines():
            rec = json.loads(line)
            kind = rec.pop("type")
            if kind == "meta":
                h.meta = rec
            elif kind == "epoch":
                h.epochs.append(rec)
            else:
                h.steps.append(rec)
        return h


@dataclass
class TrainOptions:
    epochs: int = 1000
    lr0: float = 1e-3
    decay: float = 0.95
    decay_every: int = 1000
    n_interior: int | None = None
    n_boundary_per_face: int | None = None
    n_initial: int | None = None
    resample: bool = True
    log_every: int = 100
    gate: bool = True


def train(problem: ProblemSpec, model: TnnModel, opts: TrainOptions, seed: int, It: int = 0,
          history: RunHistory | None = None) -> tuple[TnnModel, RunHistory]:
    """Adam on the PINN loss for ``opts.epochs`` epochs, updating ``model`` in place.

    Collocation points are redrawn every epoch from ``(seed, It, epoch)``
    unless ``opts.resample`` is off.  The wave gate shift advances once per
    epoch from the gated residual loss.
    """
    if model.d != problem.n_inputs:
        raise ValueError(f"model has {model.d} inputs, problem needs {problem.n_inputs}")
    history = history if history is not None else RunHistory()
    state = AdamState.zeros(model.n_params)
    gate = GateState() if problem.kind == "wave" and opts.gate else None
    batches = None
    for epoch in range(opts.epochs):
        if batches is None or opts.resample:
            batches = draw_batches(problem, [seed, It, epoch], opts.n_interior, opts.n_boundary_per_face,
                                   opts.n_initial)
        lr = lr_at(epoch, opts.lr0, opts.decay, opts.decay_every)
        last_good = model.flat.copy()
        try:
            loss, parts, grads = loss_and_grad(problem, model, batches, gate)
            adam_step(state, model.flat, grads, lr)
        except ad.NonFiniteError as exc:
            model.flat[:] = last_good
            raise TrainingDiverged(f"epoch {epoch}: {exc}", model, epoch) from exc
        if epoch % opts.log_every == 0 or epoch == opts.epochs - 1:
            rec = {"It": It, "epoch": epoch, "loss": loss, "lr": lr, **parts}
            if gate is not None:
                rec["mu"] = gate.mu
            history.epochs.append(rec)
        if gate is not None:
            gate = update_mu(gate, parts["L_r"])
    return model, history


# -- metrics ----------------------------------------------------------------------


def relative_l2(model, problem: ProblemSpec, n: int = 65536, seed: int = 0, chunk: int = 8192) -> float:
    """Monte-Carlo relative L2 error over the (space-time) domain."""
    if n < 1:
        raise ValueError("n must be >= 1")
    pts = sample_interior(problem, n, seed)
    num = den = 0.0
    for lo in range(0, n, chunk):
        p = pts[lo:lo + chunk]
        exact = problem.exact_value(p)
        num += float(np.sum((predict(problem, model, p) - exact) ** 2))
        den += float(np.sum(exact**2))
    if den == 0.0:
        raise ValueError("exact solution has zero norm on the sample")
    return math.sqrt(num / den)


def pointwise_error_grid(model, problem: ProblemSpec, seed: int = 0) -> np.ndarray:
    """``|u_net - u_exact|`` at 1600 seeded points, row-major as 40 x 40."""
    pts = sample_interior(problem, 1600, seed)
    err = np.abs(predict(problem, model, pts) - problem.exact_value(pts))
    return err.reshape(40, 40)


# -- adaptive loop ----------------------------------------------------------------


@dataclass
class AdaptiveConfig:
    steps: int = 4  # I: adaptive steps after the random-feature step
    top_m: int = 10
    cap: int = 200
    n_dft: int = 4096
    train: TrainOptions = field(default_factory=TrainOptions)
    n_eval: int = 65536
    eval_seed: int = 20240601
    jaccard_stop: float | None = None


@dataclass
class StepResult:
    It: int
    rel_l2: float
    features: FrequencySet | None
    extraction: Extraction
    model: TnnModel


@dataclass
class AdaptiveResult:
    history: RunHistory
    model: TnnModel
    steps: list[StepResult]
    files: list[Path] = field(default_factory=list)

    @property
    def errors(self) -> list[float]:
        return [s.rel_l2 for s in self.steps]


def step_seed(seed: int, It: int) -> int:
    return int(np.random.SeedSequence([seed, It, 7]).generate_state(1)[0])


def adaptive_solve(problem: ProblemSpec, model_config: ModelConfig, cfg: AdaptiveConfig, seed: int,
                   out_dir=None, label: str = "run", log=None) -> AdaptiveResult:
    """Train with random features, then repeatedly rebuild on extracted frequencies and retrain.

    Every step starts from fresh weights and a fresh optimizer.  The loop
    stops after ``cfg.steps`` rebuilds or once the extracted sets repeat.
    With ``out_dir`` set, checkpoints, spectra, frequency sets, error grids
    and the error table are written as they become available, and the
    history is persisted even if a step fails.
    """
    if model_config.d != problem.n_inputs:
        raise ValueError(f"model has {model_config.d} inputs, problem needs {problem.n_inputs}")
    out = Path(out_dir) if out_dir is not None else None
    history = RunHistory(meta={"label": label, "problem": problem.name, "seed": seed})
    result = AdaptiveResult(history, None, [])
    features: FrequencySet | None = None
    spectra_rows: list[list] = []
    try:
        for It in range(cfg.steps + 1):
            t0 = time.perf_counter()
            s = step_seed(seed, It)
            if It == 0:
                model = init_model(model_config, s)
            else:
                model = rebuild_with_frequencies(model_config, features.sets, s)
            train(problem, model, cfg.train, seed, It, history)
            err = relative_l2(model, problem, cfg.n_eval, cfg.eval_seed)
            ext = extract_frequencies(model, min(cfg.top_m, cfg.n_dft // 2), cfg.cap, cfg.n_dft, It + 1)
            step = StepResult(It, err, features, ext, model)
            result.steps.append(step)
            result.model = model
            history.steps.append({
                "It": It,
                "rel_l2": err,
                "features": None if features is None else features.to_json()["sets"],
                "extracted": ext.freqs.to_json()["sets"],
                "n_params": model.n_params,
                "seed": s,
                "wall_time": time.perf_counter() - t0,
            })
            if log is not None:
                log(f"[{label}] It={It} rel_l2={err:.4e} params={model.n_params}")
            for i, mags in enumerate(ext.mean_magnitudes):
                spectra_rows.extend([It, i, k, m] for k, m in enumerate(mags))
            if out is not None:
                result.files.append(model.save(out / "checkpoints" / f"step{It}.json"))
                result.files.append(write_json(out / f"freqs_step{It + 1}.json", ext.freqs.to_json()))
                result.files.append(write_csv(out / f"error_grid_step{It}.csv", None,
                                              pointwise_error_grid(model, problem, cfg.eval_seed).tolist()))
                result.files.append(write_csv(out / "spectra.csv", ["It", "i", "k", "mean_magnitude"], spectra_rows))
                result.files.append(_write_error_table(out / "rel_l2.csv", label, result.errors))
            if features is not None:
                if freqsets_equal(features, ext.freqs):
                    break
                if cfg.jaccard_stop is not None and jaccard(features, ext.freqs) >= cfg.jaccard_stop:
                    break
            features = ext.freqs
    finally:
        if out is not None:
            result.files.append(history.write(out / "history.jsonl"))
    return result


def _write_error_table(path, label: str, errors: list[float]) -> Path:
    header = ["method"] + [f"It={i}" for i in range(len(errors))]
    return write_csv(path, header, [[label] + [fmt(e) for e in errors]])
