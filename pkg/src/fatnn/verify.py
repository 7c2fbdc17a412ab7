"""Self-check suite: every numerical route is compared against an independent oracle."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .fprinciple import (
    PARAM_FAMILIES,
    REFERENCE_PROBE,
    ShallowTnnParams,
    spectral_loss,
    spectral_loss_gradients,
    small_weight_dominance_fraction,
)
from .model import ModelConfig, init_model, tt_from_cp
from .problems import REGISTRY, heat6d, make_problem, poisson3d, verify_manufactured, wave6d
from .spectrum import (
    axis_containment_check,
    dft_uniform,
    extract_frequencies,
    fft_radix2,
    naive_dft,
    top_m_frequencies,
)
from .training import draw_batches, loss_and_grad, assemble_loss


@dataclass
class Check:
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0


def _chain(kind: str, layers, x: float, want: int = 2) -> ad.Jet2:
    j = ad.Jet2(np.array([[x]]), np.ones((1, 1)), np.zeros((1, 1)))
    for w, b in layers:
        j = ad.jet_activate(kind, ad.jet_affine(w, b, j), want)
    return j


def _d1(f, x, h):
    """First derivative by Richardson-extrapolated central differences."""
    c = lambda h: (f(x + h) - f(x - h)) / (2 * h)
    return (4 * c(h / 2) - c(h)) / 3


def _d2(f, x, h):
    """Second derivative by Richardson-extrapolated central differences."""
    c = lambda h: (f(x + h) - 2 * f(x) + f(x - h)) / h**2
    return (4 * c(h / 2) - c(h)) / 3


def check_jets(seed: int = 0) -> tuple[bool, str]:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for kind in ad.ACTIVATIONS:
        for _ in range(5):
            depth = int(rng.integers(1, 5))
            widths = [1] + [int(rng.integers(1, 9)) for _ in range(depth)]
            layers = [(rng.normal(size=(a, b)) * 0.8, rng.normal(size=b) * 0.3) for a, b in zip(widths, widths[1:])]
            x = float(rng.uniform(-1, 1))
            j = _chain(kind, layers, x)
            f = lambda s: np.asarray(_chain(kind, layers, s, want=0).v).ravel()
            d1, d2 = _d1(f, x, 1e-4), _d2(f, x, 1e-3)
            worst = max(worst, ad.gradient_rel_error(np.ravel(j.d1), d1), ad.gradient_rel_error(np.ravel(j.d2), d2))
    return worst < 1e-6, f"max rel. error {worst:.2e} (< 1e-6)"


def check_model_derivatives(seed: int = 0) -> tuple[bool, str]:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for combiner in ("cp", "tt"):
        for d in (2, 3, 4):
            tt = (1,) + (3,) * (d - 1) + (1,) if combiner == "tt" else None
            cfg = ModelConfig(combiner, d, 4, tt_ranks=tt, hidden=(8,), activation="trigblend", m=4, sigma=1.0)
            model = init_model(cfg, seed + d)
            pts = rng.uniform(0.1, 0.9, size=(6, d))
            ev = model.eval_batch(pts, want=2)
            for k in range(d):
                e = np.zeros(d)
                e[k] = 1.0
                d1, d2 = _d1(lambda s: model(pts + s * e), 0.0, 1e-4), _d2(lambda s: model(pts + s * e), 0.0, 1e-3)
                worst = max(worst, ad.gradient_rel_error(ev.du[:, k], d1), ad.gradient_rel_error(ev.d2u[:, k], d2))
    return worst < 1e-5, f"max rel. error {worst:.2e} (< 1e-5)"


def check_parameter_gradient(seed: int = 0) -> tuple[bool, str]:
    problem = poisson3d(1, 2).with_(n_interior=16, n_boundary_per_face=2)
    cfg = ModelConfig("cp", 3, 2, hidden=(4,), activation="tanh", m=3, sigma=1.0)
    model = init_model(cfg, seed)
    batches = draw_batches(problem, [seed, 0, 0])
    _, _, g = loss_and_grad(problem, model, batches)

    def value(p):
        saved = model.flat.copy()
        model.flat[:] = p
        try:
            return float(assemble_loss(problem, model, batches)[0])
        finally:
            model.flat[:] = saved

    fd = ad.central_differences(value, model.flat.copy(), 1e-5)
    err = ad.gradient_rel_error(g, fd)
    return err < 1e-5, f"{model.n_params} parameters, max rel. error {err:.2e} (< 1e-5)"


def check_fft(seed: int = 0) -> tuple[bool, str]:
    rng = np.random.default_rng(seed)
    worst = 0.0
    n = 8
    while n <= 4096:
        x = rng.normal(size=n)
        worst = max(worst, float(np.max(np.abs(fft_radix2(x) - naive_dft(x)))))
        n *= 2
    return worst < 1e-9, f"N = 8..4096, max abs. error {worst:.2e} (< 1e-9)"


def check_parseval(seed: int = 0) -> tuple[bool, str]:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for n in (16, 256, 4096):
        x = rng.normal(size=n)
        spec = dft_uniform(x, n)
        lhs = float(np.sum(np.abs(spec.coeffs) ** 2))
        rhs = float(np.mean(x**2))
        worst = max(worst, abs(lhs - rhs) / rhs)
    return worst < 1e-9, f"max rel. error {worst:.2e} (< 1e-9)"


def check_cp_tt(seed: int = 0) -> tuple[bool, str]:
    cfg = ModelConfig("cp", 2, 5, hidden=(8,), activation="trigblend", m=4, sigma=2.0)
    cp = init_model(cfg, seed)
    cp.arrays()[-1][:] = np.random.default_rng(seed).normal(size=5)
    tt = tt_from_cp(cp)
    pts = np.random.default_rng(seed + 1).random((100, 2))
    err = float(np.max(np.abs(cp(pts) - tt(pts))))
    return err < 1e-12, f"max abs. difference {err:.2e} (< 1e-12)"


class _PlantedModel:
    """Minimal stand-in exposing planted component functions to the extractor."""

    def __init__(self, comps):
        self.comps = comps
        self.d = len(comps)

    def component_values(self, i, x):
        return np.column_stack([c(x) for c in self.comps[i]])

    def n_channels(self, i):
        return len(self.comps[i])


def check_plant_and_recover(seed: int = 0) -> tuple[bool, str]:
    rng = np.random.default_rng(seed)
    N, M = 512, 3
    planted_sets, comps = [], []
    for i in range(3):
        chans, union = [], set()
        for _ in range(2):
            ks = rng.choice(np.arange(1, N // 8 + 1), size=M, replace=False)
            amps = 2.0 ** -np.arange(M) * (1 + rng.random())
            phases = rng.uniform(0, 2 * np.pi, size=M)
            chans.append(lambda x, ks=ks, amps=amps, ph=phases:
                         sum(a * np.sin(2 * np.pi * k * x + p) for a, k, p in zip(amps, ks, ph)))
            union |= {int(k) for k in ks}
        comps.append(chans)
        planted_sets.append(sorted(union))
    ext = extract_frequencies(_PlantedModel(comps), M, 200, N)
    got = [list(s) for s in ext.freqs.sets]
    ok = got == planted_sets
    # the two-tone case with a weak high component
    mags = dft_uniform(np.sin(2 * np.pi * 10 * np.arange(1024) / 1024)
                       + 0.1 * np.sin(2 * np.pi * 160 * np.arange(1024) / 1024), 1024).magnitudes
    ok = ok and top_m_frequencies(mags, 2) == [10, 160]
    return ok, f"recovered {got}" if ok else f"planted {planted_sets}, recovered {got}"


def check_manufactured() -> tuple[bool, str]:
    worst, bad = 0.0, []
    shipped = [make_problem(n) for n in REGISTRY if n != "toy-fit"] + [poisson3d(2, 16), make_problem("poisson-ff", k=21)]
    for p in shipped:
        rep = verify_manufactured(p)
        worst = max(worst, rep.max_closed_form, rep.max_finite_diff)
        if not rep.ok:
            bad.append(p.name)
    # printed variants must be caught
    missed = [p.name + "(printed)" for p in (heat6d(variant="printed"), wave6d(variant="printed"))
              if verify_manufactured(p).ok]
    ok = not bad and not missed
    detail = f"{len(shipped)} problems, max residual {worst:.2e} (< 1e-6); printed variants rejected"
    if not ok:
        detail = f"failing: {bad}; undetected inconsistent variants: {missed}"
    return ok, detail


def check_containment(seed: int = 0) -> tuple[bool, str]:
    rng = np.random.default_rng(seed)
    d, r, N = 3, 3, 16
    factors = []
    for _ in range(r):
        row = []
        for _ in range(d):
            ks = rng.choice(np.arange(0, N // 2), size=2, replace=False)
            amps = rng.normal(size=2)
            row.append(lambda x, ks=ks, a=amps: sum(ai * np.cos(2 * np.pi * k * x) for ai, k in zip(a, ks)))
        factors.append(row)
    rep = axis_containment_check(factors, N)
    # the rank-two example with a spurious pair in the oversampled product
    s = lambda k: (lambda x: np.sin(2 * np.pi * k * x))
    ex = axis_containment_check([[s(1), s(1)], [s(10), s(10)], [lambda x: 0.1 * np.sin(2 * np.pi * 10 * x), s(1)]], 32)
    ok = rep.holds and ex.holds and all(set(u) >= {1, 10} for u in ex.component_unions) and (1, 10) in ex.noise
    return ok, f"random d=3 r=3 holds={rep.holds}; example noise pairs {sorted(ex.noise)}"


def check_spectral_gradients(seed: int = 0) -> tuple[bool, str]:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(200):
        r = int(rng.integers(1, 4))
        p = ShallowTnnParams(rng.normal(size=r), rng.uniform(0.5, 2, r) * rng.choice([-1, 1], r),
                             rng.uniform(0.5, 2, r) * rng.choice([-1, 1], r), rng.normal(size=r), rng.normal(size=r))
        k = tuple(rng.uniform(0.5, 3, 2) * rng.choice([-1, 1], 2))
        target = complex(rng.normal(), rng.normal()) * 0.1
        g = spectral_loss_gradients(p, target, k)
        closed = np.concatenate([g[n] for n in PARAM_FAMILIES])
        fd = ad.richardson_differences(lambda v: spectral_loss(ShallowTnnParams.from_vector(v), target, k),
                                       p.as_vector(), 1e-3)  # smaller steps are roundoff-bound
        worst = max(worst, ad.gradient_rel_error(closed, fd))
    return worst < 1e-6, f"200 random configurations, max rel. error {worst:.2e} (< 1e-6)"


def check_probe_trend(n: int = 20_000) -> tuple[bool, str]:
    deltas = (0.2, 0.1, 0.05, 0.01)
    fr = [small_weight_dominance_fraction(REFERENCE_PROBE, d, n, 0) for d in deltas]
    ok = all(b >= a for a, b in zip(fr, fr[1:])) and fr[-1] > 0.95
    return ok, "fractions " + ", ".join(f"{d:g}:{f:.4f}" for d, f in zip(deltas, fr))


CHECKS = [
    ("jet derivatives vs finite differences", check_jets),
    ("model du/d2u vs finite differences", check_model_derivatives),
    ("PINN loss gradient vs finite differences", check_parameter_gradient),
    ("FFT vs naive DFT", check_fft),
    ("Parseval identity", check_parseval),
    ("CP/TT equivalence (d=2)", check_cp_tt),
    ("plant-and-recover extraction", check_plant_and_recover),
    ("manufactured-solution residuals", check_manufactured),
    ("axis frequency containment", check_containment),
    ("spectral-loss gradients vs finite differences", check_spectral_gradients),
    ("small-weight probe trend", check_probe_trend),
]


def run_verify(log=print) -> list[Check]:
    results = []
    for name, fn in CHECKS:
        t0 = time.perf_counter()
        try:
            ok, detail = fn()
        except Exception as exc:  # a crashing check is a failing check
            ok, detail = False, f"raised {exc!r}"
        results.append(Check(name, bool(ok), detail, time.perf_counter() - t0))
        log(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
    return results
