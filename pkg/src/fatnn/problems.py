"""Benchmark PDEs with manufactured solutions.

A manufactured solution is a sum of separable terms
``c * prod_i g_i(x_i) * tau(t)`` where each ``g_i`` is ``sin(w x)``,
``cos(w x)`` or ``1`` and ``tau`` is ``1``, ``exp(-t)`` or ``cos(w t)``.
Values, gradients, diagonal Hessians and time derivatives all have closed
forms, and source terms are produced by applying the operator to them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

PI = math.pi

KINDS = ("poisson", "helmholtz", "heat", "wave", "fit")


@dataclass(frozen=True)
class Factor:
    """One-dimensional factor ``sin(w x)``, ``cos(w x)`` or the constant 1."""

    kind: str
    w: float = 0.0

    def derivs(self, x):
        if self.kind == "one":
            one = np.ones_like(x)
            return one, np.zeros_like(x), np.zeros_like(x)
        s, c = np.sin(self.w * x), np.cos(self.w * x)
        if self.kind == "sin":
            return s, self.w * c, -self.w**2 * s
        if self.kind == "cos":
            return c, -self.w * s, -self.w**2 * c
        raise ValueError(f"unknown factor kind {self.kind!r}")


@dataclass(frozen=True)
class TimeFactor:
    kind: str = "one"
    w: float = 0.0

    def derivs(self, t):
        if self.kind == "one":
            return np.ones_like(t), np.zeros_like(t), np.zeros_like(t)
        if self.kind == "exp":
            e = np.exp(-t)
            return e, -e, e
        if self.kind == "cos":
            c, s = np.cos(self.w * t), np.sin(self.w * t)
            return c, -self.w * s, -self.w**2 * c
        raise ValueError(f"unknown time factor {self.kind!r}")


@dataclass(frozen=True)
class Term:
    coeff: float
    factors: dict  # dimension -> Factor; missing dimensions are 1
    time: TimeFactor = TimeFactor()


@dataclass(frozen=True)
class ManufacturedSolution:
    """Sum of separable sinusoid terms over ``d`` spatial dimensions."""

    d: int
    terms: tuple[Term, ...]

    def evaluate(self, x, t=None):
        """Closed-form (u, grad, diag Hessian, u_t, u_tt); grad and Hessian are ``(B, d)``."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        B = x.shape[0]
        t = np.zeros(B) if t is None else np.broadcast_to(np.asarray(t, dtype=np.float64), (B,))
        u = np.zeros(B)
        grad = np.zeros((B, self.d))
        hess = np.zeros((B, self.d))
        ut = np.zeros(B)
        utt = np.zeros(B)
        for term in self.terms:
            vals = {}
            for i, f in term.factors.items():
                vals[i] = f.derivs(x[:, i])
            prod = np.full(B, term.coeff, dtype=np.float64)
            for v, _, _ in vals.values():
                prod = prod * v
            tv, tv1, tv2 = term.time.derivs(t)
            u += prod * tv
            ut += prod * tv1
            utt += prod * tv2
            for k, (v, v1, v2) in vals.items():
                rest = np.full(B, term.coeff, dtype=np.float64)
                for i, (w, _, _) in vals.items():
                    if i != k:
                        rest = rest * w
                grad[:, k] += rest * v1 * tv
                hess[:, k] += rest * v2 * tv
        return u, grad, hess, ut, utt

    def value(self, x, t=None):
        return self.evaluate(x, t)[0]


@dataclass(frozen=True)
class ProblemSpec:
    """A PDE on the unit cube (times ``(0, T]`` when time-dependent).

    ``coeffs`` holds the operator constants: ``lam`` (Helmholtz),
    ``kappa`` (per-dimension heat diffusivities) or ``c2`` (wave speed
    squared).  Source terms for Poisson and Helmholtz are generated from the
    exact solution; heat and wave are homogeneous as posed.
    """

    name: str
    kind: str
    d: int
    exact: ManufacturedSolution
    coeffs: dict = field(default_factory=dict)
    T: float = 0.0
    boundary_weight: float = 100.0
    omega_u: float = 10_000.0
    omega_ut: float = 1_000.0
    n_interior: int = 4000
    n_boundary_per_face: int = 100
    n_initial: int = 1000
    top_m: int = 10
    domain_scale: float = 1.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown problem kind {self.kind!r}")
        for k, v in self.coeffs.items():
            if not np.all(np.isfinite(v)):
                raise ValueError(f"coefficient {k} is not finite")
        if self.time_dependent and not self.T > 0:
            raise ValueError("time-dependent problems need T > 0")

    @property
    def time_dependent(self) -> bool:
        return self.kind in ("heat", "wave")

    @property
    def n_inputs(self) -> int:
        """Network input count: spatial dimensions plus time."""
        return self.d + (1 if self.time_dependent else 0)

    def with_(self, **kw) -> "ProblemSpec":
        return replace(self, **kw)

    # -- exact data -------------------------------------------------------

    def split(self, points):
        points = np.atleast_2d(np.asarray(points, dtype=np.float64))
        if self.time_dependent:
            return points[:, : self.d], points[:, self.d]
        return points, None

    def exact_value(self, points):
        x, t = self.split(points)
        return self.exact.value(x, t)

    def operator(self, u, grad_t, hess, ut, utt):
        """Apply the differential operator to given derivative data."""
        lap = hess.sum(axis=1)
        if self.kind == "poisson":
            return -lap
        if self.kind == "helmholtz":
            return -lap + self.coeffs["lam"] ** 2 * u
        if self.kind == "heat":
            kappa = np.asarray(self.coeffs["kappa"], dtype=np.float64)
            return ut - hess @ kappa
        if self.kind == "wave":
            return utt - self.coeffs["c2"] * lap
        raise ValueError(f"{self.kind} problems have no differential operator")

    def source(self, points):
        """Right-hand side f at interior points."""
        if self.time_dependent:
            return np.zeros(np.atleast_2d(points).shape[0])
        x, t = self.split(points)
        u, g, h, ut, utt = self.exact.evaluate(x, t)
        return self.operator(u, g, h, ut, utt)

    def initial_value(self, x):
        """h(x) = u(x, 0) with its spatial derivatives: (value, grad, diag Hessian)."""
        u, g, h, _, _ = self.exact.evaluate(x, np.zeros(np.atleast_2d(x).shape[0]))
        return u, g, h


def _sines(d, terms_per_dim):
    """Sum over dimensions of ``sum_j a_j sin(w_j x_i)``."""
    out = []
    for i in range(d):
        for a, w in terms_per_dim:
            out.append(Term(a, {i: Factor("sin", w)}))
    return tuple(out)


def poisson3d(k1: float = 10, k2: float = 160, **kw) -> ProblemSpec:
    """Three separable rank-one products mixing two frequency scales."""
    lo, hi = 2 * k1 * PI, 2 * k2 * PI
    terms = (
        Term(1.0, {0: Factor("sin", lo), 1: Factor("sin", lo), 2: Factor("sin", hi)}),
        Term(1.0, {0: Factor("sin", lo), 1: Factor("sin", hi), 2: Factor("sin", lo)}),
        Term(1.0, {0: Factor("sin", hi), 1: Factor("sin", lo), 2: Factor("sin", lo)}),
    )
    kw.setdefault("top_m", 10)
    return ProblemSpec("poisson3d", "poisson", 3, ManufacturedSolution(3, terms), **kw)


def poisson12d(ks=(1, 120, 240, 480), amps=(1.0, 1.0, 0.1, 0.05), d: int = 12, **kw) -> ProblemSpec:
    terms = _sines(d, [(a, 2 * k * PI) for a, k in zip(amps, ks)])
    kw.setdefault("top_m", 5)
    return ProblemSpec("poisson12d", "poisson", d, ManufacturedSolution(d, terms), **kw)


def poisson_ff(k: float = 20, d: int = 6, **kw) -> ProblemSpec:
    """sum_i sin(2 pi x_i) + 0.1 sin(k pi x_i); boundary data is nonzero for odd k."""
    terms = _sines(d, [(1.0, 2 * PI), (0.1, k * PI)])
    return ProblemSpec(f"poisson{d}d-ff-k{k:g}", "poisson", d, ManufacturedSolution(d, terms), **kw)


def heat6d(ks=(200, 200, 200, 400, 400, 400), variant: str = "corrected", **kw) -> ProblemSpec:
    """exp(-t) sum_i (sin(k_{2i-1} pi x_{2i-1}) + cos(k_{2i} pi x_{2i})) with kappa_i = 1/(k_i pi)^2.

    ``variant='printed'`` drops the pi inside the sinusoids, which no longer
    satisfies the equation; it exists so the mismatch can be inspected.
    """
    d = len(ks)
    scale = PI if variant == "corrected" else 1.0
    terms = []
    for i in range(0, d, 2):
        terms.append(Term(1.0, {i: Factor("sin", ks[i] * scale)}, TimeFactor("exp")))
        terms.append(Term(1.0, {i + 1: Factor("cos", ks[i + 1] * scale)}, TimeFactor("exp")))
    kappa = tuple(1.0 / (k * PI) ** 2 for k in ks)
    kw.setdefault("top_m", 50)
    return ProblemSpec(f"heat{d}d", "heat", d, ManufacturedSolution(d, tuple(terms)),
                       coeffs={"kappa": kappa}, T=1.0, **kw)


def wave6d(d: int = 6, variant: str = "corrected", k1: float = 150, k2: float = 300, **kw) -> ProblemSpec:
    """sum_i sin(k1 pi x_i) cos(2 pi t) + sin(k2 pi x_i) cos(4 pi t).

    The matching wave speed is c^2 = (2/k1)^2 (1/5625 for k1 = 150);
    ``variant='printed'`` uses c^2 = 1/75 instead.
    """
    terms = []
    for i in range(d):
        terms.append(Term(1.0, {i: Factor("sin", k1 * PI)}, TimeFactor("cos", 2 * PI)))
        terms.append(Term(1.0, {i: Factor("sin", k2 * PI)}, TimeFactor("cos", 4 * PI)))
    c2 = (2.0 / k1) ** 2 if variant == "corrected" else 1.0 / 75.0
    kw.setdefault("top_m", 10)
    return ProblemSpec(f"wave{d}d", "wave", d, ManufacturedSolution(d, tuple(terms)),
                       coeffs={"c2": c2}, T=1.0, **kw)


def helmholtz6d(d: int = 6, k: float = 360, lam: float = 1.0, **kw) -> ProblemSpec:
    terms = _sines(d, [(1.0, k * PI)])
    kw.setdefault("top_m", 10)
    return ProblemSpec(f"helmholtz{d}d", "helmholtz", d, ManufacturedSolution(d, terms),
                       coeffs={"lam": lam}, **kw)


def toy_fit_target(ks=(2, 4, 6)) -> ProblemSpec:
    """f(x, y) = sum_k sin(k x) + sin(k y) on [0, 2 pi]^2."""
    terms = tuple(Term(1.0, {0: Factor("sin", k)}) for k in ks) + tuple(
        Term(1.0, {1: Factor("sin", k)}) for k in ks
    )
    return ProblemSpec("toy-fit", "fit", 2, ManufacturedSolution(2, terms), domain_scale=2 * PI)


REGISTRY = {
    "poisson3d": poisson3d,
    "poisson12d": poisson12d,
    "poisson-ff": poisson_ff,
    "heat6d": heat6d,
    "wave6d": wave6d,
    "helmholtz6d": helmholtz6d,
    "toy-fit": toy_fit_target,
}


def make_problem(name: str, **params) -> ProblemSpec:
    try:
        factory = REGISTRY[name]
    except KeyError:
        raise ValueError(f"unknown problem {name!r}; known: {sorted(REGISTRY)}") from None
    return factory(**params)


# -- sampling ---------------------------------------------------------------


def sample_interior(problem: ProblemSpec, n: int, seed) -> np.ndarray:
    """Uniform points strictly inside the domain (time in (0, T] for evolution problems)."""
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    # 1 - U with U in [0, 1) lands in (0, 1]; redraw the measure-zero x = 1 case
    x = rng.random((n, problem.d))
    while np.any(x == 0.0):
        x[x == 0.0] = rng.random(int(np.sum(x == 0.0)))
    x *= problem.domain_scale
    if problem.time_dependent:
        t = problem.T * (1.0 - rng.random(n))
        return np.column_stack([x, t])
    return x


def sample_boundary(problem: ProblemSpec, n: int, seed) -> np.ndarray:
    """Uniform points on uniformly chosen faces of the spatial cube.

    Exactly one spatial coordinate is 0 or 1; time (if any) is uniform on (0, T].
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    d = problem.d
    x = rng.random((n, d))
    while np.any(x == 0.0):
        x[x == 0.0] = rng.random(int(np.sum(x == 0.0)))
    face = rng.integers(0, 2 * d, size=n)
    x[np.arange(n), face // 2] = (face % 2).astype(np.float64)
    x *= problem.domain_scale
    if problem.time_dependent:
        t = problem.T * (1.0 - rng.random(n))
        return np.column_stack([x, t])
    return x


def sample_initial(problem: ProblemSpec, n: int, seed) -> np.ndarray:
    """Interior spatial points at t = 0."""
    if not problem.time_dependent:
        raise ValueError("initial samples only exist for time-dependent problems")
    pts = sample_interior(problem, n, seed)
    pts[:, -1] = 0.0
    return pts


def on_boundary(problem: ProblemSpec, points, tol: float = 0.0) -> np.ndarray:
    x, _ = problem.split(points)
    s = problem.domain_scale
    return np.any((np.abs(x) <= tol) | (np.abs(x - s) <= tol), axis=1)


def exact_sq_norm(problem: ProblemSpec, n: int, seed) -> float:
    """Monte-Carlo mean of u_exact^2 over the (space-time) domain."""
    pts = sample_interior(problem, n, seed)
    return float(np.mean(problem.exact_value(pts) ** 2))


# -- residuals ----------------------------------------------------------------


@dataclass
class FieldDerivs:
    """Derivative data of a candidate solution at a batch of points.

    ``hess`` holds the spatial diagonal second derivatives ``(B, d)``;
    ``ut``/``utt`` are only needed for evolution problems.
    """

    u: object
    hess: object = None
    ut: object = None
    utt: object = None


def residual(problem: ProblemSpec, derivs: FieldDerivs, points):
    """Interior residual N(u) - f.

    Works on numpy arrays or on tape nodes (``hess`` may then be a list of
    per-dimension nodes).
    """
    from . import autodiff as ad

    need = {"poisson": ("hess",), "helmholtz": ("hess",), "heat": ("hess", "ut"), "wave": ("hess", "utt")}
    if problem.kind not in need:
        raise ValueError(f"{problem.kind} problems have no PDE residual")
    for slot in need[problem.kind]:
        if getattr(derivs, slot) is None:
            raise ValueError(f"{problem.kind} residual needs the {slot!r} slot")
    hess = derivs.hess
    if isinstance(hess, (list, tuple)):
        cols = list(hess)
    else:
        hess = np.asarray(hess)
        cols = [hess[:, i] for i in range(problem.d)]
    if problem.kind == "heat":
        kappa = problem.coeffs["kappa"]
        diff = None
        for k, c in zip(kappa, cols):
            term = ad.mul(c, k)
            diff = term if diff is None else ad.add(diff, term)
        return ad.sub(derivs.ut, diff)
    lap = cols[0]
    for c in cols[1:]:
        lap = ad.add(lap, c)
    if problem.kind == "wave":
        return ad.sub(derivs.utt, ad.mul(lap, problem.coeffs["c2"]))
    out = ad.mul(lap, -1.0)
    if problem.kind == "helmholtz":
        out = ad.add(out, ad.mul(derivs.u, problem.coeffs["lam"] ** 2))
    return ad.sub(out, problem.source(points))


def exact_derivs(problem: ProblemSpec, points) -> FieldDerivs:
    x, t = problem.split(points)
    u, _, h, ut, utt = problem.exact.evaluate(x, t)
    return FieldDerivs(u, h, ut, utt)


@dataclass
class VerifyReport:
    problem: str
    max_closed_form: float
    max_finite_diff: float
    tol: float
    failures: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.failures


def verify_manufactured(problem: ProblemSpec, n_points: int = 1000, tol: float = 1e-6, seed: int = 0) -> VerifyReport:
    """Check that the exact solution satisfies the PDE.

    Two routes: the closed-form derivatives, and central finite differences
    of the exact value alone.  Residuals are scaled by the size of the
    largest operator term so the tolerance is relative.
    """
    pts = sample_interior(problem, n_points, seed)
    x, t = problem.split(pts)
    u, g, h, ut, utt = problem.exact.evaluate(x, t)
    res = residual(problem, FieldDerivs(u, h, ut, utt), pts)
    scale = _operator_scale(problem, u, h, ut, utt)
    closed = float(np.max(np.abs(res)) / scale)

    # finite differences of u_exact only; step scaled to the highest frequency
    wmax = max((f.w for term in problem.exact.terms for f in term.factors.values()), default=1.0)
    step = 1e-3 / max(wmax, 1.0)
    fd_h = np.zeros_like(h)
    for k in range(problem.d):
        xp, xm = x.copy(), x.copy()
        xp[:, k] += step
        xm[:, k] -= step
        fd_h[:, k] = (problem.exact.value(xp, t) - 2 * u + problem.exact.value(xm, t)) / step**2
    fd_ut = fd_utt = None
    if problem.time_dependent:
        tstep = 1e-4
        up, um = problem.exact.value(x, t + tstep), problem.exact.value(x, t - tstep)
        fd_ut = (up - um) / (2 * tstep)
        fd_utt = (up - 2 * u + um) / tstep**2
    res_fd = residual(problem, FieldDerivs(u, fd_h, fd_ut, fd_utt), pts)
    fd = float(np.max(np.abs(res_fd)) / scale)
    report = VerifyReport(problem.name, closed, fd, tol)
    if closed > tol:
        report.failures.append(f"closed-form residual {closed:.3e} exceeds {tol:g}")
    if fd > tol:
        report.failures.append(f"finite-difference residual {fd:.3e} exceeds {tol:g}")
    return report


def _operator_scale(problem, u, h, ut, utt) -> float:
    """Magnitude of the largest individual term of the operator."""
    lap = np.abs(h.sum(axis=1))
    if problem.kind == "heat":
        parts = [np.abs(ut), np.abs(h @ np.asarray(problem.coeffs["kappa"]))]
    elif problem.kind == "wave":
        parts = [np.abs(utt), problem.coeffs["c2"] * lap]
    elif problem.kind == "helmholtz":
        parts = [lap, problem.coeffs["lam"] ** 2 * np.abs(u)]
    else:
        parts = [lap]
    return max(1.0, float(max(np.max(p) for p in parts)))
