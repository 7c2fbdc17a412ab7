"""Spectral-bias laboratory for the shallow two-dimensional tanh tensor network.

The model is ``U(x, y) = sum_j a_j tanh(wx_j x + bx_j) tanh(wy_j y + by_j)``.
Its 2-D Fourier transform (unitary angular convention,
``F[g](k) = (1/2 pi) \\int g(x) e^{-i k.x} dx``) has a closed form away from
the axes, which gives closed-form gradients of the pointwise spectral loss
``L(k) = |F[U](k) - F[f](k)|^2``.  The same closed form, evaluated in the log
domain, drives a Monte-Carlo probe of how often small weights favour the
lower of two frequencies.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .io import write_csv
from .model import ModelConfig, TnnModel, glorot_normal, init_model
from .problems import toy_fit_target
from .spectrum import fft_radix2
from .training import AdamState, Batches, adam_step, loss_and_grad, lr_at

# transform prefactor: (1/2pi) * (-i pi)^2 per unit
TRANSFORM_SCALE = -math.pi / 2.0

PARAM_FAMILIES = ("a", "wx", "wy", "bx", "by")


@dataclass
class ShallowTnnParams:
    a: np.ndarray
    wx: np.ndarray
    wy: np.ndarray
    bx: np.ndarray
    by: np.ndarray

    def __post_init__(self):
        for name in PARAM_FAMILIES:
            arr = np.atleast_1d(np.asarray(getattr(self, name), dtype=np.float64))
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"parameter {name} has non-finite entries")
            setattr(self, name, arr)
        if len({getattr(self, n).shape for n in PARAM_FAMILIES}) != 1:
            raise ValueError("all parameter families need the same length")

    @property
    def r(self) -> int:
        return self.a.size

    def evaluate(self, x, y):
        x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
        tx = np.tanh(np.multiply.outer(x, self.wx) + self.bx)
        ty = np.tanh(np.multiply.outer(y, self.wy) + self.by)
        return (tx * ty) @ self.a

    def as_vector(self) -> np.ndarray:
        return np.concatenate([getattr(self, n) for n in PARAM_FAMILIES])

    @classmethod
    def from_vector(cls, vec) -> "ShallowTnnParams":
        parts = np.split(np.asarray(vec, dtype=np.float64), len(PARAM_FAMILIES))
        return cls(*parts)

    @classmethod
    def from_model(cls, model: TnnModel) -> "ShallowTnnParams":
        cfg = model.config
        if cfg.combiner != "cp" or cfg.d != 2 or cfg.hidden or not cfg.output_activation \
                or cfg.activation != "tanh" or cfg.feature_mode != "none":
            raise ValueError("model is not a shallow two-dimensional tanh CP network")
        w0, b0, w1, b1, a = model.arrays()
        return cls(a, w0[0], w1[0], b0, b1)


def _log_abs_sinh(z):
    az = np.abs(z)
    return az + np.log1p(-np.exp(-2.0 * az)) - math.log(2.0)


def _check_k(k):
    kx, ky = (float(v) for v in k)
    if kx == 0.0 or ky == 0.0:
        raise ValueError("closed form needs k_x != 0 and k_y != 0")
    return kx, ky


def _check_w(p: ShallowTnnParams):
    if np.any(p.wx == 0.0) or np.any(p.wy == 0.0):
        raise ValueError("closed form needs every w_x, w_y nonzero")


def _unit_terms(p: ShallowTnnParams, kx: float, ky: float):
    """Per-unit sign, log|A_j| and phase theta_j, where F[U] = sum a_j A_j e^{i theta_j}."""
    zx = math.pi * kx / (2.0 * p.wx)
    zy = math.pi * ky / (2.0 * p.wy)
    log_a = math.log(abs(TRANSFORM_SCALE)) - np.log(np.abs(p.wx * p.wy)) - _log_abs_sinh(zx) - _log_abs_sinh(zy)
    sign = np.sign(TRANSFORM_SCALE) * np.sign(zx) * np.sign(zy)
    theta = kx * p.bx / p.wx + ky * p.by / p.wy
    return sign, log_a, theta, zx, zy


def spectral_transform(params: ShallowTnnParams, k) -> complex:
    """Closed-form ``F[U](k_x, k_y)`` for ``k_x, k_y != 0``."""
    kx, ky = _check_k(k)
    _check_w(params)
    sign, log_a, theta, _, _ = _unit_terms(params, kx, ky)
    return complex(np.sum(params.a * sign * np.exp(log_a) * np.exp(1j * theta)))


@dataclass
class SpectralError:
    """``D = F[U] - F[f]`` at one frequency, in polar form, with per-unit auxiliaries."""

    D: complex
    modulus: float
    theta: float
    A: np.ndarray  # signed per-unit amplitude A_j
    theta_j: np.ndarray

    @property
    def loss(self) -> float:
        return self.modulus**2


def spectral_error(params: ShallowTnnParams, target: complex, k) -> SpectralError:
    kx, ky = _check_k(k)
    _check_w(params)
    sign, log_a, theta_j, _, _ = _unit_terms(params, kx, ky)
    A = sign * np.exp(log_a)
    D = complex(np.sum(params.a * A * np.exp(1j * theta_j))) - complex(target)
    return SpectralError(D, abs(D), math.atan2(D.imag, D.real), A, theta_j)


def spectral_loss(params: ShallowTnnParams, target: complex, k) -> float:
    return spectral_error(params, target, k).loss


def spectral_loss_gradients(params: ShallowTnnParams, target: complex, k) -> dict[str, np.ndarray]:
    """Closed-form gradients of ``|D(k)|^2`` for each parameter family.

    With ``Delta_j = theta_j - theta``::

        dL/da_j  = 2 |D| A_j cos(Delta_j)
        dL/dbx_j = -2 |D| a_j A_j (k_x / wx_j) sin(Delta_j)
        dL/dwx_j = 2 |D| a_j A_j [g_x cos(Delta_j) + (k_x bx_j / wx_j^2) sin(Delta_j)]

    where ``g_x = -1/wx_j + pi k_x coth(pi k_x / 2 wx_j) / (2 wx_j^2)`` is the
    logarithmic derivative of ``A_j`` in ``wx_j``; the y-families mirror x.
    """
    kx, ky = _check_k(k)
    err = spectral_error(params, target, k)
    p = params
    if err.modulus == 0.0:
        return {n: np.zeros(p.r) for n in PARAM_FAMILIES}
    delta = err.theta_j - err.theta
    c, s = np.cos(delta), np.sin(delta)
    scale = 2.0 * err.modulus * err.A
    zx = math.pi * kx / (2.0 * p.wx)
    zy = math.pi * ky / (2.0 * p.wy)
    gx = -1.0 / p.wx + math.pi * kx / (2.0 * p.wx**2 * np.tanh(zx))
    gy = -1.0 / p.wy + math.pi * ky / (2.0 * p.wy**2 * np.tanh(zy))
    return {
        "a": scale * c,
        "wx": scale * p.a * (gx * c + kx * p.bx / p.wx**2 * s),
        "wy": scale * p.a * (gy * c + ky * p.by / p.wy**2 * s),
        "bx": -scale * p.a * (kx / p.wx) * s,
        "by": -scale * p.a * (ky / p.wy) * s,
    }


def _log_gradient_magnitudes(a, wx, wy, bx, by, target: complex, kx: float, ky: float):
    """``log |dL/dTheta_jl|`` for a batch of weight samples, safe against sinh overflow.

    ``wx``/``wy`` have shape ``(m, r)``; returns ``(log_grads (m, 5, r), |D| (m,))``.
    """
    zx = math.pi * kx / (2.0 * wx)
    zy = math.pi * ky / (2.0 * wy)
    log_a = math.log(abs(TRANSFORM_SCALE)) - np.log(np.abs(wx * wy)) - _log_abs_sinh(zx) - _log_abs_sinh(zy)
    sign = np.sign(TRANSFORM_SCALE) * np.sign(zx) * np.sign(zy)
    theta_j = kx * bx / wx + ky * by / wy
    D = np.sum(a * sign * np.exp(log_a) * np.exp(1j * theta_j), axis=1) - complex(target)
    delta = theta_j - np.angle(D)[:, None]
    c, s = np.cos(delta), np.sin(delta)
    gx = -1.0 / wx + math.pi * kx / (2.0 * wx**2 * np.tanh(zx))
    gy = -1.0 / wy + math.pi * ky / (2.0 * wy**2 * np.tanh(zy))
    factors = np.stack([
        c,
        a * (gx * c + kx * bx / wx**2 * s),
        a * (gy * c + ky * by / wy**2 * s),
        a * (kx / wx) * s,
        a * (ky / wy) * s,
    ], axis=1)
    with np.errstate(divide="ignore"):
        logs = np.log(2.0 * np.abs(D))[:, None, None] + log_a[:, None, :] + np.log(np.abs(factors))
    return logs, np.abs(D)


@dataclass(frozen=True)
class ProbeConfig:
    """Fixed quantities of the small-weight probe; only |w| is sampled."""

    a: tuple[float, ...]
    bx: tuple[float, ...]
    by: tuple[float, ...]
    k1: tuple[float, float]
    k2: tuple[float, float]
    target1: complex
    target2: complex


REFERENCE_PROBE = ProbeConfig(
    a=(1.0, -0.7),
    bx=(0.3, -0.5),
    by=(0.4, 0.2),
    k1=(1.0, 1.0),
    k2=(1.1, 1.1),
    target1=1.0 + 0.5j,
    target2=0.9 + 0.0j,
)


def small_weight_dominance_fraction(cfg: ProbeConfig, delta: float, n: int = 100_000, seed: int = 0,
                                    c1: float = 1e-3, c2: float = 1e3, chunk: int = 20_000) -> float:
    """Fraction of ``|w| ~ U(0, delta]^2`` (per unit) where every gradient at ``k1`` dominates ``k2``.

    Samples are ``w = delta * u`` with ``u`` drawn once per seed, so sweeps
    over ``delta`` use common random numbers.
    """
    (k1x, k1y), (k2x, k2y) = cfg.k1, cfg.k2
    if not (k2x > k1x > 0 and k2y > k1y > 0):
        raise ValueError("need k2_x > k1_x > 0 and k2_y > k1_y > 0")
    if any(b == 0 for b in cfg.bx + cfg.by):
        raise ValueError("biases must be nonzero")
    if not 0 < delta:
        raise ValueError("delta must be positive")
    r = len(cfg.a)
    a, bx, by = (np.asarray(v, dtype=np.float64) for v in (cfg.a, cfg.bx, cfg.by))
    rng = np.random.default_rng(seed)
    hits = 0
    worst1, worst2 = math.inf, 0.0
    for lo in range(0, n, chunk):
        m = min(chunk, n - lo)
        # 1 - U lies in (0, 1]
        u = 1.0 - rng.random((m, 2, r))
        wx, wy = delta * u[:, 0], delta * u[:, 1]
        g1, d1 = _log_gradient_magnitudes(a, wx, wy, bx, by, cfg.target1, k1x, k1y)
        g2, d2 = _log_gradient_magnitudes(a, wx, wy, bx, by, cfg.target2, k2x, k2y)
        worst1, worst2 = min(worst1, float(d1.min())), max(worst2, float(d2.max()))
        hits += int(np.sum(np.all(g1 >= g2, axis=(1, 2))))
    if worst1 <= c1 or worst2 >= c2:
        raise ValueError(f"spectral error bounds violated: min |D(k1)| = {worst1:.3g} (need > {c1}), "
                         f"max |D(k2)| = {worst2:.3g} (need < {c2})")
    return hits / n


# -- toy fit ---------------------------------------------------------------------


@dataclass
class ToyFitConfig:
    ks: tuple[int, ...] = (2, 4, 6)
    rank: int = 100
    epochs: int = 20_000
    lr0: float = 1e-3
    decay: float = 0.98
    decay_every: int = 1000
    grid: int = 64  # training and analysis points per axis on [0, 2 pi)
    eval_every: int = 100
    threshold: float = 0.3
    seed: int = 0


@dataclass
class ToyFitResult:
    ks: tuple[int, ...]
    epochs: list[int]
    # deltas[direction][k] -> list aligned with ``epochs``
    deltas: dict[str, dict[int, list[float]]]
    target_magnitudes: dict[str, np.ndarray]
    threshold: float
    model: TnnModel

    def first_converged(self, direction: str, k: int) -> float:
        """First recorded epoch with ``Delta_k < threshold`` (inf if never)."""
        for e, v in zip(self.epochs, self.deltas[direction][k]):
            if v < self.threshold:
                return e
        return math.inf

    def ordering_holds(self) -> bool:
        for direction in ("x", "y"):
            firsts = [self.first_converged(direction, k) for k in sorted(self.ks)]
            if any(b < a for a, b in zip(firsts, firsts[1:])):
                return False
        return True

    def rows(self) -> list[list]:
        out = []
        for i, e in enumerate(self.epochs):
            for direction in ("x", "y"):
                for k in self.ks:
                    out.append([e, direction, k, self.deltas[direction][k][i]])
        return out


def shallow_tnn(rank: int, seed: int) -> TnnModel:
    """Shallow 2-D tanh CP network; output weights get Glorot draws so the start is near zero."""
    cfg = ModelConfig("cp", 2, rank, hidden=(), activation="tanh", feature_mode="none", output_activation=True)
    model = init_model(cfg, seed)
    rng = np.random.default_rng([seed, 1])
    model.arrays()[-1][:] = glorot_normal(rng, rank, 1)[:, 0]
    return model


def dft2(values: np.ndarray) -> np.ndarray:
    """Normalized 2-D DFT of an ``N x N`` grid (axis 0 = x)."""
    n0, n1 = values.shape
    out = fft_radix2(values) / n0
    return fft_radix2(out.T).T / n1


def axis_spectra(values: np.ndarray) -> tuple[dict[str, np.ndarray], np.ndarray]:
    """Magnitudes along the ``k_y = 0`` row (x) and ``k_x = 0`` column (y), bins 0..N/2.

    Also returns the full coefficient grid.
    """
    c = dft2(values)
    half = values.shape[0] // 2 + 1
    return {"x": np.abs(c[:half, 0]), "y": np.abs(c[0, :half])}, c


def toy_fit(cfg: ToyFitConfig) -> ToyFitResult:
    """Fit ``sum_k sin(k x) + sin(k y)`` on ``[0, 2 pi]^2`` and track per-peak spectral errors."""
    problem = toy_fit_target(cfg.ks)
    n = cfg.grid
    if max(cfg.ks) >= n // 2:
        raise ValueError("grid too coarse for the requested frequencies")
    axis = 2.0 * math.pi * np.arange(n) / n
    xx, yy = np.meshgrid(axis, axis, indexing="ij")
    pts = np.column_stack([xx.ravel(), yy.ravel()])
    target_grid = problem.exact_value(pts).reshape(n, n)
    tmags, tc = axis_spectra(target_grid)
    target = {"x": tc[:, 0], "y": tc[0, :]}

    model = shallow_tnn(cfg.rank, cfg.seed)
    state = AdamState.zeros(model.n_params)
    batches = Batches(pts)
    epochs, deltas = [], {"x": {k: [] for k in cfg.ks}, "y": {k: [] for k in cfg.ks}}

    def record(epoch):
        _, c = axis_spectra(model(pts).reshape(n, n))
        net = {"x": c[:, 0], "y": c[0, :]}
        epochs.append(epoch)
        for direction in ("x", "y"):
            for k in cfg.ks:
                deltas[direction][k].append(float(abs(net[direction][k] - target[direction][k])
                                                  / abs(target[direction][k])))

    for epoch in range(cfg.epochs):
        if epoch % cfg.eval_every == 0:
            record(epoch)
        _, _, grads = loss_and_grad(problem, model, batches)
        adam_step(state, model.flat, grads, lr_at(epoch, cfg.lr0, cfg.decay, cfg.decay_every))
    record(cfg.epochs)
    return ToyFitResult(tuple(cfg.ks), epochs, deltas, tmags, cfg.threshold, model)


def write_toy_fit(result: ToyFitResult, out_dir) -> list:
    out = Path(out_dir)
    files = [write_csv(out / "toy_fit_deltas.csv", ["epoch", "direction", "k", "delta"], result.rows())]
    rows = [[d, k, m] for d in ("x", "y") for k, m in enumerate(result.target_magnitudes[d])]
    files.append(write_csv(out / "toy_fit_target_spectrum.csv", ["direction", "k", "magnitude"], rows))
    firsts = [[d, k, result.first_converged(d, k)] for d in ("x", "y") for k in result.ks]
    files.append(write_csv(out / "toy_fit_first_converged.csv", ["direction", "k", "epoch"], firsts))
    return files


def write_probe(rows, out_dir) -> list:
    return [write_csv(Path(out_dir) / "small_weight_probe.csv", ["delta", "fraction"], rows)]
