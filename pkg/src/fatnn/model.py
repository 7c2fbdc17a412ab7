"""CP- and TT-format tensor neural networks with Fourier feature inputs.

Each input dimension ``i`` owns a subnetwork that maps the scalar ``x_i`` to
a vector of channels.  The CP combiner forms ``sum_a W_a prod_i f_i(x_i, a)``;
the TT combiner reshapes channels into ``r_{i-1} x r_i`` cores and contracts
the chain ``A_1(x_1) A_2(x_2) ... A_d(x_d)``.

Because every subnetwork has a scalar input, first and second partial
derivatives of the output along each axis come from forward jets, and mixed
partials are never needed.
"""

from __future__ import annotations

import base64
import hashlib
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Jet2

TWO_PI = 2.0 * math.pi


@dataclass(frozen=True)
class ModelConfig:
    """Architecture of a tensor network.

    ``d`` counts every input the network sees (time included).  ``hidden``
    lists hidden-layer widths; the subnetwork input width comes from the
    feature map and the output width from the combiner.
    """

    combiner: str = "cp"
    d: int = 1
    rank: int = 1
    tt_ranks: tuple[int, ...] | None = None
    hidden: tuple[int, ...] = (32, 32)
    activation: str = "trigblend"
    feature_mode: str = "random"
    m: int = 50
    sigma: float | tuple[float, ...] = 10.0
    output_activation: bool = False

    def __post_init__(self):
        if self.combiner not in ("cp", "tt"):
            raise ValueError(f"combiner must be 'cp' or 'tt', got {self.combiner!r}")
        if self.d < 1:
            raise ValueError("d must be >= 1")
        if self.activation not in ad.ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.feature_mode not in ("none", "random", "adapted"):
            raise ValueError(f"unknown feature mode {self.feature_mode!r}")
        if any(w < 1 for w in self.hidden):
            raise ValueError("hidden widths must be >= 1")
        if self.combiner == "cp":
            if self.rank < 1:
                raise ValueError("CP rank must be >= 1")
        else:
            r = self.tt_ranks
            if r is None or len(r) != self.d + 1:
                raise ValueError(f"TT needs {self.d + 1} ranks r_0..r_d")
            if r[0] != 1 or r[-1] != 1:
                raise ValueError("TT ranks must satisfy r_0 = r_d = 1")
            if any(x < 1 for x in r):
                raise ValueError("TT ranks must be >= 1")
        if self.feature_mode == "random":
            if self.m < 1:
                raise ValueError("random features need m >= 1")
            if any(s <= 0 for s in self.sigmas()):
                raise ValueError("sigma must be positive")

    def sigmas(self) -> tuple[float, ...]:
        if isinstance(self.sigma, (int, float)):
            return (float(self.sigma),) * self.d
        if len(self.sigma) != self.d:
            raise ValueError(f"need {self.d} sigma values, got {len(self.sigma)}")
        return tuple(float(s) for s in self.sigma)

    def out_width(self, i: int) -> int:
        if self.combiner == "cp":
            return self.rank
        return self.tt_ranks[i] * self.tt_ranks[i + 1]


@dataclass
class FeatureSpec:
    """Per-dimension Fourier feature frequencies.

    ``mode='none'`` feeds the raw coordinate to the subnetwork.  In the other
    modes dimension ``i`` is lifted to ``[cos(2 pi b x), sin(2 pi b x)]`` for
    every ``b`` in ``freqs[i]``.
    """

    mode: str
    freqs: list[np.ndarray]

    def width(self, i: int) -> int:
        return 1 if self.mode == "none" else 2 * len(self.freqs[i])

    @classmethod
    def adapted(cls, sets) -> "FeatureSpec":
        freqs = []
        for i, s in enumerate(sets):
            arr = np.asarray(sorted(set(int(k) for k in s)), dtype=np.float64)
            if arr.size == 0:
                raise ValueError(f"empty frequency set for dimension {i}")
            if arr[0] < 1:
                raise ValueError(f"adapted frequencies must be >= 1 (dimension {i})")
            freqs.append(arr)
        return cls("adapted", freqs)


def feature_map_eval(spec: FeatureSpec, i: int, x: Jet2) -> Jet2:
    """Jets of the feature channels of dimension ``i`` at input jet ``x``.

    ``x`` fields are arrays of shape ``(B,)``; the result has shape
    ``(B, width)`` with cosine channels first.
    """
    v = np.asarray(x.v, dtype=np.float64)
    if spec.mode == "none":
        col = lambda a: None if a is None else np.broadcast_to(np.asarray(a, dtype=np.float64), v.shape)[:, None]
        return Jet2(v[:, None], col(x.d1), col(x.d2))
    b = spec.freqs[i]
    if b.size == 0:
        raise ValueError(f"empty frequency list for dimension {i}")
    w = TWO_PI * b
    cycles = v[:, None] * b[None, :]
    # reduce to one period before scaling: cheaper and more accurate trig
    phase = TWO_PI * (cycles - np.rint(cycles))
    c, s = np.cos(phase), np.sin(phase)
    val = np.concatenate([c, s], axis=1)
    if x.d1 is None:
        return Jet2(val, None, None)
    first = np.concatenate([-w * s, w * c], axis=1)
    w2 = np.concatenate([w, w]) ** 2
    if np.ndim(x.d1) == 0 and (x.d2 is None or np.ndim(x.d2) == 0):
        # scalar seed jets (the lifted input): skip the broadcast products
        d1, d2 = float(x.d1), None if x.d2 is None else float(x.d2)
        jd1 = first if d1 == 1.0 else first * d1
        if d2 is None:
            return Jet2(val, jd1, None)
        jd2 = -w2 * val * (d1 * d1)
        return Jet2(val, jd1, jd2 if d2 == 0.0 else jd2 + first * d2)
    d1 = np.broadcast_to(np.asarray(x.d1, dtype=np.float64), v.shape)[:, None]
    jd1 = first * d1
    if x.d2 is None:
        return Jet2(val, jd1, None)
    d2 = np.broadcast_to(np.asarray(x.d2, dtype=np.float64), v.shape)[:, None]
    return Jet2(val, jd1, -w2 * val * d1 * d1 + first * d2)


@dataclass
class ModelEval:
    """Output value plus per-axis first and second partials.

    ``du`` and ``d2u`` are lists with one entry per input dimension (or
    ``None`` when not requested).
    """

    u: object
    du: list | None = None
    d2u: list | None = None

    def stacked(self) -> "ModelEval":
        st = lambda xs: None if xs is None else np.stack([ad.value_of(x) for x in xs], axis=1)
        return ModelEval(ad.value_of(self.u), st(self.du), st(self.d2u))


def _prefix_suffix(vals, one):
    d = len(vals)
    pre = [one] * (d + 1)
    for k in range(d):
        pre[k + 1] = vals[k] if k == 0 else ad.mul(pre[k], vals[k])
    suf = [one] * (d + 1)
    for k in range(d - 1, -1, -1):
        suf[k] = vals[k] if k == d - 1 else ad.mul(vals[k], suf[k + 1])
    return pre, suf


def _prod3(a, b, c):
    out = b
    if a is not None:
        out = ad.mul(a, out)
    if c is not None:
        out = ad.mul(out, c)
    return out


def cp_combine(table: list[Jet2], weights, want: int = 2) -> ModelEval:
    """Combine per-dimension channel jets (each ``(B, r)``) in CP format.

    Products over ``i != k`` use prefix/suffix products, so no division by
    channel values is ever performed.
    """
    vals = [t.v for t in table]
    pre, suf = _prefix_suffix(vals, None)
    u = ad.matmul(pre[len(vals)], weights)
    if want == 0:
        return ModelEval(u)
    d = len(table)
    du = [ad.matmul(_prod3(pre[k], table[k].d1, suf[k + 1]), weights) for k in range(d)]
    if want == 1:
        return ModelEval(u, du)
    d2u = [ad.matmul(_prod3(pre[k], table[k].d2, suf[k + 1]), weights) for k in range(d)]
    return ModelEval(u, du, d2u)


def _chain(a, b):
    if a is None:
        return b
    if b is None:
        return a
    return ad.bmm(a, b)


def tt_combine(cores: list[Jet2], want: int = 2) -> ModelEval:
    """Contract TT cores (each ``(B, r_{i-1}, r_i)``) into a scalar per sample."""
    d = len(cores)
    shapes = [np.shape(ad.value_of(c.v)) for c in cores]
    if shapes[0][1] != 1 or shapes[-1][2] != 1:
        raise ValueError("TT chain must start and end with rank 1")
    for k in range(d - 1):
        if shapes[k][2] != shapes[k + 1][1]:
            raise ValueError(f"rank mismatch between cores {k} and {k + 1}: {shapes[k]} vs {shapes[k + 1]}")
    vals = [c.v for c in cores]
    left = [None] * (d + 1)
    for k in range(d):
        left[k + 1] = _chain(left[k], vals[k])
    right = [None] * (d + 1)
    for k in range(d - 1, -1, -1):
        right[k] = _chain(vals[k], right[k + 1])
    flat = lambda x: ad.reshape(x, (-1,))
    u = flat(left[d])
    if want == 0:
        return ModelEval(u)
    du = [flat(_chain(_chain(left[k], cores[k].d1), right[k + 1])) for k in range(d)]
    if want == 1:
        return ModelEval(u, du)
    d2u = [flat(_chain(_chain(left[k], cores[k].d2), right[k + 1])) for k in range(d)]
    return ModelEval(u, du, d2u)


def glorot_normal(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    return rng.normal(0.0, math.sqrt(2.0 / (fan_in + fan_out)), size=(fan_in, fan_out))


def param_count(config: ModelConfig, features: FeatureSpec) -> int:
    total = 0
    for i in range(config.d):
        widths = [features.width(i), *config.hidden, config.out_width(i)]
        total += sum(a * b + b for a, b in zip(widths[:-1], widths[1:]))
    if config.combiner == "cp":
        total += config.rank
    return total


@dataclass
class TnnModel:
    """A tensor network: configuration, feature frequencies and a flat parameter vector.

    ``arrays()`` returns reshaped views into ``flat``, so in-place optimizer
    updates on ``flat`` are seen by every evaluation.
    """

    config: ModelConfig
    features: FeatureSpec
    flat: np.ndarray
    seed: int
    layout: list[tuple[str, tuple[int, ...]]] = field(default_factory=list)

    def __post_init__(self):
        if not self.layout:
            self.layout = _layout(self.config, self.features)
        n = sum(int(np.prod(s)) for _, s in self.layout)
        if self.flat.size != n:
            raise ValueError(f"parameter vector has {self.flat.size} entries, layout needs {n}")

    @property
    def d(self) -> int:
        return self.config.d

    @property
    def n_params(self) -> int:
        return self.flat.size

    def arrays(self) -> list[np.ndarray]:
        out, pos = [], 0
        for _, shape in self.layout:
            n = int(np.prod(shape))
            out.append(self.flat[pos:pos + n].reshape(shape))
            pos += n
        return out

    def _subnet_slices(self) -> list[tuple[int, int]]:
        n_layers = len(self.config.hidden) + 1
        return [(2 * n_layers * i, 2 * n_layers * (i + 1)) for i in range(self.d)]

    def subnet_eval_jet(self, i: int, x, want: int = 2, params=None) -> Jet2:
        """Channel jets of subnetwork ``i`` at the points ``x`` (shape ``(B,)``)."""
        params = self.arrays() if params is None else params
        lo, hi = self._subnet_slices()[i]
        x = np.asarray(x, dtype=np.float64)
        lifted = Jet2(x, 1.0 if want >= 1 else None, 0.0 if want >= 2 else None)
        jet = feature_map_eval(self.features, i, lifted)
        layers = params[lo:hi]
        n_layers = len(layers) // 2
        for li in range(n_layers):
            jet = ad.jet_affine(layers[2 * li], layers[2 * li + 1], jet)
            if li < n_layers - 1 or self.config.output_activation:
                jet = ad.jet_activate(self.config.activation, jet, want)
        return jet

    def forward(self, points, want: int = 0, params=None) -> ModelEval:
        """Evaluate on a batch ``points`` of shape ``(B, d)``.

        ``params`` may be tape leaves (for training) or arrays; defaults to the
        model's own parameters.
        """
        points = np.asarray(points, dtype=np.float64)
        if points.ndim != 2 or points.shape[1] != self.d:
            raise ValueError(f"points must have shape (B, {self.d}), got {points.shape}")
        params = self.arrays() if params is None else params
        jets = [self.subnet_eval_jet(i, points[:, i], want, params) for i in range(self.d)]
        if self.config.combiner == "cp":
            return cp_combine(jets, params[-1], want)
        r = self.config.tt_ranks
        cores = []
        for i, j in enumerate(jets):
            shape = (-1, r[i], r[i + 1])
            cores.append(Jet2(*(None if s is None else ad.reshape(s, shape) for s in j.as_tuple())))
        return tt_combine(cores, want)

    def eval_batch(self, points, want: int = 0) -> ModelEval:
        """Numeric evaluation; returns ``u`` ``(B,)`` and ``du``/``d2u`` ``(B, d)``."""
        points = np.asarray(points, dtype=np.float64)
        if points.shape[0] == 0:
            empty = np.zeros((0, self.d))
            return ModelEval(np.zeros(0), empty if want >= 1 else None, empty if want >= 2 else None)
        return self.forward(points, want).stacked()

    def __call__(self, points) -> np.ndarray:
        return self.eval_batch(points).u

    def component_values(self, i: int, x) -> np.ndarray:
        """Values of every channel of subnetwork ``i`` at ``x``: shape ``(len(x), channels)``."""
        return np.asarray(self.subnet_eval_jet(i, x, want=0).v)

    def n_channels(self, i: int) -> int:
        return self.config.out_width(i)

    def copy(self) -> "TnnModel":
        feats = FeatureSpec(self.features.mode, [f.copy() for f in self.features.freqs])
        return TnnModel(self.config, feats, self.flat.copy(), self.seed, list(self.layout))

    # -- checkpoint -------------------------------------------------------

    def to_dict(self) -> dict:
        raw = np.ascontiguousarray(self.flat, dtype="<f8").tobytes()
        cfg = self.config
        return {
            "format": "fatnn-checkpoint/1",
            "combiner": cfg.combiner,
            "d": cfg.d,
            "rank": cfg.rank,
            "tt_ranks": list(cfg.tt_ranks) if cfg.tt_ranks else None,
            "hidden": list(cfg.hidden),
            "activation": cfg.activation,
            "output_activation": cfg.output_activation,
            "feature_mode": self.features.mode,
            "m": cfg.m,
            "sigma": list(cfg.sigmas()),
            "features": [base64.b64encode(np.asarray(f, "<f8").tobytes()).decode() for f in self.features.freqs],
            "seed": self.seed,
            "n_params": self.n_params,
            "params": base64.b64encode(raw).decode(),
            "sha256": hashlib.sha256(raw).hexdigest(),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "TnnModel":
        if doc.get("format") != "fatnn-checkpoint/1":
            raise ValueError("not a fatnn checkpoint")
        raw = base64.b64decode(doc["params"])
        if hashlib.sha256(raw).hexdigest() != doc["sha256"]:
            raise ValueError("checkpoint digest mismatch")
        cfg = ModelConfig(
            combiner=doc["combiner"],
            d=doc["d"],
            rank=doc["rank"],
            tt_ranks=tuple(doc["tt_ranks"]) if doc["tt_ranks"] else None,
            hidden=tuple(doc["hidden"]),
            activation=doc["activation"],
            feature_mode=doc["feature_mode"],
            m=doc["m"],
            sigma=tuple(doc["sigma"]),
            output_activation=doc["output_activation"],
        )
        freqs = [np.frombuffer(base64.b64decode(f), dtype="<f8").astype(np.float64) for f in doc["features"]]
        flat = np.frombuffer(raw, dtype="<f8").astype(np.float64)
        return cls(cfg, FeatureSpec(doc["feature_mode"], freqs), flat, int(doc["seed"]))

    def save(self, path) -> Path:
        from .io import atomic_write_text

        return atomic_write_text(path, json.dumps(self.to_dict(), indent=1, sort_keys=True))

    @classmethod
    def load(cls, path) -> "TnnModel":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _layout(config: ModelConfig, features: FeatureSpec) -> list[tuple[str, tuple[int, ...]]]:
    layout = []
    for i in range(config.d):
        widths = [features.width(i), *config.hidden, config.out_width(i)]
        for li, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
            layout.append((f"net{i}.W{li}", (a, b)))
            layout.append((f"net{i}.b{li}", (b,)))
    if config.combiner == "cp":
        layout.append(("W", (config.rank,)))
    return layout


def _init_params(config: ModelConfig, features: FeatureSpec, rng: np.random.Generator) -> np.ndarray:
    parts = []
    for name, shape in _layout(config, features):
        if name == "W":
            # CP output weights start at the fixed all-ones combination
            parts.append(np.ones(shape))
        elif len(shape) == 2:
            parts.append(glorot_normal(rng, *shape).ravel())
        else:
            parts.append(np.zeros(shape))
    return np.concatenate(parts)


def init_model(config: ModelConfig, seed: int, freqs=None) -> TnnModel:
    """Fresh model; deterministic in ``seed``.

    Random-mode feature frequencies are drawn from N(0, sigma_i^2) before any
    weights.  Adapted mode requires ``freqs``, one nonempty integer set per
    dimension.
    """
    rng = np.random.default_rng(seed)
    if config.feature_mode == "random":
        feats = FeatureSpec("random", [rng.normal(0.0, s, size=config.m) for s in config.sigmas()])
    elif config.feature_mode == "adapted":
        if freqs is None or len(freqs) != config.d:
            raise ValueError(f"adapted features need {config.d} frequency sets")
        feats = FeatureSpec.adapted(freqs)
    else:
        feats = FeatureSpec("none", [np.zeros(0) for _ in range(config.d)])
    flat = _init_params(config, feats, rng)
    return TnnModel(config, feats, flat, seed)


def rebuild_with_frequencies(config: ModelConfig, freqs, seed: int) -> TnnModel:
    """New adapted-feature model with fresh Glorot weights."""
    for i, s in enumerate(freqs):
        if len(s) == 0:
            raise ValueError(f"empty frequency set for dimension {i}")
    return init_model(replace(config, feature_mode="adapted"), seed, freqs)


def model_eval_batch(model: TnnModel, points, want: int = 0) -> ModelEval:
    return model.eval_batch(points, want)


def tt_from_cp(model: TnnModel) -> TnnModel:
    """Exact TT rewrite of a CP model: diagonal cores, output weights folded into core 1."""
    cfg = model.config
    if cfg.combiner != "cp":
        raise ValueError("expected a CP model")
    r, d = cfg.rank, cfg.d
    if d == 1:
        raise ValueError("TT rewrite needs d >= 2")
    ranks = (1,) + (r,) * (d - 1) + (1,)
    tcfg = replace(cfg, combiner="tt", tt_ranks=ranks)
    tt = TnnModel(tcfg, model.features, np.zeros(param_count(tcfg, model.features)), model.seed)
    src, dst = model.arrays(), tt.arrays()
    n_layers = len(cfg.hidden) + 1
    w = src[-1]
    for i in range(d):
        base = 2 * n_layers * i
        for k in range(2 * n_layers - 2):
            dst[base + k][...] = src[base + k]
        W_out, b_out = src[base + 2 * n_layers - 2], src[base + 2 * n_layers - 1]
        if i == 0:
            W_out, b_out = W_out * w, b_out * w
        TW, Tb = dst[base + 2 * n_layers - 2], dst[base + 2 * n_layers - 1]
        if i == 0 or i == d - 1:
            TW[...] = W_out
            Tb[...] = b_out
        else:
            # core i is diag(f_i) in an r x r block stored row-major
            diag = np.arange(r) * r + np.arange(r)
            TW[:, diag] = W_out
            Tb[diag] = b_out
    return tt
