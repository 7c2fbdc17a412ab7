"""Shared constructors for tests."""

import math

import numpy as np

from fatnn.model import ModelConfig, TnnModel, init_model
from fatnn.problems import Factor, ManufacturedSolution, ProblemSpec, Term


def sine_problem(d: int = 1, freq: int = 1, kind: str = "poisson", **kw) -> ProblemSpec:
    """u = prod_i sin(2 pi freq x_i) on the unit cube."""
    term = Term(1.0, {i: Factor("sin", 2 * math.pi * freq) for i in range(d)})
    kw.setdefault("n_interior", 64)
    kw.setdefault("n_boundary_per_face", 4)
    return ProblemSpec(f"sine{d}d", kind, d, ManufacturedSolution(d, (term,)), **kw)


def exact_sine_model(d: int = 1, freq: int = 1) -> TnnModel:
    """Rank-one CP model equal to prod_i sin(2 pi freq x_i): each channel picks the sine feature."""
    cfg = ModelConfig("cp", d, 1, hidden=(), activation="tanh", feature_mode="adapted")
    model = init_model(cfg, 0, [[freq]] * d)
    arrays = model.arrays()
    for i in range(d):
        arrays[2 * i][...] = np.array([[0.0], [1.0]])  # [cos, sin] -> sin
        arrays[2 * i + 1][...] = 0.0
    arrays[-1][...] = 1.0
    return model
