"""Frequency extraction from the one-dimensional component functions of a tensor network.

A CP/TT network is a combination of univariate subnetwork channels, so the
frequencies present along axis ``i`` are contained in the union of the
frequencies of that axis' channels.  Sampling each channel on ``N`` uniform
points of ``[0, 1)`` and transforming costs ``O(d r N log N)`` instead of the
``O(d N^d log N)`` of a full d-dimensional transform.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np


def _check_pow2(n: int) -> None:
    if n < 1 or n & (n - 1):
        raise ValueError(f"length must be a power of two, got {n}")


def _bit_reverse(n: int) -> np.ndarray:
    bits = n.bit_length() - 1
    idx = np.arange(n)
    rev = np.zeros(n, dtype=np.int64)
    for b in range(bits):
        rev |= ((idx >> b) & 1) << (bits - 1 - b)
    return rev


def fft_radix2(x, stats: dict | None = None) -> np.ndarray:
    """Iterative decimation-in-time FFT along axis 0 (unnormalized, e^{-2 pi i k n / N}).

    ``x`` may be 1-D or 2-D; columns of a 2-D input are transformed
    independently.  If ``stats`` is given, ``stats['butterflies']`` is
    incremented by the number of butterflies computed.
    """
    x = np.asarray(x, dtype=np.complex128)
    squeeze = x.ndim == 1
    if squeeze:
        x = x[:, None]
    n = x.shape[0]
    _check_pow2(n)
    c = x.shape[1]
    y = x[_bit_reverse(n)]
    half = 1
    while half < n:
        tw = np.exp(-1j * np.pi * np.arange(half) / half)
        blocks = y.reshape(n // (2 * half), 2, half, c)
        even = blocks[:, 0]
        odd = blocks[:, 1] * tw[None, :, None]
        y = np.concatenate([even + odd, even - odd], axis=1).reshape(n, c)
        half *= 2
    if stats is not None:
        stats["butterflies"] = stats.get("butterflies", 0) + (n // 2) * (n.bit_length() - 1) * c
    return y[:, 0] if squeeze else y


def naive_dft(x) -> np.ndarray:
    """O(N^2) reference transform with the same sign convention as :func:`fft_radix2`."""
    x = np.asarray(x, dtype=np.complex128)
    n = x.shape[0]
    k = np.arange(n)
    kernel = np.exp(-2j * np.pi * np.outer(k, k) / n)
    return kernel @ x


@dataclass
class Spectrum1D:
    """Normalized DFT ``c_k = (1/N) sum_n f(n/N) e^{-2 pi i k n / N}``.

    ``coeffs`` keeps all N bins (trailing axis = channels when sampled from
    several components at once); ``magnitudes`` covers k = 0..N/2.
    """

    N: int
    coeffs: np.ndarray

    @property
    def magnitudes(self) -> np.ndarray:
        return np.abs(self.coeffs[: self.N // 2 + 1])

    @property
    def bins(self) -> np.ndarray:
        return np.arange(self.N // 2 + 1)


def dft_uniform(samples, N: int, stats: dict | None = None) -> Spectrum1D:
    """Transform samples taken at x_n = n/N, n = 0..N-1."""
    _check_pow2(N)
    samples = np.asarray(samples, dtype=np.float64)
    if samples.shape[0] != N:
        raise ValueError(f"expected {N} samples, got {samples.shape[0]}")
    return Spectrum1D(N, fft_radix2(samples, stats) / N)


def uniform_grid(N: int) -> np.ndarray:
    return np.arange(N) / N


def component_spectra(model, i: int, N: int, stats: dict | None = None) -> Spectrum1D:
    """Spectra of every channel of subnetwork ``i`` (value slot only)."""
    _check_pow2(N)
    vals = model.component_values(i, uniform_grid(N))
    if stats is not None:
        stats["samples"] = stats.get("samples", 0) + vals.size
    return dft_uniform(vals, N, stats)


def component_spectrum(model, i: int, alpha: int, N: int) -> Spectrum1D:
    if not 0 <= alpha < model.n_channels(i):
        raise ValueError(f"channel {alpha} out of range for dimension {i} ({model.n_channels(i)} channels)")
    vals = model.component_values(i, uniform_grid(N))[:, alpha]
    return dft_uniform(vals, N)


def top_m_frequencies(spec: Spectrum1D | np.ndarray, M: int) -> list[int]:
    """The ``M`` bins in 1..N/2 with the largest magnitude, returned ascending.

    Ties go to the smaller bin; the DC bin is never chosen.  ``spec`` may
    also be a bare magnitude vector indexed by k = 0..N/2.
    """
    mags = spec.magnitudes if isinstance(spec, Spectrum1D) else np.asarray(spec)
    if mags.ndim != 1:
        raise ValueError("top_m_frequencies expects a single component")
    half = mags.shape[0] - 1
    if not 1 <= M <= half:
        raise ValueError(f"M must be in [1, {half}], got {M}")
    k = np.arange(1, half + 1)
    order = np.lexsort((k, -mags[1:]))
    return sorted(int(x) for x in k[order[:M]])


def union_dimension_frequencies(sets, cap: int, weights=None) -> list[int]:
    """Sorted union of per-channel frequency sets, truncated to ``cap`` entries.

    On truncation the frequencies with the largest ``weights[k]`` (the summed
    channel magnitudes) survive, ties to the smaller k.
    """
    if cap < 1:
        raise ValueError("cap must be >= 1")
    union = sorted(set(int(k) for s in sets for k in s))
    if len(union) <= cap:
        return union
    if weights is None:
        raise ValueError("truncating a union needs per-bin weights")
    w = np.asarray(weights)[union]
    order = np.lexsort((np.asarray(union), -w))
    return sorted(union[j] for j in order[:cap])


def average_amplitude(model, i: int, N: int) -> np.ndarray:
    """Mean channel magnitude per bin along axis ``i``."""
    return component_spectra(model, i, N).magnitudes.mean(axis=1)


@dataclass(frozen=True)
class FrequencySet:
    """Per-dimension sorted, deduplicated integer frequencies for adaptive step ``It``."""

    sets: tuple[tuple[int, ...], ...]
    It: int = 0

    @classmethod
    def of(cls, sets, It: int = 0, N: int | None = None) -> "FrequencySet":
        norm = []
        for i, s in enumerate(sets):
            vals = tuple(sorted(set(int(k) for k in s)))
            if vals and vals[0] < 1:
                raise ValueError(f"frequencies must be >= 1 (dimension {i})")
            if N is not None and vals and vals[-1] > N // 2:
                raise ValueError(f"frequency {vals[-1]} above Nyquist bin {N // 2} (dimension {i})")
            norm.append(vals)
        return cls(tuple(norm), It)

    @property
    def d(self) -> int:
        return len(self.sets)

    def to_json(self) -> dict:
        return {"It": self.It, "sets": [list(s) for s in self.sets]}

    @classmethod
    def from_json(cls, doc) -> "FrequencySet":
        return cls.of(doc["sets"], doc.get("It", 0))

    def product_size(self) -> int:
        n = 1
        for s in self.sets:
            n *= len(s)
        return n


def freqsets_equal(a: FrequencySet, b: FrequencySet) -> bool:
    if a.d != b.d:
        raise ValueError(f"dimension mismatch: {a.d} vs {b.d}")
    return all(tuple(sorted(set(x))) == tuple(sorted(set(y))) for x, y in zip(a.sets, b.sets))


def jaccard(a: FrequencySet, b: FrequencySet) -> float:
    """Smallest per-dimension Jaccard similarity."""
    if a.d != b.d:
        raise ValueError(f"dimension mismatch: {a.d} vs {b.d}")
    out = 1.0
    for x, y in zip(a.sets, b.sets):
        x, y = set(x), set(y)
        if x or y:
            out = min(out, len(x & y) / len(x | y))
    return out


@dataclass
class Extraction:
    """Result of one frequency analysis pass over a model."""

    freqs: FrequencySet
    mean_magnitudes: list[np.ndarray]
    per_channel: list[list[list[int]]] = field(default_factory=list)
    stats: dict = field(default_factory=dict)


def extract_frequencies(model, M: int, cap: int, N: int, It: int = 0) -> Extraction:
    """Top-M bins per channel, unioned per dimension (capped)."""
    stats: dict = {}
    sets, means, per_channel = [], [], []
    for i in range(model.d):
        spec = component_spectra(model, i, N, stats)
        mags = spec.magnitudes
        chans = [top_m_frequencies(mags[:, a], M) for a in range(mags.shape[1])]
        sets.append(union_dimension_frequencies(chans, cap, weights=mags.sum(axis=1)))
        means.append(mags.mean(axis=1))
        per_channel.append(chans)
    return Extraction(FrequencySet.of(sets, It, N), means, per_channel, stats)


# -- containment of axis frequencies in component frequencies ------------------


@dataclass
class ContainmentReport:
    axis_sets: list[set]  # K_i of the assembled function
    component_unions: list[set]  # union over channels of each axis' factor supports
    full_set: set  # K, folded to nonnegative frequencies
    noise: set  # elements of the oversampled product that are not in K

    @property
    def holds(self) -> bool:
        axes = all(k <= u for k, u in zip(self.axis_sets, self.component_unions))
        product = set(itertools.product(*[sorted(u) for u in self.component_unions]))
        return axes and self.full_set <= product


def _fold(k: int, N: int) -> int:
    return min(k, N - k)


def _support_1d(values, N: int, tol: float) -> set:
    mags = dft_uniform(values, N).magnitudes
    return {int(k) for k in np.flatnonzero(mags > tol)}


def axis_containment_check(factors, N: int = 32, tol: float = 1e-9) -> ContainmentReport:
    """Check that the axis frequencies of a CP function lie in its components' frequencies.

    ``factors[a][i]`` is a callable giving the channel-``a`` factor along axis
    ``i`` on ``[0, 1)``.  The assembled function is transformed with a full
    d-dimensional FFT on an ``N^d`` grid (the brute-force reference); each
    factor is transformed on its own with :func:`dft_uniform`.
    """
    r = len(factors)
    d = len(factors[0])
    x = uniform_grid(N)
    samples = [[np.asarray(factors[a][i](x), dtype=np.float64) for i in range(d)] for a in range(r)]
    grid = np.zeros((N,) * d)
    for a in range(r):
        term = samples[a][0]
        for i in range(1, d):
            term = np.multiply.outer(term, samples[a][i])
        grid = grid + term
    coeffs = np.fft.fftn(grid) / N**d
    full = set()
    for idx in zip(*np.nonzero(np.abs(coeffs) > tol)):
        full.add(tuple(_fold(int(k), N) for k in idx))
    axis_sets = [{k[i] for k in full} for i in range(d)]
    unions = [set().union(*(_support_1d(samples[a][i], N, tol) for a in range(r))) for i in range(d)]
    product = set(itertools.product(*[sorted(u) for u in unions]))
    return ContainmentReport(axis_sets, unions, full, product - full)
