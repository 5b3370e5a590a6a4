"""Layer-wise codebook quantization with centroid fine-tuning.

Each modulated layer's parameters are pooled and clustered with 1-D k-means.
Weights are then pinned to their centroid, and the centroids are trained
under the rendering loss: a centroid's gradient is the sum of the gradients of
every weight assigned to it. Layers are quantized in order; once a layer is
done it is frozen while all later layers keep adapting. The shared bases and
the decoder layer get 16-bit uniform quantization instead.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .lightfield import LightField
from .model import (
    NUM_LAYERS,
    KernelBank,
    NetworkConfig,
    Tensor,
    layer_param_names,
    param_shapes,
)
from .trainer import TrainReport, TrainSchedule, run_iterations

__all__ = [
    "Codebook",
    "AffineQuant16",
    "QuantizedModel",
    "RawModel",
    "kmeans_fit",
    "quantize_model",
    "raw_model",
]

KMEANS_MAX_ITER = 100
KMEANS_TOL = 1e-8


@dataclass
class Codebook:
    centroids: np.ndarray
    assignments: np.ndarray

    def __post_init__(self):
        self.centroids = np.asarray(self.centroids)
        self.assignments = np.asarray(self.assignments, dtype=np.int64)
        if self.assignments.size and (self.assignments.min() < 0 or self.assignments.max() >= self.centroids.size):
            raise ValueError("assignment index outside the codebook")

    @property
    def n(self) -> int:
        return self.centroids.size

    def dequantize(self) -> np.ndarray:
        return self.centroids[self.assignments]

    def assign(self, values: np.ndarray) -> np.ndarray:
        """Index of the nearest centroid for every value."""
        return _nearest(np.asarray(values, dtype=np.float64).ravel(), self.centroids.astype(np.float64))


def _nearest(values: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    order = np.argsort(centroids, kind="stable")
    sorted_c = centroids[order]
    mids = 0.5 * (sorted_c[1:] + sorted_c[:-1])
    return order[np.searchsorted(mids, values, side="left")]


def kmeans_fit(values, n: int, seed: int = 0) -> Codebook:
    """1-D k-means: k-means++ seeding, then Lloyd iterations.

    Iteration stops when no centroid moves by ``1e-8`` or after 100 rounds.
    An empty cluster is re-seeded with the value lying farthest from its
    current centroid. When there are at most ``n`` distinct values every value
    gets its own centroid (the codebook is padded by repeating the largest).
    """
    if n < 1:
        raise ValueError("need at least one centroid")
    x = np.asarray(values, dtype=np.float64).ravel()
    if x.size == 0:
        raise ValueError("cannot cluster an empty value set")
    distinct = np.unique(x)
    if distinct.size <= n:
        centroids = np.concatenate([distinct, np.full(n - distinct.size, distinct[-1])])
        return Codebook(centroids, np.searchsorted(distinct, x))

    rng = np.random.Generator(np.random.PCG64(seed))
    centroids = np.empty(n)
    centroids[0] = x[rng.integers(x.size)]
    d2 = (x - centroids[0]) ** 2
    for j in range(1, n):
        total = d2.sum()
        pick = rng.choice(x.size, p=d2 / total)
        centroids[j] = x[pick]
        d2 = np.minimum(d2, (x - centroids[j]) ** 2)

    for _ in range(KMEANS_MAX_ITER):
        assign = _nearest(x, centroids)
        counts = np.bincount(assign, minlength=n)
        sums = np.bincount(assign, weights=x, minlength=n)
        updated = centroids.copy()
        filled = counts > 0
        updated[filled] = sums[filled] / counts[filled]
        empty = np.flatnonzero(~filled)
        if empty.size:
            dist = np.abs(x - updated[assign])
            for j in empty:
                far = int(np.argmax(dist))
                updated[j] = x[far]
                dist[far] = -1.0
        shift = np.max(np.abs(updated - centroids))
        centroids = updated
        if shift < KMEANS_TOL and not empty.size:
            break
    return Codebook(centroids, _nearest(x, centroids))


@dataclass
class AffineQuant16:
    """Uniform 16-bit code: ``value = min + code * (max - min) / 65535``."""

    min: float
    max: float
    codes: np.ndarray

    LEVELS = 65535

    @property
    def step(self) -> float:
        return (self.max - self.min) / self.LEVELS

    @classmethod
    def encode(cls, values) -> "AffineQuant16":
        v = np.asarray(values, dtype=np.float64).ravel()
        lo, hi = float(v.min()), float(v.max())
        step = (hi - lo) / cls.LEVELS
        if step > 0:
            codes = np.clip(np.rint((v - lo) / step), 0, cls.LEVELS)
        else:
            codes = np.zeros(v.size)
        return cls(lo, hi, codes.astype(np.uint16))

    def dequantize(self) -> np.ndarray:
        return self.min + self.codes.astype(np.float64) * self.step


def _split(flat: np.ndarray, shapes: list[tuple[int, ...]]) -> list[np.ndarray]:
    out, pos = [], 0
    for shape in shapes:
        size = int(np.prod(shape))
        out.append(flat[pos : pos + size].reshape(shape))
        pos += size
    if pos != flat.size:
        raise ValueError(f"expected {pos} values, got {flat.size}")
    return out


def _empty_bank(config: NetworkConfig) -> KernelBank:
    params = {
        name: Tensor(np.zeros(shape, dtype=config.dtype), requires_grad=True, name=name)
        for name, shape in param_shapes(config).items()
    }
    return KernelBank(config, params)


def decoder_values(bank: KernelBank) -> np.ndarray:
    return np.concatenate([bank.value("dec.kernel").ravel(), bank.value("dec.bias").ravel()])


@dataclass
class QuantizedModel:
    """Everything the decoder needs: five codebooks plus two 16-bit blocks."""

    config: NetworkConfig
    layers: list[Codebook]
    bases: AffineQuant16 | None
    decoder: AffineQuant16

    def to_bank(self) -> KernelBank:
        cfg = self.config
        bank = _empty_bank(cfg)
        shapes = param_shapes(cfg)
        for i, book in enumerate(self.layers, start=1):
            names = layer_param_names(cfg, i)
            values = book.centroids.astype(np.float64)[book.assignments]
            for name, arr in zip(names, _split(values, [shapes[nm] for nm in names])):
                bank.params[name].data[...] = arr
        if cfg.decompose_kernels:
            bank.params["bases"].data[...] = self.bases.dequantize().reshape(shapes["bases"])
        kernel, bias = _split(self.decoder.dequantize(), [shapes["dec.kernel"], shapes["dec.bias"]])
        bank.params["dec.kernel"].data[...] = kernel
        bank.params["dec.bias"].data[...] = bias
        return bank


@dataclass
class RawModel:
    """Unquantized float32 parameters (debug path that skips quantization)."""

    config: NetworkConfig
    params: dict[str, np.ndarray]

    def to_bank(self) -> KernelBank:
        bank = _empty_bank(self.config)
        for name, arr in self.params.items():
            bank.params[name].data[...] = arr.astype(np.float64)
        return bank


def raw_model(bank: KernelBank) -> RawModel:
    return RawModel(bank.config, {n: v.astype(np.float32) for n, v in bank.state().items()})


def _layer_of(name: str) -> int | None:
    if name.startswith("L") and "." in name:
        return int(name[1 : name.index(".")])
    return None


def quantize_model(
    bank: KernelBank,
    lf: LightField,
    schedule: TrainSchedule,
    *,
    fine_tune: bool = True,
    reports: list[TrainReport] | None = None,
    on_layer_done: Callable[[int, KernelBank], None] | None = None,
    verbose: bool = False,
) -> QuantizedModel:
    """Quantize a trained bank layer by layer (the input bank is left untouched).

    After clustering layer ``i``, its centroids and every parameter of the
    not-yet-quantized layers ``i+1..5`` and the decoder are fine-tuned for one
    quantization epoch, in which each view is used ``quant_epoch_uses``
    times. The bases stay fixed during this phase. Centroids are rounded to
    float32, the precision they are stored with, before the layer is frozen.
    """
    bank = bank.copy()
    cfg = bank.config
    rng = np.random.Generator(np.random.PCG64(schedule.seed + 0x5EED))
    iterations = schedule.iterations_per_epoch(cfg.U * cfg.V, schedule.quant_epoch_uses) if fine_tune else 0
    books: list[Codebook] = []

    for i in range(1, NUM_LAYERS + 1):
        names = layer_param_names(cfg, i)
        values = np.concatenate([bank.value(nm).ravel() for nm in names])
        book = kmeans_fit(values, cfg.n, seed=cfg.seed + i)
        shapes = [bank.params[nm].shape for nm in names]
        bank.tie_layer(i, book.centroids, dict(zip(names, _split(book.assignments, shapes))))

        def trainable(name: str, current: int = i) -> bool:
            if name == f"L{current}.centroids":
                return True
            layer = _layer_of(name)
            if name.endswith(".centroids") or name == "bases":
                return False
            return layer is None or layer > current

        if iterations:
            report = run_iterations(
                bank, lf, iterations, lr=schedule.lr, rng=rng,
                sais_per_iteration=schedule.sais_per_iteration, trainable=trainable, verbose=verbose,
            )
            if reports is not None:
                reports.append(report)
        centroids = bank.tied[i][0]
        centroids.data[...] = centroids.data.astype(np.float32)
        bank.sync()
        books.append(Codebook(centroids.data.astype(np.float32), book.assignments))
        if on_layer_done is not None:
            on_layer_done(i, bank)
        if verbose:
            print(f"layer {i} quantized with {cfg.n} centroids", flush=True)

    bases_q = None
    if cfg.decompose_kernels:
        bases_q = AffineQuant16.encode(bank.value("bases"))
    decoder_q = AffineQuant16.encode(decoder_values(bank))
    return QuantizedModel(cfg, books, bases_q, decoder_q)
