"""Fitting a kernel bank to a light field with a random view stream."""

from __future__ import annotations

import math
import os
import tempfile
import time
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import numerics as nx
from .lightfield import LightField, psnr
from .model import KernelBank, NetworkConfig, NoiseVolume, forward, init_bank, make_noise

__all__ = [
    "TrainSchedule",
    "TrainReport",
    "EvalResult",
    "TrainingError",
    "sample_batch",
    "run_iterations",
    "train",
    "evaluate",
]


class TrainingError(RuntimeError):
    """Raised when the loss becomes non-finite."""


@dataclass(frozen=True)
class TrainSchedule:
    """Optimisation schedule.

    An epoch uses every view ``uses_per_sai_per_epoch`` times on average, with
    ``sais_per_iteration`` views per step. ``iterations`` overrides
    ``epochs`` for short runs.
    """

    lr: float = 0.01
    epochs: int = 12
    uses_per_sai_per_epoch: int = 500
    sais_per_iteration: int = 5
    quant_epoch_uses: int = 200
    seed: int = 0
    iterations: int | None = None

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if self.sais_per_iteration < 1:
            raise ValueError("need at least one view per iteration")

    def iterations_per_epoch(self, n_views: int, uses: int | None = None) -> int:
        uses = self.uses_per_sai_per_epoch if uses is None else uses
        return math.ceil(n_views * uses / self.sais_per_iteration)

    def total_iterations(self, n_views: int) -> int:
        if self.iterations is not None:
            return self.iterations
        return self.epochs * self.iterations_per_epoch(n_views)


@dataclass
class TrainReport:
    loss_trace: list[float] = field(default_factory=list)
    epoch_psnr: list[float] = field(default_factory=list)
    epoch_seconds: list[float] = field(default_factory=list)

    def write(self, path) -> None:
        """Tab-separated dump: one ``iter`` row per step, one ``epoch`` row per epoch."""
        path = Path(path)
        fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tsv")
        with os.fdopen(fd, "w") as fh:
            fh.write("kind\tindex\tvalue\tseconds\n")
            for i, loss in enumerate(self.loss_trace):
                fh.write(f"iter\t{i}\t{loss:.9g}\t\n")
            for i, (p, s) in enumerate(zip(self.epoch_psnr, self.epoch_seconds)):
                fh.write(f"epoch\t{i}\t{p:.6f}\t{s:.3f}\n")
        os.replace(tmp, path)


@dataclass
class EvalResult:
    table: np.ndarray
    mean: float
    variance: float


def sample_batch(rng: np.random.Generator, U: int, V: int, count: int,
                 views: Sequence[tuple[int, int]] | None = None) -> list[tuple[int, int]]:
    """Draw ``count`` views uniformly with replacement (from ``views`` when given)."""
    if count < 1:
        raise ValueError("count must be at least 1")
    if views is None:
        flat = rng.integers(0, U * V, size=count)
        return [(int(i) // V, int(i) % V) for i in flat]
    picks = rng.integers(0, len(views), size=count)
    return [tuple(views[int(i)]) for i in picks]


def evaluate(bank: KernelBank, lf: LightField, noise: NoiseVolume | None = None) -> EvalResult:
    """Per-view PSNR table with its mean and inter-view (population) variance."""
    cfg = bank.config
    noise = noise or make_noise(cfg)
    table = np.empty((cfg.U, cfg.V))
    for u in range(cfg.U):
        for v in range(cfg.V):
            table[u, v] = psnr(forward(bank, noise, u, v).data, lf.views[u, v])
    return EvalResult(table, float(table.mean()), float(table.var()))


def _check_extents(config: NetworkConfig, lf: LightField) -> None:
    if (config.X, config.Y, config.U, config.V) != lf.extents:
        raise ValueError(
            f"light field is {lf.X}x{lf.Y}x{lf.U}x{lf.V} but config expects "
            f"{config.X}x{config.Y}x{config.U}x{config.V}"
        )


def run_iterations(
    bank: KernelBank,
    lf: LightField,
    iterations: int,
    *,
    lr: float,
    rng: np.random.Generator,
    sais_per_iteration: int = 5,
    trainable: Callable[[str], bool] | None = None,
    views: Sequence[tuple[int, int]] | None = None,
    epoch_length: int | None = None,
    report: TrainReport | None = None,
    verbose: bool = False,
    log_every: int = 100,
) -> TrainReport:
    """Core loop shared by training, quantized fine-tuning and transfer.

    Each iteration renders ``sais_per_iteration`` sampled views, each with its
    own modulators, averages their MSE and makes a single Adam step on every
    leaf that received a gradient. Leaves rejected by ``trainable`` are held
    fixed bit for bit.
    """
    cfg = bank.config
    report = report or TrainReport()
    noise = make_noise(cfg)
    targets = lf.views.astype(cfg.dtype)
    leaves = bank.leaves()
    for name, leaf in leaves.items():
        leaf.requires_grad = trainable(name) if trainable else True
    state = nx.AdamState(lr=lr)
    weight = 1.0 / sais_per_iteration
    start = time.perf_counter()
    epoch_start = start

    for it in range(iterations):
        batch_loss = 0.0
        # a view drawn twice renders once with doubled weight (same gradient)
        drawn = Counter(sample_batch(rng, cfg.U, cfg.V, sais_per_iteration, views))
        for (u, v), times in drawn.items():
            loss = nx.mse(forward(bank, noise, u, v), targets[u, v])
            loss.backward(weight * times)
            batch_loss += loss.item() * weight * times
        if not math.isfinite(batch_loss):
            raise TrainingError(f"non-finite loss {batch_loss} at iteration {it}")
        touched = {n: t for n, t in leaves.items() if t.requires_grad and t.grad is not None}
        nx.adam_step(touched, {n: t.grad for n, t in touched.items()}, state)
        for t in touched.values():
            t.grad = None
        report.loss_trace.append(batch_loss)
        if verbose and (it + 1) % log_every == 0:
            print(f"iter {it + 1:7d}  loss {batch_loss:.6e}  elapsed {time.perf_counter() - start:8.1f}s", flush=True)
        if epoch_length and ((it + 1) % epoch_length == 0 or it + 1 == iterations):
            bank.sync()
            result = evaluate(bank, lf, noise)
            now = time.perf_counter()
            report.epoch_psnr.append(result.mean)
            report.epoch_seconds.append(now - epoch_start)
            epoch_start = now
            if verbose:
                print(f"epoch {len(report.epoch_psnr):4d}  mean PSNR {result.mean:.3f} dB", flush=True)

    for leaf in leaves.values():
        leaf.requires_grad = True
    bank.sync()
    return report


def train(
    config: NetworkConfig,
    schedule: TrainSchedule,
    lf: LightField,
    *,
    bank: KernelBank | None = None,
    trainable: Callable[[str], bool] | None = None,
    views: Sequence[tuple[int, int]] | None = None,
    verbose: bool = False,
) -> tuple[KernelBank, TrainReport]:
    """Fit ``bank`` (a fresh one by default) to ``lf``."""
    _check_extents(config, lf)
    if bank is None:
        bank = init_bank(config)
    n_views = len(views) if views is not None else config.U * config.V
    iterations = schedule.total_iterations(n_views)
    report = TrainReport()
    if iterations <= 0:
        return bank, report
    rng = np.random.Generator(np.random.PCG64(schedule.seed))
    run_iterations(
        bank,
        lf,
        iterations,
        lr=schedule.lr,
        rng=rng,
        sais_per_iteration=schedule.sais_per_iteration,
        trainable=trainable,
        views=views,
        epoch_length=schedule.iterations_per_epoch(n_views),
        report=report,
        verbose=verbose,
    )
    return bank, report
