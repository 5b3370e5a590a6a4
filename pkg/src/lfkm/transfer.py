"""Reusing modulators learned on one light field to render another.

A bank trained on a first light field keeps all its modulators fixed while
the view-shared parameters (descriptors, bases, BN affines, decoder) are
retrained on a sparse subset of a second light field. Every view of the
second light field is then rendered; views whose row and column modulators
were both exercised during retraining count as *involved*.
"""

from __future__ import annotations

import os
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .lightfield import LightField
from .model import KernelBank, is_modulator
from .trainer import TrainSchedule, evaluate, train

__all__ = ["SubsetPattern", "TransferResult", "TransferError", "pattern", "transfer", "modulator_snapshot"]

PATTERN_SIZES = {"S5": 5, "S9": 9, "S13": 13, "S25": 25}


class TransferError(ValueError):
    pass


@dataclass(frozen=True)
class SubsetPattern:
    name: str
    coordinates: tuple[tuple[int, int], ...]

    @property
    def rows(self) -> set[int]:
        return {u for u, _ in self.coordinates}

    @property
    def cols(self) -> set[int]:
        return {v for _, v in self.coordinates}


def _ticks(extent: int, count: int) -> list[int]:
    # count evenly spread indices including both ends
    return [round(i * (extent - 1) / (count - 1)) for i in range(count)]


def pattern(name, U: int, V: int) -> SubsetPattern:
    """Retraining subsets on a ``U x V`` grid.

    ``S5``: centre and the four corners. ``S9``: 3x3 uniform grid.
    ``S13``: ``S9`` plus the four quarter-diagonal points between centre and
    corners. ``S25``: 5x5 uniform grid.
    """
    key = name if isinstance(name, str) and name.startswith("S") else f"S{name}"
    if key not in PATTERN_SIZES:
        raise TransferError(f"unknown pattern {name!r}; choose from {sorted(PATTERN_SIZES)}")
    if U < 5 or V < 5:
        raise TransferError(f"subset patterns need a grid of at least 5x5, got {U}x{V}")
    uc, vc = (U - 1) // 2, (V - 1) // 2
    if key == "S5":
        coords = [(uc, vc), (0, 0), (0, V - 1), (U - 1, 0), (U - 1, V - 1)]
    elif key == "S9":
        coords = [(u, v) for u in _ticks(U, 3) for v in _ticks(V, 3)]
    elif key == "S13":
        coords = [(u, v) for u in _ticks(U, 3) for v in _ticks(V, 3)]
        qu, qv = _ticks(U, 5), _ticks(V, 5)
        coords += [(qu[1], qv[1]), (qu[1], qv[3]), (qu[3], qv[1]), (qu[3], qv[3])]
    else:
        coords = [(u, v) for u in _ticks(U, 5) for v in _ticks(V, 5)]
    if len(set(coords)) != PATTERN_SIZES[key]:
        raise TransferError(f"{key} degenerates on a {U}x{V} grid")
    return SubsetPattern(key, tuple(coords))


def modulator_snapshot(bank: KernelBank) -> dict[str, bytes]:
    return {name: bank.value(name).tobytes() for name in bank.names() if is_modulator(name)}


@dataclass
class TransferResult:
    bank: KernelBank
    table: np.ndarray
    involved: np.ndarray
    subset: SubsetPattern

    @property
    def involved_mean(self) -> float:
        return float(self.table[self.involved].mean()) if self.involved.any() else float("nan")

    @property
    def uninvolved_mean(self) -> float:
        return float(self.table[~self.involved].mean()) if (~self.involved).any() else float("nan")

    def write(self, path) -> None:
        path = Path(path)
        fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".csv")
        with os.fdopen(fd, "w") as fh:
            fh.write("u,v,psnr_db,label,in_subset\n")
            subset = set(self.subset.coordinates)
            for u in range(self.table.shape[0]):
                for v in range(self.table.shape[1]):
                    label = "involved" if self.involved[u, v] else "uninvolved"
                    fh.write(f"{u},{v},{self.table[u, v]:.6f},{label},{int((u, v) in subset)}\n")
            fh.write(f"summary,,,involved_mean={self.involved_mean:.6f};"
                     f"uninvolved_mean={self.uninvolved_mean:.6f};pattern={self.subset.name},\n")
        os.replace(tmp, path)


def transfer(pretrained: KernelBank, target: LightField, subset: SubsetPattern,
             schedule: TrainSchedule | None = None, *, verbose: bool = False) -> TransferResult:
    """Retrain the view-shared parameters on ``subset`` views of ``target``.

    ``schedule.epochs`` epochs are run over the subset (default one). The
    pretrained bank is not modified. Raises if any modulator value moved.
    """
    cfg = pretrained.config
    if (cfg.X, cfg.Y, cfg.U, cfg.V) != target.extents:
        raise TransferError(
            f"pretrained model is {cfg.X}x{cfg.Y}x{cfg.U}x{cfg.V}, target light field is "
            f"{target.X}x{target.Y}x{target.U}x{target.V}"
        )
    for u, v in subset.coordinates:
        if not (0 <= u < cfg.U and 0 <= v < cfg.V):
            raise TransferError(f"subset view ({u},{v}) outside the grid")
    if pretrained.tied:
        raise TransferError("transfer expects a bank without tied (quantized) layers")
    schedule = schedule or TrainSchedule(epochs=1)
    bank = pretrained.copy()
    before = modulator_snapshot(bank)
    bank, _ = train(cfg, schedule, target, bank=bank, trainable=lambda name: not is_modulator(name),
                    views=list(subset.coordinates), verbose=verbose)
    after = modulator_snapshot(bank)
    moved = [name for name in before if before[name] != after[name]]
    if moved:
        raise TransferError(f"frozen modulators changed during transfer: {', '.join(moved[:5])}")

    result = evaluate(bank, target)
    rows, cols, members = subset.rows, subset.cols, set(subset.coordinates)
    involved = np.zeros((cfg.U, cfg.V), dtype=bool)
    for u in range(cfg.U):
        for v in range(cfg.V):
            # per-view modulators are involved only through their own view
            involved[u, v] = (u in rows and v in cols) if cfg.allocate_modulators else (u, v) in members
    return TransferResult(bank, result.table, involved, subset)
