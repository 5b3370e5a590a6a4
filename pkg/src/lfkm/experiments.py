"""Budget-matched network variants and ablation sweeps."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .lightfield import LightField
from .model import NetworkConfig, param_count
from .trainer import TrainSchedule, evaluate, train

__all__ = ["VARIANTS", "variant_config", "match_budget", "AblationRow", "run_config", "ablate_variants",
           "proportion_study"]

# name -> (allocate_modulators, decompose_kernels)
VARIANTS = {
    "Net": (True, True),
    "Net*": (False, True),
    "Net†": (False, False),
}


def variant_config(base: NetworkConfig, variant: str) -> NetworkConfig:
    try:
        allocate, decompose = VARIANTS[variant]
    except KeyError:
        raise ValueError(f"unknown variant {variant!r}; choose from {list(VARIANTS)}") from None
    return base.replace(allocate_modulators=allocate, decompose_kernels=decompose)


def match_budget(base: NetworkConfig, budget: int, c_m: int | None = None, max_c_d: int = 512) -> NetworkConfig:
    """The ``c_d`` (at fixed ``c_m``) whose parameter total lies closest to ``budget``."""
    c_m = base.c_m if c_m is None else c_m
    best, best_gap = None, None
    for c_d in range(1, max_c_d + 1):
        cfg = base.replace(c_m=c_m, c_d=c_d)
        gap = abs(param_count(cfg).total - budget)
        if best_gap is None or gap < best_gap:
            best, best_gap = cfg, gap
    return best


@dataclass
class AblationRow:
    label: str
    c_m: int
    c_d: int
    params: int
    modulator_share: float
    psnr: list[float]
    variance: list[float]

    @property
    def mean_psnr(self) -> float:
        return float(np.mean(self.psnr))

    @property
    def mean_variance(self) -> float:
        return float(np.mean(self.variance))

    def line(self) -> str:
        return (f"{self.label:8s} (c_m,c_d)=({self.c_m},{self.c_d})  params={self.params:7d}  "
                f"share={100 * self.modulator_share:5.1f}%  PSNR={self.mean_psnr:7.3f} dB  "
                f"var={self.mean_variance:.4f}")


def run_config(cfg: NetworkConfig, lf: LightField, schedule: TrainSchedule, seeds, label: str = "") -> AblationRow:
    """Train ``cfg`` once per seed (network and sampling seeds move together)."""
    psnrs, variances = [], []
    for seed in seeds:
        run_cfg = cfg.replace(seed=seed)
        sched = TrainSchedule(**{**schedule.__dict__, "seed": seed})
        bank, _ = train(run_cfg, sched, lf)
        result = evaluate(bank, lf)
        psnrs.append(result.mean)
        variances.append(result.variance)
    count = param_count(cfg)
    return AblationRow(label or f"({cfg.c_m},{cfg.c_d})", cfg.c_m, cfg.c_d, count.total, count.modulator_share,
                       psnrs, variances)


def ablate_variants(lf: LightField, base: NetworkConfig, budget: int, schedule: TrainSchedule,
                    seeds=(0, 1, 2)) -> dict[str, AblationRow]:
    """Train Net, Net* and Net† with ``c_d`` chosen to match ``budget``."""
    rows = {}
    for name in VARIANTS:
        cfg = match_budget(variant_config(base, name), budget)
        rows[name] = run_config(cfg, lf, schedule, seeds, label=name)
    return rows


def proportion_study(lf: LightField, base: NetworkConfig, budget: int, c_m_values, schedule: TrainSchedule,
                     seeds=(0,)) -> list[AblationRow]:
    """Vary the modulator channel count at a fixed parameter budget."""
    return [run_config(match_budget(base, budget, c_m), lf, schedule, seeds) for c_m in c_m_values]
