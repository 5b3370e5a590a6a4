"""Light fields as grids of RGB sub-aperture images, plus image metrics."""

from __future__ import annotations

import csv
import os
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

__all__ = [
    "LightField",
    "LightFieldError",
    "PSNR_CAP",
    "view_filename",
    "load_lightfield",
    "save_lightfield",
    "psnr",
    "error_map",
    "save_error_map",
    "write_psnr_csv",
    "make_synthetic_lf",
]

PSNR_CAP = 99.0
ERROR_MAP_GAIN = 10.0


class LightFieldError(ValueError):
    """Malformed light field on disk or mismatched extents."""


@dataclass
class LightField:
    """``views`` holds every sub-aperture image as a ``U x V x 3 x X x Y`` array."""

    views: np.ndarray

    def __post_init__(self):
        views = np.asarray(self.views, dtype=np.float64)
        if views.ndim != 5 or views.shape[2] != 3:
            raise LightFieldError(f"expected U x V x 3 x X x Y views, got shape {views.shape}")
        self.views = np.clip(views, 0.0, 1.0)

    @property
    def U(self) -> int:
        return self.views.shape[0]

    @property
    def V(self) -> int:
        return self.views.shape[1]

    @property
    def X(self) -> int:
        return self.views.shape[3]

    @property
    def Y(self) -> int:
        return self.views.shape[4]

    @property
    def extents(self) -> tuple[int, int, int, int]:
        return (self.X, self.Y, self.U, self.V)

    def view(self, u: int, v: int) -> np.ndarray:
        return self.views[u, v]


def view_filename(u: int, v: int) -> str:
    return f"view_{u:02d}_{v:02d}.png"


def _write_png(path: Path, rgb: np.ndarray) -> None:
    # rgb is 3 x X x Y in [0, 1]; written atomically
    pixels = np.round(np.clip(rgb, 0.0, 1.0) * 255.0).astype(np.uint8).transpose(1, 2, 0)
    fd, tmp = tempfile.mkstemp(suffix=".png", dir=path.parent)
    os.close(fd)
    try:
        Image.fromarray(pixels, mode="RGB").save(tmp, format="PNG")
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


def load_lightfield(directory) -> LightField:
    """Read ``view_UU_VV.png`` files (zero based, row-major) into a light field."""
    directory = Path(directory)
    if not directory.is_dir():
        raise LightFieldError(f"{directory} is not a directory")
    found = {}
    for path in directory.glob("view_*_*.png"):
        parts = path.stem.split("_")
        if len(parts) == 3 and parts[1].isdigit() and parts[2].isdigit():
            found[(int(parts[1]), int(parts[2]))] = path
    if not found:
        raise LightFieldError(f"no view_UU_VV.png files in {directory}")
    U = max(u for u, _ in found) + 1
    V = max(v for _, v in found) + 1
    views = None
    for u in range(U):
        for v in range(V):
            path = found.get((u, v))
            if path is None:
                raise LightFieldError(f"missing view ({u},{v}): {view_filename(u, v)}")
            try:
                with Image.open(path) as img:
                    arr = np.asarray(img.convert("RGB"), dtype=np.float64) / 255.0
            except OSError as exc:
                raise LightFieldError(f"cannot read {path}: {exc}") from exc
            arr = arr.transpose(2, 0, 1)
            if views is None:
                views = np.empty((U, V, *arr.shape))
            elif arr.shape != views.shape[2:]:
                raise LightFieldError(
                    f"view ({u},{v}) is {arr.shape[1]}x{arr.shape[2]}, expected {views.shape[3]}x{views.shape[4]}"
                )
            views[u, v] = arr
    return LightField(views)


def save_lightfield(lf: LightField, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for u in range(lf.U):
        for v in range(lf.V):
            _write_png(directory / view_filename(u, v), lf.views[u, v])


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """PSNR in dB for peak 1.0, over all channels jointly, capped at 99 dB."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise LightFieldError(f"psnr: shapes {a.shape} and {b.shape} differ")
    err = float(np.mean((a - b) ** 2))
    if err <= 10 ** (-PSNR_CAP / 10):
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(1.0 / err))


def error_map(decoded: LightField, reference: LightField) -> np.ndarray:
    """Mean absolute error per pixel, averaged over views and channels."""
    if decoded.views.shape != reference.views.shape:
        raise LightFieldError(f"error_map: {decoded.views.shape} vs {reference.views.shape}")
    return np.abs(decoded.views - reference.views).mean(axis=(0, 1, 2))


def save_error_map(emap: np.ndarray, path) -> None:
    """Grey PNG of an error map amplified 10x and clamped to [0, 1]."""
    scaled = np.clip(emap * ERROR_MAP_GAIN, 0.0, 1.0)
    _write_png(Path(path), np.broadcast_to(scaled, (3, *emap.shape)))


def write_psnr_csv(table: np.ndarray, path, extra: dict | None = None) -> None:
    """One row per view plus a summary row holding mean, variance and ``extra``."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(suffix=".csv", dir=path.parent)
    with os.fdopen(fd, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["u", "v", "psnr_db"])
        for u in range(table.shape[0]):
            for v in range(table.shape[1]):
                writer.writerow([u, v, f"{table[u, v]:.6f}"])
        summary = {"mean": float(table.mean()), "variance": float(table.var())}
        summary.update(extra or {})
        writer.writerow(["summary", "", ";".join(f"{k}={v}" for k, v in summary.items())])
    os.replace(tmp, path)


# ---------------------------------------------------------------------------
# procedural scenes


def _palette(variant: int) -> np.ndarray:
    rng = np.random.default_rng(1000 + variant)
    return rng.uniform(0.2, 0.8, size=(2, 3))


def _soft_checker(rows: np.ndarray, cols: np.ndarray, period: float, sharpness: float) -> np.ndarray:
    s = np.sin(2 * np.pi * rows / period) * np.sin(2 * np.pi * cols / period)
    return 0.5 + 0.5 * np.tanh(sharpness * s)


def make_synthetic_lf(kind: str, X: int, Y: int, U: int, V: int, disparity: float = 0.0, *,
                      period: float = 16.0, sharpness: float = 2.0, variant: int = 0) -> LightField:
    """Deterministic test scenes.

    ``gradient``: a smooth colour ramp identical in every view.
    ``checkerboard-parallax``: a softened, coloured checkerboard plane shifted
    by ``disparity * (u - u_c)`` pixels along the width axis and by
    ``disparity * (v - v_c)`` along the height axis in view ``(u, v)``.
    ``variant`` changes colours and phase so scene pairs can be built.
    """
    if min(X, Y, U, V) < 1:
        raise ValueError("dimensions must be positive")
    rows, cols = np.meshgrid(np.arange(X, dtype=np.float64), np.arange(Y, dtype=np.float64), indexing="ij")
    views = np.empty((U, V, 3, X, Y))
    if kind == "gradient":
        ramp = np.stack([
            rows / max(X - 1, 1),
            cols / max(Y - 1, 1),
            0.5 * (1.0 - rows / max(X - 1, 1)) + 0.25,
        ])
        views[...] = ramp
        return LightField(views)
    if kind != "checkerboard-parallax":
        raise ValueError(f"unknown scene kind {kind!r}")
    colors = _palette(variant)
    phase = 3.0 * variant
    uc, vc = (U - 1) / 2.0, (V - 1) / 2.0
    for u in range(U):
        for v in range(V):
            r = rows - disparity * (v - vc) + phase
            c = cols - disparity * (u - uc) + phase
            w = _soft_checker(r, c, period, sharpness)
            shade = 0.85 + 0.15 * np.cos(2 * np.pi * (r + c) / (4 * period))
            img = (w[None] * colors[0][:, None, None] + (1 - w[None]) * colors[1][:, None, None]) * shade[None]
            views[u, v] = img
    return LightField(views)
