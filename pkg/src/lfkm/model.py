"""The kernel-modulated backbone.

Five 3x3 layers each mix shared *descriptor* output channels with per-view
*modulator* channels, followed by a dense decoder to RGB. Modulators are
either stored per view ``(u, v)`` or split into a row set indexed by ``u`` and
a column set indexed by ``v`` whose kernels are concatenated and whose biases
are summed. Kernels can be stored densely or as coefficient volumes over a
shared Fourier-Bessel basis.
"""

from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, field
from typing import Iterator

import numpy as np

from . import numerics as nx
from .fb_basis import compose_kernel, generate_fb_bases
from .numerics import Tensor

__all__ = [
    "LAYER_TABLE",
    "KERNEL_SIZE",
    "PRNG_PCG64",
    "NetworkConfig",
    "NoiseVolume",
    "KernelBank",
    "ParamCount",
    "make_noise",
    "layer_param_names",
    "param_shapes",
    "is_modulator",
    "init_bank",
    "assemble_layer_kernel",
    "forward",
    "render_all",
    "param_count",
    "estimate_params",
]

KERNEL_SIZE = 3
# (kernel size, dilation, upsample afterwards) for the five modulated layers
LAYER_TABLE = ((3, 1, True), (3, 2, True), (3, 2, True), (3, 2, True), (3, 1, False))
NUM_LAYERS = len(LAYER_TABLE)
UPSAMPLE_FACTOR = 2 ** sum(up for _, _, up in LAYER_TABLE)
PRNG_PCG64 = 1
ACTIVATIONS = ("sigmoid", "softmax")
BN_EPS = 1e-5


@dataclass(frozen=True)
class NetworkConfig:
    X: int
    Y: int
    U: int
    V: int
    c_m: int = 2
    c_d: int = 48
    r: int = 6
    n: int = 256
    output_activation: str = "sigmoid"
    allocate_modulators: bool = True
    decompose_kernels: bool = True
    decoder_kernel: int = 1
    seed: int = 0
    dtype: str = "float64"

    def __post_init__(self):
        for label in ("X", "Y", "U", "V"):
            if getattr(self, label) < 1:
                raise ValueError(f"{label} must be positive")
        if self.U > 255 or self.V > 255:
            raise ValueError("angular extents are limited to 255")
        if self.c_d < 1 or self.c_m < 0:
            raise ValueError("need c_d >= 1 and c_m >= 0")
        if self.allocate_modulators and (self.c_m < 2 or self.c_m % 2):
            raise ValueError(f"c_m must be even and >= 2 with modulator allocation, got {self.c_m}")
        if not 1 <= self.r <= KERNEL_SIZE**2:
            raise ValueError(f"r must lie in [1, {KERNEL_SIZE ** 2}]")
        if not 1 <= self.n <= 65535:
            raise ValueError("n must lie in [1, 65535]")
        if self.output_activation not in ACTIVATIONS:
            raise ValueError(f"output activation must be one of {ACTIVATIONS}")
        if self.decoder_kernel not in (1, 3):
            raise ValueError("decoder kernel size must be 1 or 3")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must fit in 64 bits")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")

    @property
    def c(self) -> int:
        return self.c_m + self.c_d

    @property
    def noise_shape(self) -> tuple[int, int, int]:
        # never below 2x2 so the first bicubic stage is well defined
        h = max(2, -(-self.X // UPSAMPLE_FACTOR))
        w = max(2, -(-self.Y // UPSAMPLE_FACTOR))
        return (self.c, h, w)

    def replace(self, **changes) -> "NetworkConfig":
        values = asdict(self)
        values.update(changes)
        return NetworkConfig(**values)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class NoiseVolume:
    data: Tensor
    seed: int
    prng_id: int = PRNG_PCG64


def make_noise(config: NetworkConfig) -> NoiseVolume:
    """Regenerate the uniform input volume from the configuration's seed."""
    rng = np.random.Generator(np.random.PCG64(config.seed))
    values = rng.random(config.noise_shape).astype(config.dtype)
    return NoiseVolume(Tensor(values), config.seed, PRNG_PCG64)


# ---------------------------------------------------------------------------
# parameter layout


def layer_param_names(config: NetworkConfig, layer: int) -> list[str]:
    """Canonical storage order of one modulated layer's parameters."""
    if not 1 <= layer <= NUM_LAYERS:
        raise IndexError(f"modulated layers are numbered 1..{NUM_LAYERS}, got {layer}")
    p = f"L{layer}"
    names = [f"{p}.desc"]
    if config.allocate_modulators:
        names += [f"{p}.mod_u.{u}" for u in range(config.U)]
        names += [f"{p}.mod_v.{v}" for v in range(config.V)]
        names += [f"{p}.bias_u.{u}" for u in range(config.U)]
        names += [f"{p}.bias_v.{v}" for v in range(config.V)]
    else:
        names += [f"{p}.mod.{u}.{v}" for u in range(config.U) for v in range(config.V)]
        names += [f"{p}.bias.{u}.{v}" for u in range(config.U) for v in range(config.V)]
    names += [f"{p}.bn_gamma", f"{p}.bn_beta"]
    return names


def is_modulator(name: str) -> bool:
    parts = name.split(".")
    return (len(parts) >= 3 and parts[0].startswith("L")
            and parts[1] in ("mod_u", "mod_v", "bias_u", "bias_v", "mod", "bias"))


def param_shapes(config: NetworkConfig) -> dict[str, tuple[int, ...]]:
    c, k = config.c, KERNEL_SIZE
    lead = (config.r,) if config.decompose_kernels else (k, k)
    half = config.c_m // 2
    shapes: dict[str, tuple[int, ...]] = {}
    if config.decompose_kernels:
        shapes["bases"] = (k, k, config.r)
    for i in range(1, NUM_LAYERS + 1):
        for name in layer_param_names(config, i):
            kind = name.split(".")[1]
            if kind == "desc":
                shapes[name] = (*lead, c, config.c_d)
            elif kind in ("mod_u", "mod_v"):
                shapes[name] = (*lead, c, half)
            elif kind == "mod":
                shapes[name] = (*lead, c, config.c_m)
            else:
                shapes[name] = (c,)
    kd = config.decoder_kernel
    shapes["dec.kernel"] = (kd, kd, c, 3)
    shapes["dec.bias"] = (3,)
    return shapes


class KernelBank:
    """All trainable values of one light field representation.

    ``params`` maps canonical names to leaf tensors. Once a layer has been
    quantized its parameters are *tied*: they are gathered from a centroid
    tensor through per-parameter index arrays, and gradients flow to the
    centroids instead.
    """

    def __init__(self, config: NetworkConfig, params: dict[str, Tensor]):
        self.config = config
        self.params = params
        self.tied: dict[int, tuple[Tensor, dict[str, np.ndarray]]] = {}
        self._tied_names: dict[str, int] = {}

    def resolve(self, name: str) -> Tensor:
        layer = self._tied_names.get(name)
        if layer is None:
            return self.params[name]
        centroids, index = self.tied[layer]
        return nx.take(centroids, index[name])

    def value(self, name: str) -> np.ndarray:
        return self.resolve(name).data

    def names(self) -> list[str]:
        return list(self.params)

    def leaves(self) -> dict[str, Tensor]:
        """Tensors an optimizer may update: untied params and centroid sets."""
        out = {n: t for n, t in self.params.items() if n not in self._tied_names}
        for layer, (centroids, _) in self.tied.items():
            out[f"L{layer}.centroids"] = centroids
        return out

    def tie_layer(self, layer: int, centroids: np.ndarray, assignments: dict[str, np.ndarray]) -> None:
        names = layer_param_names(self.config, layer)
        if set(assignments) != set(names):
            raise ValueError(f"assignments must cover exactly the parameters of layer {layer}")
        index = {}
        for name in names:
            idx = np.asarray(assignments[name], dtype=np.int64).reshape(self.params[name].shape)
            index[name] = idx
            self._tied_names[name] = layer
        cents = Tensor(np.asarray(centroids, dtype=self.config.dtype), name=f"L{layer}.centroids")
        self.tied[layer] = (cents, index)
        self.sync()

    def sync(self) -> None:
        """Write resolved values of tied layers back into ``params``."""
        for layer, (centroids, index) in self.tied.items():
            for name, idx in index.items():
                self.params[name].data[...] = centroids.data[idx]

    def state(self) -> dict[str, np.ndarray]:
        self.sync()
        return {n: t.data.copy() for n, t in self.params.items()}

    def copy(self) -> "KernelBank":
        return copy.deepcopy(self)

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None
        for centroids, _ in self.tied.values():
            centroids.grad = None

    def total_values(self) -> int:
        return sum(t.size for t in self.params.values())


def init_bank(config: NetworkConfig) -> KernelBank:
    """Fresh bank: fan-in scaled uniform weights, zero biases, unit BN scale.

    Coefficient volumes are scaled so that the composed kernels have the
    spread a dense kernel of the same fan-in would get.
    """
    rng = np.random.Generator(np.random.PCG64(config.seed))
    dtype = config.dtype
    k = KERNEL_SIZE
    shapes = param_shapes(config)
    params: dict[str, Tensor] = {}
    dense_bound = 1.0 / np.sqrt(config.c * k * k)
    coeff_bound = dense_bound * np.sqrt(k * k / config.r) if config.decompose_kernels else dense_bound
    for name, shape in shapes.items():
        kind = name.split(".")[1] if name.startswith("L") else name
        if name == "bases":
            values = generate_fb_bases(k, config.r).bases
        elif name == "dec.kernel":
            kd = config.decoder_kernel
            bound = 1.0 / np.sqrt(config.c * kd * kd)
            values = rng.uniform(-bound, bound, size=shape)
        elif kind in ("desc", "mod_u", "mod_v", "mod"):
            values = rng.uniform(-coeff_bound, coeff_bound, size=shape)
        elif kind == "bn_gamma":
            values = np.ones(shape)
        else:
            values = np.zeros(shape)
        params[name] = Tensor(values.astype(dtype), requires_grad=True, name=name)
    return KernelBank(config, params)


# ---------------------------------------------------------------------------
# rendering


def assemble_layer_kernel(bank: KernelBank, layer: int, u: int, v: int) -> tuple[Tensor, Tensor]:
    """Kernel ``k x k x c x c`` and bias ``c`` of a modulated layer for view ``(u, v)``.

    Output channels are ordered descriptor, then row modulator, then column
    modulator (or the single per-view modulator without allocation).
    """
    cfg = bank.config
    if not (0 <= u < cfg.U and 0 <= v < cfg.V):
        raise IndexError(f"view ({u}, {v}) outside the {cfg.U}x{cfg.V} grid")
    if not 1 <= layer <= NUM_LAYERS:
        raise IndexError(f"layer {layer} is not modulated")
    p = f"L{layer}"
    if cfg.allocate_modulators:
        parts = [bank.resolve(f"{p}.desc"), bank.resolve(f"{p}.mod_u.{u}"), bank.resolve(f"{p}.mod_v.{v}")]
        bias = nx.add(bank.resolve(f"{p}.bias_u.{u}"), bank.resolve(f"{p}.bias_v.{v}"))
    else:
        parts = [bank.resolve(f"{p}.desc"), bank.resolve(f"{p}.mod.{u}.{v}")]
        bias = bank.resolve(f"{p}.bias.{u}.{v}")
    stacked = nx.concat(parts, axis=-1)
    kernel = compose_kernel(bank.resolve("bases"), stacked) if cfg.decompose_kernels else stacked
    return kernel, bias


def forward(bank: KernelBank, noise: NoiseVolume, u: int, v: int) -> Tensor:
    """Render view ``(u, v)`` as a ``3 x X x Y`` tensor with values in (0, 1)."""
    cfg = bank.config
    if noise.data.shape != cfg.noise_shape:
        raise nx.ShapeError(f"noise has shape {noise.data.shape}, config expects {cfg.noise_shape}")
    x = noise.data
    for i, (_, dilation, upsample) in enumerate(LAYER_TABLE, start=1):
        kernel, bias = assemble_layer_kernel(bank, i, u, v)
        x = nx.conv2d(x, kernel, bias, dilation)
        if upsample:
            x = nx.upsample_bicubic_2x(x)
        x = nx.batch_norm(x, bank.resolve(f"L{i}.bn_gamma"), bank.resolve(f"L{i}.bn_beta"), BN_EPS)
        x = nx.gelu(x)
    x = nx.conv2d(x, bank.resolve("dec.kernel"), bank.resolve("dec.bias"), 1)
    x = nx.crop(x, cfg.X, cfg.Y)
    return nx.activation(x, cfg.output_activation)


def render_all(bank: KernelBank, noise: NoiseVolume | None = None) -> np.ndarray:
    """Every view as a ``U x V x 3 x X x Y`` array."""
    cfg = bank.config
    noise = noise or make_noise(cfg)
    out = np.empty((cfg.U, cfg.V, 3, cfg.X, cfg.Y), dtype=cfg.dtype)
    for u, v in _grid(cfg.U, cfg.V):
        out[u, v] = forward(bank, noise, u, v).data
    return out


def _grid(U: int, V: int) -> Iterator[tuple[int, int]]:
    for u in range(U):
        for v in range(V):
            yield u, v


# ---------------------------------------------------------------------------
# parameter accounting


def estimate_params(layers: int, k: int, c_in: int, U: int, V: int, c_m_out: float, c_d_out: float,
                    allocated: bool) -> float:
    """Rough total: ``l k^2 C_in (M C_m + C_d)`` with ``M = UV`` or ``(U+V)/2``."""
    views = 0.5 * (U + V) if allocated else U * V
    return layers * k * k * c_in * (views * c_m_out + c_d_out)


@dataclass(frozen=True)
class ParamCount:
    total: int
    modulator: int
    modulator_share: float
    per_view_estimate: float = field(default=0.0)
    allocated_estimate: float = field(default=0.0)


def param_count(config: NetworkConfig) -> ParamCount:
    """Exact number of stored values, plus the two closed-form estimates."""
    c, k, U, V = config.c, KERNEL_SIZE, config.U, config.V
    taps = config.r if config.decompose_kernels else k * k
    desc = taps * c * config.c_d
    if config.allocate_modulators:
        mod = taps * c * (config.c_m // 2) * (U + V) + (U + V) * c
    else:
        mod = taps * c * config.c_m * U * V + U * V * c
    per_layer = desc + mod + 2 * c
    bases = k * k * config.r if config.decompose_kernels else 0
    decoder = config.decoder_kernel**2 * c * 3 + 3
    total = NUM_LAYERS * per_layer + bases + decoder
    modulator = NUM_LAYERS * mod
    return ParamCount(
        total=total,
        modulator=modulator,
        modulator_share=modulator / total,
        per_view_estimate=estimate_params(NUM_LAYERS, k, c, U, V, config.c_m, config.c_d, allocated=False),
        allocated_estimate=estimate_params(NUM_LAYERS, k, c, U, V, config.c_m, config.c_d, allocated=True),
    )
