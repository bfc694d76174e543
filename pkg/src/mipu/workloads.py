"""Workload descriptions shared by the compiler and the reference oracle.

Workload files are TOML.  Tensors are given inline as nested arrays, as a
raw little-endian FP32 blob (``<name>_blob`` plus ``<name>_shape``), or
generated (``fill = "ones"`` / ``"random"`` with ``seed``).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib


class ShapeError(ValueError):
    pass


class WorkloadError(ValueError):
    pass


def as_f32(x, ndim: int | None = None, name: str = "tensor") -> np.ndarray:
    arr = np.asarray(x, dtype=np.float32)
    if ndim is not None and arr.ndim != ndim:
        raise ShapeError(f"{name} must be {ndim}-D, got shape {arr.shape}")
    if arr.ndim > 4:
        raise ShapeError(f"{name}: tensors are at most 4-D")
    return np.ascontiguousarray(arr)


@dataclass
class MatMulSpec:
    a: np.ndarray
    b: np.ndarray
    mode: str = "parallel_sitems"

    def __post_init__(self):
        self.a = as_f32(self.a, 2, "A")
        self.b = as_f32(self.b, 2, "B")
        if self.a.shape[1] != self.b.shape[0]:
            raise ShapeError(f"inner dimensions differ: A{self.a.shape} x B{self.b.shape}")
        if min(self.a.shape + self.b.shape) < 1:
            raise ShapeError("matrix dimensions must be positive")
        if self.mode not in ("single_sitem_sequential", "parallel_sitems"):
            raise WorkloadError(f"unknown matmul mode {self.mode!r}")

    @property
    def dims(self) -> tuple[int, int, int]:
        n, m = self.a.shape
        return n, m, self.b.shape[1]


@dataclass
class DenseLayer:
    weights: np.ndarray          # (out, in)
    bias: np.ndarray | None = None
    activation: str = "none"     # none | relu | softmax

    def __post_init__(self):
        self.weights = as_f32(self.weights, 2, "dense weights")
        if self.bias is not None:
            self.bias = as_f32(self.bias, 1, "dense bias")
            if self.bias.shape[0] != self.weights.shape[0]:
                raise ShapeError("bias length must match dense output size")
        if self.activation not in ("none", "relu", "softmax"):
            raise WorkloadError(f"unknown activation {self.activation!r}")


@dataclass
class CnnSpec:
    """Convolution layer (optionally RELU and max-pool) plus host-side dense head.

    ``images`` is (batch, channels, h, w); ``filters`` is (count, channels, k, k).
    """

    images: np.ndarray
    filters: np.ndarray
    stride: int = 1
    padding: int = 0
    relu: bool = True
    pool: tuple[int, int] | None = (2, 1)   # (window, stride)
    dense: list[DenseLayer] = field(default_factory=list)

    def __post_init__(self):
        imgs = as_f32(self.images, name="images")
        if imgs.ndim == 2:
            imgs = imgs[None, None]
        elif imgs.ndim == 3:
            imgs = imgs[:, None]
        self.images = imgs
        f = as_f32(self.filters, name="filters")
        if f.ndim == 3:
            f = f[:, None]
        self.filters = f
        if imgs.ndim != 4 or f.ndim != 4:
            raise ShapeError("images must be (B,C,H,W) and filters (F,C,k,k)")
        if f.shape[1] != imgs.shape[1]:
            raise ShapeError(f"filter channels {f.shape[1]} != image channels {imgs.shape[1]}")
        if f.shape[2] != f.shape[3]:
            raise ShapeError("filters must be square")
        if self.stride < 1 or self.padding < 0:
            raise ShapeError("stride must be >= 1 and padding >= 0")
        for name, (num, den) in {"height": (imgs.shape[2] - self.kernel + 2 * self.padding, self.stride),
                                 "width": (imgs.shape[3] - self.kernel + 2 * self.padding, self.stride)}.items():
            if num < 0 or num % den:
                raise ShapeError(f"conv output {name} is not a positive integer")
        if self.pool is not None:
            self.pool = (int(self.pool[0]), int(self.pool[1]))
            pk, ps = self.pool
            ho, wo = self.conv_shape
            if pk < 1 or ps < 1 or pk > ho or pk > wo or (ho - pk) % ps or (wo - pk) % ps:
                raise ShapeError(f"pool {self.pool} does not tile a {ho}x{wo} map")
        prev = self.feature_size
        for layer in self.dense:
            if layer.weights.shape[1] != prev:
                raise ShapeError(f"dense layer expects {layer.weights.shape[1]} inputs, gets {prev}")
            prev = layer.weights.shape[0]

    @property
    def kernel(self) -> int:
        return self.filters.shape[2]

    @property
    def channels(self) -> int:
        return self.filters.shape[1]

    @property
    def n_filters(self) -> int:
        return self.filters.shape[0]

    @property
    def batch(self) -> int:
        return self.images.shape[0]

    @property
    def conv_shape(self) -> tuple[int, int]:
        h, w = self.images.shape[2:]
        k, p, s = self.kernel, self.padding, self.stride
        return (h - k + 2 * p) // s + 1, (w - k + 2 * p) // s + 1

    @property
    def output_shape(self) -> tuple[int, int]:
        ho, wo = self.conv_shape
        if self.pool is None:
            return ho, wo
        pk, ps = self.pool
        return (ho - pk) // ps + 1, (wo - pk) // ps + 1

    @property
    def feature_size(self) -> int:
        po, qo = self.output_shape
        return self.n_filters * po * qo


def small_cnn_spec(images=None, filters=None, seed: int | None = 0, batch: int = 1) -> CnnSpec:
    """5x5 single-channel image, four 3x3 filters, RELU, 2x2/1 max-pool, dense 16 -> 16 -> 4."""
    rng = np.random.default_rng(seed)
    if images is None:
        images = rng.standard_normal((batch, 1, 5, 5)).astype(np.float32)
    if filters is None:
        filters = rng.standard_normal((4, 1, 3, 3)).astype(np.float32)
    dense = [
        DenseLayer(rng.standard_normal((16, 16)).astype(np.float32) * 0.25, None, "relu"),
        DenseLayer(rng.standard_normal((4, 16)).astype(np.float32) * 0.25, None, "softmax"),
    ]
    return CnnSpec(images, filters, stride=1, padding=0, relu=True, pool=(2, 1), dense=dense)


# --- file IO ---------------------------------------------------------------

def _tensor(data: dict, name: str, base: Path, shape=None, rng=None, fill=None):
    if name in data:
        return as_f32(data[name], name=name)
    blob = data.get(f"{name}_blob")
    shp = data.get(f"{name}_shape", shape)
    if blob is not None:
        if shp is None:
            raise WorkloadError(f"{name}_blob needs {name}_shape")
        raw = np.fromfile(base / blob, dtype="<f4")
        if raw.size != int(np.prod(shp)):
            raise ShapeError(f"{blob}: {raw.size} values, shape {shp} needs {int(np.prod(shp))}")
        return raw.reshape(shp).astype(np.float32)
    if fill is not None and shp is not None:
        if fill == "ones":
            return np.ones(shp, dtype=np.float32)
        if fill == "random":
            return rng.standard_normal(shp).astype(np.float32)
        raise WorkloadError(f"unknown fill {fill!r}")
    raise WorkloadError(f"workload is missing tensor {name!r}")


def load_workload(path, seed: int | None = None) -> tuple[MatMulSpec | CnnSpec, dict]:
    """Read a workload file; returns the spec and its optional ``[fabric]`` table.

    ``seed`` overrides the file's ``seed`` for generated tensors.
    """
    path = Path(path)
    try:
        data = tomllib.loads(path.read_text())
    except tomllib.TOMLDecodeError as exc:
        raise WorkloadError(f"{path}: {exc}") from None
    if seed is not None:
        data["seed"] = seed
    return parse_workload(data, path.parent), data.get("fabric", {})


def parse_workload(data: dict, base: Path = Path(".")) -> MatMulSpec | CnnSpec:
    kind = data.get("kind")
    rng = np.random.default_rng(data.get("seed", 0))
    fill = data.get("fill")
    if kind == "matmul":
        dims = data.get("dims")
        n, m, p = dims if dims else (None, None, None)
        a = _tensor(data, "a", base, (n, m) if dims else None, rng, fill)
        b = _tensor(data, "b", base, (m, p) if dims else None, rng, fill)
        return MatMulSpec(a, b, data.get("mode", "parallel_sitems"))
    if kind == "cnn":
        c, h, w = data.get("image_shape", (1, 5, 5))
        batch = data.get("batch", 1)
        images = _tensor(data, "images", base, (batch, c, h, w), rng, data.get("image_fill", fill))
        nf, k = data.get("filter_count", 4), data.get("kernel", 3)
        filters = _tensor(data, "filters", base, (nf, c, k, k), rng, data.get("filter_fill", fill))
        pool = data.get("pool", {"size": 2, "stride": 1})
        pool = None if pool in (False, None, {}) else (pool["size"], pool.get("stride", 1))
        dense = []
        for layer in data.get("dense", []):
            wts = _tensor(layer, "weights", base, layer.get("weights_shape"), rng,
                          layer.get("fill", "random"))
            bias = _tensor(layer, "bias", base, None, rng) if ("bias" in layer or "bias_blob" in layer) else None
            dense.append(DenseLayer(wts, bias, layer.get("activation", "none")))
        return CnnSpec(images, filters, stride=data.get("stride", 1), padding=data.get("padding", 0),
                       relu=data.get("relu", True), pool=pool, dense=dense)
    raise WorkloadError(f"unknown workload kind {kind!r}")
