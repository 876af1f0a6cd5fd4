"""
Gaussian-Bernoulli / Bernoulli-Bernoulli RBMs trained with CD-k, stacked
greedily into a deep belief network used as a feature-expanding encoder.

Gaussian visible units have unit variance; inputs must be standardized.
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.special import expit

from fuselet.errors import DataError, NumericalError

log = logging.getLogger(__name__)

GAUSSIAN = "gaussian"
BERNOULLI = "bernoulli"
_KIND_CODES = {GAUSSIAN: 0, BERNOULLI: 1}
_MAGIC = b"FSLDBN\x00\x01"
_VERSION = 1


def logistic(x):
    """Overflow-free logistic function."""
    return expit(x)


def softplus(x):
    return np.logaddexp(0.0, x)


@dataclass(frozen=True, eq=False)
class RbmLayer:
    kind: str
    W: np.ndarray  # [n_visible, n_hidden]
    b: np.ndarray  # visible bias
    c: np.ndarray  # hidden bias

    def __post_init__(self):
        if self.kind not in _KIND_CODES:
            raise DataError(f"unknown RBM kind {self.kind!r}")
        nv, nh = self.W.shape
        if nh < 1 or self.b.shape != (nv,) or self.c.shape != (nh,):
            raise DataError(f"inconsistent RBM shapes W{self.W.shape} b{self.b.shape} c{self.c.shape}")

    @property
    def n_visible(self) -> int:
        return self.W.shape[0]

    @property
    def n_hidden(self) -> int:
        return self.W.shape[1]

    @classmethod
    def init(cls, kind: str, n_visible: int, n_hidden: int, rng: np.random.Generator, scale: float = 0.01):
        return cls(kind, rng.normal(0.0, scale, (n_visible, n_hidden)), np.zeros(n_visible), np.zeros(n_hidden))

    def equals(self, other: "RbmLayer") -> bool:
        return (
            self.kind == other.kind
            and self.W.tobytes() == other.W.tobytes()
            and self.b.tobytes() == other.b.tobytes()
            and self.c.tobytes() == other.c.tobytes()
        )


@dataclass(frozen=True)
class CdConfig:
    k: int = 1
    learning_rate: float = 0.01
    momentum: float = 0.5
    weight_decay: float = 1e-4
    batch_size: int = 128
    epochs: int = 10
    seed: int = 0
    init_scale: float = 0.01

    def __post_init__(self):
        if self.k < 1:
            raise DataError("CD steps k must be >= 1")
        # zero is accepted as a frozen-parameter no-op
        if not self.learning_rate >= 0:
            raise DataError("learning_rate must be >= 0")
        if not 0 <= self.momentum < 1:
            raise DataError("momentum must lie in [0, 1)")
        if self.batch_size < 1 or self.epochs < 0:
            raise DataError("batch_size must be >= 1 and epochs >= 0")


def _check_dim(layer: RbmLayer, x: np.ndarray, axis_len: int, what: str):
    if x.shape[-1] != axis_len:
        raise DataError(f"{what} has length {x.shape[-1]}, layer expects {axis_len}")


def hidden_activation(layer: RbmLayer, v) -> np.ndarray:
    """p(h_j = 1 | v); works on a vector or a [batch, n_visible] matrix."""
    v = np.asarray(v, dtype=float)
    _check_dim(layer, v, layer.n_visible, "visible input")
    return logistic(v @ layer.W + layer.c)


def visible_mean(layer: RbmLayer, h) -> np.ndarray:
    """Gaussian mean or Bernoulli probability of the visible units given h."""
    h = np.asarray(h, dtype=float)
    _check_dim(layer, h, layer.n_hidden, "hidden input")
    a = h @ layer.W.T + layer.b
    return a if layer.kind == GAUSSIAN else logistic(a)


def free_energy(layer: RbmLayer, v) -> np.ndarray | float:
    v = np.asarray(v, dtype=float)
    _check_dim(layer, v, layer.n_visible, "visible input")
    hidden_term = softplus(v @ layer.W + layer.c).sum(-1)
    if layer.kind == GAUSSIAN:
        return 0.5 * ((v - layer.b) ** 2).sum(-1) - hidden_term
    return -(v @ layer.b) - hidden_term


def energy(layer: RbmLayer, v, h) -> float:
    """Joint energy E(v, h)."""
    v = np.asarray(v, dtype=float)
    h = np.asarray(h, dtype=float)
    inter = -(v @ layer.W @ h) - layer.c @ h
    if layer.kind == GAUSSIAN:
        return 0.5 * float(((v - layer.b) ** 2).sum()) + inter
    return -(layer.b @ v) + inter


@dataclass
class Momentum:
    """Velocity buffers carried between CD updates of one layer."""

    dW: np.ndarray
    db: np.ndarray
    dc: np.ndarray

    @classmethod
    def zeros_like(cls, layer: RbmLayer) -> "Momentum":
        return cls(np.zeros_like(layer.W), np.zeros_like(layer.b), np.zeros_like(layer.c))


@dataclass
class GibbsTrace:
    """Samples drawn during one CD update, kept for replay in tests."""

    hidden_samples: list = field(default_factory=list)
    visible_samples: list = field(default_factory=list)


def gibbs_chain(layer: RbmLayer, v0: np.ndarray, k: int, rng: np.random.Generator, trace: GibbsTrace | None = None):
    """Run k Gibbs steps from v0; returns (p0, vk, pk).

    Draw order per step: hidden uniforms, then (gaussian only) visible normals.
    """
    p0 = hidden_activation(layer, v0)
    p = p0
    v = v0
    for _ in range(k):
        h = (rng.random(p.shape) < p).astype(float)
        mean = visible_mean(layer, h)
        if layer.kind == GAUSSIAN:
            v = mean + rng.standard_normal(mean.shape)
        else:
            v = mean
        p = hidden_activation(layer, v)
        if trace is not None:
            trace.hidden_samples.append(h)
            trace.visible_samples.append(v)
    return p0, v, p


def cd_update(
    layer: RbmLayer,
    batch,
    cfg: CdConfig,
    rng: np.random.Generator,
    momentum: Momentum | None = None,
    trace: GibbsTrace | None = None,
) -> tuple[RbmLayer, float]:
    """One CD-k step on a batch. ``momentum`` is updated in place when given."""
    v0 = np.atleast_2d(np.asarray(batch, dtype=float))
    _check_dim(layer, v0, layer.n_visible, "batch")
    n = len(v0)
    p0, vk, pk = gibbs_chain(layer, v0, cfg.k, rng, trace)
    recon = float(np.mean((v0 - visible_mean(layer, p0)) ** 2))

    if momentum is None:
        momentum = Momentum.zeros_like(layer)
    grad_W = (v0.T @ p0 - vk.T @ pk) / n
    grad_b = (v0 - vk).mean(0)
    grad_c = (p0 - pk).mean(0)
    dW = cfg.learning_rate * (grad_W - cfg.weight_decay * layer.W) + cfg.momentum * momentum.dW
    db = cfg.learning_rate * grad_b + cfg.momentum * momentum.db
    dc = cfg.learning_rate * grad_c + cfg.momentum * momentum.dc
    new = replace(layer, W=layer.W + dW, b=layer.b + db, c=layer.c + dc)
    if not (np.isfinite(new.W).all() and np.isfinite(new.b).all() and np.isfinite(new.c).all() and np.isfinite(recon)):
        raise NumericalError(
            f"non-finite CD update ({layer.kind} layer {layer.n_visible}x{layer.n_hidden}): "
            f"|W|max={np.nanmax(np.abs(layer.W)):.3g}, |dW|max={np.nanmax(np.abs(dW)):.3g}, "
            f"recon={recon:.3g}, lr={cfg.learning_rate}"
        )
    momentum.dW, momentum.db, momentum.dc = dW, db, dc
    return new, recon


def train_layer(layer: RbmLayer, data: np.ndarray, cfg: CdConfig, rng: np.random.Generator) -> tuple[RbmLayer, list[float]]:
    """Mini-batch CD over ``cfg.epochs`` epochs; returns per-epoch mean reconstruction error."""
    momentum = Momentum.zeros_like(layer)
    errors = []
    n = len(data)
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            layer, err = cd_update(layer, data[idx], cfg, rng, momentum)
            total += err * len(idx)
        errors.append(total / n)
    return layer, errors


@dataclass(frozen=True, eq=False)
class DbnModel:
    layers: tuple[RbmLayer, ...]
    training_log: tuple[tuple[float, ...], ...] = ()
    config: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.layers:
            raise DataError("a DBN needs at least one layer")
        if self.layers[0].kind != GAUSSIAN or any(l.kind != BERNOULLI for l in self.layers[1:]):
            raise DataError("first DBN layer must be gaussian, the rest bernoulli")
        for lo, hi in zip(self.layers[:-1], self.layers[1:]):
            if lo.n_hidden != hi.n_visible:
                raise DataError(f"layer dims do not chain: {lo.n_hidden} -> {hi.n_visible}")

    @property
    def input_dim(self) -> int:
        return self.layers[0].n_visible

    @property
    def embedding_dim(self) -> int:
        return self.layers[-1].n_hidden

    def equals(self, other: "DbnModel") -> bool:
        return len(self.layers) == len(other.layers) and all(a.equals(b) for a, b in zip(self.layers, other.layers))

    def save(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(_pack_layers(self.layers))
        sidecar = {"config": self.config, "training_log": [list(e) for e in self.training_log]}
        path.with_suffix(".json").write_text(json.dumps(sidecar, indent=1, sort_keys=True))

    @classmethod
    def load(cls, path) -> "DbnModel":
        path = Path(path)
        layers = _unpack_layers(path.read_bytes())
        side = path.with_suffix(".json")
        meta = json.loads(side.read_text()) if side.exists() else {}
        return cls(layers, tuple(tuple(e) for e in meta.get("training_log", [])), meta.get("config", {}))


def _pack_layers(layers) -> bytes:
    out = [_MAGIC, struct.pack("<II", _VERSION, len(layers))]
    for layer in layers:
        out.append(struct.pack("<BII", _KIND_CODES[layer.kind], layer.n_visible, layer.n_hidden))
        for arr in (layer.W, layer.b, layer.c):
            out.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return b"".join(out)


def _unpack_layers(buf: bytes) -> tuple[RbmLayer, ...]:
    if buf[:8] != _MAGIC:
        raise DataError("not a DBN model file")
    version, n_layers = struct.unpack_from("<II", buf, 8)
    if version != _VERSION:
        raise DataError(f"unsupported DBN model version {version}")
    kinds = {v: k for k, v in _KIND_CODES.items()}
    pos = 16
    layers = []
    for _ in range(n_layers):
        code, nv, nh = struct.unpack_from("<BII", buf, pos)
        pos += 9
        arrays = []
        for size in (nv * nh, nv, nh):
            arrays.append(np.frombuffer(buf, dtype="<f8", count=size, offset=pos).astype(float))
            pos += 8 * size
        layers.append(RbmLayer(kinds[code], arrays[0].reshape(nv, nh), arrays[1], arrays[2]))
    if pos != len(buf):
        raise DataError("trailing bytes in DBN model file")
    return tuple(layers)


def expansion_dims(input_dim: int, factor: float = 2.0, n_layers: int = 2) -> list[int]:
    """Hidden widths for a feature-expanding DBN: every layer ``factor * input_dim`` wide."""
    return [int(round(factor * input_dim))] * n_layers


def train_dbn(samples, layer_dims, cfg: CdConfig) -> DbnModel:
    """Greedy layer-wise training. Layer i > 0 sees hidden probabilities of layer i-1."""
    data = samples.vectors if hasattr(samples, "vectors") else np.asarray(samples, dtype=float)
    if not layer_dims:
        raise DataError("layer_dims must be non-empty")
    rng = np.random.default_rng(cfg.seed)
    layers = []
    logs = []
    x = data
    for i, n_hidden in enumerate(layer_dims):
        kind = GAUSSIAN if i == 0 else BERNOULLI
        layer = RbmLayer.init(kind, x.shape[1], int(n_hidden), rng, cfg.init_scale)
        layer, errors = train_layer(layer, x, cfg, rng)
        log.info("DBN layer %d (%s %dx%d): recon %s", i, kind, layer.n_visible, layer.n_hidden,
                 ", ".join(f"{e:.4g}" for e in errors))
        layers.append(layer)
        logs.append(tuple(errors))
        x = hidden_activation(layer, x)
    return DbnModel(tuple(layers), tuple(logs), {"layer_dims": list(map(int, layer_dims)), "cd": asdict(cfg)})


def embed(model: DbnModel, samples) -> np.ndarray:
    """Deterministic mean-field pass through every layer."""
    x = samples.vectors if hasattr(samples, "vectors") else np.asarray(samples, dtype=float)
    if x.shape[-1] != model.input_dim:
        raise DataError(f"sample dim {x.shape[-1]} != DBN input dim {model.input_dim}")
    for layer in model.layers:
        x = hidden_activation(layer, x)
    return x
