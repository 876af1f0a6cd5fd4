"""
Invariant information clustering heads on DBN embeddings.

A head is an affine map (optionally behind one ReLU layer) followed by a
softmax. Heads are trained to maximise the mutual information between the
cluster assignments of an embedding and of a Gaussian-perturbed copy. A
two-level tree routes samples by root argmax to child heads, and pixels get
a composed label ``root * n_child + child``.
"""

from __future__ import annotations

import json
import logging
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from fuselet.errors import DataError, NumericalError
from fuselet.raster import GeoGrid, Raster, load_raster, save_raster
from fuselet.rbm import DbnModel, embed
from fuselet.sampling import ChannelStats, extract_neighborhoods, standardize

log = logging.getLogger(__name__)

JOINT_FLOOR = 1e-9
ROW_SUM_TOL = 1e-6
_MAGIC = b"FSLIIC\x00\x01"
_VERSION = 1


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


@dataclass(frozen=True, eq=False)
class ClusterHead:
    weights: np.ndarray  # [in_dim, C]
    bias: np.ndarray  # [C]
    hidden_weights: np.ndarray | None = None  # [embedding_dim, hidden_dim]
    hidden_bias: np.ndarray | None = None
    loss_log: tuple[float, ...] = ()

    def __post_init__(self):
        if self.weights.ndim != 2 or self.bias.shape != (self.weights.shape[1],):
            raise DataError(f"head shapes disagree: weights {self.weights.shape}, bias {self.bias.shape}")
        if (self.hidden_weights is None) != (self.hidden_bias is None):
            raise DataError("hidden layer needs both weights and bias")
        if self.hidden_weights is not None and self.hidden_weights.shape[1] != self.weights.shape[0]:
            raise DataError("hidden layer width does not match output weights")

    @property
    def n_classes(self) -> int:
        return self.weights.shape[1]

    @property
    def input_dim(self) -> int:
        return (self.hidden_weights if self.hidden_weights is not None else self.weights).shape[0]

    @property
    def hidden_dim(self) -> int:
        return 0 if self.hidden_weights is None else self.hidden_weights.shape[1]

    def params(self) -> dict[str, np.ndarray]:
        p = {"weights": self.weights, "bias": self.bias}
        if self.hidden_weights is not None:
            p["hidden_weights"] = self.hidden_weights
            p["hidden_bias"] = self.hidden_bias
        return p

    def with_params(self, params: dict[str, np.ndarray], loss_log=None) -> "ClusterHead":
        return ClusterHead(
            params["weights"],
            params["bias"],
            params.get("hidden_weights"),
            params.get("hidden_bias"),
            self.loss_log if loss_log is None else tuple(loss_log),
        )

    @classmethod
    def init(cls, input_dim: int, n_classes: int, rng: np.random.Generator, hidden_dim: int = 0, scale: float = 1.0):
        """Gaussian weights with std ``scale / sqrt(fan_in)``, zero biases."""
        if hidden_dim:
            hw = rng.normal(0.0, np.sqrt(2.0 / input_dim), (input_dim, hidden_dim))
            w = rng.normal(0.0, scale / np.sqrt(hidden_dim), (hidden_dim, n_classes))
            return cls(w, np.zeros(n_classes), hw, np.zeros(hidden_dim))
        w = rng.normal(0.0, scale / np.sqrt(input_dim), (input_dim, n_classes))
        return cls(w, np.zeros(n_classes))

    def equals(self, other: "ClusterHead") -> bool:
        a, b = self.params(), other.params()
        return a.keys() == b.keys() and all(a[k].tobytes() == b[k].tobytes() for k in a)


def _forward(head: ClusterHead, z: np.ndarray):
    if head.hidden_weights is not None:
        pre = z @ head.hidden_weights + head.hidden_bias
        h = np.maximum(pre, 0.0)
    else:
        pre, h = None, z
    return softmax(h @ head.weights + head.bias), (z, pre, h)


def head_forward(head: ClusterHead, z) -> np.ndarray:
    """Class probabilities for one embedding or a [batch, dim] matrix."""
    z = np.asarray(z, dtype=float)
    if z.shape[-1] != head.input_dim:
        raise DataError(f"embedding dim {z.shape[-1]} != head input dim {head.input_dim}")
    return _forward(head, z)[0]


def _backward(head: ClusterHead, probs: np.ndarray, cache, grad_probs: np.ndarray) -> dict[str, np.ndarray]:
    z, pre, h = cache
    g_logits = probs * (grad_probs - (grad_probs * probs).sum(1, keepdims=True))
    grads = {"weights": h.T @ g_logits, "bias": g_logits.sum(0)}
    if head.hidden_weights is not None:
        g_pre = (g_logits @ head.weights.T) * (pre > 0)
        grads["hidden_weights"] = z.T @ g_pre
        grads["hidden_bias"] = g_pre.sum(0)
    return grads


def _check_probs(p: np.ndarray, name: str):
    if p.ndim != 2 or len(p) < 1:
        raise DataError(f"{name} must be a non-empty [B, C] matrix")
    if not np.all(np.abs(p.sum(1) - 1.0) <= ROW_SUM_TOL):
        raise DataError(f"rows of {name} must sum to 1 within {ROW_SUM_TOL}")


def _joint(pa: np.ndarray, pb: np.ndarray) -> np.ndarray:
    P = pa.T @ pb / len(pa)
    return 0.5 * (P + P.T)


def _floored_log(x: np.ndarray) -> np.ndarray:
    return np.log(np.maximum(x, JOINT_FLOOR))


def _mutual_information_terms(S: np.ndarray):
    """Marginals and loss. Logs see entries floored at JOINT_FLOOR; exact
    zeros contribute nothing (0 ln 0 = 0), so closed forms stay exact."""
    pi = S.sum(1, keepdims=True)
    pj = S.sum(0, keepdims=True)
    loss = -(S * (_floored_log(S) - _floored_log(pi) - _floored_log(pj))).sum()
    return pi, pj, loss


def iic_loss(probs_a, probs_b) -> tuple[float, np.ndarray]:
    """Negative mutual information of the symmetrized joint."""
    pa = np.asarray(probs_a, dtype=float)
    pb = np.asarray(probs_b, dtype=float)
    _check_probs(pa, "probs_a")
    _check_probs(pb, "probs_b")
    if pa.shape != pb.shape:
        raise DataError(f"probability batches differ in shape: {pa.shape} vs {pb.shape}")
    J = _joint(pa, pb)
    _, _, loss = _mutual_information_terms(J)
    return float(loss), J


def iic_loss_grad(pa: np.ndarray, pb: np.ndarray) -> tuple[float, np.ndarray, np.ndarray]:
    """Loss and its gradient with respect to both probability batches.

    Below the floor a log is constant, so only the linear factor there
    carries gradient.
    """
    S = _joint(pa, pb)
    pi, pj, loss = _mutual_information_terms(S)
    unfloored = lambda x: (x >= JOINT_FLOOR).astype(float)
    gS = (
        -(_floored_log(S) + unfloored(S))
        + (_floored_log(pi) + unfloored(pi))
        + (_floored_log(pj) + unfloored(pj))
    )
    gP = 0.5 * (gS + gS.T)
    n = len(pa)
    return float(loss), pb @ gP.T / n, pa @ gP / n


def head_loss_grad(head: ClusterHead, z: np.ndarray, z_pert: np.ndarray):
    """IIC loss of (z, z_pert) through the head, and gradients of every parameter."""
    pa, cache_a = _forward(head, z)
    pb, cache_b = _forward(head, z_pert)
    loss, ga, gb = iic_loss_grad(pa, pb)
    grads_a = _backward(head, pa, cache_a, ga)
    grads_b = _backward(head, pb, cache_b, gb)
    return loss, {k: grads_a[k] + grads_b[k] for k in grads_a}


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PerturbationConfig:
    noise_sigma: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if not self.noise_sigma >= 0:
            raise DataError("noise_sigma must be >= 0")


@dataclass(frozen=True)
class HeadConfig:
    n_classes: int
    epochs: int = 20
    batch_size: int = 1024
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    hidden_dim: int = 0
    init_scale: float = 1.0
    perturbation: PerturbationConfig = PerturbationConfig()

    def __post_init__(self):
        if self.n_classes < 1 or self.batch_size < 1 or self.epochs < 0:
            raise DataError("n_classes and batch_size must be >= 1, epochs >= 0")
        if self.learning_rate < 0:
            raise DataError("learning_rate must be >= 0")


class Adam:
    def __init__(self, params: dict[str, np.ndarray], lr: float, beta1: float, beta2: float, eps: float):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
        self.t += 1
        out = {}
        for k, p in params.items():
            g = grads[k]
            self.m[k] = self.beta1 * self.m[k] + (1 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1 - self.beta2) * g * g
            m_hat = self.m[k] / (1 - self.beta1**self.t)
            v_hat = self.v[k] / (1 - self.beta2**self.t)
            out[k] = p - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
        return out


def train_head(embeddings, cfg: HeadConfig, rng: np.random.Generator | None = None) -> ClusterHead:
    """Adam on the IIC loss with fresh Gaussian noise per batch."""
    z_all = np.asarray(embeddings, dtype=float)
    if len(z_all) < 2:
        raise DataError("train_head needs at least 2 samples")
    if rng is None:
        rng = np.random.default_rng(cfg.perturbation.seed)
    head = ClusterHead.init(z_all.shape[1], cfg.n_classes, rng, cfg.hidden_dim, cfg.init_scale)
    params = head.params()
    opt = Adam(params, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.eps)
    sigma = cfg.perturbation.noise_sigma
    n = len(z_all)
    losses = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        total, count = 0.0, 0
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            if len(idx) < 2:
                continue
            z = z_all[idx]
            z_pert = z + rng.normal(0.0, sigma, z.shape)
            loss, grads = head_loss_grad(head.with_params(params), z, z_pert)
            if not np.isfinite(loss) or not all(np.isfinite(g).all() for g in grads.values()):
                raise NumericalError(f"non-finite IIC loss/gradient at epoch {epoch}, batch start {start}: loss={loss}")
            params = opt.step(params, grads)
            total += loss * len(idx)
            count += len(idx)
        losses.append(total / max(count, 1))
    return head.with_params(params, losses)


@dataclass(frozen=True)
class TreeConfig:
    c_root: int = 800
    c_child: int = 100
    min_child_samples: int = 100
    epochs: int = 20
    child_epochs: int | None = None
    batch_size: int = 1024
    learning_rate: float = 1e-3
    hidden_dim: int = 0
    init_scale: float = 1.0
    noise_sigma: float = 0.05
    seed: int = 0

    def head_config(self, n_classes: int, epochs: int) -> HeadConfig:
        return HeadConfig(
            n_classes=n_classes,
            epochs=epochs,
            batch_size=self.batch_size,
            learning_rate=self.learning_rate,
            hidden_dim=self.hidden_dim,
            init_scale=self.init_scale,
            perturbation=PerturbationConfig(self.noise_sigma, self.seed),
        )


@dataclass(frozen=True, eq=False)
class ClusterTree:
    root: ClusterHead
    children: dict[int, ClusterHead]
    c_child: int
    min_child_samples: int = 100
    noise_sigma: float = 0.05
    routing_counts: dict[int, int] = field(default_factory=dict)
    config: dict = field(default_factory=dict)

    def predict(self, embeddings: np.ndarray) -> np.ndarray:
        """Composed labels root * c_child + child (child = 0 without a child head)."""
        root = head_forward(self.root, embeddings).argmax(1)
        child = np.zeros_like(root)
        for label, head in self.children.items():
            sel = root == label
            if sel.any():
                child[sel] = head_forward(head, embeddings[sel]).argmax(1)
        return root * self.c_child + child

    def equals(self, other: "ClusterTree") -> bool:
        return (
            self.c_child == other.c_child
            and self.root.equals(other.root)
            and self.children.keys() == other.children.keys()
            and all(self.children[k].equals(other.children[k]) for k in self.children)
        )

    def save(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        blocks = [_MAGIC, struct.pack("<IIII", _VERSION, self.root.n_classes, self.c_child, len(self.children))]
        blocks.append(_pack_head(-1, self.root))
        for label in sorted(self.children):
            blocks.append(_pack_head(label, self.children[label]))
        path.write_bytes(b"".join(blocks))
        sidecar = {
            "config": self.config,
            "min_child_samples": self.min_child_samples,
            "noise_sigma": self.noise_sigma,
            "routing_counts": {str(k): int(v) for k, v in sorted(self.routing_counts.items())},
            "loss_curves": {
                "root": list(self.root.loss_log),
                **{str(k): list(h.loss_log) for k, h in sorted(self.children.items())},
            },
        }
        path.with_suffix(".json").write_text(json.dumps(sidecar, indent=1, sort_keys=True))

    @classmethod
    def load(cls, path) -> "ClusterTree":
        path = Path(path)
        buf = path.read_bytes()
        if buf[:8] != _MAGIC:
            raise DataError("not a cluster tree file")
        version, _, c_child, n_children = struct.unpack_from("<IIII", buf, 8)
        if version != _VERSION:
            raise DataError(f"unsupported cluster tree version {version}")
        pos = 24
        side = path.with_suffix(".json")
        meta = json.loads(side.read_text()) if side.exists() else {}
        curves = meta.get("loss_curves", {})
        _, root, pos = _unpack_head(buf, pos, curves.get("root", ()))
        children = {}
        for _ in range(n_children):
            label = struct.unpack_from("<i", buf, pos)[0]
            _, head, pos = _unpack_head(buf, pos, curves.get(str(label), ()))
            children[label] = head
        return cls(
            root,
            children,
            c_child,
            meta.get("min_child_samples", 100),
            meta.get("noise_sigma", 0.05),
            {int(k): v for k, v in meta.get("routing_counts", {}).items()},
            meta.get("config", {}),
        )


def _pack_head(label: int, head: ClusterHead) -> bytes:
    parts = [struct.pack("<iIII", label, head.input_dim, head.hidden_dim, head.n_classes)]
    for arr in head.params().values():
        parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return b"".join(parts)


def _unpack_head(buf: bytes, pos: int, loss_log) -> tuple[int, ClusterHead, int]:
    label, in_dim, hidden, n_classes = struct.unpack_from("<iIII", buf, pos)
    pos += 16
    out_in = hidden or in_dim
    shapes = [("weights", (out_in, n_classes)), ("bias", (n_classes,))]
    if hidden:
        shapes += [("hidden_weights", (in_dim, hidden)), ("hidden_bias", (hidden,))]
    params = {}
    for name, shape in shapes:
        size = int(np.prod(shape))
        params[name] = np.frombuffer(buf, dtype="<f8", count=size, offset=pos).astype(float).reshape(shape)
        pos += 8 * size
    head = ClusterHead(params["weights"], params["bias"], params.get("hidden_weights"),
                       params.get("hidden_bias"), tuple(loss_log))
    return label, head, pos


def train_tree(embeddings, cfg: TreeConfig, threads: int = 1) -> ClusterTree:
    """Root head on everything, then one child head per well-populated root label."""
    z = np.asarray(embeddings, dtype=float)
    if len(z) < max(cfg.min_child_samples, 2):
        raise DataError(f"train_tree needs at least {max(cfg.min_child_samples, 2)} samples, got {len(z)}")
    root = train_head(z, cfg.head_config(cfg.c_root, cfg.epochs), np.random.default_rng([cfg.seed, 0]))
    routed = head_forward(root, z).argmax(1)
    counts = np.bincount(routed, minlength=cfg.c_root)
    routing = {int(k): int(counts[k]) for k in np.flatnonzero(counts)}
    labels = [k for k, n in routing.items() if n >= cfg.min_child_samples]
    log.info("root routing: %d labels populated, %d get children", len(routing), len(labels))

    child_epochs = cfg.epochs if cfg.child_epochs is None else cfg.child_epochs

    def fit_child(label: int) -> ClusterHead:
        rng = np.random.default_rng([cfg.seed, label + 1])
        return train_head(z[routed == label], cfg.head_config(cfg.c_child, child_epochs), rng)

    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        heads = list(pool.map(fit_child, labels))
    return ClusterTree(root, dict(zip(labels, heads)), cfg.c_child, cfg.min_child_samples,
                       cfg.noise_sigma, routing, asdict(cfg))


def compose_label(root: int, child: int, c_child: int) -> int:
    return root * c_child + child


def decompose_label(label: int, c_child: int) -> tuple[int, int]:
    return divmod(label, c_child)


@dataclass(frozen=True, eq=False)
class SegmentationMap:
    grid: GeoGrid
    labels: np.ndarray  # int64 [row, col]
    valid: np.ndarray
    c_child: int

    def to_raster(self) -> Raster:
        return Raster(self.grid, self.labels.astype(np.int32)[None], self.valid, ("label",))

    def save(self, path) -> None:
        path = Path(path)
        save_raster(self.to_raster(), path)
        path.with_suffix(".json").write_text(json.dumps({"c_child": self.c_child}))

    @classmethod
    def load(cls, path) -> "SegmentationMap":
        path = Path(path)
        r = load_raster(path)
        c_child = json.loads(path.with_suffix(".json").read_text())["c_child"]
        return cls(r.grid, r.values[0].astype(np.int64), np.array(r.valid), c_child)


def predict_map(tree: ClusterTree, dbn: DbnModel, raster: Raster, stats: ChannelStats, scene_id: int = 0) -> SegmentationMap:
    """Segment a raster; pixels without a full valid 3x3 window are invalid."""
    if stats.mean.shape[0] != raster.n_channels:
        raise DataError(f"stats cover {stats.mean.shape[0]} channels, raster has {raster.n_channels}")
    if dbn.input_dim != 9 * raster.n_channels:
        raise DataError(f"DBN expects {dbn.input_dim} inputs, raster gives {9 * raster.n_channels}")
    if tree.root.input_dim != dbn.embedding_dim:
        raise DataError("cluster tree and DBN embedding dims disagree")
    samples = standardize(extract_neighborhoods(raster, scene_id), stats)
    labels = np.zeros(raster.shape, dtype=np.int64)
    valid = np.zeros(raster.shape, dtype=bool)
    if len(samples):
        composed = tree.predict(embed(dbn, samples))
        rows, cols = samples.provenance[:, 1], samples.provenance[:, 2]
        labels[rows, cols] = composed
        valid[rows, cols] = True
    return SegmentationMap(raster.grid, labels, valid, tree.c_child)
