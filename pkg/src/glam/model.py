"""The graph network: node classifier and same-segment edge classifier.

Layout of one forward pass::

    features -> batch norm -> [TAG conv -> relu -> linear -> relu] x depth
             -> concat(stack output, normalized features)
             -> linear -> relu -> linear -> relu            (node embedding)
             -> linear                                      (node logits)
    edges    -> concat(src emb, dst emb, edge features) -> batch norm
             -> linear -> relu -> linear                    (edge logits)

Layer widths start at ``hidden0`` for the first TAG layer and halve at
every subsequent layer of the stack.
"""

from __future__ import annotations

import dataclasses
import math
import json
import logging
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from . import tensor as T
from .doc_model import ClassSchema, DocumentGraph
from .errors import ContractError, FormatError, VersionError
from .tensor import SparseAdjacency, Tensor

log = logging.getLogger(__name__)

MAGIC = b"GLAMCKPT"
CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    hidden0: int = 1024
    depth: int = 3
    tag_hops: int = 3
    n_classes: int = 12
    node_features: int = 33
    edge_features: int = 11
    alpha: float = 4.0
    seed: int = 0
    embed_dim: Optional[int] = None
    activation: str = "relu"
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5

    def __post_init__(self):
        if self.depth < 1 or self.tag_hops < 0:
            raise ContractError("depth must be >= 1 and tag_hops >= 0")
        if self.hidden0 % (2 ** (2 * self.depth - 1)):
            raise ContractError(
                f"hidden0={self.hidden0} must be divisible by 2^{2 * self.depth - 1}"
            )
        if self.embed_dim is None:
            self.embed_dim = self.hidden0 // 2 ** (self.depth - 1)
        if self.activation != "relu":
            raise ContractError(f"unsupported activation {self.activation!r}")

    @classmethod
    def publaynet(cls, **kw) -> "ModelConfig":
        return cls(hidden0=512, n_classes=6, **kw)

    def layer_widths(self) -> List[int]:
        return [self.hidden0 // 2 ** j for j in range(2 * self.depth)]

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


def param_shapes(cfg: ModelConfig) -> Dict[str, tuple]:
    """Canonical parameter names and shapes, in checkpoint order."""
    F, G, E = cfg.node_features, cfg.edge_features, cfg.embed_dim
    shapes = {"bn_in.gamma": (1, F), "bn_in.beta": (1, F)}
    prev = F
    widths = cfg.layer_widths()
    for i in range(cfg.depth):
        w_tag, w_lin = widths[2 * i], widths[2 * i + 1]
        for k in range(cfg.tag_hops + 1):
            shapes[f"stack.{i}.tag.w{k}"] = (prev, w_tag)
        shapes[f"stack.{i}.tag.b"] = (1, w_tag)
        shapes[f"stack.{i}.lin.w"] = (w_tag, w_lin)
        shapes[f"stack.{i}.lin.b"] = (1, w_lin)
        prev = w_lin
    shapes["embed.0.w"] = (prev + F, E)
    shapes["embed.0.b"] = (1, E)
    shapes["embed.1.w"] = (E, E)
    shapes["embed.1.b"] = (1, E)
    shapes["node_head.w"] = (E, cfg.n_classes)
    shapes["node_head.b"] = (1, cfg.n_classes)
    edge_in = 2 * E + G
    shapes["bn_edge.gamma"] = (1, edge_in)
    shapes["bn_edge.beta"] = (1, edge_in)
    shapes["edge.0.w"] = (edge_in, E)
    shapes["edge.0.b"] = (1, E)
    shapes["edge.1.w"] = (E, 2)
    shapes["edge.1.b"] = (1, 2)
    return shapes


def buffer_shapes(cfg: ModelConfig) -> Dict[str, tuple]:
    edge_in = 2 * cfg.embed_dim + cfg.edge_features
    return {
        "bn_in.running_mean": (1, cfg.node_features),
        "bn_in.running_var": (1, cfg.node_features),
        "bn_edge.running_mean": (1, edge_in),
        "bn_edge.running_var": (1, edge_in),
    }


def count_parameters(cfg: ModelConfig) -> int:
    return int(sum(np.prod(s) for s in param_shapes(cfg).values()))


def init_parameters(cfg: ModelConfig) -> Dict[str, np.ndarray]:
    rng = np.random.default_rng(cfg.seed)
    params = {}
    for name, shape in param_shapes(cfg).items():
        if name.endswith(".gamma"):
            params[name] = np.ones(shape, dtype=np.float32)
        elif name.endswith(".beta") or name.endswith(".b"):
            params[name] = np.zeros(shape, dtype=np.float32)
        else:
            fan_in = shape[0]
            if ".tag.w" in name:
                fan_in *= cfg.tag_hops + 1
            bound = np.sqrt(6.0 / fan_in)  # He-uniform for relu layers
            params[name] = rng.uniform(-bound, bound, size=shape).astype(np.float32)
    return params


def init_buffers(cfg: ModelConfig) -> Dict[str, np.ndarray]:
    return {
        name: (np.zeros if "mean" in name else np.ones)(shape, dtype=np.float32)
        for name, shape in buffer_shapes(cfg).items()
    }


@dataclass
class GraphInput:
    """Arrays the network needs from one page graph, precomputed once."""

    x: np.ndarray
    adj: SparseAdjacency
    src: np.ndarray
    dst: np.ndarray
    edge_x: np.ndarray
    node_labels: Optional[np.ndarray] = None
    edge_labels: Optional[np.ndarray] = None

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def e(self) -> int:
        return self.src.shape[0]

    @classmethod
    def from_graph(cls, graph: DocumentGraph, dtype=np.float32) -> "GraphInput":
        src, dst = graph.edge_index()
        return cls(
            x=np.ascontiguousarray(graph.node_features, dtype=dtype),
            adj=SparseAdjacency.from_edges(graph.num_nodes, src, dst),
            src=src,
            dst=dst,
            edge_x=np.ascontiguousarray(graph.edge_features, dtype=dtype),
            node_labels=None if graph.node_labels is None else np.asarray(graph.node_labels, np.int64),
            edge_labels=None if graph.edge_labels is None else np.asarray(graph.edge_labels, np.int64),
        )

    def astype(self, dtype) -> "GraphInput":
        return dataclasses.replace(self, x=self.x.astype(dtype), edge_x=self.edge_x.astype(dtype))


@dataclass
class ForwardOutput:
    node_logits: Tensor
    edge_logits: Tensor
    node_probs: np.ndarray
    edge_probs: np.ndarray


def tag_conv(x: Tensor, adj: SparseAdjacency, weights: Sequence[Tensor], bias: Tensor) -> Tensor:
    """Topology-adaptive graph convolution: sum_k A^k X W_k + b."""
    h = x
    out = T.matmul(h, weights[0])
    for w in weights[1:]:
        h = T.spmm(adj, h)
        out = T.add(out, T.matmul(h, w))
    return T.add(out, bias)


def joint_loss(node_logits: Tensor, node_labels, edge_logits: Tensor, edge_labels,
               alpha: float = 4.0, node_weights=None) -> Tensor:
    """Node cross-entropy plus ``alpha`` times edge cross-entropy (means)."""
    loss = T.cross_entropy(node_logits, node_labels, node_weights)
    if edge_logits.rows == 0 or alpha == 0:
        return loss
    return T.add(loss, T.scale(T.cross_entropy(edge_logits, edge_labels), alpha))


class GLAM:
    """Parameters plus the forward pass. Parameters are shared read-only in eval."""

    def __init__(self, config: ModelConfig, params: Optional[Dict[str, np.ndarray]] = None,
                 buffers: Optional[Dict[str, np.ndarray]] = None):
        self.config = config
        arrays = params if params is not None else init_parameters(config)
        expected = param_shapes(config)
        if set(arrays) != set(expected):
            raise VersionError("parameter names do not match the model configuration")
        for name, shape in expected.items():
            if tuple(arrays[name].shape) != tuple(shape):
                raise VersionError(f"parameter {name}: shape {arrays[name].shape} != {shape}")
        self.params = {name: Tensor(arrays[name], requires_grad=True, name=name) for name in expected}
        self.buffers = buffers if buffers is not None else init_buffers(config)

    @property
    def dtype(self):
        return self.params["bn_in.gamma"].dtype

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def astype(self, dtype) -> "GLAM":
        return GLAM(
            self.config,
            {k: p.data.astype(dtype) for k, p in self.params.items()},
            {k: v.astype(dtype) for k, v in self.buffers.items()},
        )

    def _bn(self, x: Tensor, prefix: str, train: bool, update_stats: bool) -> Tensor:
        gamma, beta = self.params[f"{prefix}.gamma"], self.params[f"{prefix}.beta"]
        eps = self.config.bn_eps
        if not train:
            return T.batch_norm_fixed(x, gamma, beta, self.buffers[f"{prefix}.running_mean"],
                                      self.buffers[f"{prefix}.running_var"], eps)
        y, mu, var = T.batch_norm(x, gamma, beta, eps)
        if update_stats:
            m = self.config.bn_momentum
            rm, rv = self.buffers[f"{prefix}.running_mean"], self.buffers[f"{prefix}.running_var"]
            rm *= 1 - m
            rm += m * mu.astype(rm.dtype)
            rv *= 1 - m
            rv += m * var.astype(rv.dtype)
        return y

    def _embed(self, g: GraphInput, train: bool, update_stats: bool) -> Tensor:
        cfg, P = self.config, self.params
        x0 = self._bn(Tensor(g.x), "bn_in", train, update_stats)
        h = x0
        for i in range(cfg.depth):
            ws = [P[f"stack.{i}.tag.w{k}"] for k in range(cfg.tag_hops + 1)]
            h = T.relu(tag_conv(h, g.adj, ws, P[f"stack.{i}.tag.b"]))
            h = T.relu(T.linear(h, P[f"stack.{i}.lin.w"], P[f"stack.{i}.lin.b"]))
        h = T.concat_cols([h, x0])
        h = T.relu(T.linear(h, P["embed.0.w"], P["embed.0.b"]))
        return T.relu(T.linear(h, P["embed.1.w"], P["embed.1.b"]))

    @staticmethod
    def _edge_input(emb: Tensor, g: GraphInput) -> Tensor:
        return T.concat_cols([T.index_rows(emb, g.src), T.index_rows(emb, g.dst), Tensor(g.edge_x)])

    def calibrate(self, graphs: Sequence[GraphInput]) -> None:
        """Replace running batch-norm statistics with exact population statistics.

        Node-input statistics are pooled over every node of ``graphs``; the
        edge statistics are then pooled over every edge, using embeddings
        computed with the new node statistics.
        """
        graphs = [g for g in graphs if g.n]
        if not graphs:
            return

        def pooled(blocks):
            n = sum(b.shape[0] for b in blocks)
            mean = sum(b.sum(axis=0, dtype=np.float64) for b in blocks) / n
            var = sum(((b - mean) ** 2).sum(axis=0) for b in blocks) / n
            return mean[None, :], var[None, :]

        def store(prefix, mean, var):
            self.buffers[f"{prefix}.running_mean"][...] = mean
            self.buffers[f"{prefix}.running_var"][...] = var

        store("bn_in", *pooled([g.x for g in graphs]))
        with T.no_grad():
            blocks = [self._edge_input(self._embed(g, False, False), g).data for g in graphs if g.e]
        if blocks:
            store("bn_edge", *pooled(blocks))

    def forward(self, g: GraphInput, mode: str = "eval", update_stats: bool = None) -> ForwardOutput:
        cfg = self.config
        if g.x.shape[1] != cfg.node_features or g.edge_x.shape[1] != cfg.edge_features:
            raise VersionError(
                f"graph has {g.x.shape[1]} node / {g.edge_x.shape[1]} edge features, "
                f"model expects {cfg.node_features} / {cfg.edge_features}"
            )
        if g.n == 0:
            raise ContractError("forward() needs at least one node")
        train = mode == "train"
        if update_stats is None:
            update_stats = train
        emb = self._embed(g, train, update_stats)
        node_logits = T.linear(emb, self.params["node_head.w"], self.params["node_head.b"])
        if g.e:
            e = self._bn(self._edge_input(emb, g), "bn_edge", train, update_stats)
            e = T.relu(T.linear(e, self.params["edge.0.w"], self.params["edge.0.b"]))
            edge_logits = T.linear(e, self.params["edge.1.w"], self.params["edge.1.b"])
        else:
            edge_logits = Tensor(np.zeros((0, 2), dtype=self.dtype))
        with T.no_grad():
            node_probs = T.softmax_rows(node_logits).data
            edge_probs = T.softmax_rows(edge_logits).data if g.e else np.zeros((0, 2), self.dtype)
        return ForwardOutput(node_logits, edge_logits, node_probs, edge_probs)

    def predict(self, g: GraphInput) -> ForwardOutput:
        with T.no_grad():
            return self.forward(g, "eval")


@dataclass
class Checkpoint:
    config: ModelConfig
    params: Dict[str, np.ndarray]
    buffers: Dict[str, np.ndarray] = field(default_factory=dict)
    feature_version: int = 1
    class_names: Sequence[str] = ()
    extra: dict = field(default_factory=dict)

    def model(self) -> GLAM:
        return GLAM(self.config, {k: v.copy() for k, v in self.params.items()},
                    {k: v.copy() for k, v in self.buffers.items()})

    @property
    def schema(self) -> ClassSchema:
        return ClassSchema(tuple(self.class_names))

    def check_features(self, node_features: int, feature_version: int) -> None:
        if feature_version != self.feature_version or node_features != self.config.node_features:
            raise VersionError(
                f"checkpoint expects feature schema v{self.feature_version} with "
                f"{self.config.node_features} features, got v{feature_version} with {node_features}"
            )

    @classmethod
    def from_model(cls, model: GLAM, feature_version: int, schema: ClassSchema, **extra):
        return cls(
            config=model.config,
            params={k: p.data.astype(np.float32, copy=True) for k, p in model.params.items()},
            buffers={k: v.astype(np.float32, copy=True) for k, v in model.buffers.items()},
            feature_version=feature_version,
            class_names=tuple(schema.names),
            extra=dict(extra),
        )


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    header = {
        "config": ckpt.config.to_dict(),
        "feature_version": ckpt.feature_version,
        "class_names": list(ckpt.class_names),
        "running_stats": bool(ckpt.buffers),
        "extra": ckpt.extra,
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    chunks = [MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(head)), head]
    tensors = list(ckpt.params.items()) + list(ckpt.buffers.items())
    chunks.append(struct.pack("<I", len(tensors)))
    for name, arr in tensors:
        raw = name.encode("utf-8")
        arr = np.asarray(arr, dtype="<f4")
        rows, cols = arr.shape
        chunks.append(struct.pack("<I", len(raw)) + raw + struct.pack("<II", rows, cols))
        chunks.append(np.ascontiguousarray(arr).tobytes())
    return b"".join(chunks)


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(checkpoint_bytes(ckpt))
    os.replace(tmp, path)


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError(f"checkpoint truncated at byte {self.pos} (needed {n} more)")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def parse_checkpoint(data: bytes) -> Checkpoint:
    r = _Reader(data)
    if r.take(len(MAGIC)) != MAGIC:
        raise FormatError("not a checkpoint file (bad magic)")
    version = r.u32()
    if version != CHECKPOINT_VERSION:
        raise VersionError(f"unsupported checkpoint version {version}")
    try:
        header = json.loads(r.take(r.u32()).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError):
        raise FormatError("corrupt checkpoint header") from None
    config = ModelConfig.from_dict(header["config"])
    params, buffers = {}, {}
    pnames = set(param_shapes(config))
    for _ in range(r.u32()):
        name = r.take(r.u32()).decode("utf-8")
        rows, cols = r.u32(), r.u32()
        arr = np.frombuffer(r.take(4 * rows * cols), dtype="<f4").reshape(rows, cols).astype(np.float32)
        (params if name in pnames else buffers)[name] = arr
    if r.pos != len(data):
        raise FormatError("trailing bytes after checkpoint payload")
    return Checkpoint(config, params, buffers, header["feature_version"],
                      tuple(header["class_names"]), header.get("extra", {}))


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        return parse_checkpoint(fh.read())


@dataclass
class EpochLog:
    epoch: int
    loss: float
    node_acc: float
    edge_acc: float
    val_loss: Optional[float] = None

    def to_dict(self) -> dict:
        d = {"epoch": self.epoch, "loss": self.loss, "node_acc": self.node_acc, "edge_acc": self.edge_acc}
        if self.val_loss is not None:
            d["val_loss"] = self.val_loss
        return d


def class_weights(graphs: Sequence[GraphInput], n_classes: int) -> np.ndarray:
    """Inverse-frequency node class weights, normalized to mean 1 over seen classes."""
    counts = np.zeros(n_classes)
    for g in graphs:
        counts += np.bincount(g.node_labels, minlength=n_classes)
    w = np.where(counts > 0, counts.sum() / np.maximum(counts, 1), 0.0)
    seen = counts > 0
    w[seen] /= w[seen].mean()
    return w.astype(np.float32)


def evaluate_loss(model: GLAM, graphs: Sequence[GraphInput]) -> dict:
    """Mean loss and accuracies in eval mode."""
    loss = node_hit = node_n = edge_hit = edge_n = 0.0
    with T.no_grad():
        for g in graphs:
            out = model.forward(g, "eval")
            loss += joint_loss(out.node_logits, g.node_labels, out.edge_logits, g.edge_labels,
                               model.config.alpha).item()
            node_hit += (out.node_probs.argmax(1) == g.node_labels).sum()
            node_n += g.n
            if g.e:
                edge_hit += (out.edge_probs.argmax(1) == g.edge_labels).sum()
                edge_n += g.e
    return {
        "loss": loss / max(len(graphs), 1),
        "node_acc": node_hit / max(node_n, 1),
        "edge_acc": edge_hit / max(edge_n, 1),
    }


def train(
    corpus: Sequence[DocumentGraph],
    config: ModelConfig,
    schema: ClassSchema,
    epochs: int = 30,
    lr: float = 1e-3,
    val: Optional[Sequence[DocumentGraph]] = None,
    balance_classes: bool = False,
    on_epoch: Optional[Callable[[EpochLog], None]] = None,
    init: Optional[GLAM] = None,
    schedule: str = "cosine",
    min_lr_frac: float = 0.02,
    freeze_bn_frac: float = 0.25,
) -> Checkpoint:
    """Fit a model with Adam, one step per page, pages shuffled each epoch.

    ``schedule`` is ``"constant"`` or ``"cosine"`` (per-step decay from ``lr``
    to ``lr * min_lr_frac``). The last ``freeze_bn_frac`` of the epochs run
    with batch norm frozen at population statistics of the training set, so
    the weights settle under the same normalization used at inference.
    Returns the checkpoint with the lowest validation loss. Without a
    validation set, the lowest training loss among the frozen epochs wins.
    Deterministic for a fixed config seed.
    """
    if schedule not in ("constant", "cosine"):
        raise ContractError(f"unknown schedule {schedule!r}")
    if not corpus:
        raise ContractError("training corpus is empty")
    for g in corpus:
        if not g.is_labeled:
            raise ContractError(f"page {g.page.page_id} is not labeled")
    feature_version = corpus[0].feature_version
    inputs = [GraphInput.from_graph(g) for g in corpus if g.num_nodes > 0]
    val_inputs = [GraphInput.from_graph(g) for g in (val or []) if g.num_nodes > 0]
    model = init if init is not None else GLAM(config)
    weights = class_weights(inputs, config.n_classes) if balance_classes else None
    opt = T.Adam(list(model.params.values()), lr=lr)
    rng = np.random.default_rng(config.seed + 1)
    best = None
    total_steps = max(epochs * len(inputs) - 1, 1)
    freeze_from = epochs - int(round(epochs * freeze_bn_frac)) + 1
    step = 0
    for epoch in range(1, epochs + 1):
        frozen = epoch >= freeze_from
        if epoch == freeze_from:
            model.calibrate(inputs)
        order = rng.permutation(len(inputs))
        tot = node_hit = node_n = edge_hit = edge_n = 0.0
        for idx in order:
            g = inputs[idx]
            if schedule == "cosine":
                frac = 0.5 * (1.0 + math.cos(math.pi * step / total_steps))
                opt.lr = lr * (min_lr_frac + (1.0 - min_lr_frac) * frac)
            step += 1
            opt.zero_grad()
            out = model.forward(g, "eval" if frozen else "train")
            loss = joint_loss(out.node_logits, g.node_labels, out.edge_logits, g.edge_labels,
                              config.alpha, weights)
            tot += loss.item()
            loss.backward()
            opt.step()
            node_hit += (out.node_probs.argmax(1) == g.node_labels).sum()
            node_n += g.n
            if g.e:
                edge_hit += (out.edge_probs.argmax(1) == g.edge_labels).sum()
                edge_n += g.e
        entry = EpochLog(epoch, tot / len(inputs), node_hit / max(node_n, 1), edge_hit / max(edge_n, 1))
        if val_inputs:
            entry.val_loss = evaluate_loss(model, val_inputs)["loss"]
        score = entry.val_loss if entry.val_loss is not None else entry.loss
        # train-mode batch-norm losses are not comparable with frozen ones
        eligible = val_inputs or frozen or freeze_from > epochs
        if eligible and (best is None or score < best[0]):
            best = (score, Checkpoint.from_model(model, feature_version, schema,
                                                 epoch=epoch, lr=lr, epochs=epochs))
        if on_epoch is not None:
            on_epoch(entry)
    return best[1]
