"""Toy point-cloud encoder and heads.

A shared per-point MLP lifts xyz coordinates to F-dimensional features,
a global feature is the elementwise max over points, and the
segmentation head scores each point from the concatenated
[per-point | global] feature pair. A classification head scores the
cloud from the global feature alone.

The public ops (`encode`, `segment_logits`, `classify_logits`) are the
evaluation path and compute head outputs one column at a time: a BLAS
matrix product couples output columns through kernel blocking, so a
single-GEMM head would not preserve retained columns bit-exactly across
head surgery. Training uses the tape builder below, where the head is
one fused product per block for speed; no contract compares logits
across the two paths.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad

__all__ = [
    "ModelParams",
    "init_params",
    "encode",
    "segment_logits",
    "classify_logits",
    "expand_head",
    "save_params",
    "load_params",
    "ParamNodes",
    "params_to_nodes",
    "params_vector",
    "nodes_from_vector",
    "apply_sgd_step",
    "build_seg_logits",
]

DEFAULT_HIDDEN = (32, 64)
DEFAULT_INIT_STD = 0.1


@dataclass
class ModelParams:
    """Encoder and head weights; arrays are float64 and mutated in place by SGD."""

    mlp_w: list[np.ndarray]
    mlp_b: list[np.ndarray]
    seg_w: np.ndarray  # (2F, C)
    seg_b: np.ndarray  # (C,)
    cls_w: np.ndarray  # (F, C)
    cls_b: np.ndarray  # (C,)

    @property
    def feature_dim(self) -> int:
        return self.mlp_w[-1].shape[1]

    @property
    def n_classes(self) -> int:
        return self.seg_w.shape[1]

    @property
    def in_dim(self) -> int:
        return self.mlp_w[0].shape[0]

    def validate(self) -> None:
        if not self.mlp_w or len(self.mlp_w) != len(self.mlp_b):
            raise ValueError("mlp layer lists are empty or unbalanced")
        width = self.mlp_w[0].shape[0]
        for w, b in zip(self.mlp_w, self.mlp_b):
            if w.ndim != 2 or w.shape[0] != width or b.shape != (w.shape[1],):
                raise ValueError(f"mlp layer chain broken at {w.shape} / {b.shape}")
            width = w.shape[1]
        f = width
        if self.seg_w.shape != (2 * f, self.seg_b.size):
            raise ValueError(f"segmentation head {self.seg_w.shape} does not fit 2F={2 * f}")
        if self.cls_w.shape != (f, self.cls_b.size):
            raise ValueError(f"classification head {self.cls_w.shape} does not fit F={f}")
        if self.seg_w.shape[1] != self.cls_w.shape[1]:
            raise ValueError("segmentation and classification heads disagree on C")
        for arr in self.all_arrays():
            if not np.all(np.isfinite(arr)):
                raise ValueError("non-finite parameter values")

    def all_arrays(self) -> list[np.ndarray]:
        return [*self.mlp_w, *self.mlp_b, self.seg_w, self.seg_b, self.cls_w, self.cls_b]

    def copy(self) -> "ModelParams":
        return ModelParams(
            mlp_w=[w.copy() for w in self.mlp_w],
            mlp_b=[b.copy() for b in self.mlp_b],
            seg_w=self.seg_w.copy(),
            seg_b=self.seg_b.copy(),
            cls_w=self.cls_w.copy(),
            cls_b=self.cls_b.copy(),
        )


def init_params(
    n_classes: int,
    seed: int,
    in_dim: int = 3,
    hidden: tuple[int, ...] = DEFAULT_HIDDEN,
    std: float = DEFAULT_INIT_STD,
) -> ModelParams:
    """Seeded Gaussian weights (std 0.1 by default), zero biases.

    Draw order is fixed (mlp layers, then seg head, then cls head) so a
    seed pins every parameter.
    """
    if n_classes < 2:
        raise ValueError("need at least 2 classes")
    rng = np.random.default_rng(seed)
    mlp_w, mlp_b = [], []
    width = in_dim
    for h in hidden:
        mlp_w.append(rng.normal(0.0, std, (width, h)))
        mlp_b.append(np.zeros(h))
        width = h
    params = ModelParams(
        mlp_w=mlp_w,
        mlp_b=mlp_b,
        seg_w=rng.normal(0.0, std, (2 * width, n_classes)),
        seg_b=np.zeros(n_classes),
        cls_w=rng.normal(0.0, std, (width, n_classes)),
        cls_b=np.zeros(n_classes),
    )
    params.validate()
    return params


def _check_cloud(cloud) -> np.ndarray:
    pts = np.asarray(cloud, dtype=float)
    if pts.ndim != 2 or pts.shape[0] < 1:
        raise ValueError(f"cloud must be N x d with N >= 1, got {pts.shape}")
    if not np.all(np.isfinite(pts)):
        raise ValueError("cloud has non-finite coordinates")
    return pts


def encode(cloud, params: ModelParams) -> tuple[np.ndarray, np.ndarray]:
    """Per-point features (N, F) and the max-pooled global feature (F,)."""
    pts = _check_cloud(cloud)
    if pts.shape[1] != params.in_dim:
        raise ValueError(f"cloud dim {pts.shape[1]} vs encoder input {params.in_dim}")
    h = pts
    for w, b in zip(params.mlp_w, params.mlp_b):
        h = np.maximum(h @ w + b, 0.0)
    return h, h.max(axis=0)


def _head_per_column(feats: np.ndarray, glob: np.ndarray, w: np.ndarray, b: np.ndarray):
    # per-column, per-row reduction: each logit depends only on its own row
    # and its own column of w, so results survive both point permutation and
    # head-column surgery bit-for-bit (a blas gemm/gemv would round remainder
    # rows differently depending on position)
    f = feats.shape[1]
    out = np.empty((feats.shape[0], w.shape[1]))
    for c in range(w.shape[1]):
        out[:, c] = np.sum(feats * w[:f, c], axis=1) + (glob @ w[f:, c] + b[c])
    return out


def segment_logits(cloud, params: ModelParams) -> np.ndarray:
    """Per-point logits (N, C); row i sees point i's feature and the global max."""
    feats, glob = encode(cloud, params)
    return _head_per_column(feats, glob, params.seg_w, params.seg_b)


def classify_logits(cloud, params: ModelParams) -> np.ndarray:
    """Cloud-level logits (C,) from the global feature only."""
    _, glob = encode(cloud, params)
    out = np.empty(params.cls_w.shape[1])
    for c in range(params.cls_w.shape[1]):
        out[c] = glob @ params.cls_w[:, c] + params.cls_b[c]
    return out


def expand_head(
    params: ModelParams,
    remove_col: int,
    add_k: int,
    init_scale: float = DEFAULT_INIT_STD,
    seed: int = 0,
) -> ModelParams:
    """Drop one output column and append add_k fresh Gaussian ones.

    Retained columns (weights and biases, both heads) are copied
    bit-exactly; new-column draw order is seg head then cls head.
    """
    c_old = params.n_classes
    if not 0 <= remove_col < c_old:
        raise ValueError(f"remove_col {remove_col} out of range for C={c_old}")
    if add_k < 1:
        raise ValueError("add_k must be >= 1")
    rng = np.random.default_rng(seed)
    keep = [c for c in range(c_old) if c != remove_col]
    new = ModelParams(
        mlp_w=[w.copy() for w in params.mlp_w],
        mlp_b=[b.copy() for b in params.mlp_b],
        seg_w=np.concatenate(
            [params.seg_w[:, keep], rng.normal(0.0, init_scale, (params.seg_w.shape[0], add_k))],
            axis=1,
        ),
        seg_b=np.concatenate([params.seg_b[keep], rng.normal(0.0, init_scale, add_k)]),
        cls_w=np.concatenate(
            [params.cls_w[:, keep], rng.normal(0.0, init_scale, (params.cls_w.shape[0], add_k))],
            axis=1,
        ),
        cls_b=np.concatenate([params.cls_b[keep], rng.normal(0.0, init_scale, add_k)]),
    )
    new.validate()
    return new


# ---------------------------------------------------------------------------
# checkpoint format: flat text, 17 significant digits, bit-exact round-trip
# ---------------------------------------------------------------------------

_CKPT_HEADER = "#params v1"


def _tensor_names(params: ModelParams) -> list[tuple[str, np.ndarray]]:
    named = []
    for i, (w, b) in enumerate(zip(params.mlp_w, params.mlp_b)):
        named.append((f"mlp_w{i}", w))
        named.append((f"mlp_b{i}", b))
    named.append(("seg_w", params.seg_w))
    named.append(("seg_b", params.seg_b))
    named.append(("cls_w", params.cls_w))
    named.append(("cls_b", params.cls_b))
    return named


def save_params(params: ModelParams, path) -> None:
    params.validate()
    lines = [_CKPT_HEADER, f"layers {len(params.mlp_w)}"]
    for name, arr in _tensor_names(params):
        shape = " ".join(str(s) for s in arr.shape)
        lines.append(f"tensor {name} {shape}")
        mat = arr.reshape(arr.shape[0], -1) if arr.ndim == 2 else arr.reshape(1, -1)
        for row in mat:
            lines.append(" ".join(f"{v:.17g}" for v in row))
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def load_params(path) -> ModelParams:
    with open(path, encoding="utf-8") as fh:
        lines = [ln.rstrip("\n") for ln in fh]
    if not lines or lines[0] != _CKPT_HEADER:
        raise ValueError(f"{path}: not a v1 parameter checkpoint")
    if not lines[1].startswith("layers "):
        raise ValueError(f"{path}: missing layer count")
    n_layers = int(lines[1].split()[1])
    tensors: dict[str, np.ndarray] = {}
    i = 2
    while i < len(lines):
        if not lines[i]:
            i += 1
            continue
        head = lines[i].split()
        if head[0] != "tensor":
            raise ValueError(f"{path}:{i + 1}: expected a tensor block")
        name, shape = head[1], tuple(int(s) for s in head[2:])
        n_rows = shape[0] if len(shape) == 2 else 1
        rows = []
        for r in range(n_rows):
            rows.append([float(tok) for tok in lines[i + 1 + r].split()])
        tensors[name] = np.array(rows).reshape(shape)
        i += 1 + n_rows
    params = ModelParams(
        mlp_w=[tensors[f"mlp_w{j}"] for j in range(n_layers)],
        mlp_b=[tensors[f"mlp_b{j}"] for j in range(n_layers)],
        seg_w=tensors["seg_w"],
        seg_b=tensors["seg_b"],
        cls_w=tensors["cls_w"],
        cls_b=tensors["cls_b"],
    )
    params.validate()
    return params


# ---------------------------------------------------------------------------
# tape-side builders (training path)
# ---------------------------------------------------------------------------


@dataclass
class ParamNodes:
    """Tape leaves mirroring ModelParams, created fresh each step."""

    mlp_w: list[ad.TensorNode]
    mlp_b: list[ad.TensorNode]
    seg_w: ad.TensorNode
    seg_b: ad.TensorNode
    cls_w: ad.TensorNode
    cls_b: ad.TensorNode

    def pairs(self, params: ModelParams):
        yield from zip([*self.mlp_w, *self.mlp_b], [*params.mlp_w, *params.mlp_b])
        yield self.seg_w, params.seg_w
        yield self.seg_b, params.seg_b
        yield self.cls_w, params.cls_w
        yield self.cls_b, params.cls_b


def params_to_nodes(tape: ad.Tape, params: ModelParams) -> ParamNodes:
    return ParamNodes(
        mlp_w=[tape.leaf(w) for w in params.mlp_w],
        mlp_b=[tape.leaf(b) for b in params.mlp_b],
        seg_w=tape.leaf(params.seg_w),
        seg_b=tape.leaf(params.seg_b),
        cls_w=tape.leaf(params.cls_w),
        cls_b=tape.leaf(params.cls_b),
    )


def params_vector(params: ModelParams) -> np.ndarray:
    """Flatten all parameters in the fixed layer order (for gradient checks)."""
    return np.concatenate([arr.ravel() for _, arr in _tensor_names(params)])


def nodes_from_vector(tape: ad.Tape, leaf: ad.TensorNode, template: ModelParams) -> ParamNodes:
    """Carve a flat parameter leaf into ParamNodes matching `template`'s shapes."""
    cursor = 0
    carved: dict[str, ad.TensorNode] = {}
    for name, arr in _tensor_names(template):
        seg = ad.narrow(leaf, cursor, arr.size)
        carved[name] = ad.reshape(seg, arr.shape) if arr.ndim == 2 else seg
        cursor += arr.size
    n_layers = len(template.mlp_w)
    return ParamNodes(
        mlp_w=[carved[f"mlp_w{j}"] for j in range(n_layers)],
        mlp_b=[carved[f"mlp_b{j}"] for j in range(n_layers)],
        seg_w=carved["seg_w"],
        seg_b=carved["seg_b"],
        cls_w=carved["cls_w"],
        cls_b=carved["cls_b"],
    )


def build_seg_logits(
    tape: ad.Tape,
    nodes: ParamNodes,
    points: ad.TensorNode,
    batch: int,
    n_points: int,
) -> ad.TensorNode:
    """Segmentation logits for `batch` stacked clouds of `n_points` each.

    `points` is (batch * n_points, 3). The head over [per-point | global]
    is computed blockwise: top rows of seg_w hit per-point features,
    bottom rows hit the per-cloud max feature (repeated per point).
    """
    h = points
    for w, b in zip(nodes.mlp_w, nodes.mlp_b):
        h = ad.relu(ad.linear(h, w, b))
    f_dim = h.shape[1]
    n_cls = nodes.seg_b.shape[0]
    per_cloud = ad.max_reduce(ad.reshape(h, (batch, n_points, f_dim)), axis=1)
    w_flat = ad.reshape(nodes.seg_w, (2 * f_dim * n_cls,))
    w_top = ad.reshape(ad.narrow(w_flat, 0, f_dim * n_cls), (f_dim, n_cls))
    w_bot = ad.reshape(ad.narrow(w_flat, f_dim * n_cls, f_dim * n_cls), (f_dim, n_cls))
    global_part = ad.repeat_rows(ad.matmul(per_cloud, w_bot), n_points)
    return ad.add_rowvec(ad.add(ad.matmul(h, w_top), global_part), nodes.seg_b)


def apply_sgd_step(params: ModelParams, nodes: ParamNodes, lr: float) -> None:
    """In-place SGD update from the gradients accumulated on `nodes`."""
    for node, arr in nodes.pairs(params):
        grad = node._grad
        if grad is not None:
            arr -= lr * grad.reshape(arr.shape)
