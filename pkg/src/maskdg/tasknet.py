"""Mask-aware multi-head graph attention classifier.

Edges are (src, dst) with messages flowing src -> dst; attention normalizes
over each node's incoming edges, so every node needs at least one in-edge
(self-loops guarantee this). The per-edge mask value enters twice: scaled by
a learnable scalar inside the attention logit, and multiplying the message,
so a zero mask nullifies the edge's contribution exactly.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional

import numpy as np

from . import autodiff as ad
from .graph import UNLABELED

LEAKY_SLOPE = 0.2


class NonFiniteError(FloatingPointError):
    """A forward intermediate went non-finite; carries layer/head location."""

    def __init__(self, layer: int, head: int):
        super().__init__(f"non-finite activation at layer {layer}, head {head}")
        self.layer = layer
        self.head = head


@dataclass
class TaskNetConfig:
    layers: int = 2
    heads: int = 8
    head_dim: int = 64
    activation: str = "elu"          # "elu" or "relu"
    attn_dropout: float = 0.6
    layer_dropout: float = 0.5

    def __post_init__(self):
        if self.layers < 1 or self.heads < 1:
            raise ValueError("layers and heads must be >= 1")
        if self.activation not in ("elu", "relu"):
            raise ValueError(f"unknown activation {self.activation!r}")


@dataclass
class HeadParams:
    """One attention head: feature transform W, attention vector a
    (length 2*head_dim + 1, last slot reads the mask channel), and the
    scalar mask weight."""

    W: np.ndarray
    a: np.ndarray
    w: np.ndarray


@dataclass
class TaskNetParams:
    layers: List[List[HeadParams]]
    out_w: np.ndarray

    def named(self):
        out = []
        for l, heads in enumerate(self.layers):
            for k, h in enumerate(heads):
                out.append((f"layer{l}.head{k}.W", h.W))
                out.append((f"layer{l}.head{k}.a", h.a))
                out.append((f"layer{l}.head{k}.w", h.w))
        out.append(("out_w", self.out_w))
        return out

    def copy(self) -> "TaskNetParams":
        return TaskNetParams(
            layers=[[HeadParams(h.W.copy(), h.a.copy(), h.w.copy())
                     for h in heads] for heads in self.layers],
            out_w=self.out_w.copy(),
        )

    def num_params(self) -> int:
        return sum(arr.size for _, arr in self.named())


def init_tasknet(d: int, num_classes: int, cfg: TaskNetConfig,
                 rng: np.random.Generator | None = None) -> TaskNetParams:
    """Uniform fan-in init for W, a and the output head; mask weights start at 1."""
    rng = rng or np.random.default_rng()
    layers = []
    d_in = d
    for l in range(cfg.layers):
        heads = []
        for _ in range(cfg.heads):
            wb = 1.0 / np.sqrt(d_in)
            ab = 1.0 / np.sqrt(2 * cfg.head_dim + 1)
            heads.append(HeadParams(
                W=rng.uniform(-wb, wb, size=(cfg.head_dim, d_in)),
                a=rng.uniform(-ab, ab, size=(2 * cfg.head_dim + 1,)),
                w=np.ones(1),
            ))
        layers.append(heads)
        d_in = cfg.heads * cfg.head_dim
    ob = 1.0 / np.sqrt(cfg.head_dim)
    out_w = rng.uniform(-ob, ob, size=(num_classes, cfg.head_dim))
    return TaskNetParams(layers=layers, out_w=out_w)


def param_vars(p: TaskNetParams, track: bool) -> dict:
    wrap = ad.param if track else ad.constant
    return {name: wrap(arr) for name, arr in p.named()}


def edge_softmax(logits: np.ndarray, dst: np.ndarray, num_nodes: int) -> np.ndarray:
    """Numerically stable softmax of edge logits grouped by destination node."""
    shift = np.full(num_nodes, -np.inf)
    np.maximum.at(shift, dst, logits)
    ex = np.exp(logits - shift[dst])
    denom = np.zeros(num_nodes)
    np.add.at(denom, dst, ex)
    return ex / denom[dst]


def _check_in_edges(dst: np.ndarray, num_nodes: int) -> None:
    deg = np.bincount(dst, minlength=num_nodes)
    if (deg == 0).any():
        node = int(np.argmin(deg))
        raise ValueError(
            f"node {node} has no incoming edges: attention softmax over an "
            f"empty set (enable self-loops)"
        )


def tasknet_forward_var(pv: dict, X: np.ndarray, edges: np.ndarray,
                        mask: ad.Var, cfg: TaskNetConfig,
                        dropout_rng: Optional[np.random.Generator] = None) -> ad.Var:
    """Tape forward pass producing (N, C) logits.

    `pv` comes from param_vars(); `mask` is a full-length Var aligned to
    `edges`. Passing dropout_rng=None means evaluation mode.
    """
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 3)
    src, dst = edges[:, 0], edges[:, 1]
    n = X.shape[0]
    _check_in_edges(dst, n)
    d_h = pv["out_w"].data.shape[1]
    num_layers = 0
    while f"layer{num_layers}.head0.W" in pv:
        num_layers += 1
    num_heads = 0
    while f"layer0.head{num_heads}.W" in pv:
        num_heads += 1

    act = ad.elu if cfg.activation == "elu" else ad.relu
    mask_col = ad.reshape(mask, (-1, 1))
    h = ad.constant(X)
    for l in range(num_layers):
        final = l == num_layers - 1
        head_outputs = []
        for k in range(num_heads):
            W = pv[f"layer{l}.head{k}.W"]
            a = pv[f"layer{l}.head{k}.a"]
            w = pv[f"layer{l}.head{k}.w"]
            z = h @ ad.transpose(W)
            z_src = ad.gather_rows(z, src)
            z_dst = ad.gather_rows(z, dst)
            a_src = ad.slice1d(a, 0, d_h)
            a_dst = ad.slice1d(a, d_h, 2 * d_h)
            a_m = ad.slice1d(a, 2 * d_h, 2 * d_h + 1)
            logits = ad.leaky_relu(
                z_src @ a_src + z_dst @ a_dst + a_m * w * mask,
                LEAKY_SLOPE,
            )
            shift = np.full(n, -np.inf)
            np.maximum.at(shift, dst, logits.data)
            ex = ad.exp(logits - ad.constant(shift[dst]))
            denom = ad.segment_sum(ex, dst, n)
            alpha = ex / ad.gather_rows(denom, dst)
            if dropout_rng is not None and cfg.attn_dropout > 0:
                alpha = ad.dropout(alpha, cfg.attn_dropout, dropout_rng)
            msgs = (mask_col * ad.reshape(alpha, (-1, 1))) * z_src
            agg = ad.segment_sum(msgs, dst, n)
            if not np.isfinite(agg.data).all():
                raise NonFiniteError(layer=l, head=k)
            head_outputs.append(act(agg))
        if final:
            total = head_outputs[0]
            for extra in head_outputs[1:]:
                total = total + extra
            h = total * (1.0 / num_heads)
        else:
            h = ad.concat(head_outputs, axis=1)
            if dropout_rng is not None and cfg.layer_dropout > 0:
                h = ad.dropout(h, cfg.layer_dropout, dropout_rng)
    return h @ ad.transpose(pv["out_w"])


def tasknet_forward(p: TaskNetParams, X: np.ndarray, edges: np.ndarray,
                    mask_values: np.ndarray, cfg: TaskNetConfig) -> np.ndarray:
    """Evaluation-mode logits as a plain array (no dropout, no gradients)."""
    pv = param_vars(p, track=False)
    out = tasknet_forward_var(pv, X, edges, ad.constant(mask_values), cfg,
                              dropout_rng=None)
    return out.data


def cross_entropy_var(logits: ad.Var, labels: np.ndarray) -> ad.Var:
    """Mean negative log-likelihood over labeled nodes."""
    labels = np.asarray(labels, dtype=np.int64)
    keep = np.flatnonzero(labels != UNLABELED)
    if keep.size == 0:
        raise ValueError("cross entropy undefined: no labeled nodes")
    sub = ad.gather_rows(logits, keep)
    lse = ad.logsumexp_rows(sub)
    picked = ad.take_per_row(sub, labels[keep])
    return ad.vmean(lse - picked)


def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> float:
    return float(cross_entropy_var(ad.constant(logits), labels).data)


def loss_over_masks(p: TaskNetParams, X: np.ndarray, edges: np.ndarray,
                    labels: np.ndarray, masks: np.ndarray,
                    cfg: TaskNetConfig) -> np.ndarray:
    """Cross-entropy for a whole batch of full-length masks at once.

    Vectorized evaluation-mode forward used by the grid-search oracles;
    agrees with tasknet_forward per row (covered by tests).
    """
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 3)
    src, dst = edges[:, 0], edges[:, 1]
    n = X.shape[0]
    _check_in_edges(dst, n)
    masks = np.asarray(masks, dtype=np.float64)
    if masks.ndim == 1:
        masks = masks[None, :]
    B = masks.shape[0]
    d_h = p.out_w.shape[1]
    num_heads = len(p.layers[0])

    labels = np.asarray(labels, dtype=np.int64)
    keep = np.flatnonzero(labels != UNLABELED)
    if keep.size == 0:
        raise ValueError("cross entropy undefined: no labeled nodes")

    def activate(x):
        if cfg.activation == "elu":
            return np.where(x > 0, x, np.expm1(np.minimum(x, 0.0)))
        return np.maximum(x, 0.0)

    h = np.broadcast_to(X, (B,) + X.shape)
    for l, heads in enumerate(p.layers):
        final = l == len(p.layers) - 1
        outs = []
        for hp in heads:
            z = h @ hp.W.T                               # (B, N, d_h)
            z_src, z_dst = z[:, src, :], z[:, dst, :]
            a_src, a_dst, a_m = hp.a[:d_h], hp.a[d_h:2 * d_h], hp.a[2 * d_h]
            e = z_src @ a_src + z_dst @ a_dst + a_m * hp.w[0] * masks
            e = np.where(e > 0, e, LEAKY_SLOPE * e)
            shift = np.full((B, n), -np.inf)
            np.maximum.at(shift, (slice(None), dst), e)
            ex = np.exp(e - shift[:, dst])
            denom = np.zeros((B, n))
            np.add.at(denom, (slice(None), dst), ex)
            alpha = ex / denom[:, dst]
            msgs = (masks * alpha)[:, :, None] * z_src
            agg = np.zeros((B, n, d_h))
            np.add.at(agg, (slice(None), dst), msgs)
            outs.append(activate(agg))
        h = np.mean(outs, axis=0) if final else np.concatenate(outs, axis=2)
    logits = h @ p.out_w.T                               # (B, N, C)
    sub = logits[:, keep, :]
    mx = sub.max(axis=2, keepdims=True)
    lse = np.log(np.exp(sub - mx).sum(axis=2)) + mx[:, :, 0]
    picked = np.take_along_axis(sub, labels[keep][None, :, None],
                                axis=2)[:, :, 0]
    return (lse - picked).mean(axis=1)
