"""Recurrent propagation over grid graphs decomposed into acyclic scans.

An H x W feature grid is connected as an undirected cyclic graph (4- or
8-neighborhood). Four corner-anchored scan orders each orient every edge from
scan-earlier to scan-later vertex, giving four directed acyclic layouts whose
orientations jointly cover the grid connectivity. One scan sweeps the grid
once, updating each vertex from its already-visited direct predecessors:

    pooled(v) = sum of hidden(p) over direct predecessors p
    hidden(v) = ReLU(input_weight @ feature(v) + hidden_weight @ pooled(v) + bias)

Vertices with no predecessors (the scan origin row/column) use pooled = 0.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DIRECTIONS = ("dr", "dl", "ur", "ul")

# row/col scan signs per direction: +1 scans ascending, -1 descending
_SIGNS = {"dr": (1, 1), "dl": (1, -1), "ur": (-1, 1), "ul": (-1, -1)}

_cell_updates = 0


def reset_cell_update_counter() -> None:
    global _cell_updates
    _cell_updates = 0


def cell_update_count() -> int:
    return _cell_updates


@dataclass(frozen=True)
class GridGraph:
    """Undirected grid connectivity; vertex id = row * width + col."""
    height: int
    width: int
    neighborhood: str
    edges: frozenset  # of (min_id, max_id) pairs


@dataclass(frozen=True)
class DagLayout:
    """One acyclic orientation of a GridGraph plus its scan order."""
    direction: str
    height: int
    width: int
    neighborhood: str
    scan_order: np.ndarray            # (H*W,) vertex ids in visit order
    predecessors: tuple               # per vertex id: tuple of predecessor ids

    def directed_edges(self):
        """All (predecessor, vertex) pairs of this layout."""
        return {(p, v) for v, preds in enumerate(self.predecessors) for p in preds}

    def predecessor_visits(self) -> int:
        return sum(len(p) for p in self.predecessors)


@dataclass
class ScanWeights:
    """Recurrent parameters of one scan: square input/hidden matrices + bias."""
    input_weight: np.ndarray   # (C, C)
    hidden_weight: np.ndarray  # (C, C)
    bias: np.ndarray           # (C,)

    def __post_init__(self):
        c = self.bias.shape[0]
        if self.input_weight.shape != (c, c) or self.hidden_weight.shape != (c, c):
            raise ValueError(
                f"scan weights must be square {c}x{c} matrices, got "
                f"{self.input_weight.shape} and {self.hidden_weight.shape}")


def build_ucg(height: int, width: int, neighborhood: str = "four") -> GridGraph:
    """Grid graph over height x width sites; 'eight' adds diagonal edges."""
    if height < 1 or width < 1:
        raise ValueError(f"grid extents must be >= 1, got {height}x{width}")
    if neighborhood not in ("four", "eight"):
        raise ValueError(f"neighborhood must be 'four' or 'eight', got {neighborhood!r}")
    edges = set()

    def vid(r, c):
        return r * width + c

    for r in range(height):
        for c in range(width):
            v = vid(r, c)
            if c + 1 < width:
                edges.add((v, vid(r, c + 1)))
            if r + 1 < height:
                edges.add((v, vid(r + 1, c)))
            if neighborhood == "eight" and r + 1 < height:
                if c + 1 < width:
                    edges.add((v, vid(r + 1, c + 1)))
                if c - 1 >= 0:
                    edges.add((min(v, vid(r + 1, c - 1)), max(v, vid(r + 1, c - 1))))
    return GridGraph(height=height, width=width, neighborhood=neighborhood,
                     edges=frozenset(edges))


def induce_dag(graph: GridGraph, direction: str) -> DagLayout:
    """Orient every grid edge from scan-earlier to scan-later vertex.

    Scan orders: dr visits rows top-down, columns left-right inside a row;
    ul is the exact reverse; dl and ur flip only the column or row sweep.
    Predecessor lists are ordered by (|dr|, |dc|, sign-aligned offsets), which
    makes the pooled sum invariant under 180-degree grid rotation.
    """
    if direction not in DIRECTIONS:
        raise ValueError(f"direction must be one of {DIRECTIONS}, got {direction!r}")
    h, w = graph.height, graph.width
    sr, sc = _SIGNS[direction]

    def rank(v):
        r, c = divmod(v, w)
        rr = r if sr > 0 else h - 1 - r
        cc = c if sc > 0 else w - 1 - c
        return rr * w + cc

    ranks = np.array([rank(v) for v in range(h * w)])
    scan_order = np.argsort(ranks, kind="stable")

    preds = [[] for _ in range(h * w)]
    for a, b in graph.edges:
        if ranks[a] < ranks[b]:
            preds[b].append(a)
        else:
            preds[a].append(b)

    def key(v, p):
        vr, vc = divmod(v, w)
        pr, pc = divmod(p, w)
        dr_, dc_ = pr - vr, pc - vc
        return (abs(dr_), abs(dc_), sr * dr_, sc * dc_)

    ordered = tuple(tuple(sorted(p, key=lambda q, v=v: key(v, q))) for v, p in enumerate(preds))
    return DagLayout(direction=direction, height=h, width=w,
                     neighborhood=graph.neighborhood,
                     scan_order=scan_order, predecessors=ordered)


def layouts_for(height: int, width: int, neighborhood: str = "four",
                directions=DIRECTIONS) -> dict:
    graph = build_ucg(height, width, neighborhood)
    return {d: induce_dag(graph, d) for d in directions}


def dag_scan_forward(features: np.ndarray, layout: DagLayout, weights: ScanWeights) -> np.ndarray:
    """One recurrent sweep over an (H, W, C) feature map; returns (H, W, C) hidden."""
    global _cell_updates
    h, w = layout.height, layout.width
    if features.shape[:2] != (h, w):
        raise ValueError(f"features shape {features.shape} does not match {h}x{w} layout")
    c = features.shape[2]
    if weights.bias.shape[0] != c:
        raise ValueError(f"weights are {weights.bias.shape[0]}-channel, features have {c}")
    if np.isnan(features).any():
        raise ValueError("NaN in scan input features")

    f_flat = features.reshape(h * w, c)
    drive = f_flat @ weights.input_weight.T + weights.bias  # U f(v) + b for every vertex
    wh = weights.hidden_weight
    hidden = np.zeros((h * w, c), dtype=features.dtype)
    preds = layout.predecessors
    updates = 0
    for v in layout.scan_order:
        pv = preds[v]
        if pv:
            pooled = hidden[pv[0]]
            for p in pv[1:]:
                pooled = pooled + hidden[p]
            pre = drive[v] + wh @ pooled
        else:
            pre = drive[v]
        hidden[v] = np.maximum(pre, 0)
        updates += 1
    _cell_updates += updates
    return hidden.reshape(h, w, c)


def dag_scan_backward(features: np.ndarray, layout: DagLayout, weights: ScanWeights,
                      hidden: np.ndarray, grad_hidden: np.ndarray):
    """Reverse sweep of dag_scan_forward.

    Walks the scan order backwards, masking through the ReLU and fanning the
    pooled-sum gradient back to each predecessor. Returns
    (grad_features, grad_input_weight, grad_hidden_weight, grad_bias).
    """
    h, w = layout.height, layout.width
    c = features.shape[2]
    f_flat = features.reshape(h * w, c)
    h_flat = hidden.reshape(h * w, c)
    gh = grad_hidden.reshape(h * w, c).copy()
    wh_t = weights.hidden_weight.T
    preds = layout.predecessors

    gpre_all = np.zeros((h * w, c), dtype=features.dtype)
    pooled_all = np.zeros((h * w, c), dtype=features.dtype)
    for v in layout.scan_order[::-1]:
        gpre = gh[v] * (h_flat[v] > 0)
        gpre_all[v] = gpre
        pv = preds[v]
        if pv:
            pooled = h_flat[pv[0]]
            for p in pv[1:]:
                pooled = pooled + h_flat[p]
            pooled_all[v] = pooled
            gpool = wh_t @ gpre
            for p in pv:
                gh[p] += gpool
    grad_features = (gpre_all @ weights.input_weight).reshape(h, w, c)
    grad_u = gpre_all.T @ f_flat
    grad_w = gpre_all.T @ pooled_all
    grad_b = gpre_all.sum(axis=0)
    return grad_features, grad_u, grad_w, grad_b


def fuse_directions(hidden_maps) -> np.ndarray:
    """Elementwise sum of per-direction hidden maps (identical shapes)."""
    maps = list(hidden_maps)
    if not maps:
        raise ValueError("fuse_directions needs at least one map")
    out = maps[0].copy()
    for m in maps[1:]:
        if m.shape != out.shape:
            raise ValueError(f"fuse_directions shape mismatch {out.shape} vs {m.shape}")
        out += m
    return out
