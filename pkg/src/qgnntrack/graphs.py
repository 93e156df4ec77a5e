"""Hit selection, doublet graph construction and the on-disk graph format.

Nodes are selected hits; directed edges join hits on adjacent barrel layers,
pointing from the inner to the outer layer. Edge ``k`` is the ``k``-th pair in
lexicographic ``(src, dst)`` order, which fixes the columns of the incidence
matrices ``R_i`` (edge is input of node) and ``R_o`` (edge is output of node).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Sequence

import numpy as np
import pandas as pd
import scipy.sparse as sp

from .events import TRACKML_BARREL_LAYERS, Event, Hit, wrap_phi


@dataclass(frozen=True)
class CutConfig:
    pt_min: float = 1.0
    phi_slope_max: float = 6e-4
    z0_max: float = 100.0
    barrel_volumes: frozenset[int] = frozenset({8, 13, 17})
    barrel_layers: tuple[tuple[int, int], ...] = field(default=TRACKML_BARREL_LAYERS)

    def __post_init__(self):
        # zero is allowed so that a fully closed selection can be expressed
        if self.pt_min < 0 or self.phi_slope_max < 0 or self.z0_max < 0:
            raise ValueError("cut thresholds must be non-negative")
        object.__setattr__(self, "barrel_volumes", frozenset(self.barrel_volumes))
        stray = {v for v, _ in self.barrel_layers} - self.barrel_volumes
        if stray:
            raise ValueError(f"barrel_layers reference non-barrel volumes {sorted(stray)}")

    def layer_index_map(self) -> dict[tuple[int, int], int]:
        return {pair: i for i, pair in enumerate(self.barrel_layers)}


@dataclass(frozen=True)
class EventGraph:
    """Node features, directed edges, incidence matrices and edge truth for one event.

    ``X`` holds raw ``(r, phi, z)`` per node. ``particle_id``, ``layer_index`` and
    ``hit_id`` are carried along for truth checks and serialization.
    """

    X: np.ndarray
    edges: np.ndarray
    y: np.ndarray
    layer_index: np.ndarray
    particle_id: np.ndarray
    hit_id: np.ndarray
    event_id: int = 0

    @property
    def n_nodes(self) -> int:
        return self.X.shape[0]

    @property
    def n_edges(self) -> int:
        return self.edges.shape[0]

    @cached_property
    def R_i(self) -> sp.csr_matrix:
        return incidence(self.edges[:, 1], self.n_nodes)

    @cached_property
    def R_o(self) -> sp.csr_matrix:
        return incidence(self.edges[:, 0], self.n_nodes)


def incidence(node_of_edge: np.ndarray, n_nodes: int) -> sp.csr_matrix:
    """Binary ``n_nodes x n_edges`` matrix with a single 1 per column."""
    n_edges = len(node_of_edge)
    data = np.ones(n_edges)
    return sp.csr_matrix((data, (np.asarray(node_of_edge, dtype=np.int64), np.arange(n_edges))),
                         shape=(n_nodes, n_edges))


def edges_from_incidence(R_o: sp.spmatrix, R_i: sp.spmatrix) -> np.ndarray:
    src = np.asarray(R_o.tocsc().argmax(axis=0)).ravel()
    dst = np.asarray(R_i.tocsc().argmax(axis=0)).ravel()
    return np.stack([src, dst], axis=1).astype(np.int64)


@dataclass(frozen=True)
class GraphStats:
    n_nodes: int
    n_edges: int
    truth_fraction: float
    empty: bool = False


def select_hits(event: Event, cuts: CutConfig = CutConfig()) -> list[Hit]:
    """Barrel hits whose parent particle passes the pT cut, with ``layer_index`` assigned.

    Noise hits have no parent momentum and therefore never pass.
    """
    layer_of = cuts.layer_index_map()
    pt_of = {p.particle_id: p.pt for p in event.particles}
    selected = []
    for hit in event.hits:
        if hit.volume_id not in cuts.barrel_volumes or hit.particle_id == 0:
            continue
        layer = layer_of.get((hit.volume_id, hit.layer_id))
        if layer is None:
            continue
        if pt_of.get(hit.particle_id, -math.inf) < cuts.pt_min:
            continue
        selected.append(hit._replace(layer_index=layer))
    return selected


def pair_features(r1, phi1, z1, r2, phi2, z2):
    """``(phi_slope, z0)`` for inner hit 1 and outer hit 2; works elementwise on arrays."""
    dr = np.asarray(r2, dtype=float) - np.asarray(r1, dtype=float)
    dphi = wrap_phi(np.asarray(phi2, dtype=float) - np.asarray(phi1, dtype=float))
    dz = np.asarray(z2, dtype=float) - np.asarray(z1, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        phi_slope = dphi / dr
        z0 = np.asarray(z1, dtype=float) - np.asarray(r1, dtype=float) * dz / dr
    return phi_slope, z0


def hit_pair_features(h1: Hit, h2: Hit) -> tuple[float, float]:
    slope, z0 = pair_features(h1.r, h1.phi, h1.z, h2.r, h2.phi, h2.z)
    return float(slope), float(z0)


def build_graph(hits: Sequence[Hit], cuts: CutConfig = CutConfig(), event_id: int = 0) -> EventGraph:
    n = len(hits)
    X = np.array([(h.r, h.phi, h.z) for h in hits], dtype=float).reshape(n, 3)
    layer = np.array([h.layer_index for h in hits], dtype=np.int64)
    pid = np.array([h.particle_id for h in hits], dtype=np.int64)
    hid = np.array([h.hit_id for h in hits], dtype=np.int64)

    src_parts, dst_parts = [], []
    for lay in np.unique(layer):
        inner = np.flatnonzero(layer == lay)
        outer = np.flatnonzero(layer == lay + 1)
        if inner.size == 0 or outer.size == 0:
            continue
        a, b = np.meshgrid(inner, outer, indexing="ij")
        a, b = a.ravel(), b.ravel()
        slope, z0 = pair_features(X[a, 0], X[a, 1], X[a, 2], X[b, 0], X[b, 1], X[b, 2])
        dr = X[b, 0] - X[a, 0]
        ok = (dr > 0) & (np.abs(slope) < cuts.phi_slope_max) & (np.abs(z0) < cuts.z0_max)
        src_parts.append(a[ok])
        dst_parts.append(b[ok])

    if src_parts:
        src = np.concatenate(src_parts)
        dst = np.concatenate(dst_parts)
    else:
        src = dst = np.zeros(0, dtype=np.int64)
    order = np.lexsort((dst, src))
    edges = np.stack([src[order], dst[order]], axis=1).astype(np.int64).reshape(-1, 2)
    y = ((pid[edges[:, 0]] == pid[edges[:, 1]]) & (pid[edges[:, 0]] != 0)).astype(float)
    return EventGraph(X, edges, y, layer, pid, hid, event_id)


def graph_from_event(event: Event, cuts: CutConfig = CutConfig()) -> EventGraph:
    return build_graph(select_hits(event, cuts), cuts, event.event_id)


def graph_stats(graph: EventGraph) -> GraphStats:
    if graph.n_edges == 0:
        return GraphStats(graph.n_nodes, 0, 0.0, empty=True)
    return GraphStats(graph.n_nodes, graph.n_edges, float(graph.y.sum() / graph.n_edges))


def aggregate_stats(stats: Sequence[GraphStats]) -> dict:
    """Means and standard deviations of node count, edge count and truth fraction."""
    out = {"n_graphs": len(stats)}
    for key in ("n_nodes", "n_edges", "truth_fraction"):
        vals = np.array([getattr(s, key) for s in stats], dtype=float)
        out[f"{key}_mean"] = float(vals.mean()) if vals.size else 0.0
        out[f"{key}_std"] = float(vals.std()) if vals.size else 0.0
    out["n_empty"] = int(sum(s.empty for s in stats))
    return out


def graph_paths(directory, event_id: int) -> tuple[Path, Path]:
    stem = Path(directory) / f"graph{event_id:09d}"
    return Path(f"{stem}-nodes.csv"), Path(f"{stem}-edges.csv")


def list_graph_ids(directory) -> list[int]:
    ids = []
    for path in sorted(Path(directory).glob("graph*-nodes.csv")):
        digits = path.name[len("graph"):-len("-nodes.csv")]
        if digits.isdigit():
            ids.append(int(digits))
    return ids


def save_graph(graph: EventGraph, directory) -> tuple[Path, Path]:
    """Write the node table and the edge table (see README for the column schema)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    nodes_path, edges_path = graph_paths(directory, graph.event_id)
    lines = ["node,hit_id,r,phi,z,layer_index,particle_id"]
    for j in range(graph.n_nodes):
        r, phi, z = (float(v) for v in graph.X[j])
        lines.append(f"{j},{graph.hit_id[j]},{r!r},{phi!r},{z!r},{graph.layer_index[j]},{graph.particle_id[j]}")
    nodes_path.write_text("\n".join(lines) + "\n")
    lines = ["edge,src,dst,y"]
    lines += [f"{k},{s},{d},{int(t)}" for k, ((s, d), t) in enumerate(zip(graph.edges.tolist(), graph.y))]
    edges_path.write_text("\n".join(lines) + "\n")
    return nodes_path, edges_path


def load_graph(directory, event_id: int) -> EventGraph:
    nodes_path, edges_path = graph_paths(directory, event_id)
    nodes = pd.read_csv(nodes_path, float_precision="round_trip")
    edges = pd.read_csv(edges_path)
    X = nodes[["r", "phi", "z"]].to_numpy(dtype=float).reshape(-1, 3)
    e = edges[["src", "dst"]].to_numpy(dtype=np.int64).reshape(-1, 2)
    return EventGraph(X, e, edges["y"].to_numpy(dtype=float), nodes["layer_index"].to_numpy(dtype=np.int64),
                      nodes["particle_id"].to_numpy(dtype=np.int64), nodes["hit_id"].to_numpy(dtype=np.int64),
                      event_id)


def separable_graph(rng: np.random.Generator, n_per_layer: int = 3, n_layers: int = 4,
                    edge_prob: float = 0.6, margin: float = 50.0, event_id: int = 0) -> EventGraph:
    """Toy graph whose edge label is the sign of ``z_dst - z_src``: linearly separable.

    Pairs with ``|z_dst - z_src| < margin`` [mm] are never connected, so the two
    classes are separated by a gap. Used as a sanity benchmark for the training
    loop; it bypasses the detector cuts.
    """
    radii = np.linspace(50.0, 1000.0, n_layers)
    rows, layer = [], []
    for lay, r in enumerate(radii):
        for _ in range(n_per_layer):
            rows.append((r, rng.uniform(-1.0, 1.0), rng.uniform(-500.0, 500.0)))
            layer.append(lay)
    X = np.array(rows)
    layer = np.array(layer, dtype=np.int64)
    pairs = []
    for lay in range(n_layers - 1):
        for a in np.flatnonzero(layer == lay):
            for b in np.flatnonzero(layer == lay + 1):
                if rng.random() < edge_prob and abs(X[b, 2] - X[a, 2]) >= margin:
                    pairs.append((a, b))
    edges = np.array(sorted(pairs), dtype=np.int64).reshape(-1, 2)
    y = (X[edges[:, 1], 2] > X[edges[:, 0], 2]).astype(float)
    n = X.shape[0]
    return EventGraph(X, edges, y, layer, np.zeros(n, dtype=np.int64), np.arange(1, n + 1), event_id)
