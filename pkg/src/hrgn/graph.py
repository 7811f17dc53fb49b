"""Heterogeneous stream-reservoir graph and distance-based adjacency."""
from __future__ import annotations

import csv
import warnings
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

EDGE_TYPES = ("ss", "sr", "rs")


class GraphError(ValueError):
    pass


@dataclass(frozen=True)
class Edge:
    src: str
    dst: str
    kind: str
    distance: float


@dataclass(frozen=True)
class HeteroGraph:
    """Segments, reservoirs and the three typed edge sets with adjacency weights.

    ``weights`` is aligned with ``edges``. Dense views used by the recurrent
    model are built lazily by :meth:`dense`.
    """

    segments: tuple[str, ...]
    reservoirs: tuple[str, ...]
    edges: tuple[Edge, ...]
    weights: tuple[float, ...]

    @property
    def n_segments(self) -> int:
        return len(self.segments)

    @property
    def n_reservoirs(self) -> int:
        return len(self.reservoirs)

    def weight(self, src: str, dst: str) -> float:
        for e, w in zip(self.edges, self.weights):
            if e.src == src and e.dst == dst:
                return w
        return 0.0

    def dense(self) -> "DenseAdjacency":
        seg = {s: i for i, s in enumerate(self.segments)}
        res = {r: k for k, r in enumerate(self.reservoirs)}
        n, m = len(seg), len(res)
        ss = np.zeros((n, n))
        sr = np.zeros((n, m))
        rs = np.zeros((m, n))
        for e, w in zip(self.edges, self.weights):
            if e.kind == "ss":
                ss[seg[e.src], seg[e.dst]] = w
            elif e.kind == "sr":
                sr[seg[e.src], res[e.dst]] = w
            else:
                rs[res[e.src], seg[e.dst]] = w
        return DenseAdjacency(ss=ss, sr=sr, rs=rs)

    def without_edges(self, kinds: Iterable[str] = EDGE_TYPES) -> "HeteroGraph":
        """Copy with the given edge types removed (edge-ablation baseline)."""
        kinds = set(kinds)
        keep = [(e, w) for e, w in zip(self.edges, self.weights) if e.kind not in kinds]
        return HeteroGraph(
            self.segments,
            self.reservoirs,
            tuple(e for e, _ in keep),
            tuple(w for _, w in keep),
        )

    def relabel(self, segment_order: Sequence[str]) -> "HeteroGraph":
        """Same graph with segments listed in ``segment_order``."""
        if sorted(segment_order) != sorted(self.segments):
            raise GraphError("relabel: segment_order must be a permutation of the segment ids")
        return HeteroGraph(tuple(segment_order), self.reservoirs, self.edges, self.weights)


@dataclass(frozen=True)
class DenseAdjacency:
    """``ss[j, i]`` is the weight of segment j upstream of segment i;
    ``sr[i, k]`` segment i into reservoir k; ``rs[k, i]`` reservoir k into segment i."""

    ss: np.ndarray
    sr: np.ndarray
    rs: np.ndarray


@dataclass(frozen=True)
class NeighborIndex:
    upstream_segments: dict[str, tuple[str, ...]]
    upstream_reservoirs: dict[str, tuple[str, ...]]
    reservoir_inflows: dict[str, tuple[str, ...]]


def standardize_distances(distances: Sequence[float]) -> np.ndarray:
    d = np.asarray(distances, dtype=np.float64)
    sd = d.std()
    if sd == 0.0:
        warnings.warn("all stream distances are identical; standardized distance set to 0", stacklevel=3)
        return np.zeros_like(d)
    return (d - d.mean()) / sd


def adjacency_weight(standardized_distance):
    """Logistic decay of standardized stream distance, in (0, 1)."""
    return 1.0 / (1.0 + np.exp(standardized_distance))


def build_adjacency(
    edges: Iterable[Edge | tuple],
    segments: Sequence[str] | None = None,
    reservoirs: Sequence[str] | None = None,
) -> HeteroGraph:
    """Validate typed edges and attach adjacency weights.

    Distances are standardized over all edges of every type together, then
    mapped through ``1 / (1 + exp(d))``. Node lists default to the ids that
    appear on edges, in first-seen order.
    """
    edges = [e if isinstance(e, Edge) else Edge(str(e[0]), str(e[1]), str(e[2]), float(e[3])) for e in edges]
    if not edges:
        raise GraphError("build_adjacency: at least one edge is required")
    seg_seen: dict[str, None] = {}
    res_seen: dict[str, None] = {}
    pairs = set()
    for e in edges:
        if e.kind not in EDGE_TYPES:
            raise GraphError(f"unknown edge type {e.kind!r} on edge {e.src}->{e.dst}")
        if not np.isfinite(e.distance):
            raise GraphError(f"non-finite stream distance on edge {e.src}->{e.dst}")
        if e.distance < 0:
            raise GraphError(f"negative stream distance {e.distance} on edge {e.src}->{e.dst}")
        if e.src == e.dst:
            raise GraphError(f"self edge on {e.src}")
        if (e.src, e.dst) in pairs:
            raise GraphError(f"duplicate edge {e.src}->{e.dst}")
        pairs.add((e.src, e.dst))
        src_set, dst_set = {"ss": (seg_seen, seg_seen), "sr": (seg_seen, res_seen), "rs": (res_seen, seg_seen)}[e.kind]
        src_set.setdefault(e.src)
        dst_set.setdefault(e.dst)

    segments = tuple(segments) if segments is not None else tuple(seg_seen)
    reservoirs = tuple(reservoirs) if reservoirs is not None else tuple(res_seen)
    if set(segments) & set(reservoirs):
        raise GraphError("segment and reservoir ids overlap")
    missing = (set(seg_seen) - set(segments)) | (set(res_seen) - set(reservoirs))
    if missing:
        raise GraphError(f"edges reference unknown nodes: {sorted(missing)}")
    _check_acyclic(segments, [e for e in edges if e.kind == "ss"])

    d_hat = standardize_distances([e.distance for e in edges])
    weights = adjacency_weight(d_hat)
    return HeteroGraph(segments, reservoirs, tuple(edges), tuple(float(w) for w in weights))


def _check_acyclic(segments: Sequence[str], ss_edges: Sequence[Edge]) -> None:
    children = defaultdict(list)
    indeg = {s: 0 for s in segments}
    for e in ss_edges:
        children[e.src].append(e.dst)
        indeg[e.dst] += 1
    queue = [s for s, d in indeg.items() if d == 0]
    seen = 0
    while queue:
        s = queue.pop()
        seen += 1
        for c in children[s]:
            indeg[c] -= 1
            if indeg[c] == 0:
                queue.append(c)
    if seen != len(indeg):
        raise GraphError("segment-to-segment edges contain a cycle")


def neighbor_index(graph: HeteroGraph) -> NeighborIndex:
    ups: dict[str, list[str]] = {s: [] for s in graph.segments}
    upr: dict[str, list[str]] = {s: [] for s in graph.segments}
    inflow: dict[str, list[str]] = {r: [] for r in graph.reservoirs}
    for e in graph.edges:
        if e.kind == "ss":
            ups[e.dst].append(e.src)
        elif e.kind == "rs":
            upr[e.dst].append(e.src)
        else:
            inflow[e.dst].append(e.src)
    freeze = lambda d: {k: tuple(v) for k, v in d.items()}  # noqa: E731
    return NeighborIndex(freeze(ups), freeze(upr), freeze(inflow))


def read_edges_csv(path: str | Path) -> list[Edge]:
    out = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        need = {"from_id", "to_id", "edge_type", "stream_distance_m"}
        if reader.fieldnames is None or not need <= set(reader.fieldnames):
            raise GraphError(f"{path}: header must contain {sorted(need)}")
        for lineno, row in enumerate(reader, start=2):
            try:
                dist = float(row["stream_distance_m"])
            except ValueError as exc:
                raise GraphError(f"{path}:{lineno}: bad stream_distance_m {row['stream_distance_m']!r}") from exc
            out.append(Edge(row["from_id"], row["to_id"], row["edge_type"], dist))
    return out


def write_edges_csv(path: str | Path, edges: Iterable[Edge]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["from_id", "to_id", "edge_type", "stream_distance_m"])
        for e in edges:
            w.writerow([e.src, e.dst, e.kind, repr(float(e.distance))])
