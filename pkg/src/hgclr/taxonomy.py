"""Label tree loading, pairwise distances and edge paths."""

from __future__ import annotations

import io
import os
from collections import deque
from dataclasses import dataclass, field
from typing import Iterable, Optional, Union

import numpy as np

ROOT = "root"


class TaxonomyError(ValueError):
    pass


@dataclass(frozen=True)
class Label:
    id: int
    name: str
    father: Optional[int]


@dataclass(eq=False)
class Taxonomy:
    """A rooted label tree.

    Node ``0`` is always the root. ``edges[e] = (father, child)``; ``dist`` and
    ``parent_to`` come from one BFS per node over the undirected tree.
    """

    labels: list
    edges: list
    dist: np.ndarray = field(repr=False)
    parent_to: np.ndarray = field(repr=False)

    @property
    def k(self) -> int:
        return len(self.labels)

    @property
    def num_classes(self) -> int:
        """Classification targets: every label except the root."""
        return self.k - 1

    @property
    def names(self) -> list:
        return [lab.name for lab in self.labels]

    @property
    def depth(self) -> int:
        return int(self.dist[0].max()) if self.k > 1 else 0

    @property
    def max_dist(self) -> int:
        return 2 * self.depth

    def index(self, name: str) -> int:
        try:
            return self._by_name[name]
        except KeyError:
            raise TaxonomyError(f"unknown label {name!r}") from None

    def father(self, i: int) -> Optional[int]:
        return self.labels[i].father

    def children(self, i: int) -> list:
        return self._children[i]

    def edge_id(self, father: int, child: int) -> int:
        return self._edge_of_child[child]

    def __post_init__(self):
        self._by_name = {lab.name: lab.id for lab in self.labels if lab.name}
        self._children = [[] for _ in self.labels]
        self._edge_of_child = {}
        for e, (f, c) in enumerate(self.edges):
            self._children[f].append(c)
            self._edge_of_child[c] = e

    def root_path(self, i: int) -> list:
        """Labels from just below the root down to ``i`` (root excluded)."""
        path = []
        while i != 0:
            path.append(i)
            i = self.labels[i].father
        return path[::-1]

    def closure(self, ids: Iterable[int]) -> set:
        out = set()
        for i in ids:
            out.update(self.root_path(i))
        return out


def load_taxonomy(source: Union[str, os.PathLike, io.TextIOBase, Iterable[str]]) -> Taxonomy:
    """Parse ``father<TAB>child`` lines (``#`` comments) into a validated tree.

    Labels are numbered in order of first appearance with ``root`` first.
    """
    if isinstance(source, (str, os.PathLike)) and os.path.exists(source):
        with open(source, encoding="utf-8") as fh:
            lines = fh.read().splitlines()
    elif isinstance(source, str):
        lines = source.splitlines()
    else:
        lines = [ln.rstrip("\n") for ln in source]

    pairs = []
    for lineno, raw in enumerate(lines, 1):
        line = raw.rstrip("\r")
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise TaxonomyError(f"line {lineno}: expected 'father<TAB>child', got {line!r}")
        pairs.append((parts[0].strip(), parts[1].strip()))
    return build_taxonomy(pairs)


def build_taxonomy(pairs: Iterable[tuple]) -> Taxonomy:
    """Validate ``(father_name, child_name)`` pairs and precompute distances.

    Empty child names are allowed (unnamed labels); each one is a distinct node
    and cannot be referenced as a father.
    """
    pairs = list(pairs)
    order = [ROOT]
    ids = {ROOT: 0}
    father_of = {}
    edges = []
    for f, c in pairs:
        if f == c and f:
            raise TaxonomyError(f"cycle: {f} -> {f}")
        if not f:
            raise TaxonomyError("a father must have a name")
        if c == ROOT:
            raise TaxonomyError(f"cycle: {f} -> {ROOT} (root cannot have a father)")
        if f not in ids:
            ids[f] = len(order)
            order.append(f)
        if c and c in ids:
            cid = ids[c]
        else:
            cid = len(order)
            order.append(c)
            if c:
                ids[c] = cid
        if cid in father_of:
            raise TaxonomyError(f"label {c!r} has multiple fathers: "
                                f"{order[father_of[cid]]!r} and {f!r}")
        father_of[cid] = ids[f]
        edges.append((ids[f], cid))

    k = len(order)
    for i in range(1, k):
        if i not in father_of:
            raise TaxonomyError(f"orphan label {order[i]!r} has no father and is not the root")

    # every node must reach the root; anything else sits on a cycle
    for i in range(1, k):
        seen = [i]
        j = i
        while j != 0:
            j = father_of[j]
            if j in seen:
                cyc = seen[seen.index(j):] + [j]
                raise TaxonomyError("cycle: " + " -> ".join(order[n] for n in reversed(cyc)))
            seen.append(j)

    labels = [Label(i, order[i], father_of.get(i)) for i in range(k)]
    dist, parent_to = _all_pairs_bfs(k, edges)
    return Taxonomy(labels=labels, edges=edges, dist=dist, parent_to=parent_to)


def _all_pairs_bfs(k: int, edges: list) -> tuple:
    adj = [[] for _ in range(k)]
    for f, c in edges:
        adj[f].append(c)
        adj[c].append(f)
    dist = np.full((k, k), -1, dtype=np.int64)
    # parent_to[s, v] = predecessor of v on the BFS tree rooted at s
    parent_to = np.full((k, k), -1, dtype=np.int64)
    for s in range(k):
        dist[s, s] = 0
        q = deque([s])
        while q:
            u = q.popleft()
            for v in adj[u]:
                if dist[s, v] < 0:
                    dist[s, v] = dist[s, u] + 1
                    parent_to[s, v] = u
                    q.append(v)
    return dist, parent_to


def node_distance(t: Taxonomy, i: int, j: int) -> int:
    for x in (i, j):
        if not 0 <= x < t.k:
            raise TaxonomyError(f"unknown label id {x}")
    return int(t.dist[i, j])


def edge_path(t: Taxonomy, i: int, j: int) -> list:
    """Edge ids along the unique tree path from ``i`` to ``j``."""
    node_distance(t, i, j)
    nodes = [j]
    while nodes[-1] != i:
        nodes.append(int(t.parent_to[i, nodes[-1]]))
    nodes.reverse()
    out = []
    for a, b in zip(nodes, nodes[1:]):
        child = b if t.labels[b].father == a else a
        out.append(t._edge_of_child[child])
    return out


def validate_label_set(t: Taxonomy, s: Iterable[int]) -> frozenset:
    """Check father closure; returns the set without the root."""
    members = set(s)
    if not members:
        raise TaxonomyError("empty label set")
    for i in members:
        if not 0 <= i < t.k:
            raise TaxonomyError(f"unknown label id {i}")
    for i in sorted(members):
        f = t.labels[i].father
        if f is not None and f != 0 and f not in members:
            raise TaxonomyError(f"label {t.labels[i].name or i!r} is present without its father "
                                f"{t.labels[f].name!r}")
    return frozenset(members - {0})


def path_incidence(t: Taxonomy) -> np.ndarray:
    """(k*k, |E|) matrix with 1/D on the edges of each path, so that
    ``(M @ w).reshape(k, k)`` is the mean edge weight along every path."""
    k, m = t.k, len(t.edges)
    M = np.zeros((k * k, m))
    for i in range(k):
        for j in range(k):
            if i == j:
                continue
            path = edge_path(t, i, j)
            M[i * k + j, path] += 1.0 / len(path)
    return M


def sibling_groups(t: Taxonomy) -> list:
    """Non-root labels grouped by father (top-level labels share the root)."""
    groups = {}
    for lab in t.labels[1:]:
        groups.setdefault(lab.father, []).append(lab.id)
    return [g for _, g in sorted(groups.items())]
