"""Multi-fidelity DAG representation and queries.

Nodes are simulators; a directed edge (t', t) means simulator t is a one-step
higher-fidelity refinement of t'. The single root (out-degree 0) is the
highest-fidelity simulator. The graph is immutable after construction; all
queries are read-only and safe to share across threads.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

from .errors import (
    CycleDetected,
    DanglingEdge,
    DuplicateEdge,
    MultipleRoots,
    UnknownNode,
    UnreachableNode,
)

__all__ = ["MultiFidelityDag", "validate"]


@dataclass(frozen=True)
class MultiFidelityDag:
    """Rooted DAG of simulators with per-run costs.

    Parameters
    ----------
    nodes : list of (node_id, label, cost_per_run)
        Caller-assigned integer ids (stable references in files and tests),
        display labels, and positive per-run costs.
    edges : list of (parent_id, child_id)
        Child is a one-step refinement of parent.
    root_id : int
        The unique highest-fidelity node (out-degree 0).
    """

    nodes: tuple[tuple[int, str, float], ...]
    edges: tuple[tuple[int, int], ...]
    root_id: int
    _parents: dict[int, tuple[int, ...]] = field(init=False, repr=False, compare=False)
    _children: dict[int, tuple[int, ...]] = field(init=False, repr=False, compare=False)

    def __init__(self, nodes, edges, root_id):
        object.__setattr__(self, "nodes", tuple((int(i), str(s), float(c)) for i, s, c in nodes))
        object.__setattr__(self, "edges", tuple((int(a), int(b)) for a, b in edges))
        object.__setattr__(self, "root_id", int(root_id))
        par: dict[int, list[int]] = {i: [] for i, _, _ in self.nodes}
        chi: dict[int, list[int]] = {i: [] for i, _, _ in self.nodes}
        for a, b in self.edges:
            if a in chi:
                chi[a].append(b)
            if b in par:
                par[b].append(a)
        object.__setattr__(self, "_parents", {k: tuple(sorted(v)) for k, v in par.items()})
        object.__setattr__(self, "_children", {k: tuple(sorted(v)) for k, v in chi.items()})

    # -- basic accessors ----------------------------------------------------

    @property
    def node_ids(self) -> tuple[int, ...]:
        return tuple(i for i, _, _ in self.nodes)

    def label(self, t: int) -> str:
        self._require(t)
        return next(s for i, s, _ in self.nodes if i == t)

    def cost(self, t: int) -> float:
        self._require(t)
        return next(c for i, _, c in self.nodes if i == t)

    def id_of(self, label: str) -> int:
        for i, s, _ in self.nodes:
            if s == label:
                return i
        raise UnknownNode(f"no node labeled {label!r}")

    def _require(self, t: int) -> None:
        if t not in self._parents:
            raise UnknownNode(f"node {t} is not in the graph")

    # -- structural queries --------------------------------------------------

    def parents(self, t: int) -> tuple[int, ...]:
        """Nodes t' with an edge (t', t): the one-step lower-fidelity codes,
        in ascending id order (the column order of parent-output blocks)."""
        self._require(t)
        return self._parents[t]

    def children(self, t: int) -> tuple[int, ...]:
        self._require(t)
        return self._children[t]

    def descendants(self, t: int) -> set[int]:
        """All nodes reachable from t by following edges (refinements of t)."""
        self._require(t)
        seen: set[int] = set()
        stack = list(self._children[t])
        while stack:
            u = stack.pop()
            if u not in seen:
                seen.add(u)
                stack.extend(self._children[u])
        return seen

    def ancestors(self, t: int) -> set[int]:
        """All nodes with a directed path to t (lower-fidelity sources of t)."""
        self._require(t)
        seen: set[int] = set()
        stack = list(self._parents[t])
        while stack:
            u = stack.pop()
            if u not in seen:
                seen.add(u)
                stack.extend(self._parents[u])
        return seen

    def sources(self) -> set[int]:
        """Nodes with in-degree 0 (no lower-fidelity representation)."""
        return {t for t in self.node_ids if not self._parents[t]}

    def depth(self, t: int) -> int:
        """Longest path length from t to the root (root has depth 0)."""
        return self._depths()[t]

    def _depths(self) -> dict[int, int]:
        order = self.fit_order()
        depths: dict[int, int] = {}
        for t in reversed(order):
            kids = self._children[t]
            depths[t] = 0 if not kids else 1 + max(depths[k] for k in kids)
        return depths

    def is_in_tree(self) -> bool:
        """True iff every non-root node has exactly one path to the root,
        equivalently out-degree exactly 1."""
        return all(
            len(self._children[t]) == 1 for t in self.node_ids if t != self.root_id
        )

    def fit_order(self) -> list[int]:
        """Node ids sorted leaf-to-root: descending depth, ties by ascending id.

        Every node appears after all of its parents, so models can be fitted
        in a single sweep (nodes of equal depth are independent given their
        parents and could be fitted in parallel).
        """
        depths: dict[int, int] = {}

        def walk(t: int) -> int:
            if t in depths:
                return depths[t]
            kids = self._children[t]
            d = 0 if not kids else 1 + max(walk(k) for k in kids)
            depths[t] = d
            return d

        for t in self.node_ids:
            walk(t)
        return sorted(self.node_ids, key=lambda t: (-depths[t], t))

    # -- serialization -------------------------------------------------------

    def to_json_dict(self) -> dict:
        return {
            "nodes": [{"id": i, "label": s, "cost": c} for i, s, c in self.nodes],
            "edges": [[a, b] for a, b in self.edges],
            "root": self.root_id,
        }

    @classmethod
    def from_json_dict(cls, doc: dict) -> "MultiFidelityDag":
        try:
            nodes = [(n["id"], n.get("label", str(n["id"])), n.get("cost", 1.0))
                     for n in doc["nodes"]]
            edges = [(e[0], e[1]) for e in doc["edges"]]
            root = doc["root"]
        except (KeyError, TypeError, IndexError) as exc:
            raise ValueError(f"malformed DAG document: missing field {exc}") from exc
        dag = cls(nodes, edges, root)
        validate(dag)
        return dag

    @classmethod
    def from_json_file(cls, path) -> "MultiFidelityDag":
        with open(path, "r", encoding="utf-8") as fh:
            try:
                doc = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from exc
        return cls.from_json_dict(doc)


def validate(dag: MultiFidelityDag) -> None:
    """Check every structural invariant, raising on the first violation.

    Raises
    ------
    DanglingEdge, DuplicateEdge, CycleDetected, MultipleRoots, UnreachableNode
        Each error message names the offending node or edge.
    ValueError
        For duplicate node ids or non-positive costs.
    """
    ids = [i for i, _, _ in dag.nodes]
    if len(set(ids)) != len(ids):
        dup = next(i for i in ids if ids.count(i) > 1)
        raise ValueError(f"duplicate node id {dup}")
    for i, s, c in dag.nodes:
        if not c > 0:
            raise ValueError(f"node {i} ({s!r}) has non-positive cost {c}")
    known = set(ids)
    seen_edges: set[tuple[int, int]] = set()
    for a, b in dag.edges:
        if a not in known or b not in known:
            raise DanglingEdge(f"edge ({a}, {b}) references a missing node")
        if a == b:
            raise CycleDetected(f"self-loop at node {a}")
        if (a, b) in seen_edges:
            raise DuplicateEdge(f"edge ({a}, {b}) listed twice")
        seen_edges.add((a, b))
    if dag.root_id not in known:
        raise UnknownNode(f"root id {dag.root_id} is not a node")

    # Kahn's algorithm; leftovers are on a cycle.
    out_deg = {t: len(dag._children[t]) for t in known}
    queue = sorted(t for t in known if out_deg[t] == 0)
    order = []
    while queue:
        t = queue.pop()
        order.append(t)
        for p in dag._parents[t]:
            out_deg[p] -= 1
            if out_deg[p] == 0:
                queue.append(p)
    if len(order) != len(known):
        cyclic = sorted(set(known) - set(order))
        raise CycleDetected(f"cycle through nodes {cyclic}")

    sinks = [t for t in known if not dag._children[t]]
    if len(sinks) != 1 or sinks[0] != dag.root_id:
        raise MultipleRoots(
            f"expected the single out-degree-0 node to be root {dag.root_id}, found {sinks}"
        )
    for t in known:
        if t != dag.root_id and dag.root_id not in dag.descendants(t):
            raise UnreachableNode(f"node {t} has no path to the root")
