"""Three-level label hierarchy: grandparent -> parent -> child.

Node ids are contiguous integers. Children occupy 1..num_children and
ancestors (parents and grandparents together) occupy the range right after.
Hop distances are path lengths in the tree extended with a virtual root above
the grandparents, so sibling children sit 2 hops apart and cousins 4.
"""

import json
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import ToolkitError

LEVELS = ("grandparent", "parent", "child")

_CHILD_OF = {"child": "parent", "parent": "grandparent"}
_DEPTH = {"grandparent": 1, "parent": 2, "child": 3}


class HierarchyError(ToolkitError):
    pass


@dataclass(frozen=True)
class HierarchyNode:
    id: int
    name: str
    level: str
    parent: Optional[int]


class HierarchyTree:
    """Validated, immutable view of a three-level hierarchy."""

    def __init__(self, nodes):
        nodes = tuple(sorted(nodes, key=lambda n: n.id))
        if not nodes:
            raise HierarchyError("hierarchy is empty")
        by_id = {}
        for node in nodes:
            if node.id in by_id:
                raise HierarchyError(f"duplicate node id {node.id}")
            if node.level not in LEVELS:
                raise HierarchyError(
                    f"node {node.id} ({node.name!r}) has unknown level {node.level!r}"
                )
            by_id[node.id] = node
        self._nodes = nodes
        self._by_id = by_id

        for node in nodes:
            if node.level == "grandparent":
                if node.parent is not None:
                    raise HierarchyError(
                        f"grandparent {node.id} ({node.name!r}) must not have a parent"
                    )
                continue
            if node.parent is None:
                raise HierarchyError(
                    f"node {node.id} ({node.name!r}) is an orphan: missing parent"
                )
            up = by_id.get(node.parent)
            if up is None:
                raise HierarchyError(
                    f"node {node.id} ({node.name!r}) references unknown parent {node.parent}"
                )
            if up.level != _CHILD_OF[node.level]:
                raise HierarchyError(
                    f"node {node.id} ({node.name!r}) has {node.level!r} level but its "
                    f"parent {up.id} is a {up.level!r}, expected {_CHILD_OF[node.level]!r}"
                )

        self._children_of = {n.id: [] for n in nodes}
        for node in nodes:
            if node.parent is not None:
                self._children_of[node.parent].append(node.id)
        for node in nodes:
            if node.level != "child" and not self._children_of[node.id]:
                raise HierarchyError(
                    f"{node.level} {node.id} ({node.name!r}) has no children"
                )

        self.child_ids = tuple(n.id for n in nodes if n.level == "child")
        self.parent_ids = tuple(n.id for n in nodes if n.level == "parent")
        self.grandparent_ids = tuple(n.id for n in nodes if n.level == "grandparent")
        self.ancestor_ids = tuple(sorted(self.parent_ids + self.grandparent_ids))

        num_children = len(self.child_ids)
        if set(self.child_ids) != set(range(1, num_children + 1)):
            raise HierarchyError(
                f"child ids must be 1..{num_children}, got {sorted(self.child_ids)}"
            )
        expected = set(range(num_children + 1, num_children + 1 + len(self.ancestor_ids)))
        if set(self.ancestor_ids) != expected:
            raise HierarchyError(
                "ancestor ids must directly follow the child range "
                f"({num_children + 1}..{num_children + len(self.ancestor_ids)})"
            )

    @property
    def nodes(self):
        return self._nodes

    @property
    def node_count(self):
        return len(self._nodes)

    @property
    def num_children(self):
        return len(self.child_ids)

    @property
    def num_ancestors(self):
        return len(self.ancestor_ids)

    def node(self, node_id: int) -> HierarchyNode:
        try:
            return self._by_id[node_id]
        except KeyError:
            raise HierarchyError(f"unknown node id {node_id}") from None

    def name_of(self, node_id: int) -> str:
        return self.node(node_id).name

    def level_of(self, node_id: int) -> str:
        return self.node(node_id).level

    def parent_of(self, node_id: int) -> Optional[int]:
        return self.node(node_id).parent

    def children_of(self, node_id: int):
        self.node(node_id)
        return tuple(sorted(self._children_of[node_id]))

    def ancestors(self, child_id: int):
        """(parent id, grandparent id) of a child class."""
        node = self.node(child_id)
        if node.level != "child":
            raise HierarchyError(f"node {child_id} is a {node.level}, not a child")
        parent = self._by_id[node.parent]
        return parent.id, parent.parent

    def path_ids(self, child_id: int):
        """(child, parent, grandparent) ids along the path to the root."""
        parent, grandparent = self.ancestors(child_id)
        return child_id, parent, grandparent

    def siblings(self, child_id: int):
        """Other children sharing this child's parent, sorted by id."""
        node = self.node(child_id)
        if node.level != "child":
            raise HierarchyError(f"node {child_id} is a {node.level}, not a child")
        return tuple(i for i in self.children_of(node.parent) if i != child_id)

    def hop_distance(self, a: int, b: int) -> int:
        """Number of tree edges between two nodes, through the virtual root
        above the grandparents if necessary."""
        chain_a = self._chain(a)
        chain_b = self._chain(b)
        for hops_b, node in enumerate(chain_b):
            if node in chain_a:
                return chain_a[node] + hops_b
        raise AssertionError("chains always share the virtual root")

    def _chain(self, node_id: int):
        # node id -> hops from node_id, walking up; None is the virtual root.
        chain = {}
        hops = 0
        current: Optional[int] = node_id
        while current is not None:
            chain[current] = hops
            current = self.node(current).parent
            hops += 1
        chain[None] = hops
        return chain

    def level_sizes(self):
        return {
            "grandparent": len(self.grandparent_ids),
            "parent": len(self.parent_ids),
            "child": len(self.child_ids),
        }

    def __eq__(self, other):
        return isinstance(other, HierarchyTree) and self._nodes == other._nodes

    def __repr__(self):
        sizes = self.level_sizes()
        return (
            f"HierarchyTree({sizes['grandparent']} grandparents, "
            f"{sizes['parent']} parents, {sizes['child']} children)"
        )


def parse_hierarchy(text: str) -> HierarchyTree:
    """Parse the JSON hierarchy format: a list of records with keys
    id, name, level and (except for grandparents) parent."""
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise HierarchyError(f"hierarchy is not valid JSON: {exc}") from exc
    if not isinstance(raw, list):
        raise HierarchyError("hierarchy must be a JSON array of node records")
    nodes = []
    for i, entry in enumerate(raw):
        if not isinstance(entry, dict):
            raise HierarchyError(f"hierarchy entry {i} is not an object")
        try:
            node_id = entry["id"]
            name = entry["name"]
            level = entry["level"]
        except KeyError as exc:
            raise HierarchyError(f"hierarchy entry {i} is missing key {exc}") from None
        if not isinstance(node_id, int) or isinstance(node_id, bool):
            raise HierarchyError(f"hierarchy entry {i}: id must be an integer")
        if not isinstance(name, str) or not isinstance(level, str):
            raise HierarchyError(f"node {node_id}: name and level must be strings")
        parent = entry.get("parent")
        if parent is not None and (not isinstance(parent, int) or isinstance(parent, bool)):
            raise HierarchyError(f"node {node_id}: parent must be an integer or absent")
        nodes.append(HierarchyNode(id=node_id, name=name, level=level, parent=parent))
    return HierarchyTree(nodes)


def serialize_hierarchy(tree: HierarchyTree) -> str:
    records = []
    for node in tree.nodes:
        record = {"id": node.id, "name": node.name, "level": node.level}
        if node.parent is not None:
            record["parent"] = node.parent
        records.append(record)
    return json.dumps(records, indent=2, sort_keys=True)


def balanced_hierarchy(num_grandparents: int, parents_per_grandparent: int,
                       children_per_parent: int) -> HierarchyTree:
    """Build a fully balanced hierarchy with generated names, mostly for
    synthetic data and tests."""
    if min(num_grandparents, parents_per_grandparent, children_per_parent) < 1:
        raise ValueError("all level sizes must be >= 1")
    num_parents = num_grandparents * parents_per_grandparent
    num_children = num_parents * children_per_parent
    nodes = []
    first_parent = num_children + 1
    first_grandparent = first_parent + num_parents
    for g in range(num_grandparents):
        nodes.append(HierarchyNode(first_grandparent + g, f"g{g}", "grandparent", None))
    for p in range(num_parents):
        g = p // parents_per_grandparent
        nodes.append(
            HierarchyNode(first_parent + p, f"g{g}p{p}", "parent", first_grandparent + g)
        )
    for c in range(num_children):
        p = c // children_per_parent
        nodes.append(
            HierarchyNode(1 + c, f"g{p // parents_per_grandparent}p{p}c{c}", "child",
                          first_parent + p)
        )
    return HierarchyTree(nodes)


@dataclass(frozen=True)
class PairBatch:
    """Training pairs for the hierarchy embedding.

    positives: (node, its parent) for every child and every parent.
    negatives: per positive, the same anchor paired with sampled nodes that
    are neither the anchor nor its parent.
    """

    positives: tuple
    negatives: tuple

    def __post_init__(self):
        if len(self.positives) != len(self.negatives):
            raise ValueError("negatives must parallel positives")


def sample_pairs(tree: HierarchyTree, negatives_per_positive: int, seed: int) -> PairBatch:
    """Enumerate all (node, parent) positives in id order and draw the given
    number of negatives for each, uniformly without replacement, deterministic
    for a given seed."""
    k = negatives_per_positive
    if k < 1:
        raise ValueError("negatives_per_positive must be >= 1")
    positives = []
    for child in tree.child_ids:
        positives.append((child, tree.parent_of(child)))
    for parent in tree.parent_ids:
        positives.append((parent, tree.parent_of(parent)))
    all_ids = np.array([n.id for n in tree.nodes], dtype=np.int64)
    rng = np.random.default_rng(seed)
    negatives = []
    for anchor, parent in positives:
        pool = all_ids[(all_ids != anchor) & (all_ids != parent)]
        if k > pool.size:
            raise ValueError(
                f"cannot draw {k} negatives from {pool.size} candidates for node {anchor}"
            )
        drawn = rng.choice(pool, size=k, replace=False)
        negatives.append(tuple((anchor, int(u)) for u in drawn))
    return PairBatch(positives=tuple(positives), negatives=tuple(negatives))
