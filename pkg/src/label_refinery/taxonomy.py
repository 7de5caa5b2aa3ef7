"""Rooted category hierarchies and Wu-Palmer similarity."""
from pathlib import Path

import numpy as np

from .exceptions import ConfigError, InvalidInputError


class TaxonomyTree:
    """An immutable rooted tree of named nodes.

    Parameters
    ----------
    parents : dict
        Maps every non-root node name to its parent's name.
    leaf_categories : dict, optional
        Maps class index to the name of the leaf that represents it.
    """

    def __init__(self, parents, leaf_categories=None):
        self.parent = dict(parents)
        names = set(self.parent) | set(self.parent.values())
        roots = [n for n in names if n not in self.parent]
        if len(roots) != 1:
            raise ConfigError(f"taxonomy must have exactly one root, found {sorted(roots)}")
        self.root = roots[0]
        self.children = {n: [] for n in names}
        for child, par in sorted(self.parent.items()):
            self.children[par].append(child)
        self._depth = {self.root: 1}
        frontier = [self.root]
        while frontier:
            nxt = []
            for node in frontier:
                for child in self.children[node]:
                    self._depth[child] = self._depth[node] + 1
                    nxt.append(child)
            frontier = nxt
        if len(self._depth) != len(names):
            unreachable = sorted(names - set(self._depth))
            raise ConfigError(f"taxonomy has a cycle or unreachable nodes: {unreachable[:5]}")
        self.leaf_categories = {}
        for idx, node in (leaf_categories or {}).items():
            if node not in self._depth:
                raise ConfigError(f"class {idx} is bound to unknown node {node!r}")
            if self.children[node]:
                raise ConfigError(f"class {idx} is bound to internal node {node!r}")
            self.leaf_categories[int(idx)] = node
        if len(set(self.leaf_categories.values())) != len(self.leaf_categories):
            raise ConfigError("two classes are bound to the same leaf")

    @property
    def nodes(self):
        return sorted(self._depth)

    def __contains__(self, node):
        return node in self._depth

    def _check(self, node):
        if node not in self._depth:
            raise InvalidInputError(f"unknown taxonomy node {node!r}")

    def depth(self, node):
        """Number of nodes on the root-to-node path, root included."""
        self._check(node)
        return self._depth[node]

    def ancestors(self, node):
        """Path from ``node`` up to the root, both inclusive."""
        self._check(node)
        path = [node]
        while path[-1] != self.root:
            path.append(self.parent[path[-1]])
        return path

    def lcs(self, a, b):
        """Least common subsumer: the deepest node that is an ancestor of both."""
        self._check(a)
        self._check(b)
        while self._depth[a] > self._depth[b]:
            a = self.parent[a]
        while self._depth[b] > self._depth[a]:
            b = self.parent[b]
        while a != b:
            a, b = self.parent[a], self.parent[b]
        return a

    def wu_palmer(self, a, b):
        return 2.0 * self.depth(self.lcs(a, b)) / (self.depth(a) + self.depth(b))

    def category_nodes(self, categories=None):
        if categories is None:
            categories = sorted(self.leaf_categories)
        missing = [c for c in categories if c not in self.leaf_categories]
        if missing:
            raise ConfigError(f"categories {missing} have no leaf in the taxonomy")
        return [self.leaf_categories[c] for c in categories]

    def similarity_matrix(self, categories=None):
        nodes = self.category_nodes(categories)
        k = len(nodes)
        sim = np.empty((k, k))
        for i in range(k):
            for j in range(i, k):
                sim[i, j] = sim[j, i] = self.wu_palmer(nodes[i], nodes[j])
        return sim


def parse_tree(text, source="<tree>"):
    """Parse ``<child>\\t<parent>`` lines into a parent mapping."""
    parents = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.rstrip("\r")
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 2 or not parts[0] or not parts[1]:
            raise ConfigError(f"expected '<child>\\t<parent>', got {line!r}", field=source, line=lineno)
        child, par = parts
        if child == par:
            raise ConfigError(f"node {child!r} is its own parent", field=source, line=lineno)
        if child in parents:
            raise ConfigError(f"node {child!r} already has parent {parents[child]!r}", field=source, line=lineno)
        parents[child] = par
    if not parents:
        raise ConfigError("taxonomy file has no edges", field=source)
    return parents


def parse_leaves(text, source="<leaves>"):
    leaves = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 2 or not parts[0].strip().isdigit():
            raise ConfigError(f"expected '<class-index>\\t<node-name>', got {line!r}", field=source, line=lineno)
        idx = int(parts[0])
        if idx in leaves:
            raise ConfigError(f"class {idx} bound twice", field=source, line=lineno)
        leaves[idx] = parts[1]
    return leaves


def load_taxonomy(tree_path, leaves_path=None):
    tree_path = Path(tree_path)
    parents = parse_tree(tree_path.read_text(encoding="utf-8"), str(tree_path))
    leaves = None
    if leaves_path is not None:
        leaves_path = Path(leaves_path)
        leaves = parse_leaves(leaves_path.read_text(encoding="utf-8"), str(leaves_path))
    try:
        return TaxonomyTree(parents, leaves)
    except ConfigError as exc:
        raise ConfigError(str(exc), field=str(tree_path)) from None


def write_taxonomy(tree, tree_path, leaves_path=None):
    Path(tree_path).write_text(
        "".join(f"{c}\t{p}\n" for c, p in sorted(tree.parent.items())), encoding="utf-8"
    )
    if leaves_path is not None:
        Path(leaves_path).write_text(
            "".join(f"{i}\t{n}\n" for i, n in sorted(tree.leaf_categories.items())), encoding="utf-8"
        )


def taxonomy_label_table(tree, categories=None, normalization="sum", temperature=1.0):
    """Soft label per category from its Wu-Palmer similarities to all categories.

    ``normalization="sum"`` divides each row by its sum; ``"softmax"`` applies a
    softmax to ``similarity / temperature``.
    """
    sim = tree.similarity_matrix(categories)
    if normalization == "sum":
        table = sim / sim.sum(axis=1, keepdims=True)
    elif normalization == "softmax":
        if temperature <= 0:
            raise ConfigError("temperature must be positive", field="temperature")
        z = sim / temperature
        z = np.exp(z - z.max(axis=1, keepdims=True))
        table = z / z.sum(axis=1, keepdims=True)
    else:
        raise ConfigError(f"unknown normalization {normalization!r}", field="normalization")
    return table.astype(np.float32)
