"""Tree of Gaussian mixture components with nested stick-breaking weights.

Paths are tuples of 1-based child indices starting with the root, so ``(1,)``
is the root, ``(1, 2)`` its second child and so on.  A path of length
``depth`` ends at a leaf (a *full* path); shorter ones are *inner* paths.
The root's own stick is fixed at 1 because it has no siblings; every other
node contributes ``log v`` for itself and ``log(1 - v)`` for each left sibling.

GROW / PRUNE / MERGE mutate the tree in place and return ``(tree, changed)``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.special import digamma

TREE_FORMAT = "hcrl-tree"
TREE_VERSION = 1


@dataclass(eq=False)
class TreeNode:
    mu: np.ndarray
    sigma2: np.ndarray
    a: float
    b: float
    children: list = field(default_factory=list)
    uid: int = 0
    mass: float | None = None  # optional annotation for exports

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=np.float64)
        self.sigma2 = np.asarray(self.sigma2, dtype=np.float64)
        if np.any(self.sigma2 <= 0):
            raise ValueError("node variance must be strictly positive")
        if not (self.a > 0 and self.b > 0):
            raise ValueError("Beta parameters must be strictly positive")
        self.a = float(self.a)
        self.b = float(self.b)


@dataclass
class TreeArrays:
    """Flattened snapshot of a tree used by the vectorised variational code."""

    paths: list  # full paths, K
    node_paths: list  # preorder node addresses, M
    nodes: list  # TreeNode objects aligned with node_paths
    level: np.ndarray  # (M,) 0-based level of each node
    path_nodes: np.ndarray  # (K, L) node index at each level of each full path
    on_path: np.ndarray  # (K, M) 1 where a non-root node lies on the path
    left_of: np.ndarray  # (K, M) 1 where a node is a left sibling of a path node
    mu: np.ndarray  # (M, J)
    sigma2: np.ndarray  # (M, J)
    a: np.ndarray  # (M,)
    b: np.ndarray  # (M,)
    gamma: float = 1.0

    @property
    def n_paths(self):
        return len(self.paths)

    @property
    def n_nodes(self):
        return len(self.nodes)


class Hierarchy:
    def __init__(self, depth, root, gamma=1.0, next_uid=None):
        if depth < 1:
            raise ValueError("depth must be >= 1")
        self.depth = int(depth)
        self.root = root
        self.gamma = float(gamma)
        if next_uid is None:
            next_uid = 1 + max(n.uid for _, n in self.iter_nodes())
        self.next_uid = int(next_uid)
        self._check()

    @classmethod
    def chain(cls, depth, dim, gamma=1.0):
        """Single path of ``depth`` nodes: root N(0, I), variance halved per level."""
        root = TreeNode(np.zeros(dim), np.ones(dim), 1.0, gamma, uid=0)
        node = root
        for level in range(1, depth):
            child = TreeNode(np.zeros(dim), np.full(dim, 0.5**level), 1.0, gamma, uid=level)
            node.children.append(child)
            node = child
        return cls(depth, root, gamma, next_uid=depth)

    # -- traversal ---------------------------------------------------------
    def iter_nodes(self):
        """Preorder ``(path, node)`` pairs."""
        stack = [((1,), self.root)]
        while stack:
            path, node = stack.pop()
            yield path, node
            for idx in range(len(node.children), 0, -1):
                stack.append((path + (idx,), node.children[idx - 1]))

    def node(self, path):
        path = tuple(path)
        if not path or path[0] != 1:
            raise KeyError(f"path {path} does not start at the root")
        node = self.root
        for idx in path[1:]:
            if not 1 <= idx <= len(node.children):
                raise KeyError(f"path {path} is not in the tree")
            node = node.children[idx - 1]
        return node

    def full_paths(self):
        return [p for p, n in self.iter_nodes() if len(p) == self.depth]

    def inner_paths(self):
        return [p for p, n in self.iter_nodes() if len(p) < self.depth]

    def all_paths(self):
        return [p for p, _ in self.iter_nodes()]

    @property
    def n_nodes(self):
        return sum(1 for _ in self.iter_nodes())

    def structure(self):
        """Hashable description of the topology (node ids by path)."""
        return tuple((p, n.uid) for p, n in self.iter_nodes())

    def _check(self):
        for path, node in self.iter_nodes():
            if len(path) < self.depth and not node.children:
                raise ValueError(f"inner node at {path} has no children")
            if len(path) == self.depth and node.children:
                raise ValueError(f"node at {path} lies below the maximum depth")

    def copy(self):
        return tree_from_dict(tree_to_dict(self))

    # -- compiled view -------------------------------------------------------
    def arrays(self):
        items = list(self.iter_nodes())
        index = {p: i for i, (p, _) in enumerate(items)}
        M, L = len(items), self.depth
        paths = [p for p, _ in items if len(p) == L]
        K = len(paths)
        path_nodes = np.zeros((K, L), dtype=np.int64)
        on_path = np.zeros((K, M))
        left_of = np.zeros((K, M))
        for k, p in enumerate(paths):
            for l in range(L):
                path_nodes[k, l] = index[p[: l + 1]]
            for l in range(1, L):
                on_path[k, index[p[: l + 1]]] = 1.0
                for j in range(1, p[l]):
                    left_of[k, index[p[:l] + (j,)]] = 1.0
        nodes = [n for _, n in items]
        return TreeArrays(
            paths=paths,
            node_paths=[p for p, _ in items],
            nodes=nodes,
            level=np.array([len(p) - 1 for p, _ in items], dtype=np.int64),
            path_nodes=path_nodes,
            on_path=on_path,
            left_of=left_of,
            mu=np.array([n.mu for n in nodes]),
            sigma2=np.array([n.sigma2 for n in nodes]),
            a=np.array([n.a for n in nodes]),
            b=np.array([n.b for n in nodes]),
            gamma=self.gamma,
        )

    def __repr__(self):
        return f"Hierarchy(depth={self.depth}, nodes={self.n_nodes}, full_paths={len(self.full_paths())})"


# -- stick breaking ------------------------------------------------------------

def stick_weights(v):
    """Sibling weights pi_i = v_i * prod_{j<i} (1 - v_j)."""
    v = np.asarray(v, dtype=np.float64)
    if np.any((v < 0) | (v > 1)) or not np.all(np.isfinite(v)):
        raise ValueError("stick draws must lie in [0, 1]")
    remaining = np.concatenate([[1.0], np.cumprod(1.0 - v)[:-1]])
    return v * remaining


def expected_log_v(a, b):
    """E[log v] and E[log(1 - v)] under Beta(a, b)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    dab = digamma(a + b)
    return digamma(a) - dab, digamma(b) - dab


def expected_log_path_prior(tree, path):
    """E_q[log p(path | v)] for a full path under the node Beta posteriors."""
    path = tuple(path)
    if len(path) != tree.depth:
        raise KeyError(f"{path} is not a full path")
    total = 0.0
    node = tree.node(path[:1])
    for idx in path[1:]:
        if not 1 <= idx <= len(node.children):
            raise KeyError(f"path {path} is not in the tree")
        for j in range(idx - 1):
            sib = node.children[j]
            total += float(digamma(sib.b) - digamma(sib.a + sib.b))
        node = node.children[idx - 1]
        total += float(digamma(node.a) - digamma(node.a + node.b))
    return total


def path_log_prior(arr):
    """Vector of E_q[log p(path | v)] over the full paths of a compiled tree."""
    elog_v, elog_1mv = expected_log_v(arr.a, arr.b)
    return arr.on_path @ elog_v + arr.left_of @ elog_1mv


def path_mass_map(tree, full_mass):
    """Extend per-full-path masses to all paths; inner masses are descendant sums."""
    full = tree.full_paths()
    full_mass = np.asarray(full_mass, dtype=np.float64)
    if full_mass.shape != (len(full),):
        raise ValueError("one mass per full path required")
    out = {p: 0.0 for p in tree.all_paths()}
    for p, m in zip(full, full_mass):
        for l in range(1, len(p) + 1):
            out[p[:l]] += float(m)
    return out


def node_masses(tree, full_mass):
    """Mass through each node keyed by uid."""
    masses = path_mass_map(tree, full_mass)
    return {tree.node(p).uid: m for p, m in masses.items()}


# -- structure search ------------------------------------------------------------

def _new_child(tree, parent, rng, mean=None):
    sd = np.sqrt(parent.sigma2)
    if mean is None:
        mean = parent.mu + 0.1 * sd * rng.standard_normal(parent.mu.shape)
    child = TreeNode(
        np.array(mean, dtype=np.float64),
        0.5 * parent.sigma2,
        1.0,
        tree.gamma,
        uid=tree.next_uid,
    )
    tree.next_uid += 1
    parent.children.append(child)
    return child


def grow(tree, path_mass, rng, propose=None):
    """Sample a path proportional to its mass; if it is inner, hang a new chain below it.

    ``propose(path)``, when given, returns the mean for the new chain's nodes
    (e.g. an embedding drawn from the data routed through ``path``); by
    default a child starts at a small jitter around its parent.
    """
    if not path_mass:
        raise ValueError("empty path mass map")
    keys = sorted(path_mass)
    w = np.array([path_mass[k] for k in keys], dtype=np.float64)
    if np.any(w < 0) or not np.all(np.isfinite(w)) or w.sum() <= 0:
        raise ValueError("path masses must be nonnegative with positive total")
    chosen = keys[rng.choice(len(keys), p=w / w.sum())]
    if len(chosen) >= tree.depth:
        return tree, False
    node = tree.node(chosen)
    # sibling sticks were fitted without the newcomer; restart them at the prior
    for child in node.children:
        child.a, child.b = 1.0, tree.gamma
    mean = None if propose is None else propose(chosen)
    for _ in range(tree.depth - len(chosen)):
        node = _new_child(tree, node, rng, mean)
    return tree, True


def _remove_path(tree, path):
    """Drop the leaf at ``path`` and any ancestors left without children."""
    for l in range(len(path), 1, -1):
        parent = tree.node(path[: l - 1])
        del parent.children[path[l - 1] - 1]
        if parent.children:
            break


def prune(tree, path_mass, delta, rng):
    """Remove one uniformly chosen full path whose mass share is below ``delta``."""
    if not 0 < delta < 1:
        raise ValueError("delta must lie in (0, 1)")
    full = tree.full_paths()
    if len(full) < 2:
        return tree, False
    mass = np.array([path_mass[p] for p in full], dtype=np.float64)
    total = mass.sum()
    if total <= 0:
        return tree, False
    minor = [p for p, m in zip(full, mass) if m / total < delta]
    if not minor:
        return tree, False
    if len(minor) == len(full):
        # keep the heaviest path so the tree never empties
        heaviest = full[int(np.argmax(mass))]
        minor = [p for p in minor if p != heaviest]
    victim = minor[rng.integers(len(minor))]
    _remove_path(tree, victim)
    return tree, True


def path_similarity(q_matrix):
    """Cosine similarity between columns of the (N, K) path posterior matrix."""
    q = np.asarray(q_matrix, dtype=np.float64)
    gram = q.T @ q
    sq = np.diag(gram).copy()
    # one square root of the product keeps exact cases exact (e.g. 1 / sqrt(4))
    denom = np.sqrt(np.outer(sq, sq))
    sim = gram / np.where(denom > 0, denom, 1.0)
    sim[sq == 0, :] = 0.0
    sim[:, sq == 0] = 0.0
    return sim


def merge(tree, q_matrix, threshold=0.95):
    """Fuse the most similar pair of full paths if their cosine similarity >= threshold.

    The lighter path's exclusive chain is absorbed level by level into the
    heavier path's nodes (mass-weighted parameter averages), then removed.
    """
    full = tree.full_paths()
    q = np.asarray(q_matrix, dtype=np.float64)
    if q.ndim != 2 or q.shape[1] != len(full):
        raise ValueError("q_matrix columns must match the tree's full paths")
    if len(full) < 2:
        return tree, False
    sim = path_similarity(q)
    iu = np.triu_indices(len(full), k=1)
    best = int(np.argmax(sim[iu]))
    i, j = int(iu[0][best]), int(iu[1][best])
    if sim[i, j] < threshold:
        return tree, False
    col_mass = q.sum(axis=0)
    if col_mass[j] > col_mass[i]:
        i, j = j, i
    keep, drop = full[i], full[j]
    masses = node_masses(tree, col_mass)
    counts = {}
    for p in full:
        for l in range(1, len(p) + 1):
            counts[p[:l]] = counts.get(p[:l], 0) + 1
    diverge = next(l for l in range(len(keep)) if keep[l] != drop[l])
    lowest_kept = len(drop)
    for l in range(len(drop), diverge, -1):
        if counts[drop[:l]] != 1:
            break
        src, dst = tree.node(drop[:l]), tree.node(keep[:l])
        ws, wd = masses[src.uid], masses[dst.uid]
        tot = ws + wd
        fs, fd = (0.5, 0.5) if tot <= 0 else (ws / tot, wd / tot)
        dst.mu = fd * dst.mu + fs * src.mu
        dst.sigma2 = fd * dst.sigma2 + fs * src.sigma2
        dst.a = fd * dst.a + fs * src.a
        dst.b = fd * dst.b + fs * src.b
        lowest_kept = l
    # detach the absorbed chain at its top node
    top = drop[:lowest_kept]
    parent = tree.node(top[:-1])
    del parent.children[top[-1] - 1]
    return tree, True


# -- serialisation -----------------------------------------------------------

def _node_to_dict(path, node):
    d = {
        "id": node.uid,
        "level": len(path),
        "path": list(path),
        "mu": [float(x) for x in node.mu],
        "sigma2": [float(x) for x in node.sigma2],
        "a": float(node.a),
        "b": float(node.b),
    }
    if node.mass is not None:
        d["mass"] = float(node.mass)
    d["children"] = [_node_to_dict(path + (k + 1,), c) for k, c in enumerate(node.children)]
    return d


def tree_to_dict(tree):
    return {
        "format": TREE_FORMAT,
        "version": TREE_VERSION,
        "depth": tree.depth,
        "gamma": tree.gamma,
        "next_uid": tree.next_uid,
        "root": _node_to_dict((1,), tree.root),
    }


def _node_from_dict(d):
    return TreeNode(
        np.array(d["mu"], dtype=np.float64),
        np.array(d["sigma2"], dtype=np.float64),
        d["a"],
        d["b"],
        [_node_from_dict(c) for c in d["children"]],
        uid=int(d["id"]),
        mass=d.get("mass"),
    )


def tree_from_dict(d):
    if d.get("format") != TREE_FORMAT:
        raise ValueError("not an hcrl tree document")
    if d.get("version") != TREE_VERSION:
        raise ValueError(f"unsupported tree document version {d.get('version')}")
    return Hierarchy(d["depth"], _node_from_dict(d["root"]), d["gamma"], d["next_uid"])


def tree_to_json(tree):
    return json.dumps(tree_to_dict(tree), indent=1)


def tree_from_json(text):
    return tree_from_dict(json.loads(text))


def tree_to_dot(tree):
    lines = ["digraph hierarchy {", "  node [shape=box];"]
    for path, node in tree.iter_nodes():
        label = f"level {len(path)}"
        if node.mass is not None:
            label += f"\\nmass {node.mass:.2f}"
        lines.append(f'  n{node.uid} [label="{label}"];')
    for path, node in tree.iter_nodes():
        for child in node.children:
            lines.append(f"  n{node.uid} -> n{child.uid};")
    lines.append("}")
    return "\n".join(lines) + "\n"
