"""The three structure operations on a hand-built tree, no training involved.

GROW hangs a branch under an inner path chosen by mass, PRUNE drops a full
path whose share of the mass is below delta, and MERGE fuses two full paths
whose posterior columns point the same way.
"""
import numpy as np

from hcrl import hierarchy


def show(tree, title):
    print(f"{title}: full paths {tree.full_paths()}")


def main():
    rng = np.random.default_rng(0)
    tree = hierarchy.Hierarchy.chain(depth=3, dim=2)
    show(tree, "start")

    # put all mass on the root so GROW must branch there
    for _ in range(2):
        tree, grew = hierarchy.grow(tree, {(1,): 1.0}, rng)
    show(tree, "after two GROWs at the root")

    # a full path with 0.5% of the mass falls under delta = 0.01
    mass = np.array([1.0, 1.0, 0.01])
    tree, pruned = hierarchy.prune(tree, hierarchy.path_mass_map(tree, mass), delta=0.01, rng=rng)
    show(tree, f"after PRUNE (fired={pruned})")

    # two paths that claim exactly the same instances are redundant
    q = np.array([[0.5, 0.5], [0.5, 0.5], [0.5, 0.5]])
    print("cosine similarity:\n", hierarchy.path_similarity(q))
    tree, merged = hierarchy.merge(tree, q, threshold=0.95)
    show(tree, f"after MERGE (fired={merged})")


if __name__ == "__main__":
    main()
