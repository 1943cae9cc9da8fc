import numpy as np
import pytest

from hcrl.hierarchy import Hierarchy, TreeNode


def two_path_tree(J=2, seed=0, gamma=1.0):
    """Depth-2 tree: root with two leaves, hand-randomised parameters."""
    rng = np.random.default_rng(seed)

    def node(uid):
        return TreeNode(rng.normal(size=J), rng.uniform(0.5, 2.0, size=J),
                        float(rng.uniform(0.5, 3.0)), float(rng.uniform(0.5, 3.0)), uid=uid)

    root = node(0)
    root.children = [node(1), node(2)]
    return Hierarchy(2, root, gamma)


@pytest.fixture
def tiny_tree():
    return two_path_tree()


def pytest_terminal_summary(terminalreporter):
    mod = __import__("sys").modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(mod.RESULTS):
        terminalreporter.write_line(line)
