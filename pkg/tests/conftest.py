import os

import numpy as np
import pytest


def pytest_configure(config):
    # keep torch runs reproducible across the suite
    os.environ.setdefault("RESDIFF_THREADS", "2")
    try:
        import torch

        torch.set_num_threads(int(os.environ["RESDIFF_THREADS"]))
    except ImportError:
        pass


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def tree_files(root, ignore=("run.json", "timing.json")):
    """Relative path -> bytes for every file under root, minus volatile metadata."""
    out = {}
    for dirpath, _dirnames, filenames in os.walk(root):
        for fn in filenames:
            if fn in ignore:
                continue
            p = os.path.join(dirpath, fn)
            rel = os.path.relpath(p, root)
            with open(p, "rb") as f:
                out[rel] = f.read()
    return out


@pytest.fixture
def compare_trees():
    def _compare(a, b, ignore=("run.json", "timing.json")):
        ta, tb = tree_files(a, ignore), tree_files(b, ignore)
        assert sorted(ta) == sorted(tb), f"different file sets under {a} and {b}"
        diff = [k for k in ta if ta[k] != tb[k]]
        assert not diff, f"files differ: {diff}"

    return _compare
