"""Smoke test for the deco_py extension module.

Imports an installed module if there is one; otherwise builds the cdylib
with cargo and loads it from target/.
"""

import importlib.machinery
import importlib.util
import math
import pathlib
import subprocess
import sys

ROOT = pathlib.Path(__file__).resolve().parent.parent


def load():
    try:
        import deco_py

        return deco_py
    except ImportError:
        pass
    subprocess.run(
        ["cargo", "build", "--release", "-p", "deco-py", "--features", "extension-module"],
        cwd=ROOT,
        check=True,
    )
    lib = ROOT / "target" / "release" / "libdeco_py.so"
    loader = importlib.machinery.ExtensionFileLoader("deco_py", str(lib))
    spec = importlib.util.spec_from_loader("deco_py", loader)
    module = importlib.util.module_from_spec(spec)
    loader.exec_module(module)
    return module


def main():
    deco = load()

    p, r, f1 = deco.precision_recall_f1([0, 1, 1, 0], [0, 0, 1, 1])
    assert (p, r, f1) == (0.5, 0.5, 0.5), (p, r, f1)
    assert math.isclose(deco.iou([1, 2], [2, 3]), 1 / 3)
    assert deco.fleiss_kappa([[2, 0], [0, 2]]) == 1.0
    assert deco.fleiss_kappa([[1, 1], [1, 1]]) == -1.0
    assert deco.geodesic_distances(3, [(0, 1, 1.0), (1, 2, 1.0)], [0]) == [0.0, 1.0, 2.0]
    assert math.isclose(deco.total_loss(1.0, 1.0, 1.0, 1.0), 12.05)
    assert deco.total_loss(None, 2.0, None, None) == 0.1

    drawn = deco.replay_strokes(1, [0.3], [(0, 0.3, True)])
    assert 0 in drawn
    assert deco.replay_strokes(1, [0.3], [(0, 0.3, True), (0, 0.3, False)]) == []
    try:
        deco.replay_strokes(1, [0.3], [(0, 0.5, True)])
    except ValueError:
        pass
    else:
        raise AssertionError("unpublished radius accepted")

    image, h, w, contact = deco.synth_sample(3)
    assert len(image) == 3 * h * w
    assert len(contact) == 642 and set(contact) <= {0.0, 1.0}
    print("deco_py smoke test passed")


if __name__ == "__main__":
    sys.exit(main())
