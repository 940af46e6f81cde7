import os
import shutil

import numpy as np
import pytest


@pytest.fixture
def screen_dir(tmp_path):
    rng = np.random.default_rng(7)
    n = 60
    header = "id," + ",".join(f"u{u}_{c}" for u in range(2) for c in "abc")
    a = rng.normal(size=(n, 6))
    b = rng.integers(0, 3, size=(n, 6))
    for name, table in (("a.csv", a), ("b.csv", b)):
        rows = [header] + [f"s{i}," + ",".join(str(v) for v in table[i]) for i in range(n)]
        (tmp_path / name).write_text("\n".join(rows) + "\n")
    y = ["id,case"] + [f"s{i},{int(rng.random() < 0.5)}" for i in range(n)]
    (tmp_path / "y.csv").write_text("\n".join(y) + "\n")
    return tmp_path


@pytest.fixture
def cli():
    path = os.environ.get("MVKM_CLI") or shutil.which("mvkm")
    if not path:
        pytest.skip("mvkm executable not available")
    return path
