import os
import subprocess
import sys
from pathlib import Path

import pytest

NOTEBOOKS = Path(__file__).resolve().parent.parent / "notebooks"

# quick arguments so every demo runs in seconds
QUICK = {
    "01_autodiff_tour.py": [],
    "02_synthetic_textures.py": ["3"],
    "03_train_visual_to_tactile.py": ["4"],
    "04_classification_table.py": ["1", "2"],
}


def test_every_demo_has_quick_arguments():
    assert sorted(p.name for p in NOTEBOOKS.glob("*.py")) == sorted(QUICK)


@pytest.mark.parametrize("name", sorted(QUICK))
def test_demo_runs(name, tmp_path):
    env = dict(os.environ, XMGC_DEMO_OUT=str(tmp_path))
    proc = subprocess.run([sys.executable, str(NOTEBOOKS / name), *QUICK[name]], cwd=tmp_path, env=env,
                          capture_output=True, text=True, timeout=300)
    assert proc.returncode == 0, proc.stderr
