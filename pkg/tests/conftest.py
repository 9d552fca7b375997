import sys
from pathlib import Path

import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

from a3dseg.phantom import DegradationParams, PhantomConfig, build_dataset  # noqa: E402
from a3dseg.storage import load_manifest  # noqa: E402

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def tiny_manifest(tmp_path_factory):
    """Small dataset (16x32x32 volumes) shared by the fast tests."""
    root = tmp_path_factory.mktemp("tiny")
    cfg = PhantomConfig(volume_shape=(16, 32, 32), spacing_mm=(1.0, 0.5, 0.5), n_vertebrae=2, seed=7)
    build_dataset(cfg, DegradationParams(), n_low=4, n_high=4, out_dir=root, n_test=2)
    return load_manifest(root / "manifest.json")
