import pytest
import torch


@pytest.fixture(autouse=True, scope="session")
def single_threaded_torch():
    torch.set_num_threads(1)


@pytest.fixture()
def small_synth(tmp_path):
    """Tiny synthetic dataset shared by pipeline-level tests."""
    from retistack.data import SyntheticConfig, generate_synthetic, make_splits

    cfg = SyntheticConfig(n_patients=60, image_side=32, seed=5)
    records = generate_synthetic(cfg, tmp_path / "data")
    splits = make_splits(records, (0.4, 0.4, 0.2), seed=5)
    return cfg, records, splits
