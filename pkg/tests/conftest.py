import pytest
import torch

from patchalign.data import generate_dataset

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("data") / "tiny32"
    generate_dataset(24, 32, 123, root)
    return root


@pytest.fixture()
def base_config(tiny_dataset):
    """Small fast pretrain config factory."""
    def make(**overrides):
        from patchalign.trainer import config_from_dict
        d = {
            "mode": "pretrain",
            "steps": 4,
            "batch_size": 4,
            "seed": 0,
            "dataset": str(tiny_dataset),
            "canvas": 32,
            "embed_dim": 32,
            "depth": 2,
            "local_views": 1,
            "prototype_dim": 64,
            "resolutions": {"stage1_global": 32, "stage1_local": 16,
                            "stage2_global": 48, "stage2_local": 24,
                            "switch_step": 4},
            "ema": {"scope": "head_only"},
        }
        for key, value in overrides.items():
            if isinstance(value, dict) and isinstance(d.get(key), dict):
                d[key].update(value)
            else:
                d[key] = value
        return config_from_dict(d)
    return make
