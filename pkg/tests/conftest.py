import pytest
import torch


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)


def random_probs(rng, n, c, shape3, dtype=torch.float64):
    """Random per-voxel distributions of shape (n, c, *shape3)."""
    raw = rng.random((n, c) + tuple(shape3))
    probs = raw / raw.sum(axis=1, keepdims=True)
    return torch.as_tensor(probs, dtype=dtype)


def random_head_probs(rng, k, n, c, shape3, dtype=torch.float64):
    """Random per-head distributions of shape (k, n, c, *shape3)."""
    raw = rng.random((k, n, c) + tuple(shape3))
    probs = raw / raw.sum(axis=2, keepdims=True)
    return torch.as_tensor(probs, dtype=dtype)
