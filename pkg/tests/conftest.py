import numpy as np
import pytest
import torch

from tokenprune import numkit as nk


def central_difference(fn, params, eps=1e-5):
    """Numerical gradient of scalar ``fn()`` w.r.t. every entry of every param."""
    grads = []
    with torch.no_grad():
        for p in params:
            g = torch.zeros_like(p)
            flat, gflat = p.view(-1), g.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + eps
                up = float(fn())
                flat[i] = orig - eps
                down = float(fn())
                flat[i] = orig
                gflat[i] = (up - down) / (2 * eps)
            grads.append(g)
    return grads


def max_rel_error(a, b, floor=1e-6):
    a, b = torch.as_tensor(a), torch.as_tensor(b)
    return float(((a - b).abs() / torch.clamp(torch.maximum(a.abs(), b.abs()), min=floor)).max())


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
