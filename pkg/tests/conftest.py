import numpy as np
import pytest
import torch


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def float64():
    old = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    yield
    torch.set_default_dtype(old)


def rel_err(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return np.abs(a - b).max() / max(np.abs(a).max(), np.abs(b).max(), 1e-12)


def fd_check(loss_fn, params, n_probe=12, eps=1e-6, seed=0):
    """Compare autograd against central differences on a random subset of coordinates per tensor."""
    gen = np.random.default_rng(seed)
    loss = loss_fn()
    grads = torch.autograd.grad(loss, params)
    worst = 0.0
    for p, g in zip(params, grads):
        flat = p.data.view(-1)
        idx = gen.choice(flat.numel(), size=min(n_probe, flat.numel()), replace=False)
        num, ana = [], []
        for i in idx:
            old = flat[i].item()
            flat[i] = old + eps
            up = loss_fn().item()
            flat[i] = old - eps
            down = loss_fn().item()
            flat[i] = old
            num.append((up - down) / (2 * eps))
            ana.append(g.view(-1)[i].item())
        if max(abs(x) for x in num + ana) > 1e-9:
            worst = max(worst, rel_err(ana, num))
    return worst
