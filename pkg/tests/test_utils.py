import numpy as np
import torch
from hypothesis import given
from hypothesis import strategies as st

from mirror_seg.utils import configure_threads, defaults, derive_seed, find_bs, set_seed, tensor, to_detach


def test_tensor_dtypes():
    assert tensor(np.zeros(3)).dtype == torch.float32
    assert tensor(np.zeros(3, dtype=np.uint16)).dtype == torch.int64
    assert tensor(np.zeros(3, dtype=np.uint8)).dtype == torch.uint8
    t = torch.ones(2)
    assert tensor(t) is t
    assert tensor(t, torch.float64).dtype == torch.float64


@given(st.lists(st.integers(0, 2**32 - 1), min_size=1, max_size=4))
def test_derive_seed_deterministic(keys):
    s = derive_seed(*keys)
    assert s == derive_seed(*keys)
    assert 0 <= s < 2**63


def test_derive_seed_distinguishes_keys():
    assert derive_seed(0, 1) != derive_seed(1, 0)
    assert len({derive_seed(0, i) for i in range(100)}) == 100


def test_set_seed_reproducible():
    set_seed(3)
    a = torch.rand(4), np.random.rand(4)
    set_seed(3)
    b = torch.rand(4), np.random.rand(4)
    assert torch.equal(a[0], b[0])
    np.testing.assert_array_equal(a[1], b[1])


def test_configure_threads_from_env(monkeypatch):
    n = torch.get_num_threads()
    monkeypatch.setenv(defaults.threads_env, "1")
    try:
        assert configure_threads() == 1
    finally:
        torch.set_num_threads(n)


def test_to_detach_and_find_bs():
    x = torch.ones(3, 2, requires_grad=True) * 2
    out = to_detach([x, (x, x)])
    assert not out[0].requires_grad and not out[1][1].requires_grad
    assert find_bs((x, x)) == 3
