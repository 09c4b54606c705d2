import numpy as np
import pytest
import torch
import torch.nn.functional as F
from torch import nn

from gsrl.errors import ContractViolation, ShapeError
from gsrl.tensor_nn import ParamStore, adam_step, backward, conv2d, load_checkpoint, save_checkpoint
from oracles import conv2d_naive, relative_error


def _fd_max_rel_error(fn, x, h=1e-3):
    """Central differences in float32; norm-wise relative error of the analytic gradient."""
    x = x.detach().clone().requires_grad_(True)
    backward(fn(x))
    analytic = x.grad.detach().clone()
    numeric = torch.zeros_like(x)
    flat = x.detach().view(-1)
    with torch.no_grad():
        for i in range(flat.numel()):
            keep = flat[i].item()
            flat[i] = keep + h
            fp = fn(x).item()
            flat[i] = keep - h
            fm = fn(x).item()
            flat[i] = keep
            numeric.view(-1)[i] = (fp - fm) / (2 * h)
    return relative_error(analytic.numpy(), numeric.numpy())


def test_backward_square():
    x = torch.tensor([1.0, 2.0, 3.0], requires_grad=True)
    backward((x * x).sum())
    assert torch.equal(x.grad, torch.tensor([2.0, 4.0, 6.0]))


def test_backward_sum_gives_ones():
    x = torch.randn(4, 5, requires_grad=True)
    backward(x.sum())
    assert torch.equal(x.grad, torch.ones(4, 5))


def test_backward_rejects_non_scalar():
    x = torch.randn(3, requires_grad=True)
    with pytest.raises(ContractViolation):
        backward(x * 2)


def test_backward_detached_graph_gives_zero_grads():
    p = torch.randn(3, requires_grad=True)
    backward(p.detach().sum(), [p])
    assert torch.equal(p.grad, torch.zeros(3))


def test_mlp_gradients_match_finite_differences():
    torch.manual_seed(1)
    W1, W2, W3 = torch.randn(4, 8) * 0.5, torch.randn(8, 8) * 0.5, torch.randn(8, 1) * 0.5
    x = torch.randn(5, 4)

    def net(w1, w2, w3, inp):
        return (torch.tanh(torch.tanh(inp @ w1) @ w2) @ w3).pow(2).mean()

    assert _fd_max_rel_error(lambda w: net(w, W2, W3, x), W1) <= 1e-2
    assert _fd_max_rel_error(lambda w: net(W1, w, W3, x), W2) <= 1e-2
    assert _fd_max_rel_error(lambda w: net(W1, W2, w, x), W3) <= 1e-2
    assert _fd_max_rel_error(lambda i: net(W1, W2, W3, i), x) <= 1e-2


OPS = {
    "conv2d": lambda x: conv2d(x.reshape(4, 4, 2), torch.linspace(-1, 1, 36).reshape(3, 3, 2, 2), 1, 1).pow(2).sum(),
    "matmul": lambda x: (x.reshape(4, 8) @ torch.linspace(-1, 1, 24).reshape(8, 3)).pow(2).sum(),
    "exp": lambda x: torch.exp(0.3 * x).sum(),
    "sigmoid": lambda x: (torch.sigmoid(x) * torch.linspace(0, 1, 32)).sum(),
    "l2_normalize": lambda x: (F.normalize(x.reshape(8, 4), dim=-1) * torch.linspace(-1, 1, 4)).sum(),
    "softmax": lambda x: (torch.softmax(x.reshape(4, 8), -1) * torch.linspace(0, 1, 8)).sum(),
    "gather_max": lambda x: x.reshape(8, 4)[torch.tensor([[1, 2], [0, 3], [7, 5], [4, 6]])].amax(1).pow(2).sum(),
    "mean": lambda x: (x * x).mean(),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_op_gradients(name):
    x = torch.randn(32, generator=torch.Generator().manual_seed(7))
    assert _fd_max_rel_error(OPS[name], x) <= 1e-2


def test_adam_first_step_moves_by_lr():
    p = nn.Parameter(torch.tensor([1.0]))
    store = ParamStore({"p": p})
    p.grad = torch.tensor([1.0])
    adam_step(store, lr=0.1)
    # m_hat = 1, v_hat = 1 -> update = lr * 1 / (1 + eps)
    assert p.item() == pytest.approx(0.9, abs=1e-6)
    assert p.grad is None


def test_adam_zero_grad_leaves_param():
    p = nn.Parameter(torch.tensor([1.5, -2.0]))
    store = ParamStore({"p": p})
    p.grad = torch.zeros(2)
    adam_step(store, lr=0.1)
    assert torch.equal(p.data, torch.tensor([1.5, -2.0]))


def test_adam_constant_grad_moves_monotonically():
    p = nn.Parameter(torch.tensor([0.0]))
    store = ParamStore({"p": p})
    seen = [0.0]
    for _ in range(2):
        p.grad = torch.tensor([2.0])
        adam_step(store, lr=0.05)
        seen.append(p.item())
    assert seen[0] > seen[1] > seen[2]


def test_adam_matches_torch_optimizer():
    torch.manual_seed(0)
    a = nn.Linear(3, 2)
    b = nn.Linear(3, 2)
    b.load_state_dict(a.state_dict())
    store = ParamStore(a)
    opt = torch.optim.Adam(b.parameters(), lr=1e-2, betas=(0.9, 0.999), eps=1e-8)
    for step in range(5):
        x = torch.randn(4, 3)
        backward(a(x).pow(2).sum())
        adam_step(store, lr=1e-2)
        opt.zero_grad()
        b(x).pow(2).sum().backward()
        opt.step()
    for pa, pb in zip(a.parameters(), b.parameters()):
        assert torch.allclose(pa, pb, atol=1e-6)


def test_adam_missing_grad_names_parameter():
    store = ParamStore(nn.Linear(2, 2), prefix="head.")
    with pytest.raises(ContractViolation, match="head.weight"):
        adam_step(store)


def test_moment_buffers_match_shapes():
    store = ParamStore(nn.Conv2d(3, 5, 3))
    for k, p in store:
        assert store.exp_avg[k].shape == p.shape
        assert store.exp_avg_sq[k].shape == p.shape


def test_conv_identity_kernel():
    x = torch.randn(6, 7, 3)
    k = torch.eye(3).reshape(1, 1, 3, 3)
    assert torch.allclose(conv2d(x, k), x)


def test_conv_zero_kernel():
    assert torch.count_nonzero(conv2d(torch.randn(6, 6, 2), torch.zeros(3, 3, 2, 4), padding=1)) == 0


@pytest.mark.parametrize("stride,padding", [(1, 0), (1, 1), (2, 1)])
def test_conv_matches_naive_loop(stride, padding):
    rng = np.random.default_rng(0)
    x = rng.standard_normal((5, 5, 2))
    k = rng.standard_normal((3, 3, 2, 3))
    out = conv2d(torch.tensor(x, dtype=torch.float32), torch.tensor(k, dtype=torch.float32), stride, padding)
    ref = conv2d_naive(x, k, stride, padding)
    assert out.shape == ref.shape
    assert np.abs(out.numpy() - ref).max() <= 1e-5


def test_conv_channel_mismatch():
    with pytest.raises(ShapeError):
        conv2d(torch.randn(5, 5, 2), torch.randn(3, 3, 3, 1))


def test_checkpoint_roundtrip_is_byte_exact(tmp_path):
    tensors = {
        "a.weight": torch.randn(3, 4),
        "b": torch.tensor([1e-38, -0.0, 3.4e38, float("inf")]),
        "scalar": torch.tensor(2.5),
        "unicodé": torch.randn(2, 1, 3),
    }
    p1, p2 = tmp_path / "one.ckpt", tmp_path / "two.ckpt"
    save_checkpoint(p1, tensors)
    loaded = load_checkpoint(p1)
    assert list(loaded) == list(tensors)
    for k in tensors:
        assert loaded[k].shape == tensors[k].shape
        assert loaded[k].numpy().tobytes() == tensors[k].numpy().tobytes()
    save_checkpoint(p2, loaded)
    assert p1.read_bytes() == p2.read_bytes()
    assert p1.read_bytes()[:8] == b"GSRLCKPT"


def test_checkpoint_rejects_garbage(tmp_path):
    p = tmp_path / "bad.ckpt"
    p.write_bytes(b"NOTACKPT" + bytes(8))
    with pytest.raises(ValueError):
        load_checkpoint(p)
    save_checkpoint(p, {"x": torch.randn(10)})
    p.write_bytes(p.read_bytes()[:-5])
    with pytest.raises(ValueError, match="truncated"):
        load_checkpoint(p)


def test_forward_determinism():
    def run():
        torch.manual_seed(3)
        net = nn.Sequential(nn.Conv2d(3, 8, 3, padding=1), nn.ReLU(), nn.Conv2d(8, 2, 1))
        return net(torch.randn(1, 3, 16, 16))

    assert torch.equal(run(), run())
