import math

import numpy as np
import pytest
import torch

from dialectasr.autodiff import (
    OPS,
    ContractError,
    DimensionError,
    NumericalError,
    backward,
    grad_check,
    load_checkpoint,
    op_forward,
    save_checkpoint,
    zero_grad,
)


def t(x):
    return torch.tensor(x, dtype=torch.float64)


def test_add_example():
    assert op_forward("add", [t([1, 2]), t([3, 4])]).tolist() == [4, 6]


def test_log_softmax_uniform():
    out = op_forward("log_softmax", [t([0, 0, 0])])
    assert np.allclose(out.numpy(), -math.log(3), atol=1e-12)


def test_matmul_counting():
    out = op_forward("matmul", [torch.ones(2, 3, dtype=torch.float64), torch.ones(3, 2, dtype=torch.float64)])
    assert out.tolist() == [[3, 3], [3, 3]]


@pytest.mark.parametrize(
    "kind,inputs,attrs",
    [
        ("add", [torch.ones(2, 3), torch.ones(2, 4)], {}),
        ("matmul", [torch.ones(2, 3), torch.ones(4, 2)], {}),
        ("concat", [torch.ones(2, 3), torch.ones(3, 4)], {"axis": 0}),
        ("depthwise_conv1d", [torch.ones(1, 5, 3), torch.ones(4, 3)], {}),
        ("slice", [torch.ones(3)], {"start": 1, "stop": 5}),
    ],
)
def test_shape_mismatch_names_op(kind, inputs, attrs):
    with pytest.raises(DimensionError, match=kind):
        op_forward(kind, inputs, attrs)


def test_unknown_op():
    with pytest.raises(ContractError):
        op_forward("conv3d", [torch.ones(1)])


def test_backward_quadratic():
    w = t([1.0, 2.0]).requires_grad_()
    grads = backward(op_forward("sum", [op_forward("mul", [w, w])]), [w])
    assert grads[id(w)].tolist() == [2.0, 4.0]


def test_backward_log_softmax_closed_form():
    z = t([0.3, -1.2, 2.0, 0.5]).requires_grad_()
    k = 2
    backward(op_forward("log_softmax", [z])[k], [z])
    expected = np.eye(4)[k] - torch.softmax(z.detach(), -1).numpy()
    assert np.allclose(z.grad.numpy(), expected, atol=1e-12)


def test_backward_accumulates_and_zero_grad():
    w = t([1.0, -3.0]).requires_grad_()
    for _ in range(2):
        backward((w * w).sum(), [w])
    assert w.grad.tolist() == [4.0, -12.0]
    zero_grad([w])
    assert w.grad.tolist() == [0.0, 0.0]


def test_backward_unreachable_params_get_zero():
    w = t([1.0]).requires_grad_()
    u = t([5.0, 6.0]).requires_grad_()
    grads = backward((w * 2).sum(), [w, u])
    assert grads[id(u)].tolist() == [0.0, 0.0]


def test_backward_rejects_non_scalar():
    w = t([1.0, 2.0]).requires_grad_()
    with pytest.raises(ContractError):
        backward(w * 2, [w])


# inputs drawn from N(0, 1), shapes <= 8 per axis, every registered op
def _op_cases(rng):
    n = lambda *s: torch.tensor(rng.normal(size=s), dtype=torch.float64, requires_grad=True)
    return {
        "add": ([n(3, 4), n(4)], {}),
        "mul": ([n(3, 4), n(3, 1)], {}),
        "matmul": ([n(2, 5), n(5, 3)], {}),
        "transpose": ([n(3, 4)], {}),
        "slice": ([n(6, 2)], {"axis": 0, "start": 1, "stop": 4}),
        "concat": ([n(2, 3), n(4, 3)], {"axis": 0}),
        "softmax": ([n(3, 5)], {}),
        "log_softmax": ([n(3, 5)], {}),
        "sigmoid": ([n(7)], {}),
        "swish": ([n(7)], {}),
        "tanh": ([n(7)], {}),
        "layer_norm": ([n(3, 6), n(6), n(6)], {}),
        "depthwise_conv1d": ([n(2, 8, 3), n(3, 5), n(3)], {}),
        "embedding": ([n(6, 4)], {"ids": [[0, 3, 5, 3]]}),
        "masked_fill": ([n(3, 4)], {"mask": rng.random((3, 4)) < 0.4, "value": 0.0}),
        "sum": ([n(3, 4)], {"axis": 1}),
        "mean": ([n(3, 4)], {"axis": 0}),
    }


def test_every_op_matches_finite_differences():
    rng = np.random.default_rng(0)
    cases = _op_cases(rng)
    assert set(cases) == set(OPS)
    weights = {}
    for kind, (inputs, attrs) in cases.items():
        out_shape = op_forward(kind, inputs, attrs).shape
        weights[kind] = torch.tensor(rng.normal(size=out_shape), dtype=torch.float64)
        f = lambda kind=kind, inputs=inputs, attrs=attrs: (op_forward(kind, inputs, attrs) * weights[kind]).sum()
        err = grad_check(f, inputs, eps=1e-5)
        assert err < 1e-4, (kind, err)


def test_softmax_normalized():
    x = torch.tensor(np.random.default_rng(1).normal(size=(5, 7)) * 10, dtype=torch.float64)
    s = op_forward("softmax", [x])
    assert (s >= 0).all()
    assert np.allclose(s.sum(-1).numpy(), 1.0, atol=1e-12)


def test_grad_check_sum_of_squares():
    ps = [torch.tensor(v, dtype=torch.float64, requires_grad=True) for v in ([1.0, 2.0], [3.0], [-0.5, 0.1, 4.0])]
    assert grad_check(lambda: sum((p * p).sum() for p in ps), ps) < 1e-7


def test_grad_check_reports_non_finite():
    p = torch.tensor([-1.0], dtype=torch.float64, requires_grad=True)
    with pytest.raises(NumericalError):
        grad_check(lambda: torch.log(p).sum(), [p])


def test_forward_deterministic():
    torch.manual_seed(3)
    x = torch.randn(4, 8, dtype=torch.float64)
    a = op_forward("layer_norm", [x])
    b = op_forward("layer_norm", [x])
    assert torch.equal(a, b)


def test_checkpoint_round_trip_bit_exact(tmp_path):
    torch.manual_seed(0)
    tensors = {"enc.w": torch.randn(3, 4), "scalar": torch.tensor(2.5), "ünï": torch.randn(2, 1, 5)}
    path = tmp_path / "c.ictx"
    save_checkpoint(tensors, path)
    assert path.read_bytes()[:5] == b"ICTX1"
    back = load_checkpoint(path)
    assert list(back) == list(tensors)
    for k in tensors:
        assert back[k].shape == tensors[k].shape
        assert torch.equal(back[k], tensors[k])
    save_checkpoint(back, tmp_path / "d.ictx")
    assert (tmp_path / "d.ictx").read_bytes() == path.read_bytes()


def test_checkpoint_bad_magic(tmp_path):
    (tmp_path / "x").write_bytes(b"NOPE!")
    with pytest.raises(ContractError):
        load_checkpoint(tmp_path / "x")
