import numpy as np
import pytest
import torch

from frametwin.errors import NumericError, UsageError
from frametwin.field import (
    DeformationField,
    Domain,
    EncodingConfig,
    GradientAccumulator,
    encode,
    field_eval,
    grad_of_scalar,
    input_jacobian,
    layer_shapes,
    load_checkpoint,
    save_checkpoint,
    zero_init,
)
from frametwin.geometry import DTYPE

DOM = Domain.around(np.zeros(3), np.full(3, 10.0))


def _points(n, seed=0):
    return torch.as_tensor(np.random.default_rng(seed).uniform(-1, 11, (n, 3)), dtype=DTYPE)


def test_encoding_at_origin():
    out = encode(torch.zeros(3, dtype=DTYPE), EncodingConfig(num_bands=2))
    assert out.shape == (15,)
    assert torch.equal(out[:3], torch.zeros(3, dtype=DTYPE))
    for level in range(2):
        block = out[3 + 6 * level : 9 + 6 * level]
        assert torch.equal(block[:3], torch.zeros(3, dtype=DTYPE))
        assert torch.equal(block[3:], torch.ones(3, dtype=DTYPE))


def test_encoding_identity_and_dimension():
    x = torch.tensor([0.1, -0.4, 0.7], dtype=DTYPE)
    assert torch.equal(encode(x, EncodingConfig(num_bands=0)), x)
    cfg = EncodingConfig(num_bands=15)
    assert cfg.dim == 93
    shapes = layer_shapes(cfg.dim)
    assert len(shapes) == 9
    assert shapes[4] == (256, 256 + 93)
    assert shapes[-1] == (3, 256)


def test_zero_init_identity():
    fld = DeformationField.create(DOM, seed=7)
    assert float(field_eval(fld, _points(1000)).abs().max()) == 0.0


def test_init_determinism():
    a = zero_init(3, EncodingConfig(), hidden=32)
    b = zero_init(3, EncodingConfig(), hidden=32)
    c = zero_init(4, EncodingConfig(), hidden=32)
    assert np.array_equal(a.flat(), b.flat())
    assert not np.array_equal(a.weights[0].numpy(), c.weights[0].numpy())
    assert torch.equal(c.weights[-1], torch.zeros_like(c.weights[-1]))


def test_final_bias_only_output():
    fld = DeformationField.create(DOM, hidden=16)
    fld.params.biases[-1] = torch.tensor([1.0, 2.0, 3.0], dtype=DTYPE)
    out = field_eval(fld, _points(50))
    assert torch.equal(out, torch.tensor([[1.0, 2.0, 3.0]], dtype=DTYPE).expand(50, 3))


def test_non_finite_params():
    fld = DeformationField.create(DOM, hidden=16)
    fld.params.weights[0][0, 0] = float("nan")
    with pytest.raises(NumericError):
        field_eval(fld, _points(2))


def test_gradient_examples():
    fld = DeformationField.create(DOM, hidden=16)
    rec = GradientAccumulator(fld)
    x = _points(10)
    rec.record((fld(x) ** 2).sum())
    g = grad_of_scalar(rec)
    assert all(float(t.abs().max()) == 0.0 for t in g.theta)

    rec = GradientAccumulator(fld)
    rec.record(fld.params.biases[-1].sum())
    g = grad_of_scalar(rec)
    assert torch.equal(g.theta[-1], torch.ones(3, dtype=DTYPE))
    assert all(float(t.abs().max()) == 0.0 for t in g.theta[:-1])


def test_backward_before_forward():
    rec = GradientAccumulator(DeformationField.create(DOM, hidden=16))
    with pytest.raises(UsageError):
        grad_of_scalar(rec)


def test_field_gradient_matches_finite_difference():
    torch.manual_seed(0)
    fld = DeformationField.create(DOM, hidden=16, encoding=EncodingConfig(num_bands=3))
    fld.params.weights[-1] = 0.1 * torch.randn(3, 16, dtype=DTYPE)
    x = _points(20, seed=3)

    def loss():
        return (fld(x) ** 3).sum()

    rec = GradientAccumulator(fld)
    rec.record(loss())
    grads = grad_of_scalar(rec)
    fld.requires_grad_(False)
    rng = np.random.default_rng(5)
    for _ in range(20):
        ti = int(rng.integers(len(grads.theta)))
        t = fld.parameters()[ti]
        idx = tuple(int(rng.integers(s)) for s in t.shape)
        h = 1e-6
        old = float(t[idx])
        t[idx] = old + h
        up = float(loss())
        t[idx] = old - h
        dn = float(loss())
        t[idx] = old
        fd = (up - dn) / (2 * h)
        an = float(grads.theta[ti][idx])
        assert abs(an - fd) <= 1e-5 * max(1.0, abs(fd))


def test_input_jacobian_of_affine_output():
    fld = DeformationField.create(DOM, hidden=8, encoding=EncodingConfig(num_bands=0), depth=5)
    J = input_jacobian(fld, torch.tensor([1.0, 2.0, 3.0], dtype=DTYPE))
    assert torch.equal(J, torch.zeros(3, 3, dtype=DTYPE))


def test_checkpoint_round_trip(tmp_path):
    fld = DeformationField.create(DOM, seed=2, hidden=16)
    fld.params.weights[-1] = torch.randn(3, 16, dtype=DTYPE, generator=torch.Generator().manual_seed(1))
    save_checkpoint(fld, tmp_path / "f.bin")
    back = load_checkpoint(tmp_path / "f.bin")
    assert np.array_equal(back.params.flat(), fld.params.flat())
    x = _points(10)
    assert torch.equal(field_eval(back, x), field_eval(fld, x))


def test_domain_normalize():
    d = Domain((0.0, 0.0, 0.0), (2.0, 4.0, 8.0))
    x = torch.tensor([[0.0, 0.0, 0.0], [2.0, 4.0, 8.0], [1.0, 2.0, 4.0]], dtype=DTYPE)
    assert torch.equal(d.normalize(x), torch.tensor([[-1.0] * 3, [1.0] * 3, [0.0] * 3], dtype=DTYPE))
    assert d.volume == 64.0
