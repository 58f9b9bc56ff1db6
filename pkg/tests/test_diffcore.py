import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from csident.diffcore import (
    DTYPE,
    ContentFlow,
    DenseMap,
    SplineParameterError,
    StyleFlow,
    content_flow_forward,
    dense_forward,
    dense_jacobian,
    grad_check,
    load_named_tensors,
    rel_err,
    rq_spline,
    rq_spline_knots,
    save_named_tensors,
    style_flow_forward,
    style_flow_inverse,
)
from csident.supportlab import DimensionError


def t(a):
    return torch.as_tensor(np.asarray(a, dtype=float), dtype=DTYPE)


def fd_jacobian(fn, v, h=1e-4):
    cols = []
    for k in range(v.numel()):
        e = torch.zeros_like(v)
        e[k] = h
        cols.append((fn(v + e) - fn(v - e)) / (2 * h))
    return torch.stack(cols, -1)


def num_logdet(fn, v):
    jac = torch.autograd.functional.jacobian(fn, v)
    return torch.linalg.slogdet(jac)[1]


class TestDense:
    def test_identity_layer(self):
        m = DenseMap.identity(3)
        v = t([0.3, -1.0, 2.0])
        assert torch.equal(dense_forward(m, v), v)

    def test_zero_weights_give_bias(self):
        m = DenseMap([2, 3], ["tanh"])
        with torch.no_grad():
            m.weights[0].zero_()
            m.biases[0].copy_(t([0.1, -0.2, 0.3]))
        torch.testing.assert_close(m(t([5.0, -5.0])), torch.tanh(t([0.1, -0.2, 0.3])))

    def test_columnwise_evaluation(self):
        m = DenseMap([4, 6, 3], generator=torch.Generator().manual_seed(1234))
        basis = torch.eye(4, dtype=DTYPE)
        batch = m(basis)
        for k in range(4):
            torch.testing.assert_close(batch[k], m(basis[k]), rtol=0, atol=1e-15)

    def test_linear_jacobian(self):
        m = DenseMap([3, 2], ["identity"])
        torch.testing.assert_close(dense_jacobian(m, t([1.0, 2.0, 3.0])), m.weights[0].detach())

    def test_tanh_unit_at_zero(self):
        m = DenseMap([1, 1], ["tanh"])
        with torch.no_grad():
            m.weights[0].fill_(1.0)
            m.biases[0].zero_()
        assert dense_jacobian(m, t([0.0])).item() == pytest.approx(1.0)

    @given(st.integers(0, 10_000))
    def test_jacobian_matches_fd(self, seed):
        g = torch.Generator().manual_seed(seed)
        m = DenseMap([5, 8, 8, 4], generator=g)
        v = torch.randn(5, generator=g, dtype=DTYPE)
        with torch.no_grad():
            fd = fd_jacobian(m, v)
            ana = dense_jacobian(m, v)
        assert float(rel_err(ana.numpy(), fd.numpy()).max()) < 1e-5 or torch.allclose(ana, fd, atol=1e-9)

    def test_batched_jacobian_shape(self):
        m = DenseMap([3, 5, 2])
        assert dense_jacobian(m, torch.zeros(7, 3, dtype=DTYPE)).shape == (7, 2, 3)

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            DenseMap([3, 2])(torch.zeros(4, dtype=DTYPE))

    def test_bad_activation_count(self):
        with pytest.raises(DimensionError):
            DenseMap([3, 4, 2], ["tanh"])


class TestContentFlow:
    def _flow(self, seed=0, **kw):
        g = torch.Generator().manual_seed(seed)
        return ContentFlow(3, 5, generator=g, **kw).randomize_(generator=g), g

    def test_identity_start(self):
        f = ContentFlow(3, 5, n_layers=1)
        c = torch.randn(10, 3, dtype=DTYPE)
        ct, ld = content_flow_forward(f, c, torch.randn(10, 5, dtype=DTYPE))
        torch.testing.assert_close(ct, c, rtol=0, atol=1e-12)
        torch.testing.assert_close(ld, torch.zeros(10, dtype=DTYPE), rtol=0, atol=1e-12)

    def test_logdet_matches_numerical(self):
        f, g = self._flow()
        for _ in range(100):
            c = torch.randn(3, generator=g, dtype=DTYPE) * 2
            u = torch.randn(5, generator=g, dtype=DTYPE)
            _, ld = f(c[None], u[None])
            num = num_logdet(lambda v: f(v[None], u[None])[0][0], c)
            assert abs(float(ld[0].detach() - num)) < 1e-5

    def test_conditioning_is_live(self):
        f, g = self._flow(1)
        c = torch.randn(1, 3, generator=g, dtype=DTYPE)
        a, _ = f(c, torch.zeros(1, 5, dtype=DTYPE))
        b, _ = f(c, torch.ones(1, 5, dtype=DTYPE))
        assert (a - b).abs().max() > 1e-3

    def test_composition_logdets_add(self):
        f1, g = self._flow(2)
        f2, _ = self._flow(3)
        c = torch.randn(4, 3, generator=g, dtype=DTYPE)
        u = torch.randn(4, 5, generator=g, dtype=DTYPE)
        mid, ld1 = f1(c, u)
        _, ld2 = f2(mid, u)
        for i in range(4):
            num = num_logdet(lambda v: f2(f1(v[None], u[i : i + 1])[0], u[i : i + 1])[0][0], c[i])
            assert abs(float((ld1[i] + ld2[i]).detach() - num)) < 1e-8

    @given(st.integers(0, 1000), st.floats(-6, 6), st.floats(0.01, 3))
    def test_strictly_monotone(self, seed, a, gap):
        f, g = self._flow(seed)
        u = torch.randn(1, 5, generator=g, dtype=DTYPE)
        lo = torch.full((1, 3), a, dtype=DTYPE)
        hi = lo + gap
        with torch.no_grad():
            assert torch.all(f(hi, u)[0] > f(lo, u)[0])


class TestSpline:
    def _flow(self, seed=0):
        g = torch.Generator().manual_seed(seed)
        return StyleFlow(2, 4, generator=g).randomize_(generator=g), g

    def test_identity_start(self):
        f = StyleFlow(2, 4)
        s = torch.randn(50, 2, dtype=DTYPE) * 3
        st_, ld = style_flow_forward(f, s, torch.randn(50, 4, dtype=DTYPE))
        torch.testing.assert_close(st_, s, rtol=0, atol=1e-12)
        torch.testing.assert_close(ld, torch.zeros(50, dtype=DTYPE), rtol=0, atol=1e-12)

    def test_round_trip_1000(self):
        f, g = self._flow()
        s = (torch.rand(1000, 2, generator=g, dtype=DTYPE) * 2 - 1) * 6
        ctx = torch.randn(1000, 4, generator=g, dtype=DTYPE)
        with torch.no_grad():
            back = style_flow_inverse(f, style_flow_forward(f, s, ctx)[0], ctx)
        assert float((back - s).abs().max()) < 1e-8

    def test_tails_are_identity(self):
        f, g = self._flow(1)
        s = t([[5.5, -7.0], [100.0, -5.0001]])
        ctx = torch.randn(2, 4, generator=g, dtype=DTYPE)
        out, ld = f(s, ctx)
        assert torch.equal(out, s)
        assert torch.equal(ld, torch.zeros(2, dtype=DTYPE))
        assert torch.equal(f.inverse(s, ctx), s)

    def test_logdet_matches_numerical(self):
        f, g = self._flow(2)
        for _ in range(100):
            s = (torch.rand(2, generator=g, dtype=DTYPE) * 2 - 1) * 5
            ctx = torch.randn(4, generator=g, dtype=DTYPE)
            _, ld = f(s[None], ctx[None])
            num = num_logdet(lambda v: f(v[None], ctx[None])[0][0], s)
            assert abs(float(ld[0].detach() - num)) < 1e-5

    def test_continuous_at_bounds(self):
        f, g = self._flow(3)
        ctx = torch.randn(1, 4, generator=g, dtype=DTYPE)
        for b in (-5.0, 5.0):
            inside = f(t([[b, b]]), ctx)[0]
            torch.testing.assert_close(inside, t([[b, b]]), rtol=0, atol=1e-12)

    @given(st.integers(0, 500), st.floats(-6, 6), st.floats(1e-3, 4))
    def test_strictly_increasing(self, seed, a, gap):
        f, g = self._flow(seed)
        ctx = torch.randn(1, 4, generator=g, dtype=DTYPE)
        with torch.no_grad():
            lo = f(t([[a, a]]), ctx)[0]
            hi = f(t([[a + gap, a]]), ctx)[0]
        assert hi[0, 0] > lo[0, 0] and hi[0, 1] == lo[0, 1]

    def test_malformed_knots(self):
        kx = t([-1.0, 0.5, 0.0, 1.0])
        ky = t([-1.0, -0.5, 0.0, 1.0])
        kd = t([1.0, 1.0, 1.0, 1.0])
        with pytest.raises(SplineParameterError):
            rq_spline_knots(t([0.1]), kx, ky, kd)
        with pytest.raises(SplineParameterError):
            rq_spline_knots(t([0.1]), ky, ky, t([1.0, -1.0, 1.0, 1.0]))

    def test_knot_spline_identity_with_unit_slopes(self):
        k = t([-1.0, -0.2, 0.4, 1.0])
        x = t([-0.9, 0.0, 0.7])
        y, logd = rq_spline_knots(x, k, k, torch.ones(4, dtype=DTYPE))
        torch.testing.assert_close(y, x)
        torch.testing.assert_close(logd, torch.zeros(3, dtype=DTYPE))

    def test_low_level_raw_params(self):
        g = torch.Generator().manual_seed(5)
        raw = [torch.randn(3, k, generator=g, dtype=DTYPE) for k in (8, 8, 7)]
        x = t([-4.0, 0.1, 3.3])
        y, ld = rq_spline(x, *raw)
        back, _ = rq_spline(y, *raw, inverse=True)
        torch.testing.assert_close(back, x, rtol=0, atol=1e-10)


class TestGradCheck:
    def test_linear_map(self):
        w = torch.randn(3, 4, dtype=DTYPE, requires_grad=True)
        v = torch.randn(4, dtype=DTYPE, requires_grad=True)
        rep = grad_check(lambda: (w @ v).sum(), [w, v], step=1e-6)
        assert rep.max_rel_err < 1e-9 and rep.ok

    def test_flags_corrupted_coordinate(self):
        w = torch.randn(3, 4, dtype=DTYPE, requires_grad=True)
        v = torch.randn(4, dtype=DTYPE, requires_grad=True)

        def fn():
            return torch.tanh(w @ v).sum()

        good = torch.autograd.grad(fn(), [w, v])
        bad = [good[0].clone(), good[1].clone()]
        bad[0].view(-1)[7] += 0.5
        rep = grad_check(fn, [w, v], step=1e-6, analytic=bad)
        assert rep.failing == (0, 7)

    def test_symmetric_denominator(self):
        assert float(rel_err(1.0, 2.0)) == pytest.approx(0.5)
        assert float(rel_err(2.0, 1.0)) == pytest.approx(0.5)
        assert float(rel_err(0.0, 0.0)) == 0.0

    def test_restores_tensors(self):
        w = torch.randn(5, dtype=DTYPE, requires_grad=True)
        before = w.detach().clone()
        grad_check(lambda: (w**3).sum(), [w])
        assert torch.equal(w.detach(), before)

    def test_flow_parameters(self):
        g = torch.Generator().manual_seed(0)
        f = StyleFlow(2, 3, generator=g).randomize_(generator=g)
        s = torch.randn(6, 2, generator=g, dtype=DTYPE)
        ctx = torch.randn(6, 3, generator=g, dtype=DTYPE)
        rep = grad_check(lambda: f(s, ctx)[1].sum() + f(s, ctx)[0].pow(2).sum(), list(f.parameters()), step=1e-6)
        assert rep.max_rel_err < 1e-5


def test_named_tensor_roundtrip(tmp_path):
    tensors = {"a.w": torch.randn(3, 4, dtype=DTYPE), "b": torch.tensor(2.5, dtype=DTYPE), "c": np.arange(5.0)}
    jpath, bpath = save_named_tensors(tmp_path / "snap", tensors)
    assert bpath.stat().st_size == 8 * (12 + 1 + 5)
    back = load_named_tensors(tmp_path / "snap")
    assert set(back) == set(tensors)
    for k, v in tensors.items():
        assert np.array_equal(back[k].numpy(), np.asarray(v))
    manifest = __import__("json").loads(jpath.read_text())
    offsets = [e["offset"] for e in manifest["tensors"]]
    assert offsets == sorted(offsets) and offsets[0] == 0
