import numpy as np
import pytest

from s2wmamba.msdg import MsdgParams, dual_msdg, msdg_gate
from s2wmamba.msdg import _GlobalExtract, _RegionalExtract
from s2wmamba.tensor import Parameter, ShapeError, Tensor, abs_, check_gradients, mean_, sub


def _params(c=4, seed=0):
    return MsdgParams(c, rng=np.random.default_rng(seed))


def _pair(c=4, h=8, w=8, seed=1):
    gen = np.random.default_rng(seed)
    return Tensor(gen.uniform(-1, 1, size=(c, h, w))), Tensor(gen.uniform(-1, 1, size=(c, h, w)))


class TestMsdgGate:
    def test_zero_gate_head_is_identity_bitwise(self):
        p = _params()
        x_main, x_extra = _pair()
        out = msdg_gate(x_main, x_extra, p)
        assert np.array_equal(out.data, x_main.data)

    def test_additive_only_path(self):
        p = _params()
        k = 0.75
        p.gate_head.b.data[2 * p.c :] = k  # head weights stay zero
        x_main, x_extra = _pair(seed=2)
        out = msdg_gate(x_main, x_extra, p)
        assert np.allclose(out.data, x_main.data + k, atol=0)

    def test_head_bias_drives_all_three_gates(self):
        p = _params()
        p.gate_head.b.data[: p.c] = 0.3  # multiplicative
        p.gate_head.b.data[p.c : 2 * p.c] = -0.2  # modulation
        p.gate_head.b.data[2 * p.c :] = 0.1  # additive
        x_main, x_extra = _pair(seed=3)
        gm, gd, ga = np.tanh(0.3), np.tanh(-0.2), 0.1
        expect = x_main.data * (1.0 + gd + gm * x_extra.data) + ga
        out = msdg_gate(x_main, x_extra, p)
        assert np.allclose(out.data, expect, atol=1e-14)

    def test_shape_mismatch(self):
        p = _params()
        with pytest.raises(ShapeError):
            msdg_gate(Tensor(np.ones((4, 8, 8))), Tensor(np.ones((4, 8, 9))), p)

    def test_output_shape_matches_input(self):
        p = _params(seed=4)
        for name, param in p.named_parameters():  # non-trivial gates
            if "gate_head" in name:
                param.data[...] = np.random.default_rng(5).uniform(-0.3, 0.3, size=param.shape)
        x_main, x_extra = _pair(seed=6)
        assert msdg_gate(x_main, x_extra, p).shape == x_main.shape

    def test_gradients_fd_4x8x8(self):
        p = _params(seed=7)
        # move the head off its zero init so its gradients are informative
        rng = np.random.default_rng(8)
        p.gate_head.w.data[...] = rng.uniform(-0.2, 0.2, size=p.gate_head.w.shape)
        p.gate_head.b.data[...] = rng.uniform(-0.1, 0.1, size=p.gate_head.b.shape)
        x_main, x_extra = _pair(seed=9)
        target = rng.uniform(-1, 1, size=(4, 8, 8))

        def f():
            return mean_(abs_(sub(msdg_gate(x_main, x_extra, p), Tensor(target))))

        report = check_gradients(f, list(p.named_parameters()), max_coords=3)
        assert report.passed, str(report)

    def test_disabled_gates_are_detached_zeros(self):
        p = _params(seed=10)
        rng = np.random.default_rng(11)
        p.gate_head.w.data[...] = rng.uniform(-0.3, 0.3, size=p.gate_head.w.shape)
        x_main, x_extra = _pair(seed=12)
        out = msdg_gate(x_main, x_extra, p, no_gm=True, no_gc=True, no_ga=True)
        assert np.array_equal(out.data, x_main.data)


class TestSubBlocks:
    def test_gfeb_spatially_constant(self):
        g = _GlobalExtract(6, np.random.default_rng(13))
        x = Tensor(np.random.default_rng(14).uniform(-1, 1, size=(6, 5, 7)))
        out = g(x).data
        for ch in out:
            assert np.ptp(ch) == 0.0

    def test_rfeb1_per_pixel_locality(self):
        r = _RegionalExtract(3, 1, np.random.default_rng(15))
        base = np.random.default_rng(16).uniform(-1, 1, size=(3, 6, 6))
        bumped = base.copy()
        bumped[:, 2, 3] += 0.5
        diff = np.abs(r(Tensor(bumped)).data - r(Tensor(base)).data)
        mask = diff.max(axis=0) > 0
        expected = np.zeros((6, 6), dtype=bool)
        expected[2, 3] = True
        assert np.array_equal(mask, expected)

    def test_rfeb3_spreads_to_neighbourhood(self):
        r = _RegionalExtract(3, 3, np.random.default_rng(17))
        base = np.random.default_rng(18).uniform(-1, 1, size=(3, 6, 6))
        bumped = base.copy()
        bumped[:, 2, 3] += 0.5
        diff = np.abs(r(Tensor(bumped)).data - r(Tensor(base)).data).max(axis=0)
        assert diff[2, 3] > 0
        assert diff[1, 2] > 0
        assert diff[5, 0] == 0.0


class TestDualMsdg:
    def test_rho_extremes(self):
        p1, p2 = _params(seed=19), _params(seed=20)
        rng = np.random.default_rng(21)
        for p in (p1, p2):
            p.gate_head.w.data[...] = rng.uniform(-0.3, 0.3, size=p.gate_head.w.shape)
        o1, o2 = _pair(seed=22)
        res_big = dual_msdg(o1, o2, p1, p2, Tensor(np.asarray(40.0))).data
        only_first = msdg_gate(o1, o2, p1).data
        assert np.allclose(res_big, only_first, atol=1e-12)

    def test_rho_zero_equal_blend(self):
        p1, p2 = _params(seed=23), _params(seed=24)
        rng = np.random.default_rng(25)
        for p in (p1, p2):
            p.gate_head.w.data[...] = rng.uniform(-0.3, 0.3, size=p.gate_head.w.shape)
        o1, o2 = _pair(seed=26)
        res = dual_msdg(o1, o2, p1, p2, Tensor(np.asarray(0.0))).data
        blend = 0.5 * msdg_gate(o1, o2, p1).data + 0.5 * msdg_gate(o2, o1, p2).data
        assert np.allclose(res, blend, atol=1e-15)

    def test_zeroed_heads_blend_raw_outputs(self):
        p1, p2 = _params(seed=27), _params(seed=28)
        o1, o2 = _pair(seed=29)
        rho = Parameter(np.asarray(0.8))
        s = 1.0 / (1.0 + np.exp(-0.8))
        res = dual_msdg(o1, o2, p1, p2, rho).data
        assert np.allclose(res, s * o1.data + (1 - s) * o2.data, atol=1e-15)
