import math

import numpy as np
import pytest

from egoforecast import ndtensor as nd
from egoforecast.ndtensor import ContractError
from egoforecast.neural import (
    OFF,
    DropoutSpec,
    GruWeights,
    dropout_apply,
    gru_cell,
    gru_fold,
    gru_step,
    init_gru,
    init_mlp,
    load_into,
    mlp_forward,
    named_parameters,
)


def sig(v):
    return 1.0 / (1.0 + math.exp(-v))


def gru_scalar(x, h, w_ih, w_hh, b):
    """Textbook GRU written with explicit loops over units."""
    H = len(h)
    out = []
    for j in range(H):
        def gate(row):
            return sum(w_ih[row, i] * x[i] for i in range(len(x))) + b[row], sum(
                w_hh[row, i] * h[i] for i in range(H)
            )

        zx, zh = gate(j)
        rx, rh = gate(H + j)
        nx, nh = gate(2 * H + j)
        z = sig(zx + zh)
        r = sig(rx + rh)
        n = math.tanh(nx + r * nh)
        out.append((1 - z) * n + z * h[j])
    return np.array(out)


class TestGru:
    def test_step_matches_scalar_loops(self):
        rng = np.random.default_rng(0)
        w = init_gru(rng, 3, 4)
        x = rng.normal(size=(2, 3))
        h = rng.normal(size=(2, 4))
        got = gru_step(x, h, w).value
        for row in range(2):
            want = gru_scalar(x[row], h[row], w.w_ih.value, w.w_hh.value, w.bias.value)
            np.testing.assert_allclose(got[row], want, rtol=0, atol=1e-13)

    def test_zero_weights_keep_zero_state_at_half_mix(self):
        # all-zero weights: z = 0.5, n = tanh(0) = 0, so h' = h / 2
        w = GruWeights(nd.param(np.zeros((6, 2))), nd.param(np.zeros((6, 2))), nd.param(np.zeros(6)))
        h = np.array([[1.0, -2.0]])
        np.testing.assert_array_equal(gru_step(np.ones((1, 2)), h, w).value, h / 2)

    def test_fold_stacked_equals_list(self):
        rng = np.random.default_rng(1)
        w = init_gru(rng, 3, 5)
        xs = [rng.normal(size=(4, 3)) for _ in range(6)]
        h0 = nd.const(np.zeros((4, 5)))
        a = gru_fold([nd.const(x) for x in xs], h0, w).value
        b = gru_fold(nd.const(np.concatenate(xs, axis=0)), h0, w).value
        np.testing.assert_allclose(a, b, rtol=0, atol=1e-14)

    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(2)
        w = init_gru(rng, 2, 3)
        xs = rng.normal(size=(3, 2, 2))
        for name in ("w_ih", "w_hh", "bias"):
            def f(p, name=name):
                ww = GruWeights(**{k: (p if k == name else getattr(w, k)) for k in ("w_ih", "w_hh", "bias")})
                h = nd.const(np.zeros((2, 3)))
                for x in xs:
                    h = gru_step(x, h, ww)
                return nd.sum_(nd.square(h))

            assert nd.finite_diff_check(f, getattr(w, name).value) < 1e-4, name

    def test_fused_cell_matches_composed_ops(self):
        rng = np.random.default_rng(4)
        H = 3
        gx, h, w_hh = (nd.param(rng.normal(size=s)) for s in ((2, 3 * H), (2, H), (3 * H, H)))
        c = rng.normal(size=(2, H))

        def composed():
            gh = nd.matmul(h, w_hh, transpose_b=True)
            zr = nd.sigmoid(nd.add(nd.slice_(gx, 0, 2 * H), nd.slice_(gh, 0, 2 * H)))
            z, r = nd.slice_(zr, 0, H), nd.slice_(zr, H, 2 * H)
            n = nd.tanh(nd.add(nd.slice_(gx, 2 * H, 3 * H), nd.mul(r, nd.slice_(gh, 2 * H, 3 * H))))
            return nd.add(nd.mul(nd.sub(nd.const(np.ones((2, H))), z), n), nd.mul(z, h))

        a, b = composed(), gru_cell(gx, h, w_hh)
        np.testing.assert_allclose(b.value, a.value, rtol=0, atol=1e-14)
        ga = nd.backward(nd.sum_(nd.mul(a, nd.const(c))))
        ga = {k: v.copy() for k, v in ga.items()}
        for p in (gx, h, w_hh):
            p.grad = None
        gb = nd.backward(nd.sum_(nd.mul(b, nd.const(c))))
        for p in (gx, h, w_hh):
            np.testing.assert_allclose(gb[p], ga[p], rtol=0, atol=1e-13)

    def test_fused_cell_finite_differences(self):
        rng = np.random.default_rng(5)
        vals = [rng.normal(size=s) for s in ((2, 9), (2, 3), (9, 3))]
        c = nd.const(rng.normal(size=(2, 3)))
        for i in range(3):
            def f(p, i=i):
                args = [p if j == i else nd.const(v) for j, v in enumerate(vals)]
                return nd.sum_(nd.mul(gru_cell(*args), c))

            assert nd.finite_diff_check(f, vals[i]) < 1e-6, i

    def test_shape_contracts(self):
        rng = np.random.default_rng(3)
        w = init_gru(rng, 3, 4)
        with pytest.raises(ContractError):
            gru_step(np.ones((1, 2)), np.zeros((1, 4)), w)
        with pytest.raises(ContractError):
            gru_step(np.ones((1, 3)), np.zeros((1, 5)), w)
        with pytest.raises(ContractError):
            GruWeights(nd.param(np.zeros((6, 2))), nd.param(np.zeros((6, 3))), nd.param(np.zeros(6)))


class TestMlpAndDropout:
    def test_mlp_matches_manual(self):
        rng = np.random.default_rng(4)
        w = init_mlp(rng, [3, 5, 2], ["tanh", "identity"])
        x = rng.normal(size=(4, 3))
        l0, l1 = w.layers
        want = np.tanh(x @ l0.weight.value.T + l0.bias.value) @ l1.weight.value.T + l1.bias.value
        np.testing.assert_allclose(mlp_forward(x, w).value, want, rtol=0, atol=1e-14)

    def test_layers_must_chain(self):
        rng = np.random.default_rng(4)
        a = init_mlp(rng, [3, 5], ["tanh"])
        b = init_mlp(rng, [4, 2], ["identity"])
        with pytest.raises(ContractError):
            type(a)(a.layers + b.layers)

    def test_off_and_zero_rate_are_identity(self):
        x = nd.const(np.arange(6.0).reshape(2, 3))
        assert dropout_apply(x, OFF, None) is x
        assert dropout_apply(x, DropoutSpec(0.0, "mc-sample"), None) is x

    def test_rate_must_be_below_one(self):
        with pytest.raises(ContractError):
            DropoutSpec(1.0, "train")

    def test_inverted_scaling_preserves_mean(self):
        rng = np.random.default_rng(5)
        x = nd.const(np.ones((400, 500)))
        y = dropout_apply(x, DropoutSpec(0.3, "train"), rng).value
        assert set(np.unique(y)) <= {0.0, 1.0 / 0.7}
        assert abs(y.mean() - 1.0) < 0.01

    def test_dropout_not_applied_to_output_layer(self):
        rng = np.random.default_rng(6)
        w = init_mlp(rng, [3, 2], ["identity"])
        x = rng.normal(size=(5, 3))
        a = mlp_forward(x, w, DropoutSpec(0.9, "train"), rng).value
        np.testing.assert_array_equal(a, mlp_forward(x, w).value)


class TestParameterTrees:
    def test_named_parameters_round_trip(self):
        rng = np.random.default_rng(7)
        w = init_mlp(rng, [2, 3, 1], ["tanh", "identity"])
        named = named_parameters(w, "m")
        assert sorted(named) == ["m.layers.0.bias", "m.layers.0.weight", "m.layers.1.bias", "m.layers.1.weight"]
        arrays = {k: v.value + 1.0 for k, v in named.items()}
        load_into(w, arrays, "m")
        for k, v in named_parameters(w, "m").items():
            np.testing.assert_array_equal(v.value, arrays[k])

    def test_load_into_reports_missing(self):
        w = init_mlp(np.random.default_rng(0), [2, 1], ["identity"])
        with pytest.raises(KeyError):
            load_into(w, {}, "m")
