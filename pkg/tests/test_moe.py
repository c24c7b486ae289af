import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from moecnn.autograd import Tensor
from moecnn.autograd import functional as F
from moecnn.constraints import ConstraintConfig
from moecnn.models import make_stage
from moecnn.moe import (
    Gate,
    GateConfig,
    GateKind,
    MoELayer,
    ProjectionShortcut,
    RoutingMode,
    flops_of_forward,
    gate_forward,
    topk_sparsify,
)

from conftest import gradcheck, module_gradcheck


def make_layer(n=4, k=2, in_ch=3, out_ch=4, stride=1, mid=2, seed=0, shared=False,
               gate_kind=GateKind.GAP_FC, constraint=None):
    rng = np.random.default_rng(seed)
    if shared:
        experts = [make_stage(in_ch, out_ch, stride, 1, mid, rng=rng)] * n
    else:
        experts = [make_stage(in_ch, out_ch, stride, 1, mid, rng=rng) for _ in range(n)]
    gate = Gate(in_ch, GateConfig(kind=gate_kind, num_experts=n), rng=rng)
    shortcut = ProjectionShortcut(in_ch, out_ch, stride, rng=rng)
    return MoELayer(experts, gate, k, shortcut, constraint=constraint)


class TestTopkSparsify:
    def test_first_caption_pair(self):
        w, idx = topk_sparsify(Tensor([[0.4368, 0.1518, 0.1934, 0.2180]]), 2)
        np.testing.assert_allclose(w.data, [[0.6671, 0.0, 0.0, 0.3329]], atol=1e-3)
        assert sorted(idx[0].tolist()) == [0, 3]

    def test_second_caption_pair(self):
        w, idx = topk_sparsify(Tensor([[0.2917, 0.3326, 0.2141, 0.1616]]), 2)
        np.testing.assert_allclose(w.data, [[0.4672, 0.5328, 0.0, 0.0]], atol=1e-3)
        assert sorted(idx[0].tolist()) == [0, 1]

    def test_k_equals_n_is_identity(self):
        d = F.softmax(Tensor(np.random.default_rng(0).normal(size=(5, 4))))
        w, _ = topk_sparsify(d, 4)
        np.testing.assert_allclose(w.data, d.data, atol=1e-15)

    def test_ties_prefer_lower_index(self):
        _, idx = topk_sparsify(Tensor([[0.25, 0.25, 0.25, 0.25]]), 2)
        assert sorted(idx[0].tolist()) == [0, 1]

    @pytest.mark.parametrize("k", [0, 5])
    def test_invalid_k(self, k):
        with pytest.raises(ValueError):
            topk_sparsify(Tensor([[0.25, 0.25, 0.25, 0.25]]), k)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(1, 6), st.integers(0, 10_000), st.floats(-50, 50))
    def test_invariants(self, k, seed, shift):
        rng = np.random.default_rng(seed)
        n = 6
        logits = rng.normal(0, 3, size=(4, n))
        dense = F.softmax(Tensor(logits)).data
        w, idx = topk_sparsify(Tensor(dense), k)
        np.testing.assert_allclose(w.data.sum(axis=1), 1.0, atol=1e-6)
        assert ((w.data > 0).sum(axis=1) <= k).all()
        for r in range(4):
            assert set(np.flatnonzero(w.data[r])) == set(idx[r].tolist())
            # renormalized top-k of a softmax is the softmax over the top-k logits
            sel = idx[r]
            ref = np.exp(logits[r, sel] - logits[r, sel].max())
            np.testing.assert_allclose(w.data[r, sel], ref / ref.sum(), atol=1e-9)
        # shift invariance of the selection
        _, idx2 = topk_sparsify(F.softmax(Tensor(logits + shift)), k)
        for r in range(4):
            assert set(idx[r].tolist()) == set(idx2[r].tolist())

    @pytest.mark.parametrize("seed", range(20))
    def test_gradients_through_renormalization(self, seed):
        rng = np.random.default_rng(seed)
        z, g = rng.normal(size=(3, 5)), rng.normal(size=(3, 5))
        assert gradcheck(lambda z_: (topk_sparsify(F.softmax(z_), 2)[0] * Tensor(g)).sum(), [z]) < 1e-4


class TestGate:
    def test_zero_parameters_give_uniform_weights(self):
        gate = Gate(3, GateConfig(num_experts=4), rng=np.random.default_rng(0))
        gate.fc.weight.data[...] = 0
        gate.fc.bias.data[...] = 0
        x = Tensor(np.random.default_rng(1).normal(size=(5, 3, 4, 4)))
        np.testing.assert_array_equal(gate_forward(x, gate).dense_weights.data, 0.25)

    def test_zero_init_option(self):
        gate = Gate(3, GateConfig(num_experts=4, zero_init=True), rng=np.random.default_rng(0))
        assert not gate.fc.weight.data.any() and not gate.fc.bias.data.any()

    @pytest.mark.parametrize("kind", list(GateKind))
    def test_constant_input_identical_rows(self, kind):
        gate = Gate(3, GateConfig(kind=kind, num_experts=4), rng=np.random.default_rng(0))
        out = gate_forward(Tensor(np.ones((3, 3, 4, 4))), gate).dense_weights.data
        np.testing.assert_array_equal(out, np.tile(out[0], (3, 1)))

    def test_gap_fc_composition_oracle(self):
        rng = np.random.default_rng(2)
        gate = Gate(3, GateConfig(num_experts=4), rng=rng)
        x = rng.normal(size=(6, 3, 5, 5))
        z = x.mean(axis=(2, 3)) @ gate.fc.weight.data.T + gate.fc.bias.data
        expect = np.exp(z - z.max(axis=1, keepdims=True))
        expect /= expect.sum(axis=1, keepdims=True)
        np.testing.assert_allclose(gate_forward(Tensor(x), gate).dense_weights.data, expect,
                                   atol=1e-10, rtol=0)

    def test_conv_gap_fc_composition_oracle(self):
        rng = np.random.default_rng(3)
        gate = Gate(2, GateConfig(kind=GateKind.CONV_GAP_FC, num_experts=3), rng=rng)
        x = rng.normal(size=(2, 2, 4, 4))
        h = F.conv2d(Tensor(x), gate.conv.weight, gate.conv.bias, padding=1).data
        z = np.maximum(h, 0).mean(axis=(2, 3)) @ gate.fc.weight.data.T + gate.fc.bias.data
        np.testing.assert_allclose(gate(Tensor(x)).data, z, atol=1e-12)

    def test_channel_mismatch(self):
        gate = Gate(3, GateConfig(num_experts=2), rng=np.random.default_rng(0))
        with pytest.raises(ValueError, match="channels"):
            gate(Tensor(np.zeros((1, 4, 2, 2))))

    def test_conv_kernel_must_be_odd(self):
        with pytest.raises(ValueError):
            GateConfig(kind=GateKind.CONV_GAP_FC, conv_kernel=2)


class TestRoutingMode:
    @pytest.mark.parametrize("text,kind,expert", [("sparse", "sparse", None), ("DENSE", "dense", None),
                                                  ("forced:3", "forced", 3)])
    def test_parse(self, text, kind, expert):
        m = RoutingMode.parse(text)
        assert (m.kind, m.expert) == (kind, expert)

    @pytest.mark.parametrize("text", ["forced", "forced:-1", "top2", "forced:x"])
    def test_parse_errors(self, text):
        with pytest.raises(ValueError):
            RoutingMode.parse(text)

    def test_forced_out_of_range(self):
        with pytest.raises(ValueError, match="out of range"):
            make_layer(n=2).set_mode("forced:2")


class TestMoEForward:
    @pytest.mark.parametrize("k", [1, 2, 3, 4])
    def test_identical_experts_sparse_equals_dense(self, k):
        layer = make_layer(k=k, shared=True).eval()
        x = Tensor(np.random.default_rng(0).normal(size=(5, 3, 6, 6)))
        layer.set_mode("sparse")
        sparse = layer(x).data
        layer.set_mode("dense")
        np.testing.assert_allclose(layer(x).data, sparse, atol=1e-12)

    @pytest.mark.parametrize("i", range(4))
    def test_forced_is_shortcut_plus_expert(self, i):
        layer = make_layer(k=4, stride=2).eval()
        x = Tensor(np.random.default_rng(i).normal(size=(3, 3, 6, 6)))
        layer.set_mode(RoutingMode.forced(i))
        expect = layer.shortcut(x).data + layer.experts[i](x).data
        np.testing.assert_allclose(layer(x).data, expect, atol=1e-12)

    def test_weighted_sum_oracle(self):
        layer = make_layer(n=2, k=2, seed=5).eval()
        x = Tensor(np.random.default_rng(5).normal(size=(4, 3, 5, 5)))
        g = F.softmax(layer.gate(x)).data
        expect = layer.shortcut(x).data + sum(
            g[:, i, None, None, None] * layer.experts[i](x).data for i in range(2))
        np.testing.assert_allclose(layer(x).data, expect, atol=1e-6)

    def test_sparse_rows_match_per_sample_oracle(self):
        layer = make_layer(seed=6).eval()
        x = np.random.default_rng(6).normal(size=(6, 3, 5, 5))
        out = layer(Tensor(x)).data
        gate = layer.last
        for r in range(6):
            xr = Tensor(x[r:r + 1])
            ref = layer.shortcut(xr).data[0]
            for e in gate.topk_indices[r]:
                ref = ref + gate.sparse_weights.data[r, e] * layer.experts[e](xr).data[0]
            np.testing.assert_allclose(out[r], ref, atol=1e-10)

    def test_unselected_experts_get_zero_gradient(self):
        layer = make_layer(n=4, k=1, seed=7).train()
        layer.gate.fc.bias.data[:] = [5.0, 0.0, 0.0, 0.0]
        x = Tensor(np.random.default_rng(7).normal(size=(4, 3, 5, 5)))
        layer(x).sum().backward()
        assert (layer.last.topk_indices == 0).all()
        for e, expert in enumerate(layer.experts):
            grads = [p.grad for p in expert.parameters()]
            if e == 0:
                assert any(g is not None and np.abs(g).sum() > 0 for g in grads)
            else:
                assert all(g is None or not g.any() for g in grads)

    def test_weight_rows_convex_in_every_mode(self):
        layer = make_layer(seed=8).eval()
        x = Tensor(np.random.default_rng(8).normal(size=(5, 3, 4, 4)))
        for mode in ["sparse", "dense", "forced:1"]:
            layer.set_mode(mode)
            layer(x)
            w = layer.last.sparse_weights.data
            assert (w >= 0).all()
            np.testing.assert_allclose(w.sum(axis=1), 1.0, atol=1e-6)

    def test_no_noise_in_eval(self):
        layer = make_layer(seed=9)
        layer.gate.config.noise_std = 5.0
        layer.eval()
        x = Tensor(np.random.default_rng(9).normal(size=(3, 3, 4, 4)))
        np.testing.assert_array_equal(layer(x).data, layer(x).data)

    def test_construction_errors(self):
        with pytest.raises(ValueError, match="k must"):
            make_layer(n=2, k=3)

    @pytest.mark.parametrize("seed", range(20))
    def test_sparse_forward_gradients(self, seed):
        layer = make_layer(n=3, k=2, in_ch=2, out_ch=3, stride=int(seed % 2) + 1, seed=seed).train()
        rng = np.random.default_rng(seed)
        x0 = rng.normal(size=(4, 2, 4, 4))
        g = Tensor(rng.normal(size=layer(Tensor(x0)).shape))
        assert gradcheck(lambda x_: (layer(x_) * g).sum(), [x0]) < 1e-4
        x = Tensor(x0)
        params = layer.gate.parameters() + layer.shortcut.parameters() + \
            [p for e in layer.experts for p in e.parameters()]
        assert module_gradcheck(params, lambda: (layer(x) * g).sum(), max_entries=6, seed=seed) < 1e-4


class TestMacs:
    def test_k_equals_n_is_dense_count(self):
        layer = make_layer(k=4)
        shape = (3, 8, 8)
        dense = layer.gate.mac_count(shape)[0] + layer.shortcut.mac_count(shape)[0] + \
            sum(e.mac_count(shape)[0] for e in layer.experts)
        assert flops_of_forward(layer, (1,) + shape) == dense

    def test_additive_in_k(self):
        layer = make_layer(k=1)
        per = layer.experts[0].mac_count((3, 8, 8))[0]
        counts = [flops_of_forward(layer, (3, 8, 8), k) for k in range(1, 5)]
        assert np.diff(counts).tolist() == [per] * 3
