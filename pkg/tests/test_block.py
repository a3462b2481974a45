import numpy as np
import pytest

from salg.block import (attention, bias_table_rows, block_param_shapes, dense_interaction_count,
                        inter_region_ap, inter_region_msa, interaction_count,
                        intra_region_attention, local_global_block, local_global_param_shapes,
                        num_heads, position_bias, propagate, relative_position_index,
                        transformer_block)
from salg.gradcheck import finite_diff_errors
from salg.oracle import dense_attention_oracle
from salg.segmentation import (RegionBatch, SegmentationConfig, gather_regions, pad_to_grid,
                               regular_assignment, scatter_regions, segment)
from salg.tensor import Parameter, Tensor, no_grad, tsum
from salg import tensor as T


def make_params(dim, side=None, mode="ap", seed=0, scale=0.2):
    rng = np.random.default_rng(seed)
    shapes = local_global_param_shapes(dim, side, mode) if side else block_param_shapes(dim)
    out = {}
    for name, shape in shapes.items():
        data = rng.standard_normal(shape) * scale
        if name.endswith("norm1.weight") or name.endswith("norm2.weight"):
            data += 1.0
        out[name] = Parameter(data, name)
    return out


def random_batch(rng, dim=32, window=4, pad=1, size=8):
    cfg = SegmentationConfig(window, pad)
    f = rng.standard_normal((1, size, size, dim))
    a = segment(f, cfg)
    agr = rng.standard_normal((1, a.num_regions, dim))
    return f, a, gather_regions(f, a, agr)


class TestHeads:
    @pytest.mark.parametrize("dim,heads", [(32, 1), (64, 2), (96, 3), (768, 24), (48, 2), (24, 1)])
    def test_num_heads(self, dim, heads):
        assert num_heads(dim) == heads


class TestRelativePositionIndex:
    def test_table_rows(self):
        assert bias_table_rows(9) == 17 * 17 + 3

    def test_agr_codes(self):
        idx = relative_position_index(3)
        n = 25
        assert idx[0, 0] == n + 2
        assert (idx[0, 1:] == n).all() and (idx[1:, 0] == n + 1).all()
        assert idx[1:, 1:].max() < n

    def test_equal_offsets_share_entries(self):
        side = 4
        idx = relative_position_index(side)
        coords = [(i, j) for i in range(side) for j in range(side)]
        seen = {}
        for qi, q in enumerate(coords):
            for ki, k in enumerate(coords):
                off = (q[0] - k[0], q[1] - k[1])
                seen.setdefault(off, set()).add(int(idx[qi + 1, ki + 1]))
        assert all(len(v) == 1 for v in seen.values())
        assert len({next(iter(v)) for v in seen.values()}) == len(seen)


class TestIntraRegionAttention:
    def test_null_slots_are_zero(self, rng):
        _, _, batch = random_batch(rng)
        out = intra_region_attention(batch, make_params(32, 6))
        assert (out.tokens.data[~batch.mask] == 0.0).all()

    def test_null_keys_get_zero_weight(self, rng):
        _, _, batch = random_batch(rng)
        nb, k, length, c = batch.tokens.shape
        p = make_params(32, 6)
        x = T.reshape(batch.tokens, (nb * k, length, c))
        mask = batch.mask.reshape(nb * k, length)
        logits = np.where(mask, 0.0, -np.inf)[:, None, None, :] + np.zeros((nb * k, 1, length, length))
        w = T.softmax(Tensor(logits)).data
        assert (w[..., ~mask[0]][0] == 0.0).all()
        # changing the data in null slots must not change any valid output
        data = batch.tokens.data.copy()
        data[~batch.mask] = 1e3
        moved = intra_region_attention(RegionBatch(Tensor(data), batch.mask, batch.origin), p)
        ref = intra_region_attention(batch, p)
        np.testing.assert_allclose(moved.tokens.data[batch.mask], ref.tokens.data[batch.mask],
                                   rtol=0, atol=1e-12)

    def test_single_region_matches_dense_block(self, rng):
        dim, size = 32, 4
        f = rng.standard_normal((1, size, size, dim))
        agr = rng.standard_normal((1, 1, dim))
        a = regular_assignment((1, size, size), SegmentationConfig(size, 0))
        p = make_params(dim, size)
        out = intra_region_attention(gather_regions(f, a, agr), p).tokens.data[0, 0]
        positions = [(i, j) for i in range(size) for j in range(size)]
        ref = dense_attention_oracle(f[0].reshape(-1, dim), p, positions, agr[0, 0], side=size)
        np.testing.assert_allclose(out, ref, rtol=0, atol=1e-10)

    def test_masking_equals_deletion(self, rng):
        for trial in range(10):
            _, _, batch = random_batch(rng, window=4, pad=int(trial % 3))
            p = make_params(32, batch.side, seed=trial)
            out = intra_region_attention(batch, p).tokens.data
            side = batch.side
            for r in range(batch.tokens.shape[1]):
                live = np.nonzero(batch.mask[0, r, 1:])[0]
                pos = [divmod(int(s), side) for s in live]
                ref = dense_attention_oracle(batch.tokens.data[0, r, 1 + live], p, pos,
                                             batch.tokens.data[0, r, 0], side=side)
                np.testing.assert_allclose(out[0, r, np.r_[0, 1 + live]], ref, rtol=0, atol=1e-8)

    def test_one_token_plus_agr(self, rng):
        dim = 32
        p = make_params(dim, 2)
        x = rng.standard_normal((1, 5, dim))
        mask = np.array([[True, False, True, False, False]])
        h = T.layer_norm(Tensor(x), p["norm1.weight"], p["norm1.bias"])
        qkv = T.linear(h, p["attn.qkv.weight"], T.concat([p["attn.q_bias"], np.zeros(dim), p["attn.v_bias"]]))
        q, k = qkv.data[0, :, :dim], qkv.data[0, :, dim:2 * dim]
        logits = q @ k.T / np.sqrt(dim) + position_bias(p["attn.rel_bias"], 2).data[0]
        w = T.softmax(Tensor(np.where(mask, logits, -np.inf))).data
        np.testing.assert_allclose(w[0].sum(), 1.0, atol=1e-15)
        assert (w[:, ~mask[0]] == 0).all()


class TestPropagation:
    def test_ap_mean(self):
        out = inter_region_ap(Tensor([[1.0, 2.0], [3.0, 4.0]])).data
        np.testing.assert_array_equal(out, [[2.0, 3.0], [2.0, 3.0]])

    def test_ap_constant_rows_unchanged(self):
        x = np.tile([0.25, -1.0, 3.0], (5, 1))
        np.testing.assert_array_equal(inter_region_ap(Tensor(x)).data, x)

    def test_ap_permutation_invariant(self, rng):
        x = rng.standard_normal((2, 6, 4))
        perm = rng.permutation(6)
        np.testing.assert_allclose(inter_region_ap(Tensor(x[:, perm])).data,
                                   inter_region_ap(Tensor(x)).data, rtol=0, atol=1e-15)

    def test_msa_single_token(self, rng):
        p = make_params(32)
        x = rng.standard_normal((1, 32))
        out = inter_region_msa(Tensor(x), p).data
        ref = dense_attention_oracle([x[0]], p)
        np.testing.assert_allclose(out, ref, rtol=0, atol=1e-10)

    def test_msa_matches_dense_oracle(self, rng):
        p = make_params(64)
        x = rng.standard_normal((7, 64))
        np.testing.assert_allclose(inter_region_msa(Tensor(x), p).data, dense_attention_oracle(x, p),
                                   rtol=0, atol=1e-10)

    def test_msa_permutation_equivariant(self, rng):
        p = make_params(32)
        x = rng.standard_normal((1, 5, 32))
        perm = rng.permutation(5)
        out = inter_region_msa(Tensor(x), p).data
        np.testing.assert_allclose(inter_region_msa(Tensor(x[:, perm]), p).data, out[:, perm],
                                   rtol=0, atol=1e-12)

    def test_msa_requires_weights(self, rng):
        with pytest.raises(ValueError, match="MSA"):
            propagate(Tensor(rng.standard_normal((1, 3, 32))), make_params(32, 4, "ap"), "msa")

    def test_unknown_mode(self):
        with pytest.raises(ValueError):
            propagate(Tensor(np.zeros((1, 2, 32))), {}, "max")


class TestLocalGlobalBlock:
    @pytest.mark.parametrize("mode", ["msa", "ap", "none"])
    def test_shapes(self, rng, mode):
        f, a, _ = random_batch(rng)
        agr = rng.standard_normal((1, a.num_regions, 32))
        out, new = local_global_block(Tensor(f), a, agr, make_params(32, 6, mode), mode)
        assert out.shape == f.shape and new.shape == agr.shape

    def test_none_equals_ap_with_one_region(self, rng):
        cfg = SegmentationConfig(4, 0)
        f = rng.standard_normal((1, 4, 4, 32))
        a = segment(f, cfg)
        agr = rng.standard_normal((1, 1, 32))
        p = make_params(32, 4)
        out_n, agr_n = local_global_block(Tensor(f), a, agr, p, "none")
        out_a, agr_a = local_global_block(Tensor(f), a, agr, p, "ap")
        np.testing.assert_array_equal(out_n.data, out_a.data)
        np.testing.assert_allclose(agr_n.data, agr_a.data, rtol=0, atol=1e-15)

    def test_matches_region_layout_block(self, rng):
        for trial in range(6):
            size, window, pad = (7, 9, 10)[trial % 3], (2, 4)[trial % 2], trial % 3
            f = rng.standard_normal((2, size, size, 32))
            fp, valid = pad_to_grid(f, window)
            a = segment(fp, SegmentationConfig(window, pad), valid)
            agr = rng.standard_normal((2, a.num_regions, 32))
            p = make_params(32, window + 2 * pad, seed=trial)
            out, new = local_global_block(Tensor(fp), a, agr, p, "none")
            ref = intra_region_attention(gather_regions(fp, a, agr), p)
            np.testing.assert_allclose(out.data, scatter_regions(ref, a, fp.shape).data,
                                       rtol=0, atol=1e-12)
            np.testing.assert_allclose(new.data, ref.tokens.data[:, :, 0], rtol=0, atol=1e-12)

    @pytest.mark.parametrize("mode", ["msa", "ap"])
    def test_gradient_check(self, rng, mode):
        f, a, _ = random_batch(rng, dim=32, window=4, pad=1, size=8)
        x = Parameter(f, "x")
        agr = Parameter(rng.standard_normal((1, a.num_regions, 32)), "agr")
        p = make_params(32, 6, mode, scale=0.1)
        w1 = rng.standard_normal(f.shape)
        w2 = rng.standard_normal((1, a.num_regions, 32))

        def loss():
            out, new = local_global_block(x, a, agr, p, mode)
            return tsum(T.sin(out) * w1) + tsum(T.sin(new) * w2)

        errors = finite_diff_errors(loss, {"x": x, "agr": agr, **p}, max_coords=12)
        assert max(errors.values()) < 1e-4, max(errors.items(), key=lambda kv: kv[1])


class TestInteractionCount:
    def test_formula(self):
        assert interaction_count(56, 56, 7, 1, "msa") == 64 * 82 * 82 + 64 * 64
        assert interaction_count(56, 56, 7, 1, "ap") == 64 * 82 * 82
        assert dense_interaction_count(56, 56) == 3136 ** 2
