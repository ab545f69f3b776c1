import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dcama import tensor as T
from dcama.attention import (
    AttentionParams,
    assemble_support_tokens,
    dcama_unit,
    flatten_features,
    multi_head_dcama,
    positional_encoding,
    scaled_dot_product_attention,
    unflatten_tokens,
)
from dcama.tensor import ShapeError, Tensor


def t64(a):
    return Tensor(np.asarray(a, dtype=np.float64))


def make_params(rng, c=6, d_model=8, heads=2, stride=8, layers=1, bias=0.1):
    att = AttentionParams.init({stride: c}, {stride: layers}, d_model, heads, rng, dtype=np.float64)
    for layer in range(layers):
        for role in ("bq", "bk"):
            att.unit(stride, layer)[role].data[:] = rng.normal(0, bias, d_model)
    return att


def naive_pe(pos, dim):
    return [math.sin(pos / 10000 ** (2 * (j // 2) / dim)) if j % 2 == 0 else math.cos(pos / 10000 ** (2 * (j // 2) / dim))
            for j in range(dim)]


def naive_dcama(fq, supports, proj, heads):
    """Token-by-token, head-by-head loop: independent of the vectorised path."""
    h, w, c = fq.shape
    Wq, Wk, bq, bk = (proj[r].data for r in ("Wq", "Wk", "bq", "bk"))
    dm = Wq.shape[1]
    dh = dm // heads
    keys, vals = [], []
    for f, m in supports:
        for p in range(h * w):
            r, col = divmod(p, w)
            keys.append((np.asarray(f[r, col]) + naive_pe(p, c)) @ Wk + bk)
            vals.append(float(m[r, col, 0]))
    out = np.zeros((h, w, 1))
    for p in range(h * w):
        r, col = divmod(p, w)
        q = (np.asarray(fq[r, col]) + naive_pe(p, c)) @ Wq + bq
        acc = 0.0
        for hd in range(heads):
            sl = slice(hd * dh, (hd + 1) * dh)
            scores = [float(q[sl] @ k[sl]) / math.sqrt(dh) for k in keys]
            top = max(scores)
            e = [math.exp(s - top) for s in scores]
            acc += sum(ei * v for ei, v in zip(e, vals)) / sum(e)
        out[r, col, 0] = acc / heads
    return out


def random_supports(rng, n, h=3, w=4, c=6):
    return [(t64(rng.normal(size=(h, w, c))), t64(rng.uniform(0, 1, (h, w, 1)))) for _ in range(n)]


class TestPositionalEncoding:
    def test_position_zero(self):
        pe = positional_encoding(1, 8)[0]
        np.testing.assert_array_equal(pe[0::2], 0.0)
        np.testing.assert_array_equal(pe[1::2], 1.0)

    def test_bounded(self):
        pe = positional_encoding(500, 16)
        assert np.abs(pe).max() <= 1.0

    def test_matches_scalar_formula(self):
        pe = positional_encoding(2, 4)
        np.testing.assert_allclose(pe[1], [math.sin(1), math.cos(1), math.sin(1e-2), math.cos(1e-2)], rtol=1e-15)

    def test_odd_dim(self):
        with pytest.raises(ShapeError):
            positional_encoding(4, 5)


class TestFlatten:
    def test_single_pixel(self):
        assert flatten_features(Tensor(np.ones((1, 1, 3)))).tokens.shape == (1, 3)

    def test_roundtrip_bit_exact(self, rng):
        f = Tensor(rng.normal(size=(4, 5, 3)))
        np.testing.assert_array_equal(unflatten_tokens(flatten_features(f)).data, f.data)

    def test_raster_index(self, rng):
        f = rng.normal(size=(4, 5, 3))
        tokens = flatten_features(Tensor(f)).tokens.data
        np.testing.assert_array_equal(tokens[2 * 5 + 3], f[2, 3])


class TestScaledDotProduct:
    def test_single_support_token(self, rng):
        out = scaled_dot_product_attention(t64(rng.normal(size=(5, 3))), t64(rng.normal(size=(1, 3))), t64([[0.37]]))
        np.testing.assert_allclose(out.data, 0.37)

    def test_identical_keys_give_mean(self, rng):
        k = t64(np.tile(rng.normal(size=(1, 4)), (6, 1)))
        v = t64(rng.uniform(size=(6, 1)))
        out = scaled_dot_product_attention(t64(rng.normal(size=(3, 4))), k, v)
        np.testing.assert_allclose(out.data, v.data.mean(), rtol=1e-12)

    def test_scalar_instance(self):
        out = scaled_dot_product_attention(t64([[2.0]]), t64([[1.0], [-1.0]]), t64([[1.0], [0.0]]))
        expected = math.exp(2) / (math.exp(2) + math.exp(-2))
        assert out.item() == pytest.approx(expected, rel=1e-12)
        assert expected == pytest.approx(0.98201, abs=1e-5)

    def test_errors(self):
        with pytest.raises(ShapeError):
            scaled_dot_product_attention(t64(np.ones((2, 3))), t64(np.ones((2, 4))), t64(np.ones((2, 1))))


class TestMultiHead:
    def test_single_head_equals_plain_attention(self, rng):
        att = make_params(rng, heads=1)
        proj = att.unit(8, 0)
        fq, fs = t64(rng.normal(size=(5, 6))), t64(rng.normal(size=(7, 6)))
        v = t64(rng.uniform(size=(7, 1)))
        pe_q, pe_s = positional_encoding(5, 6), positional_encoding(7, 6)
        q = (fq.data + pe_q) @ proj["Wq"].data + proj["bq"].data
        k = (fs.data + pe_s) @ proj["Wk"].data + proj["bk"].data
        ref = scaled_dot_product_attention(t64(q), t64(k), v).data
        np.testing.assert_allclose(multi_head_dcama(fq, fs, v, proj, 1).data, ref, rtol=1e-12)

    def test_identical_heads_mean_equals_one_head(self, rng):
        att = make_params(rng, c=6, d_model=8, heads=2)
        proj = att.unit(8, 0)
        for role in ("Wq", "Wk"):
            proj[role].data[:, 4:] = proj[role].data[:, :4]
        for role in ("bq", "bk"):
            proj[role].data[4:] = proj[role].data[:4]
        fq, fs = t64(rng.normal(size=(4, 6))), t64(rng.normal(size=(5, 6)))
        v = t64(rng.uniform(size=(5, 1)))
        rec = []
        out = multi_head_dcama(fq, fs, v, proj, 2, record=rec)
        np.testing.assert_allclose(rec[0], rec[1])
        np.testing.assert_allclose(out.data, rec[0] @ v.data, rtol=1e-12)

    def test_matches_naive_loop(self, rng):
        att = make_params(rng, c=6, d_model=8, heads=2)
        sup = random_supports(rng, 2)
        fq = t64(rng.normal(size=(3, 4, 6)))
        got = dcama_unit(fq, sup, att.unit(8, 0), 2).data
        ref = naive_dcama(fq.data, [(f.data, m.data) for f, m in sup], att.unit(8, 0), 2)
        np.testing.assert_allclose(got, ref, rtol=1e-10, atol=1e-12)

    def test_channel_mismatch(self, rng):
        proj = make_params(rng, c=6).unit(8, 0)
        with pytest.raises(ShapeError):
            multi_head_dcama(t64(np.ones((2, 4))), t64(np.ones((2, 4))), t64(np.ones((2, 1))), proj, 2)


class TestSupportAssembly:
    def test_one_shot_is_flatten(self, rng):
        (f, m), = random_supports(rng, 1)
        tm, v = assemble_support_tokens([(f, m)])
        np.testing.assert_array_equal(tm.tokens.data, flatten_features(f).tokens.data)
        np.testing.assert_array_equal(v.data, m.data.reshape(-1, 1))

    def test_duplicated_pair_repeats_values(self, rng):
        pair = random_supports(rng, 1)[0]
        _, v1 = assemble_support_tokens([pair])
        tm, v2 = assemble_support_tokens([pair, pair])
        np.testing.assert_array_equal(v2.data, np.concatenate([v1.data, v1.data]))
        np.testing.assert_array_equal(tm.positions, np.tile(np.arange(12), 2))

    @pytest.mark.parametrize("n", [1, 2, 3, 4, 5])
    def test_token_count(self, rng, n):
        tm, v = assemble_support_tokens(random_supports(rng, n))
        assert tm.tokens.shape[0] == v.shape[0] == n * 3 * 4

    def test_errors(self, rng):
        with pytest.raises(ShapeError):
            assemble_support_tokens([])
        a = random_supports(rng, 1, h=3)[0]
        b = random_supports(rng, 1, h=2)[0]
        with pytest.raises(ShapeError):
            assemble_support_tokens([a, b])


class TestDcamaUnit:
    @pytest.mark.parametrize("value", [0.0, 1.0])
    def test_constant_mask_passes_through(self, rng, value):
        att = make_params(rng)
        sup = [(f, t64(np.full((3, 4, 1), value))) for f, _ in random_supports(rng, 2)]
        out = dcama_unit(t64(rng.normal(size=(3, 4, 6))), sup, att.unit(8, 0), 2).data
        np.testing.assert_allclose(out, value, atol=1e-12)

    @pytest.mark.parametrize("k", [2, 3])
    def test_duplicating_supports(self, rng, k):
        att = make_params(rng)
        sup = random_supports(rng, 2)
        fq = t64(rng.normal(size=(3, 4, 6)))
        base = dcama_unit(fq, sup, att.unit(8, 0), 2).data
        dup = dcama_unit(fq, sup * k, att.unit(8, 0), 2).data
        assert np.abs(base - dup).max() < 1e-5

    def test_same_params_any_n(self, rng):
        att = make_params(rng)
        fq = t64(rng.normal(size=(3, 4, 6)))
        for n in (1, 2, 5):
            assert dcama_unit(fq, random_supports(rng, n), att.unit(8, 0), 2).shape == (3, 4, 1)

    def test_shape_mismatch(self, rng):
        att = make_params(rng)
        with pytest.raises(ShapeError):
            dcama_unit(t64(rng.normal(size=(2, 4, 6))), random_supports(rng, 1), att.unit(8, 0), 2)


class TestParamsIO:
    def test_save_load_roundtrip(self, rng, tmp_path):
        att = make_params(rng, layers=2)
        att.save(tmp_path)
        back = AttentionParams.load(tmp_path)
        assert back.head_count == att.head_count and back.d_model == att.d_model
        for key, proj in att.table.items():
            for role, t in proj.items():
                np.testing.assert_array_equal(back.table[key][role].data, t.data)

    def test_d_model_divisibility(self):
        with pytest.raises(ValueError):
            AttentionParams(head_count=3, d_model=8)


class TestProperties:
    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.integers(1, 5), st.floats(0.1, 30))
    def test_rows_stochastic_and_output_in_unit_interval(self, seed, n, scale):
        r = np.random.default_rng(seed)
        att = make_params(r, bias=scale)
        fq = t64(r.normal(0, scale, (3, 4, 6)))
        sup = [(t64(r.normal(0, scale, (3, 4, 6))), t64(r.uniform(0, 1, (3, 4, 1)))) for _ in range(n)]
        rec = []
        out = dcama_unit(fq, sup, att.unit(8, 0), 2, record=rec).data
        for wts in rec:
            np.testing.assert_allclose(wts.sum(axis=1), 1.0, atol=1e-6)
        assert out.min() >= -1e-12 and out.max() <= 1 + 1e-12

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.integers(2, 4))
    def test_joint_token_permutation(self, seed, n):
        r = np.random.default_rng(seed)
        att = make_params(r)
        proj = att.unit(8, 0)
        fq = t64(r.normal(size=(12, 6)))
        tm, v = assemble_support_tokens(random_supports(r, n))
        pos = tm.positions
        perm = r.permutation(len(pos))
        base = multi_head_dcama(fq, tm.tokens, v, proj, 2, s_positions=pos).data
        shuffled = multi_head_dcama(
            fq, t64(tm.tokens.data[perm]), t64(v.data[perm]), proj, 2, s_positions=pos[perm]
        ).data
        assert np.abs(base - shuffled).max() < 1e-5

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_gradients_of_unit(self, seed):
        r = np.random.default_rng(seed)
        att = make_params(r)
        proj = att.unit(8, 0)
        fq = Tensor(r.normal(size=(2, 3, 6)), requires_grad=True)
        sup = [(Tensor(r.normal(size=(2, 3, 6)), requires_grad=True), t64(r.uniform(size=(2, 3, 1))))]
        probe = t64(r.normal(size=(2, 3, 1)))

        def f(_):
            return T.sum_all(T.mul(dcama_unit(fq, sup, proj, 2), probe))

        for x in (fq, sup[0][0], proj["Wq"], proj["Wk"], proj["bq"]):
            assert T.grad_check(f, x, eps=2e-3) < 1e-4
