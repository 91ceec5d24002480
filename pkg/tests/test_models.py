import math

import numpy as np
import pytest

from mhim_mil.errors import EmptyBag, IncompatibleCheckpoint, LayerOutOfRange, LengthMismatch
from mhim_mil.models import (AttentionScores, GatedAttentionModel, MsaModel, attention_pool,
                             build_model, classify, extract_teacher_attention,
                             gated_attention_scores, load_checkpoint, model_from_checkpoint,
                             msa_forward, save_checkpoint)
from mhim_mil.tensor import Tensor, finite_diff_check
from mhim_mil.trainer import classification_loss


def set_params(model, **values):
    for name, v in values.items():
        model.params[name].data = np.array(v, dtype=np.float64)


class TestGatedAttention:
    def test_zero_gates_give_uniform(self):
        m = GatedAttentionModel(d_in=3, dim=4, attn_dim=5, seed=0)
        set_params(m, attn_V=np.zeros((4, 5)), attn_U=np.zeros((4, 5)))
        z = np.random.default_rng(0).normal(size=(7, 4))
        np.testing.assert_allclose(gated_attention_scores(z, m).values, np.full((1, 7), 1 / 7))

    def test_singleton(self):
        m = GatedAttentionModel(d_in=3, dim=4, attn_dim=5, seed=1)
        np.testing.assert_array_equal(gated_attention_scores(np.ones((1, 4)), m).values, [[1.0]])

    def test_hand_evaluated_pair(self):
        m = GatedAttentionModel(d_in=1, dim=1, attn_dim=1, seed=0)
        set_params(m, attn_V=[[1.0]], attn_U=[[0.0]], attn_w=[[2.0]])
        logit = 2 * math.tanh(1.0) * 0.5
        expected = [1 / (1 + math.exp(-logit)), math.exp(-logit) / (1 + math.exp(-logit))]
        got = gated_attention_scores(np.array([[1.0], [0.0]]), m).values
        np.testing.assert_allclose(got, [expected], rtol=0, atol=1e-14)
        np.testing.assert_allclose(got, [[0.68170, 0.31830]], atol=1e-5)

    def test_empty_bag(self):
        m = GatedAttentionModel(d_in=3, dim=4, attn_dim=5)
        with pytest.raises(EmptyBag):
            gated_attention_scores(np.zeros((0, 4)), m)
        with pytest.raises(EmptyBag):
            m.forward(np.zeros((0, 3)))

    @pytest.mark.parametrize("seed", range(20))
    def test_scores_sum_to_one(self, seed):
        rng = np.random.default_rng(seed)
        m = GatedAttentionModel(d_in=6, dim=8, attn_dim=4, seed=seed)
        out = m.forward(rng.normal(scale=5, size=(rng.integers(1, 30), 6)))
        assert abs(out.attention.values.sum() - 1) <= 1e-12


class TestAttentionPool:
    def test_mean(self):
        np.testing.assert_array_equal(attention_pool(np.array([[1, 3], [3, 1]]), [0.5, 0.5]).data,
                                      [[2, 2]])

    def test_one_hot(self):
        z = np.array([[1.0, 2.0], [5.0, 6.0]])
        np.testing.assert_array_equal(attention_pool(z, AttentionScores(np.array([[1.0, 0.0]]))).data,
                                      z[:1])

    def test_convex_combination(self):
        np.testing.assert_array_equal(attention_pool(np.array([[0, 0], [4, 8]]), [0.25, 0.75]).data,
                                      [[3, 6]])

    def test_length_mismatch(self):
        with pytest.raises(LengthMismatch):
            attention_pool(np.ones((3, 2)), [0.5, 0.5])


def scratch_msa(z, params, n_layers, n_heads):
    """Step-by-step numpy forward written independently of the tape ops."""
    d = z.shape[1]
    dh = d // n_heads
    x = np.vstack([params["class_token"].data, z])
    maps = []
    for layer in range(n_layers):
        heads, per_head = [], []
        for h in range(n_heads):
            q = x @ params[f"msa.l{layer}.h{h}.W_Q"].data
            k = x @ params[f"msa.l{layer}.h{h}.W_K"].data
            v = x @ params[f"msa.l{layer}.h{h}.W_V"].data
            s = q @ k.T / math.sqrt(dh)
            a = np.exp(s - s.max(axis=1, keepdims=True))
            a /= a.sum(axis=1, keepdims=True)
            per_head.append(a)
            heads.append(a @ v)
        x = x + np.hstack(heads) @ params[f"msa.l{layer}.W_O"].data
        maps.append(per_head)
    return x[0], maps


class TestMsa:
    def test_zero_query_key_is_uniform(self):
        m = MsaModel(d_in=4, dim=4, n_heads=2, n_layers=2, seed=0)
        for name in m.params:
            if name.endswith("W_Q") or name.endswith("W_K"):
                m.params[name].data[:] = 0.0
        z = np.random.default_rng(0).normal(size=(5, 4))
        _, layers = msa_forward(z, m)
        for a in layers:
            np.testing.assert_allclose(a, np.full((2, 6, 6), 1 / 6))

    def test_uniform_average_case(self):
        m = MsaModel(d_in=4, dim=4, n_heads=2, n_layers=1, seed=0)
        for name in m.params:
            if name.endswith("W_Q") or name.endswith("W_K"):
                m.params[name].data[:] = 0.0
        eye = np.eye(4)
        set_params(m, **{"msa.l0.h0.W_V": eye[:, :2], "msa.l0.h1.W_V": eye[:, 2:],
                         "msa.l0.W_O": eye, "class_token": np.zeros((1, 4))})
        z = np.random.default_rng(3).normal(size=(6, 4))
        f, _ = msa_forward(z, m)
        rows = np.vstack([np.zeros((1, 4)), z])
        np.testing.assert_allclose(f.data, rows.mean(axis=0, keepdims=True), rtol=1e-12, atol=1e-14)

    @pytest.mark.parametrize("n_layers,n_heads", [(1, 1), (2, 2), (2, 4)])
    def test_matches_scratchpad_forward(self, n_layers, n_heads):
        rng = np.random.default_rng(n_layers * 10 + n_heads)
        m = MsaModel(d_in=3, dim=4, n_heads=n_heads, n_layers=n_layers, seed=rng)
        m.params["class_token"].data = rng.normal(scale=0.3, size=(1, 4))
        z = rng.normal(size=(2 if n_layers == 1 else 5, 4))
        f, layers = msa_forward(z, m)
        f_ref, maps_ref = scratch_msa(z, m.params, n_layers, n_heads)
        np.testing.assert_allclose(f.data[0], f_ref, rtol=1e-12, atol=1e-14)
        for got, ref in zip(layers, maps_ref):
            np.testing.assert_allclose(got, np.stack(ref), rtol=1e-12, atol=1e-15)

    @pytest.mark.parametrize("seed", range(10))
    def test_permutation_invariance(self, seed):
        rng = np.random.default_rng(seed)
        m = MsaModel(d_in=5, dim=8, n_heads=2, n_layers=2, seed=seed)
        m.params["class_token"].data = rng.normal(size=(1, 8))
        x = rng.normal(size=(9, 5))
        a = m.forward(x).embedding.data
        b = m.forward(x[rng.permutation(9)]).embedding.data
        np.testing.assert_allclose(a, b, rtol=0, atol=1e-9)

    def test_heads_must_divide_dim(self):
        with pytest.raises(Exception):
            MsaModel(d_in=3, dim=5, n_heads=2)

    def test_parameter_names_encode_layer_and_head(self):
        m = MsaModel(d_in=3, dim=4, n_heads=2, n_layers=2)
        for layer in range(2):
            for head in range(2):
                for w in ("W_Q", "W_K", "W_V"):
                    assert f"msa.l{layer}.h{head}.{w}" in m.params
            assert f"msa.l{layer}.W_O" in m.params
        assert np.all(m.params["class_token"].data == 0)


class TestClassify:
    def test_zero_head(self):
        m = GatedAttentionModel(d_in=2, dim=2, attn_dim=2)
        set_params(m, cls_W=np.zeros((2, 1)), cls_b=[[0.0]])
        _, p = classify(Tensor([[3.0, -1.0]]), m)
        assert p.item() == 0.5

    def test_sigmoid_identity(self):
        m = GatedAttentionModel(d_in=2, dim=1, attn_dim=2)
        set_params(m, cls_W=[[0.0]], cls_b=[[math.log(3)]])
        _, p = classify(Tensor([[1.0]]), m)
        assert p.item() == pytest.approx(0.75, abs=1e-15)

    def test_scalar_evaluation(self):
        m = GatedAttentionModel(d_in=2, dim=2, attn_dim=2)
        set_params(m, cls_W=[[1.0], [-1.0]], cls_b=[[0.5]])
        logit, p = classify(Tensor([[1.0, 2.0]]), m)
        assert logit.item() == -0.5
        assert p.item() == pytest.approx(1 / (1 + math.exp(0.5)), abs=1e-15)
        assert p.item() == pytest.approx(0.37754, abs=1e-5)

    @pytest.mark.parametrize("kind", ["gated", "msa"])
    def test_probability_is_sigmoid_of_logit(self, kind):
        m = build_model(kind, d_in=4, dim=4, attn_dim=4, n_heads=2, n_layers=1, seed=5)
        out = m.forward(np.random.default_rng(5).normal(size=(6, 4)))
        assert abs(out.probability.item() - 1 / (1 + math.exp(-out.logit.item()))) <= 1e-12


class TestExtractAttention:
    def test_gated_pass_through(self):
        att = extract_teacher_attention(AttentionScores(np.array([[0.2, 0.8]])), "gated")
        np.testing.assert_array_equal(att.values, [[0.2, 0.8]])

    def test_msa_drops_class_column(self):
        layer = np.array([[[0.25, 0.25, 0.5], [1 / 3] * 3, [1 / 3] * 3]])
        att = extract_teacher_attention([layer], "msa", "first")
        np.testing.assert_allclose(att.values, [[1 / 3, 2 / 3]], rtol=1e-15)

    def test_first_layer_not_last(self):
        rng = np.random.default_rng(7)
        m = MsaModel(d_in=4, dim=4, n_heads=2, n_layers=2, seed=7)
        m.params["class_token"].data = rng.normal(size=(1, 4))
        out = m.forward(rng.normal(size=(5, 4)))
        first = extract_teacher_attention(out, "msa", "first")
        last = extract_teacher_attention(out, "msa", "last")
        ref = out.layer_attention[0][:, 0, 1:]
        np.testing.assert_allclose(first.values, ref / ref.sum(axis=1, keepdims=True))
        assert first.values.shape == (2, 5)
        assert not np.allclose(first.values, last.values)
        np.testing.assert_allclose(first.values.sum(axis=1), 1.0, atol=1e-9)

    def test_layer_out_of_range(self):
        with pytest.raises(LayerOutOfRange):
            extract_teacher_attention([np.ones((1, 3, 3)) / 3], "msa", 1)


@pytest.mark.parametrize("kind", ["gated", "msa"])
def test_classification_loss_gradient_check(kind):
    rng = np.random.default_rng(11)
    m = build_model(kind, d_in=16, dim=16, attn_dim=8, n_heads=2, n_layers=2, seed=11)
    if kind == "msa":
        m.params["class_token"].data = rng.normal(scale=0.5, size=(1, 16))
    x = rng.normal(size=(8, 16))
    # h=1e-5 roundoff (~1e-11 absolute) swamps coordinates with |g| ~ 1e-8
    err = finite_diff_check(lambda p: classification_loss(m.with_params(p).forward(x).probability, 1),
                            m.params, h=1e-4)
    assert err <= 1e-4


class TestCheckpoint:
    @pytest.mark.parametrize("kind", ["gated", "msa"])
    def test_lossless_roundtrip(self, kind, tmp_path):
        m = build_model(kind, d_in=5, dim=4, attn_dim=3, n_heads=2, n_layers=2, seed=3)
        m.params["cls_b"].data[0, 0] = 0.1 + 0.2  # non-terminating binary fraction
        save_checkpoint(m.params, tmp_path / "a.ckpt")
        loaded = load_checkpoint(tmp_path / "a.ckpt")
        assert loaded.compatible(m.params)
        assert loaded.digest() == m.params.digest()
        save_checkpoint(loaded, tmp_path / "b.ckpt")
        assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()

    def test_line_format(self, tmp_path):
        m = GatedAttentionModel(d_in=2, dim=2, attn_dim=2, seed=0)
        save_checkpoint(m.params, tmp_path / "c.ckpt")
        first = (tmp_path / "c.ckpt").read_text().splitlines()[0].split()
        assert first[0] == "attn_U" and first[1] == "2x2" and len(first) == 6

    def test_incompatible(self, tmp_path):
        save_checkpoint(GatedAttentionModel(d_in=2, dim=2, attn_dim=2).params, tmp_path / "g.ckpt")
        with pytest.raises(IncompatibleCheckpoint):
            model_from_checkpoint(MsaModel(d_in=2, dim=2, n_heads=1, n_layers=1), tmp_path / "g.ckpt")
