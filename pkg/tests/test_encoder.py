import io
import math

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from conftest import assert_grad_matches
from sftg.encoder import (
    MODEL_MAGIC,
    EgtConfig,
    ModelParams,
    buffer_shapes,
    embed_nodes,
    encode_sequence,
    fr_attention_layer,
    ffn_block,
    forward,
    lift_params,
    load_params,
    param_shapes,
    params_from_tensors,
    read_container,
    represent,
    save_params,
    update_running_stats,
    write_container,
)
from sftg.errors import (
    BadMagicError,
    DegenerateBatchError,
    MalformedHeaderError,
    ShapeError,
    ShapeMismatchError,
    TruncatedFileError,
    ValidationError,
)
from sftg.graph import Adjacency, normalized_laplacian, positional_encodings
from sftg.tensor_core import Tape, Var

TINY = EgtConfig(d=6, heads=2, d_k=3, layers=2, K=2, f=2, n_classes=3, d_e=4, J=4)


def naive_attention(h, Q, K, V, O, mask=None):
    """Per-head, per-pair loops straight from the definition."""
    J = h.shape[0]
    H, dk, _ = Q.shape
    heads = []
    weights = np.zeros((H, J, J))
    for k in range(H):
        out = np.zeros((J, dk))
        for i in range(J):
            support = [j for j in range(J) if mask is None or mask[i, j]]
            logits = [float((Q[k] @ h[i]) @ (K[k] @ h[j])) / math.sqrt(dk) for j in support]
            top = max(logits)
            e = [math.exp(x - top) for x in logits]
            z = sum(e)
            for j, ej in zip(support, e):
                weights[k, i, j] = ej / z
                out[i] += ej / z * (V[k] @ h[j])
        heads.append(out)
    return np.concatenate(heads, axis=1) @ O.T, weights


def bn_eval(x, scale, shift, mean, var, eps=1e-5):
    return (x - mean) / np.sqrt(var + eps) * scale + shift


def straight_line_ffn(h, h_att, l, p):
    t, b = p.tensors, p.buffers
    hb = bn_eval(h + h_att, t[f"norm1.scale.{l}"], t[f"norm1.shift.{l}"], b[f"norm1.mean.{l}"], b[f"norm1.var.{l}"])
    ff = np.maximum(hb @ t[f"W_1.{l}"].T, 0.0) @ t[f"W_2.{l}"].T
    return bn_eval(hb + ff, t[f"norm2.scale.{l}"], t[f"norm2.shift.{l}"], b[f"norm2.mean.{l}"], b[f"norm2.var.{l}"])


def randomize_buffers(p, rng):
    for k in p.buffers:
        p.buffers[k] = rng.uniform(0.5, 1.5, p.buffers[k].shape) if ".var." in k else rng.normal(size=p.buffers[k].shape)
    return p


def path_pe(J, K):
    a = np.zeros((J, J))
    for i in range(J - 1):
        a[i, i + 1] = a[i + 1, i] = 1.0
    return positional_encodings(normalized_laplacian(Adjacency(a, "spatial")), K).vectors


class TestConfig:
    def test_head_product(self):
        with pytest.raises(ValidationError):
            EgtConfig(d=10, heads=3, d_k=3)

    @pytest.mark.parametrize("field", ["layers", "heads", "K", "f"])
    def test_positive(self, field):
        with pytest.raises(ValidationError):
            EgtConfig(**{field: 0})

    def test_header_round_trip(self):
        cfg = EgtConfig(kind="flat", masked=True)
        assert EgtConfig.from_header_ints(cfg.header_ints()) == cfg

    def test_default_shapes(self):
        s = param_shapes(EgtConfig())
        assert s["W_v"] == (64, 3) and s["W_p"] == (64, 8)
        assert s["Q.0"] == (4, 16, 64) and s["O.1"] == (64, 64)
        assert s["W_1.0"] == (128, 64) and s["W_2.0"] == (64, 128)
        assert s["F_1"] == (64, 64) and s["classifier"] == (5, 64)


class TestInit:
    def test_bounds(self):
        p = ModelParams.init(EgtConfig(), seed=3)
        for name, value in p.tensors.items():
            if ".scale." in name:
                assert_array_equal(value, 1.0)
            elif ".shift." in name:
                assert_array_equal(value, 0.0)
            else:
                fan_in = param_shapes(p.config)[name.replace(".bias", "").replace("b_", "W_")][-1]
                assert np.abs(value).max() <= 1 / math.sqrt(fan_in)

    def test_seeded(self):
        assert ModelParams.init(TINY, 7).equals(ModelParams.init(TINY, 7))
        assert not ModelParams.init(TINY, 7).equals(ModelParams.init(TINY, 8))


class TestEmbed:
    def test_zero_inputs_give_bias_sum(self):
        p = ModelParams.init(TINY, 1)
        h = embed_nodes(np.zeros((4, 3)), np.zeros((4, 2)), p)
        assert_allclose(h, np.tile(p.tensors["b_v"] + p.tensors["b_p"], (4, 1)), atol=0)

    def test_identical_nodes(self, rng):
        p = ModelParams.init(TINY, 1)
        v = np.tile(rng.standard_normal(3), (4, 1))
        h = embed_nodes(v, np.tile(rng.standard_normal(2), (4, 1)), p)
        assert_array_equal(h[0], h[3])

    def test_matvec_oracle(self, rng):
        cfg = EgtConfig(d=4, heads=2, d_k=2, K=2, J=3)
        p = ModelParams.init(cfg, 2)
        v, lam = rng.standard_normal((3, 3)), rng.standard_normal((3, 2))
        t = p.tensors
        for i, row in enumerate(embed_nodes(v, lam, p)):
            expected = [sum(t["W_v"][r, c] * v[i, c] for c in range(3)) + t["b_v"][r]
                        + sum(t["W_p"][r, c] * lam[i, c] for c in range(2)) + t["b_p"][r] for r in range(4)]
            assert_allclose(row, expected, rtol=0, atol=1e-12)

    def test_node_count_mismatch(self):
        with pytest.raises(ShapeError):
            embed_nodes(np.zeros((4, 3)), np.zeros((3, 2)), ModelParams.init(TINY))


class TestAttention:
    def test_single_node(self, rng):
        cfg = EgtConfig(d=4, heads=2, d_k=2, J=1)
        p = ModelParams.init(cfg, 0)
        h = rng.standard_normal((1, 4))
        out, w = fr_attention_layer(h, 0, p, return_weights=True)
        assert_array_equal(w, np.ones((2, 1, 1)))
        V = p.tensors["V.0"]
        assert_allclose(out[0], p.tensors["O.0"] @ np.concatenate([V[0] @ h[0], V[1] @ h[0]]), atol=1e-15)

    def test_zero_queries_are_uniform(self, rng):
        p = ModelParams.init(TINY, 0)
        p.tensors["Q.0"] = np.zeros_like(p.tensors["Q.0"])
        h = rng.standard_normal((4, 6))
        out, w = fr_attention_layer(h, 0, p, return_weights=True)
        assert_allclose(w, 0.25, atol=1e-15)
        V, mean = p.tensors["V.0"], h.mean(axis=0)
        assert_allclose(out, np.tile(p.tensors["O.0"] @ np.concatenate([V[0] @ mean, V[1] @ mean]), (4, 1)),
                        atol=1e-12)

    def test_double_loop_oracle(self, rng):
        cfg = EgtConfig(d=4, heads=2, d_k=2, J=3)
        p = ModelParams.init(cfg, 5)
        h = rng.standard_normal((3, 4))
        out, w = fr_attention_layer(h, 0, p, return_weights=True)
        ref_out, ref_w = naive_attention(h, p.tensors["Q.0"], p.tensors["K.0"], p.tensors["V.0"], p.tensors["O.0"])
        assert_allclose(out, ref_out, rtol=0, atol=1e-12)
        assert_allclose(w, ref_w, rtol=0, atol=1e-12)

    def test_masked_oracle(self, rng):
        p = ModelParams.init(TINY, 5)
        adj = np.array([[0, 1, 0, 0], [1, 0, 1, 0], [0, 1, 0, 1], [0, 0, 1, 0]])
        h = rng.standard_normal((4, 6))
        out, w = fr_attention_layer(h, 1, p, adjacency=adj, return_weights=True)
        ref_out, ref_w = naive_attention(h, p.tensors["Q.1"], p.tensors["K.1"], p.tensors["V.1"], p.tensors["O.1"],
                                         mask=(adj + np.eye(4)) > 0)
        assert_allclose(out, ref_out, atol=1e-12)
        assert np.all(w[:, 0, 2:] == 0.0)
        assert_allclose(w.sum(axis=-1), 1.0, atol=1e-12)


class TestFFN:
    def test_zero_ffn_identity_norm(self, rng):
        p = ModelParams.init(TINY, 0)
        p.tensors["W_1.0"][:] = 0.0
        p.tensors["W_2.0"][:] = 0.0
        # running statistics chosen so the normalisation is the identity map
        for n in ("norm1", "norm2"):
            p.buffers[f"{n}.var.0"][:] = 1.0 - 1e-5
        h, att = rng.standard_normal((4, 6)), rng.standard_normal((4, 6))
        assert_allclose(ffn_block(h, att, 0, p), h + att, atol=1e-12)

    def test_negative_preactivation_contributes_nothing(self, rng):
        p = randomize_buffers(ModelParams.init(TINY, 0), rng)
        h, att = rng.standard_normal((4, 6)), rng.standard_normal((4, 6))
        p.tensors["W_1.0"] = -np.abs(p.tensors["W_1.0"])
        p.tensors["norm1.shift.0"][:] = 50.0  # push every normalised entry positive
        t, b = p.tensors, p.buffers
        hb = bn_eval(h + att, t["norm1.scale.0"], t["norm1.shift.0"], b["norm1.mean.0"], b["norm1.var.0"])
        assert np.all(hb @ t["W_1.0"].T < 0)
        expected = bn_eval(hb, t["norm2.scale.0"], t["norm2.shift.0"], b["norm2.mean.0"], b["norm2.var.0"])
        assert_allclose(ffn_block(h, att, 0, p), expected, atol=1e-12)

    def test_straight_line_oracle(self, rng):
        p = randomize_buffers(ModelParams.init(TINY, 4), rng)
        h, att = rng.standard_normal((4, 6)), rng.standard_normal((4, 6))
        for layer in (0, 1):
            assert_allclose(ffn_block(h, att, layer, p), straight_line_ffn(h, att, layer, p), rtol=0, atol=1e-12)

    def test_train_mode_single_row(self, rng):
        with pytest.raises(DegenerateBatchError):
            ffn_block(rng.standard_normal((1, 6)), rng.standard_normal((1, 6)), 0, ModelParams.init(TINY), "train")

    def test_bad_mode(self, rng):
        with pytest.raises(ValidationError):
            ffn_block(np.zeros((2, 6)), np.zeros((2, 6)), 0, ModelParams.init(TINY), "predict")


class TestEncodeSequence:
    def test_f1_sequence_is_snapshot(self, rng):
        cfg = EgtConfig(d=6, heads=2, d_k=3, layers=1, K=2, f=1, J=4)
        rep = encode_sequence([rng.standard_normal((4, 3))], path_pe(4, 2), ModelParams.init(cfg))
        assert_array_equal(rep.S, rep.snapshots[0])

    def test_identical_snapshots(self, rng):
        x = rng.standard_normal((4, 3))
        rep = encode_sequence([x, x], path_pe(4, 2), ModelParams.init(TINY))
        assert_array_equal(rep.snapshots[0], rep.snapshots[1])
        assert_allclose(rep.S, rep.snapshots[0], atol=1e-15)

    def test_recomputation_oracle(self, rng):
        p = randomize_buffers(ModelParams.init(TINY, 9), rng)
        pe = path_pe(4, 2)
        snaps = [rng.standard_normal((4, 3)) for _ in range(2)]
        rep = encode_sequence(snaps, pe, p)
        independent = []
        for x in snaps:
            h = embed_nodes(x, pe, p)
            for layer in range(TINY.layers):
                h = straight_line_ffn(h, fr_attention_layer(h, layer, p), layer, p)
            independent.append(h)
        assert_allclose(rep.nodes, np.stack(independent), atol=1e-12)
        assert_allclose(rep.snapshots, rep.nodes.mean(axis=1), atol=1e-12)
        assert_allclose(rep.S, np.mean(independent, axis=(0, 1)), atol=1e-12)

    def test_empty(self):
        with pytest.raises(ValidationError):
            encode_sequence([], path_pe(4, 2), ModelParams.init(TINY))

    def test_wrong_count(self, rng):
        with pytest.raises(ShapeError):
            encode_sequence([rng.standard_normal((4, 3))] * 3, path_pe(4, 2), ModelParams.init(TINY))

    def test_eval_is_pure(self, rng):
        p = ModelParams.init(EgtConfig(), 0)
        pe = path_pe(16, 8)
        x = rng.standard_normal((5, 4, 16, 3))
        assert represent(p, x, pe).tobytes() == represent(p, x, pe).tobytes()

    def test_batching_does_not_change_results(self, rng):
        p = randomize_buffers(ModelParams.init(TINY, 1), rng)
        x = rng.standard_normal((5, 2, 4, 3))
        assert_allclose(represent(p, x, path_pe(4, 2), batch_size=2), represent(p, x, path_pe(4, 2)), atol=1e-14)


def test_permutation_equivariance(rng):
    cfg = EgtConfig(d=8, heads=2, d_k=4, layers=2, K=3, f=2, J=6)
    p = randomize_buffers(ModelParams.init(cfg, 3), rng)
    pe = path_pe(6, 3)
    x = rng.standard_normal((2, 6, 3))
    base = encode_sequence(list(x), pe, p)
    for _ in range(5):
        perm = rng.permutation(6)
        moved = encode_sequence(list(x[:, perm]), pe[perm], p)
        assert_allclose(moved.nodes, base.nodes[:, perm], atol=1e-9)
        assert_allclose(moved.S, base.S, atol=1e-9)


@pytest.mark.parametrize("train", [False, True], ids=["eval", "train"])
def test_gradient_of_sequence_scalar(train, rng):
    p = randomize_buffers(ModelParams.init(TINY, 2), rng)
    x, pe = rng.standard_normal((3, 2, 4, 3)), path_pe(4, 2)
    w = rng.standard_normal((3, 6))
    names = [k for k in p.tensors if k in param_shapes(TINY) and not k.startswith(("F_", "proj", "classifier"))]

    def fn(**tensors):
        taped = isinstance(tensors[names[0]], Var)
        t = tensors[names[0]].tape if taped else Tape()
        lifted = {k: t.lift(v) for k, v in tensors.items()}
        res = forward(t, {**{k: t.constant(v) for k, v in p.tensors.items()}, **lifted}, TINY, x, pe,
                      p.buffers, train=train)
        out = (res.S * w).sum()
        return out if taped else float(out.value)

    assert_grad_matches(fn, {k: p.tensors[k] for k in names})


def test_running_stats_momentum(rng):
    p = ModelParams.init(TINY)
    t = Tape()
    res = forward(t, lift_params(t, p), TINY, rng.standard_normal((3, 2, 4, 3)), path_pe(4, 2), p.buffers, train=True)
    before = {k: v.copy() for k, v in p.buffers.items()}
    update_running_stats(p, res.batch_stats)
    for k, v in res.batch_stats.items():
        assert_allclose(p.buffers[k], 0.9 * before[k] + 0.1 * v, atol=1e-15)


def test_other_kinds_forward(rng):
    x = rng.standard_normal((3, 2, 4, 3))
    for kind in ("flat", "channel"):
        cfg = EgtConfig(d=6, heads=2, d_k=3, f=2, J=4, kind=kind)
        assert buffer_shapes(cfg) == {}
        assert represent(ModelParams.init(cfg), x).shape == (3, 6)
    flat = ModelParams.init(EgtConfig(d=6, heads=2, d_k=3, f=2, J=4, kind="flat"))
    expected = x.mean(axis=1).reshape(3, -1) @ flat.tensors["W_flat"].T + flat.tensors["b_flat"]
    assert_allclose(represent(flat, x), expected, atol=1e-12)


class TestContainer:
    def params(self):
        return randomize_buffers(ModelParams.init(TINY, 6), np.random.default_rng(0))

    def test_round_trip(self, tmp_path):
        p = self.params()
        save_params(p, tmp_path / "m.ckpt")
        assert load_params(tmp_path / "m.ckpt").equals(p)

    def test_layout_starts_with_magic_and_config(self, tmp_path):
        save_params(self.params(), tmp_path / "m.ckpt")
        raw = (tmp_path / "m.ckpt").read_bytes()
        assert raw[:4] == MODEL_MAGIC
        assert list(np.frombuffer(raw[12:12 + 8 * 11], "<i8")) == TINY.header_ints()

    def test_bad_magic(self, tmp_path):
        save_params(self.params(), tmp_path / "m.ckpt")
        raw = bytearray((tmp_path / "m.ckpt").read_bytes())
        raw[:4] = b"XXXX"
        (tmp_path / "m.ckpt").write_bytes(bytes(raw))
        with pytest.raises(BadMagicError, match="EGT1"):
            load_params(tmp_path / "m.ckpt")

    @pytest.mark.parametrize("cut", [2, 10, 60, 200, -1])
    def test_truncated(self, tmp_path, cut):
        save_params(self.params(), tmp_path / "m.ckpt")
        raw = (tmp_path / "m.ckpt").read_bytes()
        (tmp_path / "m.ckpt").write_bytes(raw[:cut])
        with pytest.raises((TruncatedFileError, BadMagicError)):
            load_params(tmp_path / "m.ckpt")

    def test_wrong_config_names_tensor(self, tmp_path):
        save_params(self.params(), tmp_path / "m.ckpt")
        other = EgtConfig(d=8, heads=2, d_k=4, layers=2, K=2, f=2, n_classes=3, d_e=4, J=4)
        with pytest.raises(ShapeMismatchError, match="W_v"):
            load_params(tmp_path / "m.ckpt", expected=other)

    def test_tensor_shape_tampered(self):
        p = self.params()
        tensors = dict(p.tensors)
        tensors["O.1"] = np.zeros((6, 5))
        buf = io.BytesIO()
        write_container(buf, MODEL_MAGIC, TINY, {**tensors, **p.buffers})
        config, _, loaded = read_container(buf.getvalue(), MODEL_MAGIC)
        with pytest.raises(ShapeMismatchError, match="O.1"):
            params_from_tensors(config, loaded)

    def test_corrupt_header(self, tmp_path):
        save_params(self.params(), tmp_path / "m.ckpt")
        raw = bytearray((tmp_path / "m.ckpt").read_bytes())
        raw[12:20] = (99).to_bytes(8, "little")  # model kind index out of range
        (tmp_path / "m.ckpt").write_bytes(bytes(raw))
        with pytest.raises(MalformedHeaderError):
            load_params(tmp_path / "m.ckpt")

    def test_trailing_bytes(self, tmp_path):
        save_params(self.params(), tmp_path / "m.ckpt")
        with open(tmp_path / "m.ckpt", "ab") as fh:
            fh.write(b"\0" * 8)
        with pytest.raises(ShapeMismatchError):
            load_params(tmp_path / "m.ckpt")
