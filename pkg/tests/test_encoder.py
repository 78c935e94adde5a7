import math

import numpy as np
import pytest

from rankdistill import tensor as T
from rankdistill.encoder import (CLS, PAD, SEP, EncoderConfig, EncoderParams, encode,
                                 encode_pairs, init_params, load_params, pack_batch, pack_input, ranking_score, save_params)
from rankdistill.tensor import Tensor, grad_check, sample_coords

SMALL = EncoderConfig(num_layers=2, hidden=16, heads=2, ffn_dim=32, vocab=30,
                      max_query_len=4, max_doc_len=6, init_std=0.2, seed=3)


# -- config / init --------------------------------------------------------
def test_init_is_deterministic():
    a, b = init_params(SMALL), init_params(SMALL)
    assert a.names() == b.names()
    for name in a.names():
        assert a[name].data.tobytes() == b[name].data.tobytes()


def test_seed_changes_weights():
    a = init_params(SMALL)
    b = init_params(EncoderConfig(**{**SMALL.to_dict(), "seed": 4}))
    assert any(not np.array_equal(a[n].data, b[n].data) for n in a.names())


def test_reference_student_shapes():
    cfg = EncoderConfig(num_layers=4, hidden=312, heads=12, ffn_dim=1200, vocab=50,
                        max_query_len=32, max_doc_len=120)
    p = init_params(cfg)
    assert p["layer0.attn.q.weight"].shape == (312, 312)
    assert p["layer3.attn.q.weight"].shape == (312, 312)
    assert p["emb.position"].shape == (32 + 120 + 3, 312)


def test_init_statistics():
    p = init_params(EncoderConfig(hidden=64, heads=4, ffn_dim=256, vocab=500, seed=1))
    w = p["emb.token"].data
    assert np.max(np.abs(w)) <= 2 * 0.02
    assert abs(w.std() - 0.02 * 0.88) < 0.002  # truncation at 2 sigma shrinks the std
    assert np.all(p["layer0.attn.q.bias"].data == 0)
    assert np.all(p["layer1.ffn.ln.gain"].data == 1)


def test_heads_must_divide_hidden():
    with pytest.raises(ValueError, match="divisible"):
        EncoderConfig(hidden=30, heads=4)


def test_positional_table_too_short():
    with pytest.raises(ValueError):
        EncoderConfig(max_query_len=8, max_doc_len=8, max_positions=10)


def test_config_round_trip():
    assert EncoderConfig.from_dict(SMALL.to_dict()) == SMALL


# -- packing --------------------------------------------------------------
def test_pack_truncates_query_to_32():
    cfg = EncoderConfig(vocab=100, max_query_len=32, max_doc_len=120)
    ids, seg, mask = pack_input(list(range(40)), [5, 6], cfg)
    first_sep = list(ids).index(SEP)
    assert first_sep - 1 == 32
    assert len(ids) == 32 + 2 + 3


def test_pack_truncates_doc_to_120():
    cfg = EncoderConfig(vocab=100, max_query_len=32, max_doc_len=120)
    ids, _, _ = pack_input([1], list(range(90)) * 2, cfg)
    assert len(ids) == 1 + 120 + 3


def test_pack_minimal():
    ids, seg, mask = pack_input([7], [9], SMALL)
    assert ids.tolist() == [CLS, 10, SEP, 12, SEP]
    assert seg.tolist() == [0, 0, 0, 1, 1]
    assert mask.tolist() == [1] * 5


def test_pack_short_doc_has_no_padding():
    ids, seg, mask = pack_input([1, 2], [3, 4, 5], SMALL)
    assert ids[-1] == SEP and PAD not in ids.tolist()
    assert mask.all()


@pytest.mark.parametrize("q,d", [([], [1]), ([1], [])])
def test_pack_rejects_empty(q, d):
    with pytest.raises(ValueError):
        pack_input(q, d, SMALL)


def test_pack_batch_right_pads():
    ids, seg, mask = pack_batch([([1], [2]), ([1, 2, 3], [4, 5])], SMALL)
    assert ids.shape == (2, 8)
    assert ids[0, 5:].tolist() == [PAD] * 3
    assert mask[0].tolist() == [1] * 5 + [0] * 3
    assert mask[1].all()


# -- forward --------------------------------------------------------------
def test_trace_shapes_single():
    p = init_params(SMALL)
    tr = encode(p, *pack_input([1, 2], [3, 4, 5], SMALL))
    S = 2 + 3 + 3
    assert tr.emb_out.shape == (S, 16)
    assert tr.num_layers == 2
    assert all(h.shape == (S, 16) for h in tr.hidden)
    assert all(a.shape == (2, S, S) for a in tr.attn_scores)
    assert tr.logits.shape == (2,)


def test_masked_key_columns_are_very_negative():
    p = init_params(SMALL)
    tr = encode(p, *pack_batch([([1], [2]), ([1, 2, 3, 4], [5, 6, 7, 8, 9, 10])], SMALL))
    for a in tr.attn_scores:
        assert np.all(a.data[0, :, :, 5:] <= -1e4)
        assert np.all(a.data[1] > -1e4)


def test_padding_content_does_not_change_logits():
    p = init_params(SMALL)
    ids, seg, mask = pack_batch([([1, 2], [3]), ([1, 2, 3, 4], [5, 6, 7, 8, 9, 10])], SMALL)
    base = encode(p, ids, seg, mask).logits.data[0]
    ids2 = ids.copy()
    ids2[0, mask[0] == 0] = np.random.default_rng(0).integers(3, 33, size=(mask[0] == 0).sum())
    seg2 = seg.copy()
    seg2[0, mask[0] == 0] = 1 - seg2[0, mask[0] == 0]
    np.testing.assert_allclose(encode(p, ids2, seg2, mask).logits.data[0], base, rtol=0, atol=1e-12)


def test_batched_matches_single():
    p = init_params(SMALL)
    pairs = [([1, 2], [3, 4, 5]), ([6], [7, 8])]
    batched = encode_pairs(p, pairs).logits.data
    for i, (q, d) in enumerate(pairs):
        single = encode(p, *pack_input(q, d, SMALL)).logits.data
        np.testing.assert_allclose(batched[i], single, rtol=0, atol=1e-12)


def test_out_of_vocab_rejected():
    p = init_params(SMALL)
    ids, seg, mask = pack_input([1], [SMALL.vocab], SMALL)
    with pytest.raises(IndexError):
        encode(p, ids, seg, mask)


def test_mismatched_shapes_rejected():
    p = init_params(SMALL)
    ids, seg, mask = pack_input([1], [2], SMALL)
    with pytest.raises(T.ShapeError):
        encode(p, ids, seg[:-1], mask)


# -- ranking score --------------------------------------------------------
def test_score_symmetric_logits():
    assert ranking_score(Tensor([0.0, 0.0])).item() == 0.5


def test_score_monotone():
    assert ranking_score(Tensor([3.0, 0.0])).item() > ranking_score(Tensor([1.0, 0.0])).item()


def test_score_matches_sigmoid():
    expected = 1.0 / (1.0 + math.exp(-2.0))
    assert ranking_score(Tensor([1.0, -1.0])).item() == pytest.approx(expected, abs=1e-15)
    assert round(expected, 4) == 0.8808


def test_logit_scoring_preserves_order():
    z = np.random.default_rng(7).standard_normal((50, 2)) * 4
    prob = ranking_score(Tensor(z)).data
    logit = ranking_score(Tensor(z), "logit").data
    np.testing.assert_array_equal(np.argsort(-prob, kind="stable"), np.argsort(-logit, kind="stable"))
    assert np.all((prob > 0) & (prob < 1))


def test_unknown_scoring_mode():
    with pytest.raises(ValueError):
        ranking_score(Tensor([0.0, 1.0]), "rank")


def test_score_gradient_on_parameter_subset():
    p = init_params(SMALL)
    ids, seg, mask = pack_batch([([1, 2], [3, 4, 5]), ([6], [7, 8])], SMALL)
    names = p.names()
    rng = np.random.default_rng(11)
    tensors = [p[n] for n in names]

    def f(*ts):
        q = dict(zip(names, ts))
        return ranking_score(encode(EncoderParams(SMALL, q), ids, seg, mask)).sum()

    probe = sample_coords(tensors, 50, rng)
    assert grad_check(f, tensors, h=1e-5, coords=probe) < 1e-4


# -- checkpoints ----------------------------------------------------------
def test_checkpoint_round_trip_is_bit_exact(tmp_path):
    p = init_params(SMALL)
    save_params(p, tmp_path / "m.npz")
    q = load_params(tmp_path / "m.npz")
    assert q.config == p.config
    assert q.names() == p.names()
    for n in p.names():
        assert q[n].data.tobytes() == p[n].data.tobytes()


def test_checkpoint_rejects_foreign_file(tmp_path):
    np.savez(tmp_path / "x.npz", __manifest__=np.frombuffer(b'{"format": "other"}', dtype=np.uint8))
    with pytest.raises(ValueError, match="not an encoder"):
        load_params(tmp_path / "x.npz")
