import numpy as np
import pytest

from fairwell.adcore import Graph
from fairwell.data import SubjectRecord
from fairwell.encoders import (
    EmbeddingSet, Model, SegmentEncoder, encode_segments, load_checkpoint, mean_exact,
    model_from_config, pool, save_checkpoint,
)


def identity_encoder(dim=3):
    return SegmentEncoder("m", dim, [], dim, [np.eye(dim)], [np.zeros(dim)])


def test_identity_encoder_passes_input_through():
    emb = encode_segments(identity_encoder(), [[1.0, -2.0, 0.5]], "s")
    assert emb.segments.tolist() == [[1.0, -2.0, 0.5]]


def test_one_embedding_per_segment():
    enc = SegmentEncoder.init("m", 4, [5], 3, np.random.default_rng(0))
    emb = encode_segments(enc, np.ones((5, 4)))
    assert emb.segments.shape == (5, 3)


def test_zero_weights_give_bias():
    enc = SegmentEncoder("m", 2, [], 2, [np.zeros((2, 2))], [np.array([0.5, -1.0])])
    assert encode_segments(enc, np.random.default_rng(1).normal(size=(4, 2))).segments.tolist() == [[0.5, -1.0]] * 4


def test_segment_validation():
    enc = identity_encoder()
    with pytest.raises(ValueError, match="at least one segment"):
        encode_segments(enc, np.zeros((0, 3)))
    with pytest.raises(ValueError, match="'m'"):
        encode_segments(enc, np.zeros((2, 4)))


def test_pool_examples():
    assert pool(EmbeddingSet("s", "m", [[1.0, 3.0], [3.0, 1.0]])).pooled.tolist() == [2.0, 2.0]
    assert pool(EmbeddingSet("s", "m", [[5.0, 6.0]])).pooled.tolist() == [5.0, 6.0]


def test_pool_matches_naive_sum():
    segs = np.random.default_rng(2).normal(size=(100, 6))
    naive = [sum(segs[:, j]) / 100 for j in range(6)]
    assert np.allclose(pool(EmbeddingSet("s", "m", segs)).pooled, naive, atol=1e-12, rtol=0)


def test_pool_exact_under_permutation():
    rng = np.random.default_rng(3)
    segs = rng.normal(size=(50, 4)) * 10.0 ** rng.integers(-8, 8, size=(50, 1))
    assert np.array_equal(mean_exact(segs), mean_exact(segs[rng.permutation(50)]))


def test_per_segment_equals_batched():
    enc = SegmentEncoder.init("m", 3, [4, 4], 2, np.random.default_rng(4))
    x = np.random.default_rng(5).normal(size=(6, 3))
    one_by_one = np.vstack([enc(row) for row in x])
    # BLAS kernels for one row and for a block may round differently in the last bit
    assert np.allclose(one_by_one, enc(x), rtol=1e-12, atol=1e-14)


def test_graph_apply_matches_numpy():
    enc = SegmentEncoder.init("m", 3, [4], 2, np.random.default_rng(6))
    x = np.random.default_rng(7).normal(size=(5, 3))
    g = Graph()
    nodes = enc.declare(g)
    g.set_output(enc.apply(g, nodes, g.constant(x)))
    assert np.allclose(g.forward(enc.bind()).values, enc(x), atol=1e-14)


def test_model_requires_shared_output_dim():
    rng = np.random.default_rng(0)
    with pytest.raises(ValueError, match="output_dim"):
        Model({"a": SegmentEncoder.init("a", 3, [], 2, rng), "b": SegmentEncoder.init("b", 4, [], 3, rng)})


def test_model_embed_missing_modality():
    model = model_from_config({"a": 2, "b": 3}, [4], 2, seed=0)
    rec = SubjectRecord("s1", "M", 1, {"a": np.ones((2, 2))})
    with pytest.raises(ValueError, match="'b'"):
        model.embed(rec)


def test_checkpoint_round_trip(tmp_path):
    model = model_from_config({"a": 2, "b": 3}, [4], 2, seed=9, projection_dim=3)
    save_checkpoint(model, tmp_path / "ck.json", "abc")
    loaded, chash = load_checkpoint(tmp_path / "ck.json")
    assert chash == "abc"
    for k, v in model.params().items():
        assert np.array_equal(loaded.params()[k], v)
    rec = SubjectRecord("s1", "M", 1, {"a": np.ones((2, 2)), "b": np.arange(9.0).reshape(3, 3)})
    for name in ("a", "b"):
        assert np.array_equal(model.embed(rec)[name].pooled, loaded.embed(rec)[name].pooled)
