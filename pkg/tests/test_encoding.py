"""Positional-table properties, patch partition, and conditioning embeddings."""

import numpy as np
import pytest

from rollcast import diffcore as dc
from rollcast.diffcore import Tensor
from rollcast.encoding import (
    IntervalEmbedding,
    TemporalEmbedding,
    TokenizerConfig,
    add_positional,
    conventional_pe,
    patchify,
    ring_pe_2d,
    similarity_matrix,
    tokenize,
    unpatchify,
)
from rollcast.gridio import GridField, GridSpec


def circular_distance(a, b, w):
    return min(abs(a - b), w - abs(a - b))


# -- ring positional encoding -----------------------------------------------------


def test_ring_similarity_depends_only_on_circular_distance():
    # brute force over all longitude pairs on one latitude row
    for w, D in [(8, 16), (16, 64)]:
        table = ring_pe_2d(4, w, D)
        sim = similarity_matrix(table)[:w, :w]  # row 0 of the token grid
        for a in range(w):
            for b in range(w):
                d = circular_distance(a, b, w)
                assert abs(sim[a, b] - sim[0, d]) < 1e-9


def test_ring_hand_picked_equal_distance_pairs():
    w = 8
    sim = similarity_matrix(ring_pe_2d(4, w, 16))[:w, :w]
    assert abs(sim[0, 1] - sim[0, 7]) < 1e-9  # dis 1 both ways around
    assert abs(sim[2, 4] - sim[6, 0]) < 1e-9  # dis 2 both


def test_ring_self_similarity_constant_along_a_row():
    table = ring_pe_2d(4, 8, 16)
    sim = similarity_matrix(table)
    diag = np.diag(sim)[:8]
    np.testing.assert_allclose(diag, diag[0], atol=1e-9)


def test_ring_latitude_axis_is_not_circular():
    h, w = 4, 8
    sim = similarity_matrix(ring_pe_2d(h, w, 16))
    same_col_adjacent = sim[0 * w, 1 * w]  # rows 0 and 1, same longitude
    same_col_seam = sim[0 * w, (h - 1) * w]  # rows 0 and h-1
    assert abs(same_col_seam - same_col_adjacent) > 1e-3


def test_ring_vs_conventional_endpoint_contrast():
    for w, D in [(8, 16), (16, 64), (32, 64)]:
        ring = similarity_matrix(ring_pe_2d(4, w, D))[:w, :w]
        conv = similarity_matrix(conventional_pe(w, D))
        assert ring[0, w - 1] >= ring[0, 2]  # endpoints as close as neighbors
        assert conv[0, w - 1] < conv[0, 1]  # flat table: endpoints look far


# -- conventional positional encoding ------------------------------------------------


def test_conventional_row_zero_alternates_zero_one():
    table = conventional_pe(8, 16).table
    np.testing.assert_allclose(table[0, 0::2], 0.0, atol=1e-15)
    np.testing.assert_allclose(table[0, 1::2], 1.0, atol=1e-15)


def test_conventional_table_deterministic():
    a = conventional_pe(16, 32).table
    b = conventional_pe(16, 32).table
    np.testing.assert_array_equal(a, b)


def test_conventional_similarity_monotone_near_diagonal():
    sim = similarity_matrix(conventional_pe(32, 64))
    for k in range(30):
        assert sim[k, k] > sim[k, k + 1] > sim[k, k + 2]


# -- tokenizer ------------------------------------------------------------------------


SPEC = GridSpec.cell_centered(2, 8, 16)
CFG = TokenizerConfig(patch_size=4, embed_dim=32)


def test_patchify_partition_roundtrip():
    rng = np.random.default_rng(0)
    x = rng.normal(size=SPEC.shape)
    patches = patchify(x, CFG.patch_size)
    assert patches.shape == (2 * 4, 4 * 4 * 2)
    np.testing.assert_array_equal(unpatchify(patches, SPEC.shape, CFG.patch_size), x)


def test_tokenize_zero_field_zero_bias_gives_zero_tokens():
    field = GridField(SPEC, np.zeros(SPEC.shape), 0)
    rng = np.random.default_rng(1)
    w = Tensor(rng.normal(size=(CFG.patch_dim(SPEC), CFG.embed_dim)))
    z = tokenize(field, CFG, w, Tensor(np.zeros((1, CFG.embed_dim))))
    assert np.all(z.data == 0.0)


def test_tokenize_one_hot_field_localizes_to_one_token():
    cfg = TokenizerConfig(patch_size=4, embed_dim=32)  # embed_dim == patch_dim
    values = np.zeros(SPEC.shape)
    values[1, 5, 9] = 1.0  # token row 5//4=1, col 9//4=2 -> token index 1*4+2=6
    field = GridField(SPEC, values, 0)
    z = tokenize(field, cfg, Tensor(np.eye(32)))
    nonzero_rows = np.flatnonzero(np.any(z.data != 0.0, axis=1))
    assert list(nonzero_rows) == [6]


def test_tokenize_matches_per_patch_matrix_products():
    rng = np.random.default_rng(2)
    field = GridField(SPEC, rng.normal(size=SPEC.shape), 0)
    w = Tensor(rng.normal(size=(CFG.patch_dim(SPEC), CFG.embed_dim)))
    b = Tensor(rng.normal(size=(1, CFG.embed_dim)))
    z = tokenize(field, CFG, w, b).data
    P = CFG.patch_size
    h, w_tok = SPEC.lat_points // P, SPEC.lon_points // P
    for r in range(h):
        for c in range(w_tok):
            patch = field.values[:, r * P : (r + 1) * P, c * P : (c + 1) * P]
            flat = patch.reshape(-1)  # (v, lat, lon) order
            expected = flat @ w.data + b.data[0]
            np.testing.assert_allclose(z[r * w_tok + c], expected, atol=1e-12)


def test_add_positional_cases():
    rng = np.random.default_rng(3)
    table = ring_pe_2d(2, 4, 8)
    zeros = Tensor(np.zeros((8, 8)))
    assert np.array_equal(add_positional(zeros, table).data, table.table)
    tokens = Tensor(rng.normal(size=(8, 8)))
    np.testing.assert_array_equal(
        add_positional(tokens, table).data, tokens.data + table.table
    )
    with pytest.raises(dc.ShapeError):
        add_positional(Tensor(np.zeros((4, 8))), table)


# -- learned embeddings ------------------------------------------------------------------


def test_interval_embedding_lookup_and_unknown_interval():
    emb = IntervalEmbedding((6, 12, 24), 16, np.random.default_rng(4))
    np.testing.assert_array_equal(emb(6).data, emb(6).data)
    assert not np.array_equal(emb(6).data, emb(12).data)
    with pytest.raises(KeyError, match="18"):
        emb(18)


def test_interval_embedding_gradient_hits_exactly_one_row():
    emb = IntervalEmbedding((6, 12, 24), 16, np.random.default_rng(5))
    out = emb(12)
    dc.backward(dc.tensor_sum(out))
    grad = emb.table.grad
    assert np.all(grad[1] == 1.0)
    assert np.all(grad[[0, 2]] == 0.0)


def test_temporal_embedding_contract():
    emb = TemporalEmbedding(16, season_length_days=60, norm_hours=240.0, rng=np.random.default_rng(6))
    start = emb(1000, 0, 138, 138)
    end = emb(1000, 138, 0, 138)
    mid_a = emb(1000, 6, 132, 138)
    mid_b = emb(1000, 12, 126, 138)
    assert start.shape == (1, 16)
    assert not np.array_equal(mid_a.data, mid_b.data)
    assert not np.array_equal(start.data, end.data)
    with pytest.raises(ValueError, match="inconsistent"):
        emb(1000, 6, 100, 138)
    with pytest.raises(ValueError):
        emb(1000, -6, 144, 138)
