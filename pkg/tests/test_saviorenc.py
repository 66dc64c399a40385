import numpy as np
import pytest

from saviorrec.errors import ConfigError, ContractError, DegenerateBatchError
from saviorrec.numerics import Tensor
from saviorrec.numerics.gradcheck import check_gradients
from saviorrec.saviorenc import (
    EmbeddingTable,
    EncoderConfig,
    EncoderParams,
    encode_catalog,
    encode_item,
    hitrate_at_k,
    info_nce_loss,
    mean_pair_cosine,
    train_encoder,
)


def test_info_nce_orthogonal_embeddings():
    # cosines are 0 everywhere except self, which is masked: each anchor sees
    # its positive and two negatives with equal logits
    z = Tensor(np.eye(4))
    loss = info_nce_loss(z, [[0, 1], [2, 3]], tau=1.0)
    assert loss.item() == pytest.approx(np.log(3.0), abs=1e-12)


def test_info_nce_identical_positives():
    # positives identical, negatives orthogonal: -log(e / (e + 2))
    z = Tensor(np.array([[1.0, 0], [1.0, 0], [0, 1.0], [0, 1.0]]))
    loss = info_nce_loss(z, [[0, 1], [2, 3]], tau=1.0)
    assert loss.item() == pytest.approx(-np.log(np.e / (np.e + 2)), abs=1e-12)


def test_info_nce_errors():
    z = Tensor(np.eye(4))
    with pytest.raises(DegenerateBatchError):
        info_nce_loss(z, [[0, 1]], tau=0.1)
    with pytest.raises(ConfigError):
        info_nce_loss(z, [[0, 1], [2, 3]], tau=0.0)


def test_info_nce_gradients():
    rng = np.random.default_rng(0)
    z = Tensor(rng.normal(size=(6, 5)), requires_grad=True)
    errs = check_gradients(lambda: info_nce_loss(z, [[0, 1], [2, 3], [4, 5]], 0.5), {"z": z})
    assert errs["z"] < 1e-6


def test_encoder_rejects_wrong_modality_dims(small_world):
    params = EncoderParams(24, 24, EncoderConfig(), seed=0)
    with pytest.raises(ContractError):
        params(np.zeros((2, 10)), np.zeros((2, 24)))


@pytest.mark.parametrize("fusion", ["mlp", "transformer"])
def test_encode_item_matches_batch(small_world, fusion):
    cat = small_world.catalog
    params = EncoderParams(cat.modality_a.shape[1], cat.modality_b.shape[1], EncoderConfig(fusion=fusion), 0)
    batch = encode_catalog(params, cat)
    np.testing.assert_allclose(encode_item(params, cat.item(5)), batch[5], rtol=1e-12)


def test_encoder_gradients_transformer_fusion():
    rng = np.random.default_rng(1)
    params = EncoderParams(6, 5, EncoderConfig(d_enc=4, d_fuse=4, d_z=3, fusion="transformer"), seed=1)
    a, b = rng.normal(size=(6, 6)), rng.normal(size=(6, 5))
    errs = check_gradients(lambda: info_nce_loss(params(a, b), [[0, 1], [2, 3], [4, 5]], 0.3),
                           params.parameters(), max_entries=6, rng=rng)
    assert max(errs.values()) < 1e-6


def test_embedding_table_is_frozen_and_round_trips(tmp_path):
    table = EmbeddingTable(np.arange(12.0).reshape(4, 3))
    with pytest.raises(ValueError):
        table.vectors[0, 0] = 1.0
    table.save(tmp_path)
    back = EmbeddingTable.load(tmp_path)
    np.testing.assert_array_equal(back.vectors, table.vectors)


def test_hitrate_all_pairs_is_exactly_k_over_n_minus_1():
    rng = np.random.default_rng(2)
    n, k = 60, 7
    q, t = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    keep = q != t
    rate = hitrate_at_k(rng.normal(size=(n, 4)), np.stack([q[keep], t[keep]], 1), k)
    assert rate == pytest.approx(k / (n - 1), abs=1e-12)


def test_hitrate_random_embeddings_near_chance():
    rng = np.random.default_rng(0)
    n, k, m = 400, 20, 3000
    vectors = rng.normal(size=(n, 16))
    q = rng.integers(0, n, m)
    t = (q + rng.integers(1, n, m)) % n
    rate = hitrate_at_k(vectors, np.stack([q, t], 1), k)
    p = k / (n - 1)
    assert abs(rate - p) < 3 * np.sqrt(p * (1 - p) / m)


def test_hitrate_ties_and_self_exclusion():
    # every item identical: ranking falls back to lower id, query excluded
    vectors = np.ones((5, 2))
    assert hitrate_at_k(vectors, [[0, 1]], 1) == 1.0
    assert hitrate_at_k(vectors, [[0, 4]], 3) == 0.0
    assert hitrate_at_k(vectors, [[0, 4]], 4) == 1.0


def test_hitrate_caps_k(caplog):
    vectors = np.eye(3)
    assert hitrate_at_k(vectors, [[0, 1]], 10) == 1.0
    assert "capping" in caplog.text
    with pytest.raises(ContractError):
        hitrate_at_k(vectors, np.zeros((0, 2)), 1)


def test_training_raises_pair_cosine(small_world):
    cfg = EncoderConfig(epochs=2, batch_pairs=64)
    _, untrained, _ = train_encoder(small_world.catalog, small_world.pairs, EncoderConfig(epochs=0), 0)
    _, trained, history = train_encoder(small_world.catalog, small_world.pairs, cfg, 0)
    pairs = small_world.pairs.pairs
    assert mean_pair_cosine(trained.vectors, pairs) > mean_pair_cosine(untrained.vectors, pairs)
    assert history.epoch_losses[-1] < history.losses[0]
    assert trained.frozen


def test_training_is_deterministic(small_world):
    cfg = EncoderConfig(epochs=1, batch_pairs=64)
    a = train_encoder(small_world.catalog, small_world.pairs, cfg, 5)[1]
    b = train_encoder(small_world.catalog, small_world.pairs, cfg, 5)[1]
    assert a.vectors.tobytes() == b.vectors.tobytes()
