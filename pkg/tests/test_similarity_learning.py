import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cmst.datagen import SyntheticConfig, generate_synthetic
from cmst.errors import InputError, ShapeError
from cmst.nn_core import MLP, Dense, Rng, init_params, param_digest
from cmst.similarity_learning import (
    IMAGE,
    PairBatch,
    SiameseConfig,
    SimilarityNet,
    build_similarity_net,
    contrastive_loss,
    contrastive_terms,
    intra_distance,
    pair_distances,
    sample_pairs,
    train_siamese,
)


def identity_net(d):
    net = MLP([Dense(d, d, "identity")])
    net.layers[0].W[...] = np.eye(d)
    return SimilarityNet(net, IMAGE)


class TestIntraDistance:
    def test_self_distance_zero(self):
        h = build_similarity_net(5, IMAGE, (6,), 3, Rng(0).stream("h"))
        x = np.arange(5.0)
        assert intra_distance(h, x, x) == 0.0

    def test_identity_map(self):
        assert intra_distance(identity_net(2), [0, 0], [3, 4]) == 25.0

    def test_symmetry(self):
        h = build_similarity_net(4, IMAGE, (8, 8), 3, Rng(1).stream("h"))
        gen = np.random.default_rng(0)
        for _ in range(10):
            a, b = gen.normal(size=4), gen.normal(size=4)
            assert intra_distance(h, a, b) == intra_distance(h, b, a)

    def test_dim_mismatch(self):
        with pytest.raises(ShapeError):
            intra_distance(identity_net(2), [1, 2, 3], [1, 2, 3])


class TestContrastive:
    def test_matched_pair_at_zero(self):
        assert contrastive_terms([0.0], [1], 1.0)[0] == 0.0

    def test_saturated_negative(self):
        assert contrastive_terms([1.0], [0], 1.0)[0] == 0.0
        assert contrastive_terms([3.7], [0], 1.0)[0] == 0.0

    def test_negative_inside_margin(self):
        assert contrastive_terms([0.25], [0], 1.0)[0] == 0.75

    def test_on_network(self):
        h = identity_net(2)
        batch = PairBatch([[0, 0], [0, 0]], [[0.3, 0.4], [0.0, 0.0]], [0, 1])
        # pair 0: negative at s=0.25 -> 0.75; pair 1: positive at s=0 -> 0
        assert contrastive_loss(h, batch, 1.0) == pytest.approx(0.375, abs=1e-15)

    @settings(max_examples=200, deadline=None)
    @given(
        st.lists(st.floats(0, 10, allow_nan=False), min_size=1, max_size=20),
        st.floats(0.01, 5),
        st.integers(0, 2**32 - 1),
    )
    def test_non_negative_and_zero_iff(self, s, margin, seed):
        s = np.array(s)
        u = np.random.default_rng(seed).integers(0, 2, size=s.size)
        loss = contrastive_terms(s, u, margin)[0]
        assert loss >= 0
        satisfied = np.all(np.where(u == 1, s == 0, s >= margin))
        assert (loss == 0) == satisfied


class TestSamplePairs:
    def setup_method(self):
        self.labels = np.repeat(np.arange(4), 6)
        self.X = np.random.default_rng(0).normal(size=(24, 3))

    def test_positive_count(self):
        batch = sample_pairs(self.X, self.labels, 8, 0.5, np.random.default_rng(1))
        assert batch.same_class.sum() == 4

    def test_single_class_rejected(self):
        with pytest.raises(InputError):
            sample_pairs(self.X, np.zeros(24), 8, 0.5, np.random.default_rng(1))

    def test_empty_rejected(self):
        with pytest.raises(InputError):
            sample_pairs(np.zeros((0, 3)), np.zeros(0), 8, 0.5, np.random.default_rng(1))

    def test_labels_agree_with_u(self):
        # recover each row's label by exact feature lookup, independent of the sampler
        lookup = {tuple(row): lab for row, lab in zip(self.X, self.labels)}
        gen = np.random.default_rng(3)
        for _ in range(30):
            batch = sample_pairs(self.X, self.labels, 10, 0.3, gen)
            for left, right, u in zip(batch.left, batch.right, batch.same_class):
                same = lookup[tuple(left)] == lookup[tuple(right)]
                assert u == float(same)
                if u == 1:
                    assert not np.array_equal(left, right)


def siamese_data(seed):
    cfg = SyntheticConfig(n_classes=4, n_pairs=200, d_v=16, d_t=8, latent_dim=4,
                          class_sep=2.0, noise_sigma=0.3, seed=seed)
    return generate_synthetic(cfg)


def held_out_means(h, ds, gen):
    X, y = ds.V[ds.test_idx], ds.labels[ds.test_idx]
    batch = sample_pairs(X, y, 400, 0.5, gen)
    s, _ = pair_distances(h, batch.left, batch.right)
    u = batch.same_class == 1
    return s[u].mean(), s[~u].mean()


class TestTrainSiamese:
    def test_separates_classes(self):
        ratios = []
        for seed in range(5):
            ds = siamese_data(seed)
            cfg = SiameseConfig(hidden=(32, 32), d_sim=8, epochs=50, batch_size=32)
            h, losses = train_siamese(ds, IMAGE, cfg, Rng(seed))
            pos, neg = held_out_means(h, ds, np.random.default_rng(seed))
            assert pos < neg
            ratios.append(pos / neg)
        # statistical claim: averaged over seeds, positives sit well inside negatives
        assert np.mean(ratios) < 0.5

    def test_zero_learning_rate_keeps_init(self):
        ds = siamese_data(0)
        cfg = SiameseConfig(hidden=(8,), d_sim=4, epochs=2, batch_size=16, learning_rate=0.0)
        h, _ = train_siamese(ds, IMAGE, cfg, Rng(9))
        init = build_similarity_net(16, IMAGE, (8,), 4, Rng(9).stream("init/siamese/image"))
        assert param_digest(h.net) == param_digest(init.net)

    def test_deterministic_curve(self):
        ds = siamese_data(1)
        cfg = SiameseConfig(hidden=(8,), d_sim=4, epochs=3, batch_size=16)
        _, a = train_siamese(ds, IMAGE, cfg, Rng(4))
        _, b = train_siamese(ds, IMAGE, cfg, Rng(4))
        assert a == b
