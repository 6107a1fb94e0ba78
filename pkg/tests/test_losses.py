import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import geodesic_monotonicity_setup, random_labeled_embeddings
from xmodal import (
    CE,
    IC,
    IV,
    NS_PRIME,
    BadConfig,
    ConflictingFlags,
    HyperParams,
    InvalidLabel,
    LabeledEmbeddings,
    NoValidClass,
    compute_gamma,
    loss_ce,
    loss_ic,
    loss_iv,
    loss_ns_prime,
    loss_total,
)

W2 = np.eye(2)
R2 = math.sqrt(2.0) / 2.0


def single(vec, label=0, modality=0):
    return LabeledEmbeddings(np.array([vec]), [label], [modality])


class TestComputeGamma:
    """Direct scalar evaluation of the margin-violation sum as the oracle."""

    def test_embedding_on_own_weight(self):
        hp = HyperParams(lambda0=0.0, omega=1.0)
        g = compute_gamma(single([1.0, 0.0]), W2, hp)
        np.testing.assert_allclose(g, [math.exp(-1.0)], rtol=1e-14)

    def test_embedding_at_45_degrees(self):
        hp = HyperParams(lambda0=0.0, omega=1.0)
        g = compute_gamma(single([R2, R2]), W2, hp)
        np.testing.assert_allclose(g, [1.0], rtol=1e-14)

    def test_with_margin(self):
        hp = HyperParams(lambda0=0.35, omega=1.0)
        g = compute_gamma(single([1.0, 0.0]), W2, hp)
        np.testing.assert_allclose(g, [math.exp(-0.65)], rtol=1e-14)

    def test_invalid_label(self):
        with pytest.raises(InvalidLabel):
            compute_gamma(single([1.0, 0.0], label=5), W2, HyperParams())

    def test_matches_naive_sum_on_random_inputs(self):
        rng = np.random.default_rng(4)
        for _ in range(100):
            emb, labels, mods, weights = random_labeled_embeddings(rng)
            hp = HyperParams(
                lambda0=float(rng.uniform(0, 0.5)), omega=float(rng.uniform(0.1, 1.0))
            )
            e = LabeledEmbeddings(emb, labels, mods)
            got = compute_gamma(e, weights, hp)
            cos = emb @ weights.T
            for b in range(len(labels)):
                naive = sum(
                    math.exp((cos[b, j] - cos[b, labels[b]] + hp.lambda0) / hp.omega)
                    for j in range(weights.shape[0])
                    if j != labels[b]
                )
                assert abs(got[b] - naive) <= 1e-12 * max(1.0, naive)


class TestNsPrime:
    def test_single_instance(self):
        hp = HyperParams(lambda0=0.0, omega=1.0)
        expected = math.log(1.0 + math.exp(-1.0))
        assert abs(loss_ns_prime(single([1.0, 0.0]), W2, hp) - expected) < 1e-14

    def test_gamma_one(self):
        hp = HyperParams(lambda0=0.0, omega=1.0)
        assert abs(loss_ns_prime(single([R2, R2]), W2, hp) - math.log(2.0)) < 1e-14

    def test_batch_mean(self):
        hp = HyperParams(lambda0=0.0, omega=1.0)
        e = LabeledEmbeddings(np.array([[1.0, 0.0], [R2, R2]]), [0, 0], [0, 1])
        expected = (math.log(1.0 + math.exp(-1.0)) + math.log(2.0)) / 2.0
        assert abs(loss_ns_prime(e, W2, hp) - expected) < 1e-14


class TestIv:
    def test_weight_and_loss_at_tau_one(self):
        hp = HyperParams(lambda0=0.0, omega=1.0, tau=1.0)
        value, weights = loss_iv(single([1.0, 0.0]), W2, hp)
        gamma = math.exp(-1.0)
        expected_weight = gamma / (1.0 + gamma)
        np.testing.assert_allclose(weights, [expected_weight], rtol=1e-14)
        assert abs(value - expected_weight * math.log(1.0 + gamma)) < 1e-14

    def test_gamma_one_tau_one(self):
        hp = HyperParams(lambda0=0.0, omega=1.0, tau=1.0)
        value, weights = loss_iv(single([R2, R2]), W2, hp)
        np.testing.assert_allclose(weights, [0.5], rtol=1e-14)
        assert abs(value - 0.5 * math.log(2.0)) < 1e-14

    def test_tau_zero_equals_ns_prime_exactly(self):
        rng = np.random.default_rng(5)
        for _ in range(50):
            emb, labels, mods, weights = random_labeled_embeddings(rng)
            hp = HyperParams(tau=0.0, omega=float(rng.uniform(0.05, 1.0)))
            e = LabeledEmbeddings(emb, labels, mods)
            value, w = loss_iv(e, weights, hp)
            assert value == loss_ns_prime(e, weights, hp)
            assert np.all(w == 1.0)

    def test_never_exceeds_ns_prime(self):
        rng = np.random.default_rng(6)
        for _ in range(200):
            emb, labels, mods, weights = random_labeled_embeddings(rng)
            hp = HyperParams(
                tau=1.0,
                lambda0=float(rng.uniform(0, 0.5)),
                omega=float(rng.uniform(0.05, 1.0)),
            )
            e = LabeledEmbeddings(emb, labels, mods)
            iv_val, _ = loss_iv(e, weights, hp)
            ns_val = loss_ns_prime(e, weights, hp)
            assert iv_val <= ns_val
            if compute_gamma(e, weights, hp).max() > 1e-12:
                assert iv_val < ns_val


class TestCe:
    def test_two_class_example(self):
        hp = HyperParams(lambda0=0.0, omega=1.0)
        expected = math.log1p(math.exp(-1.0))
        assert abs(loss_ce(single([1.0, 0.0]), W2, hp) - expected) < 1e-14

    def test_uniform_softmax(self):
        hp = HyperParams(lambda0=0.0, omega=1.0)
        assert abs(loss_ce(single([R2, R2]), W2, hp) - math.log(2.0)) < 1e-14

    def test_small_temperature_no_overflow(self):
        hp = HyperParams(lambda0=0.0, omega=1.0 / 30.0)
        expected = math.log1p(math.exp(-30.0))  # ~9.36e-14
        got = loss_ce(single([1.0, 0.0]), W2, hp)
        assert got == pytest.approx(expected, rel=1e-12)

    def test_margin_ignored(self):
        # CE carries no margin: lambda0 must not change it
        e = single([0.9, math.sqrt(1 - 0.81)])
        a = loss_ce(e, W2, HyperParams(lambda0=0.0, omega=0.5))
        b = loss_ce(e, W2, HyperParams(lambda0=0.45, omega=0.5))
        assert a == b


class TestIc:
    def test_two_identical_points(self):
        hp = HyperParams(t_rbf=1.0)
        e = LabeledEmbeddings(np.array([[1.0, 0.0], [1.0, 0.0]]), [0, 0], [0, 1])
        assert abs(loss_ic(e, hp) - (-0.5 * math.log(2.0))) < 1e-14

    def test_orthogonal_pair(self):
        hp = HyperParams(t_rbf=1.0)
        e = LabeledEmbeddings(np.array([[1.0, 0.0], [0.0, 1.0]]), [0, 0], [0, 1])
        expected = -0.5 * math.log(2.0 * math.exp(-2.0))
        assert abs(loss_ic(e, hp) - expected) < 1e-14

    def test_identical_points_independent_of_bandwidth(self):
        e = LabeledEmbeddings(np.array([[1.0, 0.0], [1.0, 0.0]]), [0, 0], [0, 1])
        for t in (0.5, 1.0, 2.0, 10.0, 100.0):
            assert abs(loss_ic(e, HyperParams(t_rbf=t)) - (-0.5 * math.log(2.0))) < 1e-14

    def test_singleton_classes_skipped(self):
        e = LabeledEmbeddings(
            np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]]), [0, 0, 1], [0, 1, 0]
        )
        # class 1 has a single instance and must not contribute
        assert abs(loss_ic(e, HyperParams(t_rbf=1.0)) - (-0.5 * math.log(2.0))) < 1e-14

    def test_all_singletons_rejected(self):
        e = LabeledEmbeddings(np.array([[1.0, 0.0], [0.0, 1.0]]), [0, 1], [0, 0])
        with pytest.raises(NoValidClass):
            loss_ic(e, HyperParams())

    def test_pair_monotonicity(self):
        # moving one point strictly away from both classmates raises the loss
        hp = HyperParams(t_rbf=2.0)
        base = [0.1, -0.1]
        prev = None
        for theta in (0.3, 0.6, 1.0, 1.5, 2.2):
            pts = np.array(
                [[math.cos(a), math.sin(a)] for a in [theta] + base]
            )
            e = LabeledEmbeddings(pts, [0, 0, 0], [0, 1, 2])
            val = loss_ic(e, hp)
            if prev is not None:
                assert val > prev
            prev = val


class TestLossTotal:
    def setup_method(self):
        self.rng = np.random.default_rng(7)
        emb, labels, mods, weights = random_labeled_embeddings(self.rng, batch=10)
        self.e = LabeledEmbeddings(emb, labels, mods)
        self.w = weights
        self.hp = HyperParams(lambda0=0.2, omega=0.5, tau=1.0, t_rbf=1.5)

    def test_single_flag(self):
        bd = loss_total(self.e, self.w, self.hp, {IV})
        assert bd.total == bd.iv
        assert bd.ce == 0.0 and bd.ic == 0.0 and bd.ns_prime == 0.0

    def test_additivity(self):
        bd = loss_total(self.e, self.w, self.hp, {CE, IV, IC})
        assert abs(bd.total - (bd.ce + bd.iv + bd.ic)) < 1e-12
        assert bd.ce == loss_ce(self.e, self.w, self.hp)
        assert bd.iv == loss_iv(self.e, self.w, self.hp)[0]
        assert bd.ic == loss_ic(self.e, self.hp)

    def test_conflicting_flags(self):
        with pytest.raises(ConflictingFlags):
            loss_total(self.e, self.w, self.hp, {IV, NS_PRIME})

    def test_empty_flags_rejected(self):
        with pytest.raises(BadConfig):
            loss_total(self.e, self.w, self.hp, set())

    def test_unknown_flag_rejected(self):
        with pytest.raises(BadConfig):
            loss_total(self.e, self.w, self.hp, {"bogus"})

    def test_per_instance_arrays(self):
        bd = loss_total(self.e, self.w, self.hp, {IV})
        gamma = compute_gamma(self.e, self.w, self.hp)
        np.testing.assert_allclose(bd.per_instance_gamma, gamma, rtol=1e-12)
        np.testing.assert_allclose(
            bd.per_instance_weight, (gamma / (1 + gamma)) ** self.hp.tau, rtol=1e-12
        )

    def test_joint_loss_skips_ic_without_pairs(self):
        # the joint path tolerates pairless batches (standalone loss_ic errors)
        e = LabeledEmbeddings(np.array([[1.0, 0.0], [0.0, 1.0]]), [0, 1], [0, 0])
        bd = loss_total(e, np.eye(2), self.hp, {CE, IC})
        assert bd.ic == 0.0
        assert bd.ic_skipped_classes == 2
        assert bd.total == bd.ce


class TestInvariants:
    @settings(deadline=None, max_examples=40)
    @given(st.integers(0, 2**32 - 1), st.floats(1e-3, 1e3))
    def test_scale_robustness(self, seed, scale):
        rng = np.random.default_rng(seed)
        emb, labels, mods, weights = random_labeled_embeddings(rng)
        hp = HyperParams(lambda0=0.1, omega=0.5, tau=0.7)
        a = loss_total(LabeledEmbeddings(emb, labels, mods), weights, hp, {CE, IV, IC})
        b = loss_total(
            LabeledEmbeddings(scale * emb, labels, mods), weights, hp, {CE, IV, IC}
        )
        assert abs(a.total - b.total) < 1e-12

    @settings(deadline=None, max_examples=40)
    @given(st.integers(0, 2**32 - 1))
    def test_batch_permutation_invariance(self, seed):
        rng = np.random.default_rng(seed)
        emb, labels, mods, weights = random_labeled_embeddings(rng, batch=12)
        hp = HyperParams(lambda0=0.3, omega=0.4, tau=1.2)
        perm = rng.permutation(12)
        a = loss_total(LabeledEmbeddings(emb, labels, mods), weights, hp, {CE, IV, IC})
        b = loss_total(
            LabeledEmbeddings(emb[perm], labels[perm], mods[perm]),
            weights,
            hp,
            {CE, IV, IC},
        )
        assert abs(a.total - b.total) < 1e-12

    def test_modality_relabel_invariance(self):
        rng = np.random.default_rng(9)
        emb, labels, mods, weights = random_labeled_embeddings(rng, batch=12)
        hp = HyperParams()
        relabeled = (mods + 1) % 3
        a = loss_total(LabeledEmbeddings(emb, labels, mods), weights, hp, {CE, IV, IC})
        b = loss_total(
            LabeledEmbeddings(emb, labels, relabeled), weights, hp, {CE, IV, IC}
        )
        assert a.total == b.total

    def test_monotone_in_target_angle(self):
        rng = np.random.default_rng(10)
        for _ in range(20):
            path, weights = geodesic_monotonicity_setup(rng)
            hp = HyperParams(
                lambda0=float(rng.uniform(0, 0.5)),
                omega=float(rng.uniform(0.1, 1.0)),
                tau=float(rng.uniform(0.05, 2.0)),
            )
            gammas, ns_terms, iv_terms = [], [], []
            for v in path:
                e = single(v)
                gammas.append(compute_gamma(e, weights, hp)[0])
                ns_terms.append(loss_ns_prime(e, weights, hp))
                iv_terms.append(loss_iv(e, weights, hp)[0])
            for seq in (gammas, ns_terms, iv_terms):
                diffs = np.diff(seq)
                assert np.all(diffs < 0), seq

    def test_stability_at_extreme_cosines(self):
        # embeddings exactly on / opposite the weight rows, omega = 1/30
        hp = HyperParams(lambda0=0.35, omega=1.0 / 30.0, tau=0.1)
        weights = np.eye(4)
        emb = np.array([weights[0], -weights[1], weights[2], -weights[3]])
        e = LabeledEmbeddings(emb, [0, 1, 2, 0], [0, 1, 2, 0])
        bd = loss_total(e, weights, hp, {CE, IV, IC})
        assert np.isfinite(bd.total)
        assert np.isfinite(bd.per_instance_weight).all()
