import math

import numpy as np
import pytest
import torch

from compose_retrieval.config import ConfigError, PRESETS
from compose_retrieval.losses import (
    DegenerateInputError,
    SimilarityDistribution,
    attribute_similarity,
    attribute_similarity_matrix,
    early_fusion_rank_loss,
    kl_from_logits,
    kl_matching_regularization,
    late_fusion_rank_loss,
    matching_degree_distribution,
    matching_degree_logits,
    pool,
    target_similarity_distribution,
    target_similarity_logits,
    total_objective,
)

import oracles

T = lambda a: torch.as_tensor(np.asarray(a, dtype=np.float64))  # noqa: E731


class TestAttributeSimilarity:
    def test_self_similarity_is_K(self, rng):
        A = T(rng.normal(size=(5, 3)))
        assert float(attribute_similarity(A, A)) == pytest.approx(5.0, rel=1e-14)

    def test_orthogonal_rows(self):
        A = T([[1, 0, 0], [0, 2, 0]])
        B = T([[0, 3, 0], [0, 0, 1]])
        assert float(attribute_similarity(A, B)) == 0.0

    def test_scalar_loop(self, rng):
        for _ in range(100):
            A, B = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
            assert float(attribute_similarity(T(A), T(B))) == pytest.approx(oracles.attr_sim(A.tolist(), B.tolist()), rel=1e-10)

    def test_matrix_form_matches_pairwise(self, rng):
        As, Bs = rng.normal(size=(4, 3, 5)), rng.normal(size=(3, 3, 5))
        S = attribute_similarity_matrix(T(As), T(Bs)).numpy()
        for i in range(4):
            for j in range(3):
                assert S[i, j] == pytest.approx(oracles.attr_sim(As[i].tolist(), Bs[j].tolist()), rel=1e-10)

    def test_zero_row_is_degenerate(self):
        A = T([[1, 0], [0, 0]])
        with pytest.raises(DegenerateInputError):
            attribute_similarity(A, T([[1, 1], [1, 1]]))
        # training mode stabilizes instead of raising
        assert math.isfinite(float(attribute_similarity(A, T([[1, 1], [1, 1]]), eps=1e-8)))


def late_oracle(C, Tg, tau):
    logits = [[oracles.attr_sim(C[i], Tg[j]) / tau for j in range(len(Tg))] for i in range(len(C))]
    return oracles.batch_ce(logits)


def early_oracle(c, t, tau):
    logits = [[oracles.cosine(c[i], t[j]) / tau for j in range(len(t))] for i in range(len(c))]
    return oracles.batch_ce(logits)


class TestRankLosses:
    def test_single_item_batch_is_zero(self, rng):
        assert float(late_fusion_rank_loss(T(rng.normal(size=(1, 3, 4))), T(rng.normal(size=(1, 3, 4))), 0.1)) == 0.0
        assert float(early_fusion_rank_loss(T(rng.normal(size=(1, 4))), T(rng.normal(size=(1, 4))), 0.1)) == 0.0

    def test_uniform_logits_give_log_B(self, rng):
        B = 5
        same = np.tile(rng.normal(size=(1, 3, 4)), (B, 1, 1))
        assert float(late_fusion_rank_loss(T(rng.normal(size=(B, 3, 4))), T(same), 0.1)) == pytest.approx(math.log(B), rel=1e-12)
        v = np.tile(rng.normal(size=(1, 4)), (B, 1))
        assert float(early_fusion_rank_loss(T(v), T(v), 0.07)) == pytest.approx(math.log(B), rel=1e-12)

    def test_late_fusion_oracle(self, rng):
        for _ in range(100):
            B, K, D = rng.integers(1, 5), rng.integers(1, 4), rng.integers(2, 9)
            C, Tg = rng.normal(size=(B, K, D)), rng.normal(size=(B, K, D))
            tau = rng.uniform(0.05, 1.0)
            got = float(late_fusion_rank_loss(T(C), T(Tg), tau))
            assert got == pytest.approx(late_oracle(C.tolist(), Tg.tolist(), tau), rel=1e-10, abs=1e-300)

    def test_early_fusion_oracle(self, rng):
        for _ in range(100):
            B, D = rng.integers(1, 5), rng.integers(2, 9)
            c, t = rng.normal(size=(B, D)), rng.normal(size=(B, D))
            tau = rng.uniform(0.05, 1.0)
            got = float(early_fusion_rank_loss(T(c), T(t), tau))
            assert got == pytest.approx(early_oracle(c.tolist(), t.tolist(), tau), rel=1e-10, abs=1e-300)

    def test_invariant_to_row_rescaling(self, rng):
        C, Tg = rng.normal(size=(4, 3, 5)), rng.normal(size=(4, 3, 5))
        base = float(late_fusion_rank_loss(T(C), T(Tg), 0.1))
        C2 = C.copy()
        C2[2] *= 2.0
        assert float(late_fusion_rank_loss(T(C2), T(Tg), 0.1)) == pytest.approx(base, abs=1e-9)
        c, t = rng.normal(size=(4, 5)), rng.normal(size=(4, 5))
        base = float(early_fusion_rank_loss(T(c), T(t), 0.1))
        t2 = t.copy()
        t2[1] *= 2.0
        assert float(early_fusion_rank_loss(T(c), T(t2), 0.1)) == pytest.approx(base, abs=1e-9)

    def test_single_attribute_late_equals_early(self, rng):
        C, Tg = rng.normal(size=(4, 1, 6)), rng.normal(size=(4, 1, 6))
        late = float(late_fusion_rank_loss(T(C), T(Tg), 0.1))
        early = float(early_fusion_rank_loss(pool(T(C)), pool(T(Tg)), 0.1))
        assert late == pytest.approx(early, rel=1e-12)

    def test_bad_temperature(self, rng):
        x = T(rng.normal(size=(2, 3)))
        with pytest.raises(ConfigError):
            early_fusion_rank_loss(x, x, 0.0)
        with pytest.raises(ConfigError):
            late_fusion_rank_loss(x[None], x[None], -1.0)


class TestDistributions:
    def test_identical_targets_uniform(self, rng):
        targets = T(np.tile(rng.normal(size=(1, 3, 4)), (4, 1, 1)))
        p = target_similarity_distribution(targets, 2, 0.1)
        assert p.kind == "target_visual" and p.owner_index == 2
        np.testing.assert_allclose(p.probs.numpy(), 0.25, rtol=1e-14)
        pooled = T(np.tile(rng.normal(size=(1, 4)), (4, 1)))
        q = matching_degree_distribution(T(rng.normal(size=4)), pooled, 0.1)
        np.testing.assert_allclose(q.probs.numpy(), 0.25, rtol=1e-14)

    def test_two_targets_orthogonal(self):
        e = np.eye(3)
        targets = T(np.stack([e, e[[1, 2, 0]]]))  # self-similarity 3, cross 0
        p = target_similarity_distribution(targets, 0, 0.1).probs.numpy()
        expected = oracles.softmax([30.0, 0.0])
        np.testing.assert_allclose(p, expected, rtol=1e-12)
        assert p[1] == pytest.approx(9.36e-14, rel=1e-3)

    def test_matching_degree_two_targets(self):
        q = matching_degree_distribution(T([1.0, 0.0]), T([[2.0, 0.0], [0.0, 3.0]]), 0.1, owner_index=0).probs.numpy()
        np.testing.assert_allclose(q, oracles.softmax([10.0, 0.0]), rtol=1e-12)
        assert q[0] == pytest.approx(0.9999546, abs=1e-7) and q[1] == pytest.approx(4.54e-5, rel=1e-3)

    def test_target_distribution_oracle(self, rng):
        for _ in range(100):
            B, K, D = rng.integers(1, 5), rng.integers(1, 4), rng.integers(2, 9)
            targets, tau = rng.normal(size=(B, K, D)), rng.uniform(0.05, 1.0)
            i = int(rng.integers(B))
            p = target_similarity_distribution(T(targets), i, tau).probs.numpy()
            expected = oracles.softmax([oracles.attr_sim(targets[i].tolist(), targets[j].tolist()) / tau for j in range(B)])
            np.testing.assert_allclose(p, expected, rtol=1e-10)
            assert abs(p.sum() - 1) <= 1e-9 and (p > 0).all()
            if B > 1:
                assert p.argmax() == i

    def test_matching_distribution_oracle(self, rng):
        for _ in range(100):
            B, D = rng.integers(1, 5), rng.integers(2, 9)
            q, t, tau = rng.normal(size=D), rng.normal(size=(B, D)), rng.uniform(0.05, 1.0)
            p = matching_degree_distribution(T(q), T(t), tau).probs.numpy()
            expected = oracles.softmax([oracles.cosine(q.tolist(), t[j].tolist()) / tau for j in range(B)])
            np.testing.assert_allclose(p, expected, rtol=1e-10)
            assert abs(p.sum() - 1) <= 1e-9 and (p > 0).all()

    def test_batched_logits_match_single_owner(self, rng):
        targets, queries = T(rng.normal(size=(4, 3, 5))), T(rng.normal(size=(4, 5)))
        P = torch.softmax(target_similarity_logits(targets, 0.1), dim=-1)
        Q = torch.softmax(matching_degree_logits(queries, pool(targets), 0.1), dim=-1)
        for i in range(4):
            torch.testing.assert_close(P[i], target_similarity_distribution(targets, i, 0.1).probs, rtol=1e-12, atol=0)
            torch.testing.assert_close(Q[i], matching_degree_distribution(queries[i], pool(targets), 0.1).probs, rtol=1e-12, atol=0)


class TestKL:
    def test_equal_is_zero(self, rng):
        p = T(rng.dirichlet(np.ones(5)))
        assert float(kl_matching_regularization(p, p.clone())) == 0.0

    def test_worked_example(self):
        got = float(kl_matching_regularization(T([0.5, 0.5]), T([0.9, 0.1])))
        assert got == pytest.approx(0.5 * math.log(0.5 / 0.9) + 0.5 * math.log(0.5 / 0.1), rel=1e-14)
        assert got == pytest.approx(0.5108, abs=1e-4)

    def test_accepts_distribution_objects(self):
        a = SimilarityDistribution(T([0.5, 0.5]), 0, "target_visual")
        b = SimilarityDistribution(T([0.9, 0.1]), 0, "matching_degree")
        assert float(kl_matching_regularization(a, b)) == pytest.approx(0.5108256, abs=1e-7)

    def test_scalar_loop(self, rng):
        for _ in range(100):
            B = int(rng.integers(1, 6))
            p, q = rng.dirichlet(np.ones(B), size=B), rng.dirichlet(np.ones(B), size=B)
            expected = sum(oracles.kl(p[i].tolist(), q[i].tolist()) for i in range(B)) / B
            assert float(kl_matching_regularization(T(p), T(q))) == pytest.approx(expected, rel=1e-10, abs=1e-15)

    def test_nonnegative_and_zero_iff_equal(self, rng):
        for _ in range(50):
            p, q = rng.dirichlet(np.ones(4)), rng.dirichlet(np.ones(4))
            val = float(kl_matching_regularization(T(p), T(q)))
            assert val > 0
        assert float(kl_matching_regularization(T([0.2, 0.8]), T([0.2, 0.8]))) == 0.0

    def test_logit_form_matches(self, rng):
        for _ in range(100):
            a, b = rng.normal(size=(4, 4)) * 3, rng.normal(size=(4, 4)) * 3
            direct = kl_matching_regularization(torch.softmax(T(a), -1), torch.softmax(T(b), -1))
            assert float(kl_from_logits(T(a), T(b))) == pytest.approx(float(direct), rel=1e-10, abs=1e-14)

    def test_target_side_is_constant(self, rng):
        a = T(rng.normal(size=(3, 3))).requires_grad_(True)
        b = T(rng.normal(size=(3, 3))).requires_grad_(True)
        kl_from_logits(a, b).backward()
        assert a.grad is None and b.grad is not None
        p = torch.softmax(a, -1)
        kl_matching_regularization(p, torch.softmax(b, -1)).backward()
        assert a.grad is None


class TestGradients:
    """Autograd vs. central differences on small float64 shapes."""

    def test_late_fusion(self, rng):
        Tg = T(rng.normal(size=(4, 3, 8)))
        for target_side in (False, True):
            other = T(rng.normal(size=(4, 3, 8)))
            fn = (lambda x: late_fusion_rank_loss(other, x, 0.1)) if target_side else (lambda x: late_fusion_rank_loss(x, Tg, 0.1))
            assert oracles.gradient_error(fn, rng.normal(size=(4, 3, 8))) <= 1e-4

    def test_early_fusion(self, rng):
        t = T(rng.normal(size=(4, 8)))
        assert oracles.gradient_error(lambda x: early_fusion_rank_loss(x, t, 0.1), rng.normal(size=(4, 8))) <= 1e-4
        assert oracles.gradient_error(lambda x: early_fusion_rank_loss(t, x, 0.1), rng.normal(size=(4, 8))) <= 1e-4

    def test_kl_through_matching_degrees(self, rng):
        targets = T(rng.normal(size=(4, 3, 8)))
        p_t = torch.softmax(target_similarity_logits(targets, 0.1), -1)

        def fn(queries):
            p_c = torch.softmax(matching_degree_logits(queries, pool(targets), 0.1), -1)
            return kl_matching_regularization(p_t, p_c)

        assert oracles.gradient_error(fn, rng.normal(size=(4, 8))) <= 1e-4
        assert oracles.gradient_error(lambda q: kl_from_logits(target_similarity_logits(targets, 0.1), matching_degree_logits(q, pool(targets), 0.1)), rng.normal(size=(4, 8))) <= 1e-4

    def test_target_distribution(self, rng):
        probe = T(rng.normal(size=4))
        assert oracles.gradient_error(lambda x: (target_similarity_distribution(x, 1, 0.5).probs * probe).sum(), rng.normal(size=(4, 3, 8))) <= 1e-4


class TestTotalObjective:
    parts = {n: torch.tensor(float(v)) for n, v in zip(("rank_stu", "rank_tea", "mask_tea", "ortho", "ckd", "kl"), range(1, 7))}

    def test_all_zero_weights(self):
        out = total_objective(self.parts, dict(lambda_=0, eta=0, mu=0, nu=0, kappa=0))
        assert float(out.total) == 1.0

    def test_unit_weights(self):
        out = total_objective(self.parts, dict(lambda_=1, eta=1, mu=1, nu=1, kappa=1))
        assert float(out.total) == 21.0

    def test_fashioniq_preset_on_ones(self):
        ones = {n: torch.tensor(1.0, dtype=torch.float64) for n in self.parts}
        w = {k: v for k, v in PRESETS["fashioniq"].items() if k != "tau"}
        assert w == dict(lambda_=1.0, eta=1.0, mu=0.1, nu=10.0, kappa=0.5)
        assert float(total_objective(ones, w).total) == pytest.approx(13.6, abs=1e-12)

    def test_zero_weight_removes_gradient(self):
        x = torch.tensor(2.0, requires_grad=True)
        parts = dict(self.parts, kl=x * 3, ckd=torch.tensor(float("nan")))
        out = total_objective(parts, dict(lambda_=1, eta=1, mu=1, nu=0, kappa=0))
        assert math.isfinite(float(out.total))
        assert not out.total.requires_grad

    def test_negative_weight(self):
        with pytest.raises(ConfigError):
            total_objective(self.parts, dict(lambda_=-1))
