# -*- coding: utf-8 -*-
import unittest

import numpy as np

from expert_router.config import CostConfig, PriorConfig
from expert_router.errors import ContractViolationError
from expert_router.objective.costs import clinical_costs, routing_loss, routing_loss_grad
from expert_router.objective.groups import UNSEEN, apply_groups, assign_groups, penalty_keys
from expert_router.objective.lagrangian import ALState, al_penalty, augmented_lagrangian, update_multiplier
from expert_router.objective.penalties import (geometric_reference, gsdp_penalty, js_divergence, kl_divergence,
                                               majorization_excess, rank_activation, rank_js_penalty)
from expert_router.objective.priors import (build_prior_tree, laplace_error_rates, prior_matrix,
                                            reliability_distribution)
from expert_router.objective.total import make_context, total_objective
from expert_router.policy.policy_core import RoutingPolicy
from expert_router.report_model import DiagnosticReport
from expert_router.router.features import StateBatch

"""Clinical costs, groups, priors, regularisers and the augmented Lagrangian."""


def make_batch(y, prob, labels, group=None) -> StateBatch:
    y = np.asarray(y, dtype=float)
    labels = np.asarray(labels, dtype=float)
    n = len(y)
    mask = (~np.isnan(labels)).astype(float)
    return StateBatch(risk=np.zeros((n, 3)), logits=np.zeros((n, 2)), struct=np.zeros((n, 2)),
                      prob=np.asarray(prob, dtype=float), mask=mask, y=y, expert_labels=labels,
                      index=np.arange(n), group=np.asarray(group if group is not None else np.zeros(n), dtype=np.int64),
                      ids=[f"c{i}" for i in range(n)])


def make_policy(d, q) -> RoutingPolicy:
    d = np.asarray(d, dtype=float)
    q = np.asarray(q, dtype=float)
    probs = np.concatenate([(1 - d)[:, None], d[:, None] * q], axis=1)
    return RoutingPolicy(defer_mass=d, alloc=q, action_probs=probs)


def random_simplex(rng, n, m):
    x = rng.gamma(1.0, size=(n, m))
    return x / x.sum(axis=1, keepdims=True)


class TestCosts(unittest.TestCase):

    def test_worked_examples(self):
        cfg = CostConfig(c_fn=2.0, c_fp=1.5)
        costs = clinical_costs(make_batch([1, 1, 0], [1.0, 0.5, 0.3], [[1, np.nan], [0, 1], [1, 0]]), cfg)
        np.testing.assert_allclose(costs.ai, [0.0, 1.0, 0.45])
        self.assertEqual(costs.expert_cost(0, 2), 1.5)
        self.assertEqual(costs.expert_cost(0, 1), 2.0)
        self.assertEqual(costs.expert_cost(1, 1), 0.0)
        with self.assertRaises(ContractViolationError):
            costs.expert_cost(1, 0)

    def test_routing_loss(self):
        cfg = CostConfig(c_fn=2.0, c_fp=1.5, gamma_tier=1.0)
        batch = make_batch([1], [0.5], [[1, 1]])
        costs = clinical_costs(batch, cfg)
        loss = routing_loss(make_policy([0.4], [[0.5, 0.5]]), costs, cfg, kappa=[0.2, 0.6])
        self.assertAlmostEqual(loss[0], 0.76)

    def test_defer_slope_is_marginal_cost(self):
        rng = np.random.default_rng(0)
        cfg = CostConfig()
        labels = np.where(rng.random((30, 4)) < 0.5, 1.0, 0.0)
        batch = make_batch(rng.integers(0, 2, 30), rng.random(30), labels)
        costs = clinical_costs(batch, cfg)
        q = random_simplex(rng, 30, 4)
        d = rng.random(30)
        kappa = cfg.tier_costs(4)
        delta, _ = routing_loss_grad(make_policy(d, q), costs, cfg, kappa)
        h = 1e-6
        up = routing_loss(make_policy(d + h, q), costs, cfg, kappa)
        down = routing_loss(make_policy(d - h, q), costs, cfg, kappa)
        np.testing.assert_allclose((up - down) / (2 * h), delta, atol=1e-7)


class TestGroups(unittest.TestCase):

    def test_quantile_clusters(self):
        g = assign_groups(np.ones((4, 2)), np.array([0.1, 0.2, 0.8, 0.9]), 2)
        np.testing.assert_array_equal(g.cluster, [0, 0, 1, 1])
        np.testing.assert_array_equal(g.group, [0, 0, 1, 1])

    def test_families_follow_masks(self):
        masks = np.array([[1, 0, 1], [1, 0, 1], [0, 1, 1]])
        g = assign_groups(masks, np.array([0.3, 0.3, 0.3]), 1)
        self.assertEqual(g.family[0], g.family[1])
        self.assertNotEqual(g.family[0], g.family[2])
        self.assertEqual(g.n_families, 2)

    def test_unseen_pattern_pools_globally(self):
        fitted = assign_groups(np.array([[1, 0], [1, 0], [1, 1]]), np.array([0.2, 0.7, 0.5]), 2)
        report = DiagnosticReport()
        new = apply_groups(fitted, np.array([[1, 0], [0, 1]]), np.array([0.9, 0.5]), report)
        self.assertNotEqual(new.group[0], UNSEEN)
        self.assertEqual(new.group[1], UNSEEN)
        keys = penalty_keys(new)
        self.assertEqual(keys[0], new.group[0])
        self.assertEqual(keys[1], fitted.n_groups + fitted.n_families)
        self.assertEqual(len(report.messages), 1)


class TestPriors(unittest.TestCase):

    def test_laplace_rates(self):
        y = np.array([1.0, 1.0, 0.0, 0.0])
        labels = np.array([[1, np.nan], [0, 1], [0, np.nan], [1, 0]])
        fnr, fpr, n_obs = laplace_error_rates(y, labels, (~np.isnan(labels)).astype(float))
        np.testing.assert_allclose(fnr, [0.5, 1 / 3])
        np.testing.assert_allclose(fpr, [0.5, 1 / 3])
        np.testing.assert_array_equal(n_obs, [4, 2])

    def test_reliability_distribution(self):
        badness = 1.8 * np.array([0.1, 0.3]) + 1.2 * np.array([0.1, 0.3])
        nu = reliability_distribution(badness, np.array([True, True]), 1.0, np.ones(2), 0.0)
        np.testing.assert_allclose(nu, [0.645656, 0.354344], atol=1e-6)
        self.assertIsNone(reliability_distribution(badness, np.array([False, False]), 1.0, np.ones(2), 0.0))

    def test_badness_blind_priors_are_uniform(self):
        rng = np.random.default_rng(3)
        mask = (rng.random((120, 4)) < 0.6).astype(float)
        mask[mask.sum(axis=1) == 0, 0] = 1.0
        labels = np.where(mask > 0, rng.integers(0, 2, size=(120, 4)).astype(float), np.nan)
        batch = make_batch(rng.integers(0, 2, 120), rng.random(120), labels)
        groups = assign_groups(batch.mask, batch.prob, 2)
        prior_cfg = PriorConfig(tau_bad=0.0, u_glob=0.0, u_fam=0.0, u_grp=0.0, n_min_group=1)
        tree = build_prior_tree(batch, groups, CostConfig(), prior_cfg)
        priors = prior_matrix(tree, groups)
        expected = batch.mask / batch.mask.sum(axis=1, keepdims=True)
        np.testing.assert_allclose(priors, expected, atol=1e-12)
        for g in tree.groups:
            w = g.weights
            self.assertLessEqual(w["a_g"] + w["a_g_fam"] + w["rho_glob"], 1.0 + 1e-12)


class TestGsdp(unittest.TestCase):

    def test_single_group_kl(self):
        pv = gsdp_penalty(np.array([0.7]), np.array([[0.8, 0.2]]), np.array([0]), np.array([[0.5, 0.5]]))
        self.assertAlmostEqual(pv.value, 0.192745, places=6)
        self.assertAlmostEqual(kl_divergence([0.8, 0.2], [0.5, 0.5]), 0.192745, places=6)

    def test_zero_cases(self):
        q = np.array([[0.5, 0.5], [0.2, 0.8]])
        priors = np.array([[0.5, 0.5], [0.2, 0.8]])
        self.assertEqual(gsdp_penalty(np.zeros(2), q, np.array([0, 1]), priors).value, 0.0)
        self.assertAlmostEqual(gsdp_penalty(np.array([0.3, 0.9]), q, np.array([0, 1]), priors).value, 0.0)

    def test_weighted_by_group_load(self):
        q = np.array([[0.8, 0.2], [0.5, 0.5]])
        priors = np.array([[0.5, 0.5], [0.5, 0.5]])
        pv = gsdp_penalty(np.array([0.3, 0.9]), q, np.array([0, 1]), priors)
        self.assertAlmostEqual(pv.value, 0.25 * kl_divergence([0.8, 0.2], [0.5, 0.5]))

    def test_gradients(self):
        rng = np.random.default_rng(4)
        n, m = 6, 3
        d = rng.uniform(0.1, 0.9, n)
        q = random_simplex(rng, n, m)
        group = np.array([0, 0, 0, 1, 1, 1])
        priors = np.repeat(random_simplex(rng, 2, m), 3, axis=0)
        pv = gsdp_penalty(d, q, group, priors)
        h = 1e-6
        for i in range(n):
            e = np.zeros(n)
            e[i] = h
            fd = (gsdp_penalty(d + e, q, group, priors).value - gsdp_penalty(d - e, q, group, priors).value) / (2 * h)
            self.assertAlmostEqual(fd, pv.grad_d[i], places=6)
            for j in range(m):
                e = np.zeros((n, m))
                e[i, j] = h
                fd = (gsdp_penalty(d, q + e, group, priors).value -
                      gsdp_penalty(d, q - e, group, priors).value) / (2 * h)
                self.assertAlmostEqual(fd, pv.grad_q[i, j], places=6)

    def test_load_matching(self):
        """Minimising over allocations drives the group load to D_g times the prior"""
        p = np.array([0.4, 0.3, 0.2, 0.1])
        d = np.array([0.6])
        q = np.array([[0.7, 0.1, 0.1, 0.1]])
        for _ in range(80):
            pv = gsdp_penalty(d, q, np.array([0]), p[None, :])
            q = q * np.exp(-0.5 * pv.grad_q)
            q = q / q.sum()
        load = d[0] * q[0]
        self.assertLess(kl_divergence(q[0], p), 1e-6)
        self.assertLess(np.max(np.abs(load - d[0] * p)), 1e-4)


class TestRankPenalty(unittest.TestCase):

    def test_geometric_reference(self):
        np.testing.assert_allclose(geometric_reference(3, 0.5), [4 / 7, 2 / 7, 1 / 7])
        with self.assertRaises(ValueError):
            geometric_reference(3, 1.0)

    def test_worked_example(self):
        r = np.array([0.9, 0.08, 0.02])
        g = geometric_reference(3, 0.5)
        self.assertAlmostEqual(majorization_excess(r, g), 0.328571, places=6)
        self.assertTrue(rank_activation(r, g, 0.1))
        pv = rank_js_penalty(np.array([0.5]), r[None, :], np.ones((1, 3)), varrho=0.5, margin=0.1)
        self.assertEqual(pv.details["active"], 1)
        self.assertAlmostEqual(pv.value, js_divergence(r, g))

    def test_reference_profile_and_singleton(self):
        g = geometric_reference(3, 0.5)
        pv = rank_js_penalty(np.array([1.0]), g[[2, 0, 1]][None, :], np.ones((1, 3)), margin=0.0)
        self.assertEqual(pv.details["active"], 0)
        self.assertEqual(pv.value, 0.0)
        pv = rank_js_penalty(np.array([1.0]), np.array([[0.0, 1.0, 0.0]]), np.array([[0, 1, 0]]), margin=0.0)
        self.assertEqual(pv.details["active"], 0)

    def test_undeferred_samples_contribute_nothing(self):
        q = np.array([[0.97, 0.02, 0.01], [0.5, 0.3, 0.2]])
        mask = np.ones((2, 3))
        both = rank_js_penalty(np.array([0.0, 0.8]), q, mask, margin=0.0)
        alone = rank_js_penalty(np.array([0.8]), q[1:], mask[1:], margin=0.0)
        self.assertAlmostEqual(both.value, alone.value)
        np.testing.assert_array_equal(both.grad_q[0], 0.0)
        self.assertEqual(rank_js_penalty(np.zeros(2), q, mask).value, 0.0)

    def test_activation_matches_prefix_scan(self):
        rng = np.random.default_rng(5)
        for _ in range(1000):
            k = int(rng.integers(1, 7))
            r = np.sort(random_simplex(rng, 1, k)[0])[::-1]
            g = geometric_reference(k, rng.uniform(0.1, 0.9))
            margin = rng.uniform(0.0, 0.3)
            brute = any(sum(r[:t]) - sum(g[:t]) > margin for t in range(1, k + 1))
            self.assertEqual(rank_activation(r, g, margin), brute)
            self.assertLessEqual(abs(sum(r) - sum(g)), 1e-12)

    def test_gradients(self):
        rng = np.random.default_rng(6)
        n, m = 5, 4
        d = rng.uniform(0.1, 0.9, n)
        q = random_simplex(rng, n, m)
        mask = np.ones((n, m))
        pv = rank_js_penalty(d, q, mask, varrho=0.5, margin=0.01)
        h = 1e-6
        for i in range(n):
            e = np.zeros(n)
            e[i] = h
            fd = (rank_js_penalty(d + e, q, mask, margin=0.01).value -
                  rank_js_penalty(d - e, q, mask, margin=0.01).value) / (2 * h)
            self.assertAlmostEqual(fd, pv.grad_d[i], places=6)
            for j in range(m):
                e = np.zeros((n, m))
                e[i, j] = h
                fd = (rank_js_penalty(d, q + e, mask, margin=0.01).value -
                      rank_js_penalty(d, q - e, mask, margin=0.01).value) / (2 * h)
                self.assertAlmostEqual(fd, pv.grad_q[i, j], places=6)


class TestLagrangian(unittest.TestCase):

    def test_penalty(self):
        value, slope = al_penalty(0.6, 0.5, 0.5, 10.0)
        self.assertAlmostEqual(value, 0.10)
        self.assertAlmostEqual(slope, 1.5)
        self.assertEqual(al_penalty(0.5, 0.0, 0.5, 10.0)[0], 0.0)
        self.assertAlmostEqual(al_penalty(0.3, 0.2, 0.5, 10.0)[0], -0.04)

    def test_projected_update(self):
        cfg = CostConfig(rho_def=0.5, eta_lambda=0.1)
        self.assertEqual(update_multiplier(ALState(0.0), 0.2, cfg).lambda_def, 0.0)
        al = ALState(0.0)
        rng = np.random.default_rng(7)
        for epoch in range(200):
            al = update_multiplier(al, rng.random(), cfg, epoch)
            self.assertGreaterEqual(al.lambda_def, 0.0)
        self.assertEqual(len(al.history), 200)

    def test_augmented_lagrangian(self):
        cfg = CostConfig(rho_def=0.5, mu=10.0, eta_lambda=0.1)
        value, al = augmented_lagrangian(0.6, ALState(0.5), cfg, epoch=3)
        self.assertAlmostEqual(value, 0.10)
        self.assertAlmostEqual(al.lambda_def, 0.51)
        with self.assertRaises(ValueError):
            augmented_lagrangian(1.2, ALState(0.5), cfg)


class TestTotalObjective(unittest.TestCase):

    def setUp(self):
        self.batch = make_batch([1, 0, 1], [0.3, 0.6, 0.9], [[1, 0, np.nan], [0, 0, 1], [np.nan, 1, 1]],
                                group=[0, 0, 1])
        self.q = np.array([[0.6, 0.4, 0.0], [0.2, 0.3, 0.5], [0.0, 0.9, 0.1]])
        self.priors = np.array([[0.5, 0.25, 0.25], [0.5, 0.25, 0.25], [0.0, 0.5, 0.5]])

    def test_component_sum(self):
        cfg = CostConfig(w_gsdp=0.3, w_rank=0.7, rho_def=0.2, mu=10.0, rank_margin=0.0)
        ctx = make_context(cfg, 3, al=ALState(0.4))
        policy = make_policy([0.3, 0.5, 0.8], self.q)
        value = total_objective(policy, self.batch, ctx, priors=self.priors)
        routing = routing_loss(policy, clinical_costs(self.batch, cfg), cfg, ctx.kappa).mean()
        gsdp = gsdp_penalty(policy.defer_mass, self.q, self.batch.group, self.priors).value
        rank = rank_js_penalty(policy.defer_mass, self.q, self.batch.mask, cfg.rank_varrho, 0.0).value
        al, _ = al_penalty(policy.defer_mass.mean(), 0.4, 0.2, 10.0)
        self.assertAlmostEqual(value.total, routing + 0.3 * gsdp + 0.7 * rank + al, places=12)
        self.assertAlmostEqual(value.breakdown["routing"], routing)

    def test_bare_cost_reduction(self):
        cfg = CostConfig(w_gsdp=0.0, w_rank=0.0, mu=0.0)
        ctx = make_context(cfg, 3, al=ALState(0.0))
        policy = make_policy([0.3, 0.5, 0.8], self.q)
        value = total_objective(policy, self.batch, ctx, priors=self.priors)
        routing = routing_loss(policy, clinical_costs(self.batch, cfg), cfg, ctx.kappa).mean()
        self.assertAlmostEqual(value.total, routing, places=12)

    def test_no_deferral(self):
        cfg = CostConfig(w_gsdp=0.5, w_rank=0.5, rho_def=0.5)
        ctx = make_context(cfg, 3)
        value = total_objective(make_policy(np.zeros(3), self.q), self.batch, ctx, priors=self.priors)
        c_ai = clinical_costs(self.batch, cfg).ai
        self.assertEqual(value.breakdown["gsdp"], 0.0)
        self.assertEqual(value.breakdown["rank"], 0.0)
        self.assertAlmostEqual(value.total, c_ai.mean())

    def test_permutation_invariance(self):
        cfg = CostConfig(w_gsdp=0.3, w_rank=0.7, kappa=[0.1, 0.2, 0.3])
        perm = [2, 0, 1]
        d = np.array([0.3, 0.5, 0.8])
        base = total_objective(make_policy(d, self.q), self.batch, make_context(cfg, 3), priors=self.priors)
        labels = self.batch.expert_labels[:, perm]
        batch = make_batch(self.batch.y, self.batch.prob, labels, group=self.batch.group)
        pcfg = CostConfig(w_gsdp=0.3, w_rank=0.7, kappa=[cfg.kappa[j] for j in perm])
        moved = total_objective(make_policy(d, self.q[:, perm]), batch, make_context(pcfg, 3),
                                priors=self.priors[:, perm])
        self.assertAlmostEqual(base.total, moved.total, places=12)


if __name__ == '__main__':
    unittest.main()
