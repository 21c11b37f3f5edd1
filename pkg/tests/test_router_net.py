# -*- coding: utf-8 -*-
import os
import unittest

import numpy as np
import pandas as pd

from expert_router.cohort.cohort_table import CohortTable
from expert_router.config import CostConfig, OptimizerConfig, RouterConfig
from expert_router.errors import ConfigError
from expert_router.objective.lagrangian import ALState
from expert_router.objective.total import forward_objective, make_context, objective_gradients
from expert_router.report_model import Category, DiagnosticReport
from expert_router.router.adamw import AdamW
from expert_router.router.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from expert_router.router.features import (StateBatch, fit_feature_stats, standardize_features)
from expert_router.router.noise import NoiseStream
from expert_router.router.router_net import build_router_state, init_params, policy_forward
from tests import OUTPUT_DIR

"""Router network, optimizer, noise streams and checkpoints."""

SMALL = RouterConfig(hidden_branch=3, hidden_fuse=4, hidden_trunk=4)


def random_batch(rng: np.random.Generator, n: int, m: int, min_feasible: int = 0) -> StateBatch:
    mask = (rng.random((n, m)) < 0.6).astype(float)
    for i in range(n):
        if mask[i].sum() < min_feasible:
            mask[i, rng.choice(m, size=min_feasible, replace=False)] = 1.0
    y = (rng.random(n) < 0.4).astype(float)
    labels = np.where(rng.random((n, m)) < 0.8, y[:, None], 1 - y[:, None])
    labels = np.where(mask > 0, labels, np.nan)
    z = rng.normal(0, 2, size=n)
    return StateBatch(risk=rng.normal(size=(n, 3)), logits=np.stack([-z / 2, z / 2], axis=1),
                      struct=rng.normal(size=(n, 2)), prob=1 / (1 + np.exp(-z)), mask=mask, y=y,
                      expert_labels=labels, index=np.arange(n), group=np.zeros(n, dtype=np.int64),
                      ids=[f"s{i}" for i in range(n)])


def perturbed_params(m: int, rng: np.random.Generator):
    params = init_params(m, SMALL, rng)
    return params.unflatten(params.flatten() + rng.normal(0, 0.3, size=params.size))


class TestFeatures(unittest.TestCase):

    def test_population_std(self):
        frame = pd.DataFrame({'a': [1.0, 2.0, 3.0], 'b': [4.0, 4.0, 4.0]})
        table = CohortTable(frame=frame, n_experts=0)
        report = DiagnosticReport()
        stats = fit_feature_stats(table, columns=['a', 'b'], report=report)
        self.assertAlmostEqual(stats.mean['a'], 2.0)
        self.assertAlmostEqual(stats.std['a'], np.sqrt(2.0 / 3.0))
        std, _ = standardize_features(table, stats)
        self.assertAlmostEqual(std.frame['z_a'][2], 1.0 / np.sqrt(2.0 / 3.0))
        np.testing.assert_array_equal(std.frame['z_b'], [0.0, 0.0, 0.0])
        self.assertIn(Category.ZeroVariance.value, report.messages_by_category())

    def test_structural_head(self):
        rng = np.random.default_rng(0)
        batch = random_batch(rng, 1, 3)
        batch.struct[:] = [[0.8, 0.6]]
        batch.prob[:] = 0.2
        params = init_params(3, SMALL, rng)
        params.arrays['struct_w'][:] = [2.0, 1.0]
        params.arrays['struct_b'][:] = [-1.0]
        _, r_str, p_str = build_router_state(batch, params)
        self.assertAlmostEqual(p_str[0], 0.768525, places=6)
        self.assertAlmostEqual(r_str[0, 1], 0.568525, places=6)
        params.arrays['struct_w'][:] = 0.0
        params.arrays['struct_b'][:] = 0.0
        _, r_str, p_str = build_router_state(batch, params)
        self.assertEqual(p_str[0], 0.5)
        self.assertAlmostEqual(r_str[0, 0], 0.0)
        self.assertAlmostEqual(r_str[0, 1], 0.3)


class TestForward(unittest.TestCase):

    def test_policy_invariants(self):
        rng = np.random.default_rng(1)
        batch = random_batch(rng, 200, 4)
        batch.mask[:3] = 0.0
        batch.expert_labels[:3] = np.nan
        params = perturbed_params(4, rng)
        noise = NoiseStream(3, 200, 4).logistic(0, batch.index)
        trace = policy_forward(batch, params, noise=noise)
        probs = trace.policy.action_probs
        np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-9)
        self.assertTrue(np.all(probs[:, 1:][batch.mask == 0] == 0.0))
        empty = batch.mask.sum(axis=1) == 0
        self.assertTrue(empty.any())
        self.assertTrue(np.all(probs[empty, 0] == 1.0))

    def test_deterministic(self):
        rng = np.random.default_rng(2)
        batch = random_batch(rng, 20, 3)
        params = perturbed_params(3, rng)
        stream = NoiseStream(5, 20, 3)
        a = policy_forward(batch, params, noise=stream.logistic(4, batch.index))
        b = policy_forward(batch, params, noise=NoiseStream(5, 20, 3).logistic(4, batch.index))
        np.testing.assert_array_equal(a.policy.action_probs, b.policy.action_probs)


class TestGradientOracle(unittest.TestCase):
    """Analytic gradients against central differences on single-sample objectives"""

    def check_trials(self, rng, costs, draw_noise, m=4, trials=50, h=1e-5):
        for trial in range(trials):
            batch = random_batch(rng, 1, m, min_feasible=2)
            params = perturbed_params(m, rng)
            ctx = make_context(costs, m, al=ALState(lambda_def=0.3))
            priors = batch.mask / batch.mask.sum(axis=1, keepdims=True)
            noise = draw_noise(rng, m)
            value, trace, grads = objective_gradients(params, batch, ctx, SMALL, priors=priors, noise=noise)
            analytic = np.concatenate([grads[k].ravel() for k in params.names])
            base = params.flatten()
            numeric = np.zeros_like(base)
            for t in range(len(base)):
                for sign in (1.0, -1.0):
                    vec = base.copy()
                    vec[t] += sign * h
                    v, _ = forward_objective(params.unflatten(vec), batch, ctx, SMALL, priors=priors,
                                             frozen_gate=trace.gate)
                    numeric[t] += sign * v.total
            numeric /= 2 * h
            err = np.abs(analytic - numeric)
            rel = err / np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-300)
            good = (rel < 1e-3) | (err < 1e-6)
            self.assertGreaterEqual(good.mean(), 0.95, f"trial {trial}")

    def test_open_gates(self):
        costs = CostConfig(w_gsdp=0.5, w_rank=0.5, rank_margin=0.0, rho_def=0.2, mu=10.0)
        # every feasible gate stays open, away from the kinks of the hard threshold
        self.check_trials(np.random.default_rng(7), costs, lambda rng, m: np.full((1, m), 5.0))

    def test_closed_gates(self):
        """
        Sampled gates close some feasible experts, so the conditional
        allocation hits q = 0 where the load penalties are not differentiable;
        they are switched off here and only routing and budget terms are checked.
        """
        costs = CostConfig(w_gsdp=0.0, w_rank=0.0, rho_def=0.2, mu=10.0)
        self.check_trials(np.random.default_rng(11), costs, lambda rng, m: rng.logistic(size=(1, m)) - 1.0)


class TestAdamW(unittest.TestCase):

    def test_zero_learning_rate(self):
        rng = np.random.default_rng(3)
        params = init_params(3, SMALL, rng)
        opt = AdamW(params, lr=0.0, weight_decay=0.1)
        grads = {k: np.ones_like(v) for k, v in params.arrays.items()}
        new = opt.step(params, grads)
        np.testing.assert_array_equal(new.flatten(), params.flatten())
        self.assertEqual(opt.step_count, 1)
        self.assertTrue(np.all(opt.m['gate_W'] > 0))

    def test_first_step_is_sign_step(self):
        rng = np.random.default_rng(4)
        params = init_params(2, SMALL, rng)
        opt = AdamW(params, lr=0.01, weight_decay=0.0, eps=0.0)
        grads = {k: np.full_like(v, -3.0) for k, v in params.arrays.items()}
        new = opt.step(params, grads)
        np.testing.assert_allclose(new.flatten() - params.flatten(), 0.01)

    def test_invalid_config(self):
        params = init_params(2, SMALL, np.random.default_rng(0))
        with self.assertRaises(ConfigError):
            AdamW(params, lr=-1.0)
        opt = AdamW.from_config(params, OptimizerConfig(lr=0.5))
        self.assertEqual(opt.lr, 0.5)


class TestNoiseStream(unittest.TestCase):

    def test_independent_of_batching(self):
        stream = NoiseStream(9, 50, 3)
        full = stream.uniforms(2, np.arange(50))
        part = NoiseStream(9, 50, 3).uniforms(2, np.array([40, 3, 17]))
        np.testing.assert_array_equal(part, full[[40, 3, 17]])
        other = stream.uniforms(3, np.arange(50))
        self.assertFalse(np.array_equal(full, other))


class TestCheckpoint(unittest.TestCase):

    def test_exact_round_trip(self):
        os.makedirs(OUTPUT_DIR, exist_ok=True)
        rng = np.random.default_rng(5)
        params = perturbed_params(3, rng)
        opt = AdamW(params, lr=0.01)
        params = opt.step(params, {k: rng.normal(size=v.shape) for k, v in params.arrays.items()})
        frame = pd.DataFrame({'a': rng.normal(size=10)})
        stats = fit_feature_stats(CohortTable(frame=frame, n_experts=0), columns=['a'])
        ckpt = Checkpoint(params=params, feature_stats=stats, router=SMALL.model_dump(), optimizer=opt.state_dict(),
                          lagrangian=ALState(0.25).as_dict(), noise={'seed': 1, 'epoch': 3}, epoch=3,
                          config_hash='abc')
        path = os.path.join(OUTPUT_DIR, 'roundtrip.ckpt.json')
        save_checkpoint(ckpt, path)
        loaded = load_checkpoint(path)
        np.testing.assert_array_equal(loaded.params.flatten(), params.flatten())
        self.assertEqual(loaded.params.names, params.names)
        self.assertEqual(loaded.feature_stats.std, stats.std)
        opt2 = AdamW(loaded.params)
        opt2.load_state_dict(loaded.optimizer)
        np.testing.assert_array_equal(opt2.m['alloc_W'], opt.m['alloc_W'])

    def test_rejects_foreign_document(self):
        os.makedirs(OUTPUT_DIR, exist_ok=True)
        path = os.path.join(OUTPUT_DIR, 'not_a_checkpoint.json')
        with open(path, 'w') as stream:
            stream.write('{"format": "something-else"}')
        with self.assertRaises(ConfigError):
            load_checkpoint(path)


if __name__ == '__main__':
    unittest.main()
