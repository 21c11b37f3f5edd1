# -*- coding: utf-8 -*-
import os
import unittest

import numpy as np
import yaml

from expert_router.config import CostConfig
from expert_router.errors import ContractViolationError
from expert_router.evaluation.metrics import (BEST_ORACLE, OVERALL, STRUCTURAL, ai_retention, classification_block,
                                              collapse_diagnostics, concentration_metrics, cost_metrics,
                                              deferral_rates, evaluate_outcomes, oracle_predictions,
                                              per_expert_table, risk_bins, risk_scores, risk_stratified_costs)
from expert_router.evaluation.outcomes import (AI_ONLY, ROUTER, UNIFORM_RANDOM, ai_only_outcomes,
                                               final_predictions, route_outcomes, uniform_random_outcomes)
from expert_router.evaluation.report import MetricsReport, read_report, validate_metrics, write_report
from expert_router.report_model import Category, DiagnosticReport
from expert_router.router.features import StateBatch
from tests import INPUT_DIR, OUTPUT_DIR

"""Evaluation metrics, reference policies and the metrics report."""

CASES = os.path.join(INPUT_DIR, 'metric_cases.yaml')


def _cases():
    with open(CASES) as stream:
        return yaml.safe_load(stream)


def make_batch(y, prob, labels) -> StateBatch:
    labels = np.asarray(labels, dtype=float)
    n = len(y)
    return StateBatch(risk=np.zeros((n, 3)), logits=np.zeros((n, 2)), struct=np.zeros((n, 2)),
                      prob=np.asarray(prob, dtype=float), mask=(~np.isnan(labels)).astype(float),
                      y=np.asarray(y, dtype=float), expert_labels=labels, index=np.arange(n),
                      group=np.zeros(n, dtype=np.int64), ids=[f"c{i}" for i in range(n)])


def hard_policy(actions, m):
    actions = np.asarray(actions)
    policy = np.zeros((len(actions), m + 1))
    policy[np.arange(len(actions)), actions] = 1.0
    return policy


def random_outcomes(rng, n=60, m=4, method=ROUTER):
    mask = (rng.random((n, m)) < 0.6).astype(float)
    y = rng.integers(0, 2, n)
    labels = np.where(rng.random((n, m)) < 0.8, y[:, None], 1 - y[:, None]).astype(float)
    labels[mask == 0] = np.nan
    batch = make_batch(y, rng.random(n), labels)
    raw = rng.random((n, m + 1)) * np.concatenate([np.ones((n, 1)), mask], axis=1)
    policy = raw / raw.sum(axis=1, keepdims=True)
    features = {c: rng.random(n) for c in ('vCDR', 'aCDR', 'vim_risk_z', 'uncertainty')}
    cohort = np.where(rng.random(n) < 0.5, 'north', 'south')
    return route_outcomes(policy, batch, cohort, features, method=method)


class TestClassification(unittest.TestCase):

    def test_confusion_cases(self):
        for case in _cases()['confusion']:
            c = case['counts']
            y = [1] * c['tp'] + [0] * c['fp'] + [1] * c['fn'] + [0] * c['tn']
            pred = [1] * (c['tp'] + c['fp']) + [0] * (c['fn'] + c['tn'])
            block = classification_block(np.array(y), np.array(pred))
            for k, v in case['expected'].items():
                self.assertAlmostEqual(block[k], v, places=6, msg=f"{case['description']}: {k}")

    def test_final_predictions(self):
        labels = np.array([[1.0, np.nan], [0.0, 1.0]])
        pred = final_predictions(np.array([0, 2]), np.array([0.7, 0.2]), labels)
        np.testing.assert_array_equal(pred, [1, 1])
        with self.assertRaises(ContractViolationError):
            final_predictions(np.array([2, 0]), np.array([0.7, 0.2]), labels)


class TestCostsAndDeferral(unittest.TestCase):

    def test_costs(self):
        cfg = CostConfig(c_fn=2.0, c_fp=1.5, gamma_tier=1.0)
        batch = make_batch([1, 0, 0, 1], [0.1, 0.2, 0.3, 0.9], [[1, 0]] * 4)
        out = ai_only_outcomes(batch, np.array(['a'] * 4))
        costs = cost_metrics(out, cfg, kappa=[0.2, 0.2])
        self.assertAlmostEqual(costs['clinical_cost'], 0.5)
        self.assertEqual(costs['expert_cost'], 0.0)
        deferred = route_outcomes(hard_policy([1, 2, 1, 1], 2), batch, np.array(['a'] * 4))
        costs = cost_metrics(deferred, cfg, kappa=[0.2, 0.2])
        self.assertAlmostEqual(costs['expert_cost'], 0.2)
        self.assertEqual(costs['total_cost'], costs['clinical_cost'] + costs['expert_cost'])
        perfect = make_batch([1, 0], [0.9, 0.1], [[1, 0], [0, 0]])
        self.assertEqual(cost_metrics(ai_only_outcomes(perfect, np.array(['a', 'a'])), cfg)['total_cost'], 0.0)

    def test_deferral_rates(self):
        batch = make_batch([1, 0], [0.5, 0.5], [[1, 1], [0, 0]])
        policy = np.array([[0.8, 0.1, 0.1], [0.4, 0.6, 0.0]])
        rates = deferral_rates(route_outcomes(policy, batch, np.array(['a', 'a'])))
        self.assertAlmostEqual(rates['defer_soft'], 0.4)
        self.assertEqual(rates['defer_hard'], 0.5)
        self.assertEqual(rates['hard_freq'], [0.5, 0.0])
        rng = np.random.default_rng(0)
        out = random_outcomes(rng, n=5, m=3)
        np.testing.assert_allclose(deferral_rates(out)['soft_loads'], out.policy[:, 1:].mean(axis=0))
        none = deferral_rates(ai_only_outcomes(batch, np.array(['a', 'a'])))
        self.assertEqual((none['defer_soft'], none['defer_hard']), (0.0, 0.0))


class TestConcentration(unittest.TestCase):

    def test_cases(self):
        for case in _cases()['concentration']:
            block = concentration_metrics(np.array(case['loads'], dtype=float))
            for k, v in case['expected'].items():
                self.assertAlmostEqual(block[k], v, places=6, msg=f"{case['description']}: {k}")

    def test_single_expert(self):
        block = concentration_metrics(np.array([3.0]))
        self.assertEqual(block['n_eff'], 1.0)
        self.assertEqual(block['hhi_norm'], 0.0)
        self.assertEqual(block['entropy_collapse'], 0.0)

    def test_bounds_on_random_loads(self):
        rng = np.random.default_rng(1)
        for _ in range(500):
            m = int(rng.integers(2, 13))
            loads = rng.random(m) ** 3
            loads[rng.random(m) < 0.3] = 0.0
            if loads.sum() == 0:
                loads[0] = 1.0
            b = concentration_metrics(loads)
            self.assertTrue(1.0 <= b['n_eff'] <= m)
            for k in ('entropy_collapse', 'gini_norm', 'hhi_norm', 'entropy_norm', 'dead_frac'):
                self.assertTrue(0.0 <= b[k] <= 1.0, k)
            perm = rng.permutation(m)
            moved = concentration_metrics(loads[perm])
            for k, v in b.items():
                self.assertAlmostEqual(moved[k], v, places=12)

    def test_collapse_block(self):
        batch = make_batch([1, 0, 1], [0.5, 0.5, 0.5], [[1, 1, 0], [0, 1, 0], [1, 0, 0]])
        out = route_outcomes(hard_policy([2, 2, 2], 3), batch, np.array(['a'] * 3))
        block = collapse_diagnostics(out)
        self.assertTrue(block['defined'])
        self.assertEqual(block['hard']['top1_share'], 1.0)
        self.assertEqual(block['hard']['n_eff'], 1.0)
        report = DiagnosticReport()
        empty = collapse_diagnostics(ai_only_outcomes(batch, np.array(['a'] * 3)), report)
        self.assertFalse(empty['defined'])
        self.assertIsNone(empty['hard'])
        self.assertIn(Category.UndefinedBlock.value, report.messages_by_category())
        self.assertTrue(report.passes())

    def test_collapse_relabel_invariance(self):
        rng = np.random.default_rng(2)
        out = random_outcomes(rng)
        perm = rng.permutation(out.n_experts)
        inverse = np.argsort(perm)
        batch = make_batch(out.y, out.prob, out.expert_labels[:, perm])
        policy = np.concatenate([out.policy[:, :1], out.policy[:, 1:][:, perm]], axis=1)
        actions = np.where(out.actions > 0, inverse[np.maximum(out.actions - 1, 0)] + 1, 0)
        moved = route_outcomes(policy, batch, out.cohort, out.features, actions=actions)
        a, b = collapse_diagnostics(out), collapse_diagnostics(moved)
        for part in ('hard', 'soft'):
            for k, v in a[part].items():
                self.assertAlmostEqual(b[part][k], v, places=12)


class TestRiskStratification(unittest.TestCase):

    def test_bins_match_sort_and_slice(self):
        rng = np.random.default_rng(3)
        out = random_outcomes(rng, n=10, m=3)
        # equal orderings on both axis features keep the mean ranks distinct
        out.features['aCDR'] = out.features['vCDR'].copy()
        cfg = CostConfig()
        table = risk_stratified_costs({ROUTER: out}, cfg, axis=STRUCTURAL, n_bins=5)
        scores = risk_scores(out.features, STRUCTURAL)
        self.assertEqual(len(set(scores.tolist())), 10)
        order = np.argsort(scores, kind='mergesort')
        wrong = (out.predictions != out.y)
        cost = np.where(wrong, np.where(out.y == 1, cfg.c_fn, cfg.c_fp), 0.0)
        self.assertEqual(table['bin'].tolist(), [0, 1, 2, 3, 4])
        for b in range(5):
            rows = order[2 * b:2 * b + 2]
            self.assertAlmostEqual(table['clinical_cost'][b], cost[rows].mean())
            self.assertEqual(table['n'][b], 2)

    def test_constant_score(self):
        bins = risk_bins(np.full(12, 0.4), 5)
        np.testing.assert_array_equal(bins, np.zeros(12))

    def test_coarse_binning(self):
        report = DiagnosticReport()
        bins = risk_bins(np.array([0.3, 0.1, 0.2]), 5, report, STRUCTURAL)
        np.testing.assert_array_equal(bins, [2, 0, 1])
        self.assertIn(Category.CoarseBinning.value, report.messages_by_category())

    def test_long_format_over_methods(self):
        rng = np.random.default_rng(4)
        out = random_outcomes(rng, n=40)
        ai = ai_only_outcomes(make_batch(out.y, out.prob, out.expert_labels), out.cohort, out.features)
        table = risk_stratified_costs({ROUTER: out, AI_ONLY: ai}, CostConfig(), axis='reliability')
        self.assertEqual(sorted(set(table['method'])), sorted([ROUTER, AI_ONLY]))
        self.assertEqual(len(table), 10)
        self.assertTrue(np.all(table[table['method'] == AI_ONLY]['expert_cost'] == 0.0))
        with self.assertRaises(KeyError):
            risk_stratified_costs({ROUTER: out}, CostConfig(), axis='nonsense')


class TestRetentionAndReaders(unittest.TestCase):

    def test_retention_identity(self):
        rng = np.random.default_rng(5)
        for _ in range(10):
            out = random_outcomes(rng)
            ret = ai_retention(out, CostConfig())
            for scope, block in ret.items():
                self.assertAlmostEqual(block['identity_residual'], 0.0, places=9, msg=scope)
            self.assertAlmostEqual(ret[OVERALL]['ai_share'], 1.0 - deferral_rates(out)['defer_hard'])
            self.assertEqual(set(ret), {OVERALL, 'north', 'south'})

    def test_oracle(self):
        batch = make_batch([1, 0, 1], [0.2, 0.9, 0.8], [[0, 1], [1, 1], [np.nan, np.nan]])
        out = ai_only_outcomes(batch, np.array(['a'] * 3))
        np.testing.assert_array_equal(oracle_predictions(out), [1, 1, 1])

    def test_per_expert_table(self):
        rng = np.random.default_rng(6)
        out = random_outcomes(rng, m=3)
        table = per_expert_table(out, CostConfig(), names=['r1', 'r2', 'r3'])
        self.assertEqual(table['reader'].tolist(), ['r1', 'r2', 'r3', BEST_ORACLE])
        for j in range(3):
            sel = out.mask[:, j] > 0
            self.assertEqual(table['n'][j], int(sel.sum()))
            acc = (out.expert_labels[sel, j] == out.y[sel]).mean()
            self.assertAlmostEqual(table['accuracy'][j], acc)
        self.assertEqual(table['n'][3], len(out))
        self.assertAlmostEqual(table['router_accuracy'][3], (out.predictions == out.y).mean())


class TestReferencesAndReport(unittest.TestCase):

    def test_uniform_random_reference(self):
        rng = np.random.default_rng(7)
        base = random_outcomes(rng, n=400)
        batch = make_batch(base.y, base.prob, base.expert_labels)
        none = uniform_random_outcomes(batch, base.cohort, 0.0, np.random.default_rng(0))
        self.assertFalse(none.routed.any())
        out = uniform_random_outcomes(batch, base.cohort, 0.3, np.random.default_rng(0))
        self.assertEqual(out.method, UNIFORM_RANDOM)
        self.assertAlmostEqual(out.routed.mean(), 0.3, delta=0.08)
        self.assertAlmostEqual(out.defer_mass.mean(), 0.3, places=12)
        chosen = out.actions[out.routed] - 1
        self.assertTrue(np.all(out.mask[np.flatnonzero(out.routed), chosen] > 0))
        np.testing.assert_allclose(out.policy.sum(axis=1), 1.0)

    def test_report_validates_and_writes(self):
        rng = np.random.default_rng(8)
        out = random_outcomes(rng)
        batch = make_batch(out.y, out.prob, out.expert_labels)
        cfg = CostConfig()
        methods = {ROUTER: out,
                   AI_ONLY: ai_only_outcomes(batch, out.cohort, out.features),
                   UNIFORM_RANDOM: uniform_random_outcomes(batch, out.cohort, 0.2, np.random.default_rng(1),
                                                           out.features)}
        report = DiagnosticReport()
        blocks = {k: evaluate_outcomes(v, cfg, report=report) for k, v in methods.items()}
        metrics = MetricsReport(split='test', n=len(out), methods=blocks, experts=['e1', 'e2', 'e3', 'e4'],
                                config_hash='0' * 64, risk=risk_stratified_costs(methods, cfg),
                                per_expert=per_expert_table(out, cfg), diagnostics=report)
        doc = metrics.as_dict()
        self.assertTrue(validate_metrics(doc))
        self.assertIsNone(doc['methods'][AI_ONLY]['collapse']['hard'])
        flat = metrics.flat_table()
        self.assertEqual(len(flat), 3 * 3)
        out_dir = os.path.join(OUTPUT_DIR, 'metrics_report')
        paths = write_report(metrics, out_dir)
        self.assertEqual(read_report(paths['json'])['n'], len(out))
        broken = dict(doc, format='something-else')
        self.assertFalse(validate_metrics(broken))


if __name__ == '__main__':
    unittest.main()
