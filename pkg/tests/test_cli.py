# -*- coding: utf-8 -*-
import filecmp
import os
import unittest

import yaml
from click.testing import CliRunner

from expert_router.cli import main
from tests import INPUT_DIR, OUTPUT_DIR

"""Command line round trip: simulate, train, evaluate."""

SMALL_SPEC = os.path.join(INPUT_DIR, 'small_generation.yaml')
SMALL_RUN = os.path.join(INPUT_DIR, 'small_run.yaml')
CLI_DIR = os.path.join(OUTPUT_DIR, 'cli')


class TestCli(unittest.TestCase):

    def setUp(self):
        os.makedirs(CLI_DIR, exist_ok=True)
        self.runner = CliRunner()

    def invoke(self, *args):
        result = self.runner.invoke(main, list(args))
        self.assertEqual(result.exit_code, 0, result.output)
        return result

    def run_pipeline(self, name):
        run_dir = os.path.join(CLI_DIR, name)
        os.makedirs(run_dir, exist_ok=True)
        cohort = os.path.join(run_dir, 'cohort.csv')
        ckpt = os.path.join(run_dir, 'router.ckpt.json')
        self.invoke('simulate', '--spec', SMALL_SPEC, '--out', cohort,
                    '--report-file', os.path.join(run_dir, 'simulate_report.tsv'))
        self.invoke('train', '-c', SMALL_RUN, '--cohort', cohort, '--checkpoint', ckpt)
        self.invoke('evaluate', '-c', SMALL_RUN, '--cohort', cohort, '--checkpoint', ckpt,
                    '-o', os.path.join(run_dir, 'eval'))
        return run_dir

    def test_simulate_train_evaluate(self):
        runs = [self.run_pipeline(name) for name in ('run_a', 'run_b')]
        outputs = ['cohort.csv', 'cohort.manifest.json', 'cohort.embeddings.csv', 'router.ckpt.json',
                   'router.ckpt.priors.yaml']
        outputs += [os.path.join('eval', fn)
                    for fn in ('metrics_test.json', 'metrics_test.csv', 'risk_test.csv', 'per_expert_test.csv')]
        for fn in outputs:
            a, b = (os.path.join(run, fn) for run in runs)
            self.assertTrue(os.path.exists(a), fn)
            self.assertTrue(filecmp.cmp(a, b, shallow=False), fn)

    def test_print_config(self):
        result = self.invoke('print-config')
        doc = yaml.safe_load(result.output)
        for section in ('paths', 'costs', 'prior', 'router', 'optimizer', 'training', 'evaluation', 'sweep'):
            self.assertIn(section, doc)
        gen = yaml.safe_load(self.invoke('print-config', '--kind', 'generation').output)
        self.assertEqual(len(gen['experts']), 12)

    def test_unknown_override_is_a_config_error(self):
        result = self.runner.invoke(main, ['simulate', '--out', os.path.join(CLI_DIR, 'never.csv'),
                                           '--set', 'bogus.key=1'])
        self.assertEqual(result.exit_code, 2)


if __name__ == '__main__':
    unittest.main()
