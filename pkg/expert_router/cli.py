"""
Command line entry point: simulate, train, evaluate, sweep, ablate, print-config
"""
import functools
import hashlib
import json
import logging
import os
import sys
from typing import List, Optional

import click
import click_log

from .cohort.cohort_table import read_cohort_csv
from .cohort.generator import generate_cohort, write_generated
from .config import RunConfig, default_yaml, load_generation_spec, load_run_config
from .errors import RouterError
from .evaluation.evaluator import evaluate_checkpoint
from .evaluation.report import write_report
from .objective.priors import prior_tree_report
from .report_model import DiagnosticReport
from .router.checkpoint import load_checkpoint, save_checkpoint
from .trainer import ABLATIONS, ablate, sweep_targets, train_router

logger = logging.getLogger("expert_router")
click_log.basic_config(logger)

_RECORD_FIELDS = set(vars(logging.makeLogRecord({}))) | {"message", "asctime"}


class JsonLogFormatter(logging.Formatter):
    """One JSON object per record; ``extra`` fields are carried along"""

    def format(self, record: logging.LogRecord) -> str:
        doc = {"ts": self.formatTime(record), "level": record.levelname, "logger": record.name,
               "msg": record.getMessage()}
        doc.update({k: v for k, v in vars(record).items() if k not in _RECORD_FIELDS})
        if record.exc_info:
            doc["exc"] = self.formatException(record.exc_info)
        return json.dumps(doc, default=str)


for _handler in logger.handlers:
    _handler.setFormatter(JsonLogFormatter())


def exits_with_code(func):
    """Map RouterError families to their process exit codes"""

    @functools.wraps(func)
    def wrapper(*args, **kwargs):
        try:
            return func(*args, **kwargs)
        except RouterError as e:
            logger.error(str(e), extra={"error": type(e).__name__})
            sys.exit(e.exit_code)

    return wrapper


def file_hash(path: str) -> str:
    with open(path, "rb") as stream:
        return hashlib.sha256(stream.read()).hexdigest()


def _stem(path: str) -> str:
    return path[:-5] if path.endswith(".json") else path


def _run_config(config: Optional[str], overrides: List[str], **paths) -> RunConfig:
    extra = [f"paths.{k}={v}" for k, v in paths.items() if v is not None]
    return load_run_config(config, list(overrides) + extra)


def _write_diagnostics(report: DiagnosticReport, report_file: Optional[str]) -> None:
    if report_file is not None and report.messages:
        report.as_dataframe().to_csv(report_file, sep="\t", index=False)


config_option = click.option("--config", "-c", type=click.Path(exists=True), help="Run config (YAML)")
set_option = click.option("--set", "overrides", multiple=True, metavar="SECTION.KEY=VALUE",
                          help="Override a config key; repeatable")
report_option = click.option("--report-file", "-R", help="TSV file for diagnostic messages")


@click.group()
@click_log.simple_verbosity_option(logger)
def main():
    """
    Cost-sensitive routing of cases between an AI model and a panel of experts
    """


@main.command()
@click.option("--spec", "-s", type=click.Path(exists=True), help="Generation spec (YAML); defaults if omitted")
@click.option("--out", "-o", required=True, help="Cohort CSV to write")
@click.option("--seed", type=int, help="Override the spec seed")
@set_option
@report_option
@exits_with_code
def simulate(spec: Optional[str], out: str, seed: Optional[int], overrides: List[str], report_file: Optional[str]):
    """
    Generate a synthetic multi-expert cohort with its manifest and embedding sidecar
    """
    overrides = list(overrides) + ([f"seed={seed}"] if seed is not None else [])
    gen_spec = load_generation_spec(spec, overrides)
    report = DiagnosticReport()
    gen = generate_cohort(gen_spec, report)
    paths = write_generated(gen, out)
    _write_diagnostics(report, report_file)
    click.echo(paths["manifest"])


@main.command()
@config_option
@click.option("--cohort", help="Cohort CSV (overrides paths.cohort)")
@click.option("--checkpoint", help="Checkpoint to write (overrides paths.checkpoint)")
@set_option
@report_option
@exits_with_code
def train(config: Optional[str], cohort: Optional[str], checkpoint: Optional[str], overrides: List[str],
          report_file: Optional[str]):
    """
    Train the router with the deferral-budget controller and early stopping
    """
    cfg = _run_config(config, overrides, cohort=cohort, checkpoint=checkpoint)
    table = read_cohort_csv(cfg.paths.cohort)
    report = DiagnosticReport()
    ckpt_path = cfg.paths.checkpoint
    result = train_router(table, cfg, report, log_path=cfg.paths.resolved_train_log(),
                          dump_path=_stem(ckpt_path) + ".nonfinite.json")
    save_checkpoint(result.checkpoint, ckpt_path)
    with open(_stem(ckpt_path) + ".priors.yaml", "w") as stream:
        stream.write(prior_tree_report(result.tree))
    _write_diagnostics(report, report_file)
    click.echo(ckpt_path)


@main.command()
@config_option
@click.option("--checkpoint", help="Trained checkpoint (overrides paths.checkpoint)")
@click.option("--cohort", help="Cohort CSV (overrides paths.cohort)")
@click.option("--split", help="Split to evaluate (overrides evaluation.split)")
@click.option("--out-dir", "-o", help="Report directory (overrides paths.report_dir)")
@set_option
@exits_with_code
def evaluate(config: Optional[str], checkpoint: Optional[str], cohort: Optional[str], split: Optional[str],
             out_dir: Optional[str], overrides: List[str]):
    """
    Hard-routing evaluation with AI-only and uniform-random-defer reference rows
    """
    cfg = _run_config(config, overrides, cohort=cohort, checkpoint=checkpoint, report_dir=out_dir)
    table = read_cohort_csv(cfg.paths.cohort)
    ckpt = load_checkpoint(cfg.paths.checkpoint)
    metrics = evaluate_checkpoint(ckpt, table, cfg, split, cohort_name=os.path.basename(cfg.paths.cohort),
                                  checkpoint_hash=file_hash(cfg.paths.checkpoint))
    paths = write_report(metrics, cfg.paths.report_dir)
    click.echo(paths["json"])


@main.command()
@config_option
@click.option("--cohort", help="Cohort CSV (overrides paths.cohort)")
@click.option("--target", "-t", "targets", type=float, multiple=True, help="Deferral target; repeatable")
@click.option("--out", "-o", required=True, help="CSV for the per-target table")
@set_option
@exits_with_code
def sweep(config: Optional[str], cohort: Optional[str], targets: List[float], out: str, overrides: List[str]):
    """
    Train one router per deferral target and report realised deferral gaps
    """
    cfg = _run_config(config, overrides, cohort=cohort)
    table = read_cohort_csv(cfg.paths.cohort)
    df = sweep_targets(table, cfg, targets or None)
    df.to_csv(out, index=False, float_format="%.12g", lineterminator="\n")
    click.echo(out)


@main.command("ablate")
@config_option
@click.option("--cohort", help="Cohort CSV (overrides paths.cohort)")
@click.option("--seed", "seeds", type=int, multiple=True, help="Seed; repeatable (default sweep.ablation_seeds)")
@click.option("--condition", "conditions", type=click.Choice(list(ABLATIONS)), multiple=True,
              help="Ablation condition; repeatable (default all)")
@click.option("--out-dir", "-o", required=True, help="Directory for the run and summary tables")
@set_option
@exits_with_code
def ablate_cmd(config: Optional[str], cohort: Optional[str], seeds: List[int], conditions: List[str], out_dir: str,
             overrides: List[str]):
    """
    Objective ablations over several seeds: mean and std per condition
    """
    cfg = _run_config(config, overrides, cohort=cohort)
    table = read_cohort_csv(cfg.paths.cohort)
    runs, summary = ablate(table, cfg, seeds or None, conditions or None)
    os.makedirs(out_dir, exist_ok=True)
    csv_args = dict(index=False, float_format="%.12g", lineterminator="\n")
    runs.to_csv(os.path.join(out_dir, "ablation_runs.csv"), **csv_args)
    summary.to_csv(os.path.join(out_dir, "ablation_summary.csv"), **csv_args)
    click.echo(out_dir)


@main.command("print-config")
@click.option("--kind", type=click.Choice(["run", "generation"]), default="run", show_default=True)
def print_config(kind: str):
    """
    Print the full default config document
    """
    click.echo(default_yaml(kind), nl=False)


if __name__ == '__main__':
    main()
