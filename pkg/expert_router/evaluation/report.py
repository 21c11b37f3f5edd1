"""
MetricsReport document: JSON with a bundled schema, plus flat CSV tables
"""
import io
import json
import logging
import math
import os
import pkgutil
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Union

import jsonschema
import numpy as np
import pandas as pd

from ..errors import DataError
from ..report_model import DiagnosticReport

logger = logging.getLogger(__name__)

FILE_PATH = Union[str, bytes, os.PathLike]

REPORT_FORMAT = "expert-router-metrics"
REPORT_VERSION = 1
METRICS_SCHEMA = "schema/metrics_report.schema.json"

FLAT_SECTIONS = ("classification", "costs")


def _plain(obj):
    """Make numpy scalars and NaN JSON-friendly"""
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return None if math.isnan(v) or math.isinf(v) else v
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


@dataclass
class MetricsReport:
    split: str
    n: int
    methods: Dict[str, Dict[str, Any]] = field(default_factory=dict)
    experts: List[str] = field(default_factory=list)
    config_hash: Optional[str] = None
    checkpoint_hash: Optional[str] = None
    cohort: Optional[str] = None
    risk: pd.DataFrame = None
    per_expert: pd.DataFrame = None
    diagnostics: DiagnosticReport = field(default_factory=DiagnosticReport)

    def as_dict(self) -> Dict[str, Any]:
        return _plain({
            "format": REPORT_FORMAT,
            "version": REPORT_VERSION,
            "split": self.split,
            "n": self.n,
            "n_experts": len(self.experts) or None,
            "experts": self.experts,
            "config_hash": self.config_hash,
            "checkpoint_hash": self.checkpoint_hash,
            "cohort": self.cohort,
            "methods": self.methods,
            "diagnostics": [m.as_dict() for m in self.diagnostics.messages],
        })

    def flat_table(self) -> pd.DataFrame:
        """
        One row per (method, scope), scope being ``overall`` or a cohort name
        """
        rows = []
        for method, block in self.methods.items():
            scopes = [("overall", block)] + list(block.get("by_cohort", {}).items())
            for scope, summary in scopes:
                row = {"method": method, "scope": scope}
                for section in FLAT_SECTIONS:
                    row.update(summary[section])
                row["defer_soft"] = summary["deferral"]["defer_soft"]
                row["defer_hard"] = summary["deferral"]["defer_hard"]
                if scope == "overall":
                    hard = block["collapse"]["hard"] or {}
                    row.update({f"collapse_{k}": v for k, v in hard.items()})
                    row.update({f"budget_{k}": v for k, v in block["budget"].items()})
                rows.append(row)
        return pd.DataFrame(rows)


def load_metrics_schema() -> Dict[str, Any]:
    schema_bytes = io.BytesIO(pkgutil.get_data("expert_router", METRICS_SCHEMA))
    return json.loads(schema_bytes.getvalue())


def validate_metrics(doc: Dict[str, Any]) -> bool:
    """
    Validate a report document against the bundled schema

    :param doc: report as produced by MetricsReport.as_dict
    :return: True if no validation errors are raised, else False
    """
    try:
        jsonschema.validate(instance=doc, schema=load_metrics_schema())
    except jsonschema.exceptions.ValidationError as err:
        logger.error(err.message)
        return False
    return True


def report_paths(out_dir: FILE_PATH, split: str) -> Dict[str, str]:
    out_dir = str(out_dir)
    return {
        "json": os.path.join(out_dir, f"metrics_{split}.json"),
        "csv": os.path.join(out_dir, f"metrics_{split}.csv"),
        "risk": os.path.join(out_dir, f"risk_{split}.csv"),
        "per_expert": os.path.join(out_dir, f"per_expert_{split}.csv"),
    }


def write_report(report: MetricsReport, out_dir: FILE_PATH) -> Dict[str, str]:
    """
    Write the JSON document and the CSV tables; the JSON must pass the schema
    """
    doc = report.as_dict()
    if not validate_metrics(doc):
        raise DataError("metrics report does not conform to its schema")
    os.makedirs(out_dir, exist_ok=True)
    paths = report_paths(out_dir, report.split)
    with open(paths["json"], "w") as stream:
        json.dump(doc, stream, indent=1, sort_keys=True)
        stream.write("\n")
    csv_args = dict(index=False, float_format="%.12g", lineterminator="\n")
    report.flat_table().to_csv(paths["csv"], **csv_args)
    if report.risk is not None:
        report.risk.to_csv(paths["risk"], **csv_args)
    else:
        paths.pop("risk")
    if report.per_expert is not None:
        report.per_expert.to_csv(paths["per_expert"], **csv_args)
    else:
        paths.pop("per_expert")
    logger.info(f"Wrote metrics report for split {report.split} to {out_dir}")
    return paths


def read_report(path: FILE_PATH) -> Dict[str, Any]:
    with open(path) as stream:
        doc = json.load(stream)
    if doc.get("format") != REPORT_FORMAT:
        raise DataError(f"{path} is not a metrics report")
    return doc
