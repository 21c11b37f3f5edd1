from typing import List, Dict
from dataclasses import dataclass, field
from enum import Enum, unique
from collections import defaultdict

import logging
import pandas as pd

logger = logging.getLogger(__name__)


@unique
class Category(Enum):
    Unclassified = 'unclassified'
    ZeroVariance = 'zero-variance'
    RidgeFallback = 'ridge-fallback'
    TemperatureBoundary = 'temperature-boundary'
    PoolTooSmall = 'pool-too-small'
    PriorFloor = 'prior-floor'
    EmptyGroupSupport = 'empty-group-support'
    CoarseBinning = 'coarse-binning'
    UnseenGroup = 'unseen-group'
    UndefinedBlock = 'undefined-block'

    @staticmethod
    def list():
        return list(map(lambda c: c.value, Category))


@dataclass
class Message:
    """
    Individual diagnostic message
    """
    description: str = None
    severity: int = 1
    category: Category = Category.Unclassified
    field: str = None

    __cols__ = ['description', 'severity', 'field', 'category']

    def as_dict(self) -> Dict:
        d = {v: self.__getattribute__(v) for v in vars(self)}
        d['category'] = self.category.value
        return d


@dataclass
class DiagnosticReport:
    """
    Collects non-fatal conditions met while fitting, generating or evaluating

    Every message is also logged at WARNING when severity > 0
    """
    messages: List[Message] = field(default_factory=list)

    def add_message(self, *args, **kwargs) -> Message:
        m = Message(*args, **kwargs)
        self.messages.append(m)
        if m.severity > 0:
            logger.warning(m.description, extra={'category': m.category.value, 'field': m.field})
        return m

    def as_dataframe(self) -> pd.DataFrame:
        items = [m.as_dict() for m in self.messages]
        return pd.DataFrame(items, columns=Message.__cols__)

    def max_severity(self) -> int:
        return max([m.severity for m in self.messages], default=0)

    def passes(self) -> bool:
        return self.max_severity() == 0

    def messages_by_category(self) -> Dict[str, List[Message]]:
        res = defaultdict(list)
        for m in self.messages:
            res[m.category.value].append(m)
        return res

    def extend(self, other: 'DiagnosticReport') -> None:
        self.messages.extend(other.messages)


def ensure_report(report: DiagnosticReport = None) -> DiagnosticReport:
    return report if report is not None else DiagnosticReport()
