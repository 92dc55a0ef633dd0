import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Sequence, Union

from .metrics import APReport
from .objective import RateReport
from .training import EpochRecord

logger = logging.getLogger(__name__)


def _jsonable(value: Any) -> Any:
    """ Replace non-finite floats with None so the output stays strict JSON """
    if isinstance(value, float) and not math.isfinite(value):
        return None
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if hasattr(value, "item"):
        return _jsonable(value.item())
    return value


def write_json(data: Dict, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        json.dump(_jsonable(data), f, indent=2, sort_keys=True)
        f.write("\n")
    return path


@dataclass
class MetricsReport:
    """
    Run summary written to ``reports/metrics.json``.

    Schema::

        {"run": str, "config": obj, "epochs": [{"loss": num, "acc": num}],
         "analysis": {"miou": num, "per_class": obj,
                      "ap": {"ap50": num, "ap75": num, "ap": num},
                      "rates": [{"layer": int, "R": num, "Rc": num, "l0": int, "l1": num}]}}

    ``analysis`` only holds the sections that were computed.
    """
    run: str
    config: Dict = field(default_factory=dict)
    epochs: List[Dict] = field(default_factory=list)
    analysis: Dict = field(default_factory=dict)

    def add_epochs(self, records: Sequence[EpochRecord]):
        self.epochs.extend(record.to_dict() for record in records)

    def set_miou(self, miou: float, per_class: Dict[str, float]):
        self.analysis["miou"] = miou
        self.analysis["per_class"] = dict(per_class)

    def set_ap(self, report: APReport):
        self.analysis["ap"] = report.to_dict()

    def set_rates(self, reports: Sequence[RateReport]):
        self.analysis["rates"] = [
            {"layer": r.layer, "R": r.R, "Rc": r.Rc, "l0": r.l0, "l1": r.l1} for r in reports
        ]

    def to_dict(self) -> Dict:
        return {"run": self.run, "config": self.config, "epochs": self.epochs, "analysis": self.analysis}

    @classmethod
    def from_dict(cls, data: Dict) -> "MetricsReport":
        return cls(
            run=data["run"],
            config=data.get("config", {}),
            epochs=list(data.get("epochs", [])),
            analysis=dict(data.get("analysis", {})),
        )

    def save(self, path: Union[str, Path]) -> Path:
        path = write_json(self.to_dict(), path)
        logger.info("Wrote metrics to %s", path)
        return path

    @classmethod
    def load(cls, path: Union[str, Path]) -> "MetricsReport":
        with open(path) as f:
            return cls.from_dict(json.load(f))
