import json

import numpy as np

from crateseg.metrics import APReport
from crateseg.objective import RateReport
from crateseg.reports import MetricsReport, write_json
from crateseg.training import EpochRecord


def test_write_json_is_strict(tmp_path):
    path = write_json({"a": float("nan"), "b": [np.float64(1.5), float("inf")], 3: np.int64(2)}, tmp_path / "r" / "x.json")
    text = path.read_text()
    assert "NaN" not in text and "Infinity" not in text
    assert json.loads(text) == {"a": None, "b": [1.5, None], "3": 2}


def test_metrics_report_round_trip(tmp_path):
    report = MetricsReport(run="crate-seed0", config={"model": {"num_layers": 2}})
    report.add_epochs([EpochRecord(1, 1.1, 0.4), EpochRecord(2, 0.9, 0.5, test_accuracy=0.45)])
    report.set_miou(0.5, {"disk": 0.6, "square": 0.4})
    report.set_ap(APReport(0.3, 0.1, 0.12))
    report.set_rates([RateReport(R=2.0, Rc=1.5, l0=10, l1=3.25, objective=0.5, layer=1)])
    path = report.save(tmp_path / "reports" / "metrics.json")

    data = json.loads(path.read_text())
    assert set(data) == {"run", "config", "epochs", "analysis"}
    assert data["epochs"] == [
        {"epoch": 1, "loss": 1.1, "acc": 0.4},
        {"epoch": 2, "loss": 0.9, "acc": 0.5, "test_acc": 0.45},
    ]
    assert data["analysis"]["ap"] == {"ap50": 0.3, "ap75": 0.1, "ap": 0.12}
    assert data["analysis"]["rates"] == [{"layer": 1, "R": 2.0, "Rc": 1.5, "l0": 10, "l1": 3.25}]
    assert MetricsReport.load(path) == report


def test_undefined_ap_serializes_as_null(tmp_path):
    report = MetricsReport(run="r")
    nan = float("nan")
    report.set_ap(APReport(nan, nan, nan, undefined=True))
    data = json.loads(report.save(tmp_path / "m.json").read_text())
    assert data["analysis"]["ap"] == {"ap50": None, "ap75": None, "ap": None}
    assert "miou" not in data["analysis"]
