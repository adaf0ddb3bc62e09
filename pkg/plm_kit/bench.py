"""
Benchmark runner.

Scores a fine-tuned encoder + head on a task split and packages the result
with the published reference numbers for side-by-side display. The
reference numbers come from 1M-sequence pretraining on real benchmark data
and are not a target for desk-scale runs.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

from plm_kit.data_io import Dataset, TaskSpec
from plm_kit.encoder import EncoderModel, TaskHead
from plm_kit.errors import EmptyDataError
from plm_kit.metrics import MetricResult
from plm_kit.training import predict, score_predictions

REFERENCE_NOTE = "published reference values; not a target at desk scale"

REFERENCE = {
    "note": REFERENCE_NOTE,
    "metrics": {
        "subcellular_localization": "accuracy",
        "membrane_solubility": "accuracy",
        "epitope_region": "auc_roc",
        "gb1_fitness": "spearman",
    },
    # encoder pretrained on 1M sequences
    "reduced_pretraining": {
        "subcellular_localization": 69.7,
        "membrane_solubility": 85.2,
        "epitope_region": 66.73,
        "gb1_fitness": 0.43,
    },
    # full-scale pretraining
    "full_pretraining": {
        "subcellular_localization": 74,
        "membrane_solubility": 89,
        "epitope_region": 69.51,
        "gb1_fitness": 0.63,
    },
}

REPORT_KEYS = ("task", "split", "metrics", "reference", "config", "seed")
CSV_HEADER = "task,kind,split,metric,value,support,seed"


@dataclass
class BenchmarkReport:
    task: TaskSpec
    split: str
    metrics: list[MetricResult]
    config: dict = field(default_factory=dict)
    seed: int = 0

    def to_dict(self) -> dict:
        return {
            "task": self.task.to_dict(),
            "split": self.split,
            "metrics": [m.to_dict() for m in self.metrics],
            "reference": REFERENCE,
            "config": self.config,
            "seed": self.seed,
        }

    def to_csv_row(self) -> str:
        m = self.metrics[0]
        return (
            f"{self.task.name},{self.task.kind.value},{self.split},"
            f"{m.name},{m.value!r},{m.support},{self.seed}"
        )

    def write(self, path: Union[str, Path]) -> tuple[Path, Path]:
        """Write the JSON report and a one-row CSV next to it (same stem, .csv)."""
        path = Path(path)
        text = json.dumps(self.to_dict(), indent=2, sort_keys=True)
        path.write_text(text + "\n", encoding="utf-8")
        csv_path = path.with_suffix(".csv")
        csv_path.write_text(f"{CSV_HEADER}\n{self.to_csv_row()}\n", encoding="utf-8")
        return path, csv_path


def run_benchmark(
    model: EncoderModel,
    head: TaskHead,
    dataset: Dataset,
    spec: Optional[TaskSpec] = None,
    split: str = "test",
    config: Optional[dict] = None,
    seed: int = 0,
) -> BenchmarkReport:
    """Evaluate the task's metric on ``split`` in eval mode."""
    spec = spec or dataset.spec
    if not dataset.splits.get(split):
        raise EmptyDataError(f"dataset '{spec.name}' has an empty '{split}' split")
    predictions = predict(model, head, dataset, split)
    metric = score_predictions(spec, predictions)
    return BenchmarkReport(task=spec, split=split, metrics=[metric], config=config or {}, seed=seed)
