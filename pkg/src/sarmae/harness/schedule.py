"""Epoch budgets per task and label fraction."""

from __future__ import annotations

PRETRAIN_EPOCHS = 75
EPOCH_SCHEDULE = {
    "modisveg": {0.001: 75, 0.01: 50, 0.1: 50, 1.0: 25},
    "esawc": {0.001: 100, 0.01: 75, 0.1: 50, 1.0: 35},
}
TASKS = ("pretrain", "modisveg", "esawc")


def resolve_epochs(task: str, label_fraction: float | None = None) -> int:
    if task == "pretrain":
        return PRETRAIN_EPOCHS
    if task not in EPOCH_SCHEDULE:
        raise ValueError(f"unknown task {task!r}")
    table = EPOCH_SCHEDULE[task]
    for fraction, epochs in table.items():
        if label_fraction is not None and abs(fraction - label_fraction) < 1e-12:
            return epochs
    raise ValueError(f"no scheduled epoch count for {task} at label fraction {label_fraction}")
