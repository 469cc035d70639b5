"""Fraction x init x region result grids in the style of the ablation tables."""

from __future__ import annotations

import csv
import io
import json
import math
import warnings
from dataclasses import dataclass, field
from typing import Iterable, Mapping

MISSING = "—"
INIT_ORDER = ("scratch", "pretrained")
INIT_LABELS = {"scratch": "Scratch", "pretrained": "Pretrained"}


def _fraction_label(f: float) -> str:
    return f"{f * 100:g}%"


@dataclass
class AblationTable:
    metric: str
    higher_is_better: bool
    fractions: list[float]
    regions: list[str]
    inits: list[str]
    cells: dict[tuple[float, str, str], float] = field(default_factory=dict)
    best: set = field(default_factory=set)
    warnings: list[str] = field(default_factory=list)

    def value(self, fraction, region, init):
        return self.cells.get((fraction, region, init))

    def to_text(self) -> str:
        header = ["", *[f"{r} {INIT_LABELS.get(i, i)}" for r in self.regions for i in self.inits]]
        rows = [header]
        for f in self.fractions:
            row = [_fraction_label(f)]
            for r in self.regions:
                for i in self.inits:
                    v = self.value(f, r, i)
                    if v is None:
                        row.append(MISSING)
                    else:
                        cell = f"{v:.3f}"
                        row.append(f"**{cell}**" if (f, r, i) in self.best else cell)
            rows.append(row)
        widths = [max(len(row[c]) for row in rows) for c in range(len(header))]
        out = ["  ".join(cell.rjust(w) for cell, w in zip(row, widths)) for row in rows]
        return f"{self.metric} ({'higher' if self.higher_is_better else 'lower'} is better)\n" + "\n".join(out) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf)
        writer.writerow(["label_fraction", "region", "init", self.metric, "best"])
        for f in self.fractions:
            for r in self.regions:
                for i in self.inits:
                    v = self.value(f, r, i)
                    writer.writerow([f, r, i, MISSING if v is None else repr(v), int((f, r, i) in self.best)])
        return buf.getvalue()

    def to_json(self) -> str:
        return json.dumps(
            {
                "metric": self.metric,
                "higher_is_better": self.higher_is_better,
                "cells": [
                    {"label_fraction": f, "region": r, "init": i, "value": v, "best": (f, r, i) in self.best}
                    for (f, r, i), v in sorted(self.cells.items())
                ],
                "warnings": self.warnings,
            },
            indent=1,
        )


def _cells_from_runs(runs: Iterable) -> Iterable[tuple[float, str, str, float, str]]:
    for run in runs:
        if isinstance(run, Mapping):
            yield run["label_fraction"], run["region"], run["init_mode"], run["value"], run.get("metric", "")
        else:
            value = run.test_metric if run.test_metric is not None else run.final_val
            yield run.label_fraction, run.region, run.init_mode, value, run.metric


def ablation_report(runs: Iterable, higher_is_better: bool | None = None, metric: str | None = None) -> AblationTable:
    """Tabulate runs and mark the best cell(s) per region.

    ``runs`` holds RunReports (test metric, or final val when no test was
    run) or plain mappings with label_fraction / region / init_mode / value.
    Ties share the bold; missing grid cells render as a dash. Both emit a
    warning.
    """
    cells = {}
    metrics = set()
    for f, r, i, v, m in _cells_from_runs(runs):
        cells[(float(f), r, i)] = float(v)
        if m:
            metrics.add(m)
    metric = metric or (metrics.pop() if len(metrics) == 1 else "metric")
    if higher_is_better is None:
        higher_is_better = metric == "miou"
    fractions = sorted({k[0] for k in cells})
    regions = list(dict.fromkeys(k[1] for k in cells))
    inits = [i for i in INIT_ORDER if any(k[2] == i for k in cells)] + sorted({k[2] for k in cells} - set(INIT_ORDER))
    table = AblationTable(metric, higher_is_better, fractions, regions, inits, cells)

    for f in fractions:
        for r in regions:
            for i in inits:
                if (f, r, i) not in cells:
                    table.warnings.append(f"missing cell: {_fraction_label(f)} {r} {i}")
    for r in regions:
        vals = {k: v for k, v in cells.items() if k[1] == r and not math.isnan(v)}
        if not vals:
            continue
        target = max(vals.values()) if higher_is_better else min(vals.values())
        winners = {k for k, v in vals.items() if v == target}
        table.best |= winners
        if len(winners) > 1:
            table.warnings.append(f"tie for best in {r}: {sorted(winners)}")
    for w in table.warnings:
        warnings.warn(w, stacklevel=2)
    return table
