"""Schema-validated access to fedsim metrics.csv files."""

from __future__ import annotations

import csv
from dataclasses import dataclass

METRICS_COLUMNS = [
    "round", "strategy", "train_loss", "test_loss", "test_acc",
    "mean_client_time", "max_client_time", "tau", "dropped", "mean_epsilon",
]

_INT_COLUMNS = {"round", "dropped"}
_STR_COLUMNS = {"strategy"}
_OPTIONAL_COLUMNS = {"mean_epsilon"}


class SchemaError(ValueError):
    """The file does not match the documented metrics.csv schema."""


@dataclass
class MetricsFrame:
    """Rows of one metrics.csv, keyed by (strategy, round)."""

    path: str
    strategy: str
    rows: dict[tuple[str, int], dict]

    @property
    def rounds(self) -> list[int]:
        return sorted(r for _, r in self.rows)

    def column(self, name: str) -> list:
        if name not in METRICS_COLUMNS:
            raise SchemaError(f"unknown column {name!r}")
        return [self.rows[(self.strategy, r)][name] for r in self.rounds]


def _convert(name: str, raw: str):
    if name in _STR_COLUMNS:
        return raw
    if name in _INT_COLUMNS:
        return int(raw)
    if raw == "" and name in _OPTIONAL_COLUMNS:
        return None
    try:
        return float(raw)
    except ValueError as exc:
        raise SchemaError(f"column {name!r}: bad value {raw!r}") from exc


def load_metrics(path) -> MetricsFrame:
    """Parse and validate one metrics.csv; rejects any schema drift."""
    with open(path, newline="") as f:
        reader = csv.reader(f)
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaError(f"{path}: empty file") from None
        if header != METRICS_COLUMNS:
            unknown = [c for c in header if c not in METRICS_COLUMNS]
            missing = [c for c in METRICS_COLUMNS if c not in header]
            raise SchemaError(
                f"{path}: header mismatch (unknown={unknown}, missing={missing})"
            )
        rows: dict[tuple[str, int], dict] = {}
        strategies = set()
        for lineno, fields in enumerate(reader, start=2):
            if len(fields) != len(METRICS_COLUMNS):
                raise SchemaError(f"{path}:{lineno}: expected {len(METRICS_COLUMNS)} fields")
            row = {
                name: _convert(name, raw) for name, raw in zip(METRICS_COLUMNS, fields)
            }
            strategies.add(row["strategy"])
            rows[(row["strategy"], row["round"])] = row
    if len(strategies) > 1:
        raise SchemaError(f"{path}: multiple strategies in one file: {sorted(strategies)}")
    strategy = strategies.pop() if strategies else ""
    return MetricsFrame(path=str(path), strategy=strategy, rows=rows)
