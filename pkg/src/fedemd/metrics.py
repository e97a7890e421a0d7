"""Line-delimited metrics records: append-only, crash-tolerant, replayable.

One JSON object per line. `cycle_time_ms` is wall-clock and therefore the
single field excluded from the canonical form used by determinism and
replay comparisons; everything else must be bitwise reproducible.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

VOLATILE_KEYS = ("cycle_time_ms",)

GLOBAL_SILO = "global"


@dataclass
class MetricsRow:
    round: int
    silo: str  # "0".."N-1" or "global"
    train_loss: float | None
    eval_accuracy: float | None
    emd_weights: dict | None  # neighbor id (str) -> weight
    cycle_time_ms: float

    def to_json_line(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsRow":
        return cls(
            round=int(d["round"]),
            silo=str(d["silo"]),
            train_loss=d.get("train_loss"),
            eval_accuracy=d.get("eval_accuracy"),
            emd_weights=d.get("emd_weights"),
            cycle_time_ms=float(d.get("cycle_time_ms", 0.0)),
        )


def write_metrics(path: str | Path, rows: list) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(row.to_json_line() + "\n")


def read_metrics(path: str | Path) -> list:
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                rows.append(MetricsRow.from_dict(json.loads(line)))
    return rows


def canonical_lines(rows: list) -> str:
    """Serialization with volatile (timing) fields stripped; the form that
    determinism and replay checks compare bitwise."""
    out = []
    for row in rows:
        d = asdict(row)
        for key in VOLATILE_KEYS:
            d.pop(key, None)
        out.append(json.dumps(d, sort_keys=True, separators=(",", ":")))
    return "\n".join(out) + "\n"


def validate_rounds_monotone(rows: list) -> None:
    last = -1
    for row in rows:
        if row.round < last:
            raise ValueError(f"metrics rounds not monotone at round {row.round}")
        last = row.round
