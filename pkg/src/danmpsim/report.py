"""Simulation report structure and its serialized forms.

Reports serialize to canonical JSON (stable key order, suitable for
byte-for-byte determinism checks) and to flat CSV rows for plotting.
A JSON schema for the report ships with the package under schemas/.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field, asdict

from .errors import ConfigError

SCHEMA_VERSION = 1

PHASES = ("cap", "fc", "data_move", "msdattn")


@dataclass
class SimReport:
    mode: str
    seed: int
    schema_version: int = SCHEMA_VERSION
    total_cycles: int = 0
    phase_cycles: dict = field(default_factory=lambda: {p: 0 for p in PHASES})
    metrics: dict = field(default_factory=dict)
    counters: dict = field(default_factory=dict)
    energy_pj: dict = field(default_factory=dict)
    energy_ops: dict = field(default_factory=dict)
    pe_utilization_hist: list = field(default_factory=lambda: [0] * 10)
    data_layout: dict = field(default_factory=dict)
    workload: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)
    violations: list = field(default_factory=list)

    def to_json_text(self) -> str:
        return json.dumps(asdict(self), indent=1, sort_keys=True) + "\n"

    def flat_row(self) -> dict:
        row = {
            "mode": self.mode,
            "seed": self.seed,
            "total_cycles": self.total_cycles,
        }
        for p in PHASES:
            row[f"cycles_{p}"] = self.phase_cycles.get(p, 0)
        for k in sorted(self.metrics):
            row[f"metric_{k}"] = self.metrics[k]
        for k in sorted(self.counters):
            row[f"count_{k}"] = self.counters[k]
        for k in sorted(self.energy_pj):
            row[f"energy_pj_{k}"] = self.energy_pj[k]
        row["violations"] = len(self.violations)
        return row


def report_from_json(text: str) -> SimReport:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"bad report json: {e}") from e
    if doc.get("schema_version") != SCHEMA_VERSION:
        raise ConfigError("unsupported report schema version")
    return SimReport(**doc)


def reports_to_csv(reports: list[SimReport], extra_cols: list[dict] | None = None) -> str:
    """One row per report; extra per-row columns (e.g. sweep axis) merge in."""
    rows = []
    for i, rep in enumerate(reports):
        row = rep.flat_row()
        if extra_cols:
            row.update(extra_cols[i])
        rows.append(row)
    fieldnames: list[str] = []
    for row in rows:
        for k in row:
            if k not in fieldnames:
                fieldnames.append(k)
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=fieldnames)
    writer.writeheader()
    for row in rows:
        writer.writerow(row)
    return buf.getvalue()
