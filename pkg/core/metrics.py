"""Metrics stream: one JSON object per logging interval, plus a CSV export."""

import csv
import io
import json
import math
import os
from dataclasses import asdict, dataclass, field, fields
from typing import Any, Dict, List, Optional

from .errors import MetricsFormatError

LOSS_KEYS = ("reward_critic", "cost_critic", "actor", "entropy")


@dataclass
class MetricsRecord:
    """Aggregates of one logging interval. Missing values are None."""
    step: int
    episode_return: Optional[float] = None
    episode_cost: Optional[float] = None
    eval_return: Optional[float] = None
    eval_cost: Optional[float] = None
    eval_violation_rate: Optional[float] = None
    lam: Optional[float] = None
    delta: Optional[float] = None
    temperature: Optional[float] = None
    conflict_ratio: Optional[float] = None
    unsafe_fraction: Optional[float] = None
    eta_star_mean: Optional[float] = None
    cost_bias: Optional[float] = None
    losses: Dict[str, Optional[float]] = field(default_factory=dict)
    wall_time: Optional[float] = None

    def to_json(self) -> str:
        data = {k: _clean(v) for k, v in asdict(self).items()}
        data["losses"] = {k: _clean(v) for k, v in self.losses.items()}
        return json.dumps(data, sort_keys=True, ensure_ascii=False)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "MetricsRecord":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"未知字段 {sorted(unknown)}")
        if not isinstance(data.get("step"), int):
            raise ValueError("缺少整数字段 step")
        if not isinstance(data.get("losses", {}), dict):
            raise ValueError("losses 必须是对象")
        for key, value in data.items():
            if key not in ("step", "losses") and value is not None \
                    and not isinstance(value, (int, float)):
                raise ValueError(f"字段 {key} 必须是数值或 null")
        return cls(**data)


def _clean(value):
    if isinstance(value, float) and not math.isfinite(value):
        return None
    return value


class MetricsWriter:
    """Keeps every record and appends one line per record to the stream.

    The first append rewrites the file from `records`, which drops stale lines
    left by an earlier run or beyond a resumed checkpoint.
    """

    def __init__(self, path: str, records: Optional[List[MetricsRecord]] = None):
        self.path = path
        self.records: List[MetricsRecord] = list(records or [])
        self._synced = False

    def append(self, record: MetricsRecord) -> None:
        if self.records and record.step <= self.records[-1].step:
            raise ValueError(f"step 必须单调递增: {record.step} <= {self.records[-1].step}")
        self.records.append(record)
        if not self._synced:
            self.flush()
            return
        with open(self.path, "a", encoding="utf-8", newline="") as f:
            f.write(record.to_json() + "\n")

    def flush(self) -> None:
        """Rewrite the whole stream atomically."""
        text = "".join(r.to_json() + "\n" for r in self.records)
        _atomic_text(self.path, text)
        self._synced = True

    def export_csv(self, path: str) -> str:
        _atomic_text(path, to_csv(self.records))
        return path


def _atomic_text(path: str, text: str) -> None:
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8", newline="") as f:
        f.write(text)
        f.flush()
        os.fsync(f.fileno())
    os.replace(tmp, path)


def read_metrics(path: str) -> List[MetricsRecord]:
    """Parse a metrics stream; raises MetricsFormatError naming the bad line."""
    records: List[MetricsRecord] = []
    try:
        with open(path, "r", encoding="utf-8") as f:
            lines = f.readlines()
    except OSError as e:
        raise MetricsFormatError(f"无法读取指标文件: {e}") from e
    for number, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            data = json.loads(line)
            if not isinstance(data, dict):
                raise ValueError("每行必须是 JSON 对象")
            record = MetricsRecord.from_dict(data)
        except (ValueError, TypeError) as e:
            raise MetricsFormatError(str(e), number) from e
        if records and record.step <= records[-1].step:
            raise MetricsFormatError("step 未单调递增", number)
        records.append(record)
    return records


CSV_COLUMNS = [f.name for f in fields(MetricsRecord) if f.name != "losses"] + \
              [f"loss_{k}" for k in LOSS_KEYS]


def to_csv(records: List[MetricsRecord]) -> str:
    """Flat table with one column per scalar field and per loss."""
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for record in records:
        row = asdict(record)
        losses = row.pop("losses")
        values = [row[c] for c in CSV_COLUMNS if not c.startswith("loss_")]
        values += [losses.get(k) for k in LOSS_KEYS]
        writer.writerow([_cell(v) for v in values])
    return buffer.getvalue()


def _cell(value) -> str:
    value = _clean(value)
    if value is None:
        return ""
    return repr(value) if isinstance(value, float) else str(value)
