"""Line-oriented verification reports and CSV series.

One record per line, tab separated::

    suite  case  metric  value  threshold  status

``status`` is PASS, FAIL, XFAIL (a negative control failed as it should),
XPASS (a negative control unexpectedly passed) or INFO (measurement only).
Only FAIL affects the exit code.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

STATUSES = ("PASS", "FAIL", "XFAIL", "XPASS", "INFO")
COMPARATORS = ("<=", ">=", "<", ">")


def _fmt(x: float) -> str:
    return repr(float(x)) if math.isfinite(x) else str(float(x))


def compare(value: float, threshold: str) -> bool:
    """``threshold`` is a comparator followed by a number, e.g. ``"<=1e-10"``."""
    for op in COMPARATORS:
        if threshold.startswith(op):
            bound = float(threshold[len(op):])
            if not math.isfinite(value):
                return False
            return {"<=": value <= bound, ">=": value >= bound, "<": value < bound, ">": value > bound}[op]
    raise ValueError(f"bad threshold {threshold!r}")


@dataclass(frozen=True)
class Record:
    suite: str
    case: str
    metric: str
    value: float
    threshold: str
    status: str

    def line(self) -> str:
        return "\t".join((self.suite, self.case, self.metric, _fmt(self.value), self.threshold, self.status))

    @classmethod
    def parse(cls, line: str) -> "Record":
        parts = line.rstrip("\n").split("\t")
        if len(parts) != 6:
            raise ValueError(f"expected 6 tab-separated fields, got {len(parts)}: {line!r}")
        suite, case, metric, value, threshold, status = parts
        if status not in STATUSES:
            raise ValueError(f"unknown status {status!r}")
        return cls(suite, case, metric, float(value), threshold, status)


@dataclass
class Report:
    records: list[Record] = field(default_factory=list)

    def check(self, suite: str, case: str, metric: str, value: float, threshold: str) -> bool:
        ok = compare(value, threshold)
        self.records.append(Record(suite, case, metric, float(value), threshold, "PASS" if ok else "FAIL"))
        return ok

    def expect_fail(self, suite: str, case: str, metric: str, value: float, threshold: str) -> bool:
        """Record a negative control; returns True when it failed as intended."""
        ok = compare(value, threshold)
        self.records.append(Record(suite, case, metric, float(value), threshold, "XPASS" if ok else "XFAIL"))
        return not ok

    def info(self, suite: str, case: str, metric: str, value: float) -> None:
        self.records.append(Record(suite, case, metric, float(value), "-", "INFO"))

    def extend(self, other: "Report") -> None:
        self.records.extend(other.records)

    @property
    def failures(self) -> list[Record]:
        return [r for r in self.records if r.status == "FAIL"]

    @property
    def passed(self) -> bool:
        return not self.failures

    @property
    def exit_code(self) -> int:
        return 0 if self.passed else 1

    def text(self) -> str:
        return "".join(r.line() + "\n" for r in self.records)

    @classmethod
    def parse(cls, text: str) -> "Report":
        return cls([Record.parse(line) for line in text.splitlines() if line.strip()])

    def worst(self, suite: str, metric: str | None = None) -> float:
        vals = [r.value for r in self.records if r.suite == suite and (metric is None or r.metric == metric)]
        return max(vals) if vals else float("nan")


def write_csv(header: list[str], rows: list[list[float]]) -> str:
    buf = io.StringIO()
    out = csv.writer(buf, lineterminator="\n")
    out.writerow(header)
    for row in rows:
        out.writerow([_fmt(v) for v in row])
    return buf.getvalue()


def read_csv(text: str) -> tuple[list[str], list[list[float]]]:
    rows = list(csv.reader(io.StringIO(text)))
    if not rows:
        raise ValueError("empty CSV")
    header, body = rows[0], rows[1:]
    for i, row in enumerate(body, 2):
        if len(row) != len(header):
            raise ValueError(f"CSV line {i}: {len(row)} fields, header has {len(header)}")
    return header, [[float(v) for v in row] for row in body]
