"""Level-of-service lookup: road kind and speed to sustainable flow per lane."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Iterable

GRADES = ("A", "B", "C", "D", "E", "F")


class LosError(ValueError):
    pass


@dataclass(frozen=True)
class LosRow:
    kind: str
    grade: str
    min_speed_mph: float
    max_flow_vph_per_lane: float


class LosTable:
    """Rows grouped by road kind, ordered A to F.

    Within a kind the minimum speed is nonincreasing and the maximum flow
    nondecreasing from A to F.
    """

    def __init__(self, rows: Iterable[LosRow]):
        self.rows: dict[str, list[LosRow]] = {}
        for row in rows:
            if row.grade not in GRADES:
                raise LosError(f"unknown LOS grade {row.grade!r}")
            self.rows.setdefault(row.kind, []).append(row)
        for kind, rs in self.rows.items():
            rs.sort(key=lambda r: GRADES.index(r.grade))
            if len({r.grade for r in rs}) != len(rs):
                raise LosError(f"duplicate grade for kind {kind!r}")
            for a, b in zip(rs, rs[1:]):
                if b.min_speed_mph > a.min_speed_mph or b.max_flow_vph_per_lane < a.max_flow_vph_per_lane:
                    raise LosError(f"LOS rows for {kind!r} are not monotone at grade {b.grade}")

    @property
    def kinds(self) -> tuple[str, ...]:
        return tuple(self.rows)

    def grade(self, kind: str, speed_mph: float) -> LosRow:
        """Best grade whose minimum speed the given speed attains."""
        if kind not in self.rows:
            raise LosError(f"no LOS rows for road kind {kind!r}")
        rs = self.rows[kind]
        for row in rs:
            if speed_mph >= row.min_speed_mph:
                return row
        return rs[-1]

    def flow_per_lane(self, kind: str, speed_mph: float) -> float:
        return self.grade(kind, speed_mph).max_flow_vph_per_lane

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["kind", "los_grade", "min_speed_mph", "max_flow_vph_per_lane"])
            for rs in self.rows.values():
                for r in rs:
                    w.writerow([r.kind, r.grade, repr(r.min_speed_mph), repr(r.max_flow_vph_per_lane)])

    def __eq__(self, other):
        return isinstance(other, LosTable) and self.rows == other.rows


def load_los_csv(path) -> LosTable:
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        need = ("kind", "los_grade", "min_speed_mph", "max_flow_vph_per_lane")
        if reader.fieldnames is None or any(c not in reader.fieldnames for c in need):
            raise LosError(f"{path}: LOS file needs columns {need}")
        for r in reader:
            rows.append(LosRow(r["kind"], r["los_grade"].strip().upper(),
                               float(r["min_speed_mph"]), float(r["max_flow_vph_per_lane"])))
    return LosTable(rows)


# Service flow rates loosely following basic-freeway-segment tables.
DEFAULT_LOS = LosTable(
    [LosRow("freeway", g, s, q) for g, s, q in zip(GRADES, (65, 64, 62, 57, 50, 0), (820, 1310, 1750, 2110, 2400, 2400))]
    + [LosRow("ramp", g, s, q) for g, s, q in zip(GRADES, (45, 42, 38, 33, 28, 0), (700, 1000, 1300, 1550, 1800, 1800))]
    + [LosRow("arterial", g, s, q) for g, s, q in zip(GRADES, (35, 28, 22, 17, 13, 0), (400, 550, 700, 800, 900, 900))]
)
