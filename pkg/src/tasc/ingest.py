"""Derive transition-model edge probabilities from contingency-table CSVs.

Input format: UTF-8 CSV with header `caremap,node,edge,count`; lines starting
with `#` are comments. Counts are per-edge outcome tallies; each annotated
node's probabilities are its counts normalized to sum exactly to 1.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from decimal import ROUND_HALF_EVEN, Decimal

from tasc.model import CaremapSet, successors
from tasc.synthesis import EdgeProbabilities, TransitionModel


class IngestError(ValueError):
    pass


class UnknownEdge(IngestError):
    pass


class ZeroTotal(IngestError):
    pass


class DuplicateRow(IngestError):
    pass


@dataclass(frozen=True)
class ContingencyRow:
    caremap: str
    node: str
    edge: str
    count: int

    def __post_init__(self):
        if self.count < 0:
            raise IngestError(f"negative count for {self.caremap}.{self.node}/{self.edge}")


def read_rows(text: str) -> list[ContingencyRow]:
    lines = [ln for ln in text.splitlines() if not ln.lstrip().startswith("#")]
    reader = csv.DictReader(io.StringIO("\n".join(lines)))
    required = {"caremap", "node", "edge", "count"}
    if reader.fieldnames is None or not required.issubset(reader.fieldnames):
        raise IngestError(f"CSV header must contain {sorted(required)}")
    rows = []
    for i, rec in enumerate(reader, start=2):
        try:
            count = int(rec["count"])
        except (TypeError, ValueError):
            raise IngestError(f"row {i}: count {rec.get('count')!r} is not an integer") from None
        rows.append(ContingencyRow(rec["caremap"], rec["node"], rec["edge"], count))
    return rows


_TWELVE = Decimal("0.000000000001")


def derive_model(rows: list[ContingencyRow], cmset: CaremapSet, seed: int = 0) -> TransitionModel:
    """Normalize per-node counts to probabilities summing exactly to 1.

    Each probability is count/total rounded to 12 decimal places; the rounding
    residual is absorbed by the first-listed largest-count edge so the sum is
    exact and the result always passes the compile-time mass check.
    """
    seen: set[tuple[str, str, str]] = set()
    by_node: dict[tuple[str, str], list[ContingencyRow]] = {}
    for row in rows:
        key = (row.caremap, row.node, row.edge)
        if key in seen:
            raise DuplicateRow(f"duplicate row for {row.caremap}.{row.node}/{row.edge}")
        seen.add(key)
        if not cmset.has_caremap(row.caremap):
            raise UnknownEdge(f"row names absent caremap {row.caremap!r}")
        cm = cmset.caremap(row.caremap)
        if not cm.has_node(row.node):
            raise UnknownEdge(f"row names absent node {row.caremap}.{row.node}")
        out_ids = {e.id for e, _ in successors(cm, row.node)}
        if row.edge not in out_ids:
            raise UnknownEdge(
                f"edge {row.edge!r} is not an out-edge of {row.caremap}.{row.node}"
            )
        by_node.setdefault((row.caremap, row.node), []).append(row)

    branch_modes = []
    for (cm_id, node_id) in sorted(by_node):
        node_rows = by_node[(cm_id, node_id)]
        total = sum(r.count for r in node_rows)
        if total == 0:
            raise ZeroTotal(f"all counts are zero for {cm_id}.{node_id}")
        rounded = [
            (Decimal(r.count) / Decimal(total)).quantize(_TWELVE, rounding=ROUND_HALF_EVEN)
            for r in node_rows
        ]
        max_count = max(r.count for r in node_rows)
        residual_at = next(i for i, r in enumerate(node_rows) if r.count == max_count)
        residual = Decimal(1) - sum(rounded)
        rounded[residual_at] += residual
        probs = tuple(
            sorted((r.edge, float(p)) for r, p in zip(node_rows, rounded))
        )
        branch_modes.append((f"{cm_id}.{node_id}", EdgeProbabilities(probs)))
    return TransitionModel(tuple(branch_modes), (), seed)
