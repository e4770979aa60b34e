from __future__ import annotations

import pytest

from tasc import dsl
from tasc.ingest import (
    DuplicateRow,
    IngestError,
    UnknownEdge,
    ZeroTotal,
    derive_model,
    read_rows,
)
from tasc.synthesis import EdgeProbabilities, compile_stm

FORK = (
    'caremap "m" { entry s; exit e1; exit e2; decision d "Pick?"; '
    "s -> d; d -> e1 when x > 0; d -> e2 otherwise; }"
)

THREE_WAY = (
    'caremap "m" { entry s; exit e1; exit e2; exit e3; decision d "Pick?"; '
    "s -> d; d -> e1 when x > 2; d -> e2 when x > 1; d -> e3 otherwise; }"
)


def model_for(text, csv_text, seed=0):
    cmset = dsl.parse_or_raise(text)
    return cmset, derive_model(read_rows(csv_text), cmset, seed)


def probs_of(model, key):
    mode = dict(model.branch_modes)[key]
    assert isinstance(mode, EdgeProbabilities)
    return dict(mode.probs)


def test_simple_quarters():
    _, model = model_for(
        FORK,
        "caremap,node,edge,count\nm,d,d->e1,25\nm,d,d->e2,75\n",
    )
    assert probs_of(model, "m.d") == {"d->e1": 0.25, "d->e2": 0.75}


def test_rounding_residual_goes_to_first_largest():
    _, model = model_for(
        THREE_WAY,
        "caremap,node,edge,count\nm,d,d->e1,1\nm,d,d->e2,1\nm,d,d->e3,1\n",
    )
    probs = probs_of(model, "m.d")
    assert sum(probs.values()) == 1.0
    assert probs["d->e1"] == 0.333333333334
    assert probs["d->e2"] == 0.333333333333
    assert probs["d->e3"] == 0.333333333333


def test_derived_model_always_compiles():
    cmset, model = model_for(
        THREE_WAY,
        "caremap,node,edge,count\nm,d,d->e1,5907\nm,d,d->e2,2824\nm,d,d->e3,1\n",
    )
    compile_stm(cmset, "m", model)


def test_comments_and_header():
    rows = read_rows("# comment\ncaremap,node,edge,count\n# another\nm,d,d->e1,3\n")
    assert len(rows) == 1
    assert rows[0].count == 3


def test_missing_header():
    with pytest.raises(IngestError):
        read_rows("m,d,d->e1,3\n")


def test_non_integer_count():
    with pytest.raises(IngestError):
        read_rows("caremap,node,edge,count\nm,d,d->e1,lots\n")


def test_negative_count():
    with pytest.raises(IngestError):
        read_rows("caremap,node,edge,count\nm,d,d->e1,-2\n")


def test_unknown_edge():
    cmset = dsl.parse_or_raise(FORK)
    with pytest.raises(UnknownEdge):
        derive_model(read_rows("caremap,node,edge,count\nm,d,d->ghost,3\n"), cmset)
    with pytest.raises(UnknownEdge):
        derive_model(read_rows("caremap,node,edge,count\nm,ghost,d->e1,3\n"), cmset)
    with pytest.raises(UnknownEdge):
        derive_model(read_rows("caremap,node,edge,count\nghost,d,d->e1,3\n"), cmset)


def test_zero_total():
    cmset = dsl.parse_or_raise(FORK)
    with pytest.raises(ZeroTotal):
        derive_model(
            read_rows("caremap,node,edge,count\nm,d,d->e1,0\nm,d,d->e2,0\n"), cmset
        )


def test_duplicate_row():
    cmset = dsl.parse_or_raise(FORK)
    with pytest.raises(DuplicateRow):
        derive_model(
            read_rows("caremap,node,edge,count\nm,d,d->e1,1\nm,d,d->e1,2\n"), cmset
        )


def test_labour_counts_each_node_sums_to_cohort(labour_set, labour_counts_text):
    rows = read_rows(labour_counts_text)
    totals = {}
    for r in rows:
        totals[(r.caremap, r.node)] = totals.get((r.caremap, r.node), 0) + r.count
    assert set(totals.values()) == {8731}
    model = derive_model(rows, labour_set, seed=1)
    for key in ("labour_birth.onset", "labour_birth.delivery"):
        assert sum(probs_of(model, key).values()) == 1.0
