"""State transition machine compilation and seeded synthetic trace generation."""
from __future__ import annotations

import hashlib
import json
import random
from dataclasses import dataclass, field
from typing import Iterator, Optional, Union

from tasc import criteria as C
from tasc.conformance import (
    ActivityDone,
    BranchTaken,
    Observation,
    PatientTrace,
    TraceEvent,
    replay_with_edges,
)
from tasc.dsl import serialize
from tasc.model import (
    Caremap,
    CaremapSet,
    DECISION_KINDS,
    NodeKind,
    TERMINAL_KINDS,
    successors,
)

RNG_ALGORITHM = "sha256-mt19937"  # per-trace MT19937 seeded from sha256(seed:index)
DEFAULT_STEP_CAP = 10_000


class CompileError(ValueError):
    pass


class MissingAnnotation(CompileError):
    def __init__(self, state: str):
        super().__init__(f"branching node {state} has no transition annotation")
        self.state = state


class ProbabilityMass(CompileError):
    def __init__(self, state: str, total: float):
        super().__init__(f"probabilities at {state} sum to {total!r}, expected 1")
        self.state = state
        self.total = total


class InescapableCycle(CompileError):
    def __init__(self, caremap: str, nodes: list[str]):
        super().__init__(
            f"caremap {caremap!r}: no positive-probability escape to a terminal from {nodes}"
        )
        self.caremap = caremap
        self.nodes = nodes


class StepCapExceeded(RuntimeError):
    pass


@dataclass(frozen=True)
class Categorical:
    values: tuple[Union[float, int, str], ...]
    probs: tuple[float, ...]


@dataclass(frozen=True)
class NormalDist:
    mu: float
    sigma: float


@dataclass(frozen=True)
class UniformDist:
    a: float
    b: float


Distribution = Union[Categorical, NormalDist, UniformDist]


@dataclass(frozen=True)
class EdgeProbabilities:
    probs: tuple[tuple[str, float], ...]  # (edge id, probability), in edge-id order


@dataclass(frozen=True)
class VariableSampler:
    var: str
    dist: Distribution
    unit: Optional[str] = None


BranchMode = Union[EdgeProbabilities, VariableSampler]


@dataclass(frozen=True)
class Emitter:
    var: str
    dist: Distribution
    unit: Optional[str] = None


@dataclass(frozen=True)
class TransitionModel:
    # keys are "<caremap id>.<node id>"
    branch_modes: tuple[tuple[str, BranchMode], ...] = ()
    emitters: tuple[tuple[str, tuple[Emitter, ...]], ...] = ()
    master_seed: int = 0

    def mode_for(self, caremap_id: str, node_id: str) -> Optional[BranchMode]:
        key = f"{caremap_id}.{node_id}"
        for k, v in self.branch_modes:
            if k == key:
                return v
        return None

    def emitters_for(self, caremap_id: str, node_id: str) -> tuple[Emitter, ...]:
        key = f"{caremap_id}.{node_id}"
        for k, v in self.emitters:
            if k == key:
                return v
        return ()


@dataclass(frozen=True)
class STM:
    cmset: CaremapSet
    entry_caremap: str
    model: TransitionModel
    provenance: tuple[tuple[str, str], ...]  # caremap_sha, model_sha, seed, rng

    def provenance_dict(self) -> dict:
        return dict(self.provenance)


# --- model JSON -------------------------------------------------------------


def _dist_to_json(d: Distribution) -> dict:
    if isinstance(d, Categorical):
        return {"kind": "categorical", "probs": list(d.probs), "values": list(d.values)}
    if isinstance(d, NormalDist):
        return {"kind": "normal", "mu": d.mu, "sigma": d.sigma}
    return {"a": d.a, "b": d.b, "kind": "uniform"}


def _dist_from_json(d: dict) -> Distribution:
    kind = d.get("kind")
    if kind == "categorical":
        return Categorical(tuple(d["values"]), tuple(float(p) for p in d["probs"]))
    if kind == "normal":
        return NormalDist(float(d["mu"]), float(d["sigma"]))
    if kind == "uniform":
        return UniformDist(float(d["a"]), float(d["b"]))
    raise ValueError(f"unknown distribution kind {kind!r}")


def model_to_json(model: TransitionModel) -> str:
    nodes: dict = {}
    for key, mode in model.branch_modes:
        if isinstance(mode, EdgeProbabilities):
            nodes[key] = {"mode": "edge_probs", "probs": {e: p for e, p in mode.probs}}
        else:
            entry = {"dist": _dist_to_json(mode.dist), "mode": "sampler", "var": mode.var}
            if mode.unit is not None:
                entry["unit"] = mode.unit
            nodes[key] = entry
    emitters: dict = {}
    for key, ems in model.emitters:
        emitters[key] = [
            {
                "dist": _dist_to_json(em.dist),
                "var": em.var,
                **({"unit": em.unit} if em.unit is not None else {}),
            }
            for em in ems
        ]
    doc = {"tasc_model": 1, "seed": model.master_seed, "nodes": nodes, "emitters": emitters}
    return json.dumps(doc, sort_keys=True, indent=2) + "\n"


def model_from_json(text: str) -> TransitionModel:
    doc = json.loads(text)
    if doc.get("tasc_model") != 1:
        raise ValueError("not a tasc transition model (tasc_model != 1)")
    branch_modes: list[tuple[str, BranchMode]] = []
    for key in sorted(doc.get("nodes", {})):
        entry = doc["nodes"][key]
        if entry.get("mode") == "edge_probs":
            probs = tuple(sorted((e, float(p)) for e, p in entry["probs"].items()))
            branch_modes.append((key, EdgeProbabilities(probs)))
        elif entry.get("mode") == "sampler":
            branch_modes.append(
                (key, VariableSampler(entry["var"], _dist_from_json(entry["dist"]), entry.get("unit")))
            )
        else:
            raise ValueError(f"unknown mode for {key}: {entry.get('mode')!r}")
    emitters: list[tuple[str, tuple[Emitter, ...]]] = []
    for key in sorted(doc.get("emitters", {})):
        ems = tuple(
            Emitter(e["var"], _dist_from_json(e["dist"]), e.get("unit"))
            for e in doc["emitters"][key]
        )
        emitters.append((key, ems))
    return TransitionModel(tuple(branch_modes), tuple(emitters), int(doc.get("seed", 0)))


# --- compilation ------------------------------------------------------------


def _branching_nodes(cm: Caremap) -> list[str]:
    return [n.id for n in cm.nodes if len(successors(cm, n.id)) >= 2]


def _check_sampler_decidable(cm: Caremap, node_id: str, mode: VariableSampler, state: str) -> None:
    node = cm.node(node_id)
    if node.kind not in DECISION_KINDS:
        raise CompileError(f"{state}: variable samplers are only allowed on decision nodes")
    succ = successors(cm, node_id)
    branches = [(e.id, e.criterion) for e, _ in succ]
    if any(c is None for _, c in branches):
        raise CompileError(f"{state}: sampler decision has out-edges without criteria")
    has_otherwise = any(isinstance(c, C.Otherwise) for _, c in branches)
    if isinstance(mode.dist, Categorical):
        total = sum(mode.dist.probs)
        if abs(total - 1.0) > 1e-9:
            raise ProbabilityMass(state, total)
        for value in mode.dist.values:
            bindings = C.bind({}, mode.var, value, mode.unit)
            selection = C.select_branch(branches, bindings)
            if not isinstance(selection, C.Chosen):
                raise CompileError(
                    f"{state}: sampled value {value!r} does not decide a unique branch"
                )
    else:
        if not has_otherwise:
            raise CompileError(
                f"{state}: continuous sampler needs an otherwise branch to stay decidable"
            )


def _positive_out_edges(cm: Caremap, node_id: str, model: TransitionModel) -> list[str]:
    """Target node ids reachable with positive probability from node_id."""
    succ = successors(cm, node_id)
    mode = model.mode_for(cm.id, node_id)
    if isinstance(mode, EdgeProbabilities):
        positive = {e for e, p in mode.probs if p > 0}
        return [n.id for e, n in succ if e.id in positive]
    return [n.id for _, n in succ]


def compile_stm(cmset: CaremapSet, entry_caremap: str, model: TransitionModel) -> STM:
    """Check coverage, probability mass, and escapability; freeze provenance."""
    from tasc.validator import has_errors, validate

    diagnostics = validate(cmset)
    if has_errors(diagnostics):
        raise CompileError(
            "caremap set is not valid:\n" + "\n".join(d.render() for d in diagnostics)
        )
    if not cmset.has_caremap(entry_caremap):
        raise CompileError(f"no caremap {entry_caremap!r} in set")

    reachable_maps = _reachable_caremaps(cmset, entry_caremap)
    for cm_id in sorted(reachable_maps):
        cm = cmset.caremap(cm_id)
        for node_id in _branching_nodes(cm):
            state = f"{cm.id}.{node_id}"
            mode = model.mode_for(cm.id, node_id)
            if mode is None:
                raise MissingAnnotation(state)
            if isinstance(mode, EdgeProbabilities):
                out_ids = sorted(e.id for e, _ in successors(cm, node_id))
                probs_ids = sorted(e for e, _ in mode.probs)
                if out_ids != probs_ids:
                    raise CompileError(
                        f"{state}: probability map covers {probs_ids}, out-edges are {out_ids}"
                    )
                if any(p < 0 for _, p in mode.probs):
                    raise CompileError(f"{state}: negative probability")
                total = sum(p for _, p in mode.probs)
                if abs(total - 1.0) > 1e-9:
                    raise ProbabilityMass(state, total)
            else:
                _check_sampler_decidable(cm, node_id, mode, state)
        _check_escapable(cm, model)
        _check_links(cmset, cm)

    caremap_sha = hashlib.sha256(serialize(cmset).encode()).hexdigest()
    model_sha = hashlib.sha256(model_to_json(model).encode()).hexdigest()
    return STM(
        cmset,
        entry_caremap,
        model,
        (
            ("caremap_sha", caremap_sha),
            ("model_sha", model_sha),
            ("seed", str(model.master_seed)),
            ("rng", RNG_ALGORITHM),
        ),
    )


def _reachable_caremaps(cmset: CaremapSet, entry: str) -> set[str]:
    seen: set[str] = set()
    stack = [entry]
    while stack:
        cur = stack.pop()
        if cur in seen or not cmset.has_caremap(cur):
            continue
        seen.add(cur)
        cm = cmset.caremap(cur)
        for n in cm.nodes:
            if n.nested_ref:
                stack.append(n.nested_ref)
        for link in cmset.links:
            if link.from_caremap == cur:
                stack.append(link.to_caremap)
    return seen


def _check_escapable(cm: Caremap, model: TransitionModel) -> None:
    """Every node must reach a terminal through positive-probability edges."""
    escapes: set[str] = {n.id for n in cm.nodes if n.kind in TERMINAL_KINDS}
    changed = True
    while changed:
        changed = False
        for n in cm.nodes:
            if n.id in escapes:
                continue
            if any(t in escapes for t in _positive_out_edges(cm, n.id, model)):
                escapes.add(n.id)
                changed = True
    trapped = sorted(n.id for n in cm.nodes if n.id not in escapes)
    if trapped:
        raise InescapableCycle(cm.id, trapped)


def _check_links(cmset: CaremapSet, cm: Caremap) -> None:
    by_exit: dict[str, int] = {}
    for link in cmset.links:
        if link.from_caremap == cm.id:
            by_exit[link.from_exit_node] = by_exit.get(link.from_exit_node, 0) + 1
    ambiguous = sorted(e for e, c in by_exit.items() if c > 1)
    if ambiguous:
        raise CompileError(
            f"caremap {cm.id!r}: exits {ambiguous} have multiple outgoing links; "
            "generation needs a single continuation per exit"
        )


# --- generation -------------------------------------------------------------


def _trace_rng(seed: int, index: int) -> random.Random:
    digest = hashlib.sha256(f"{seed}:{index}".encode()).digest()
    return random.Random(int.from_bytes(digest[:8], "big"))


def _sample(dist: Distribution, rng: random.Random):
    if isinstance(dist, Categorical):
        return rng.choices(dist.values, weights=dist.probs, k=1)[0]
    if isinstance(dist, NormalDist):
        return rng.gauss(dist.mu, dist.sigma)
    return rng.uniform(dist.a, dist.b)


def generate_one(stm: STM, seed: int, index: int, step_cap: int = DEFAULT_STEP_CAP) -> PatientTrace:
    """Generate trace `index` as a pure function of (seed, index)."""
    rng = _trace_rng(seed, index)
    events: list[TraceEvent] = []
    bindings: C.Bindings = {}
    at = 0
    steps = 0
    cmset = stm.cmset
    cm = cmset.caremap(stm.entry_caremap)
    node = cm.entry_nodes()[0]
    stack: list[tuple[Caremap, str]] = []  # (caremap, node to resume from)

    while True:
        steps += 1
        if steps > step_cap:
            raise StepCapExceeded(
                f"trace {index} exceeded {step_cap} steps; the model likely has a "
                "near-inescapable loop"
            )
        kind = node.kind

        if kind in (NodeKind.ACTIVITY, NodeKind.NESTED_ACTIVITY):
            for em in stm.model.emitters_for(cm.id, node.id):
                value = _sample(em.dist, rng)
                events.append(Observation(em.var, value, em.unit, at))
                bindings = C.bind(bindings, em.var, value, em.unit)
            events.append(ActivityDone(node.id, at))
            at += 1
            if kind is NodeKind.NESTED_ACTIVITY:
                stack.append((cm, node.id))
                cm = cmset.caremap(node.nested_ref)
                node = cm.entry_nodes()[0]
                continue
            node = _choose_next(stm, cm, node.id, rng, bindings, events, at)
            continue

        if kind in (NodeKind.DECISION, NodeKind.NESTED_DECISION):
            if kind is NodeKind.NESTED_DECISION:
                stack.append((cm, node.id))
                cm = cmset.caremap(node.nested_ref)
                node = cm.entry_nodes()[0]
                continue
            node = _choose_next(stm, cm, node.id, rng, bindings, events, at)
            continue

        if kind is NodeKind.ENTRY_POINT:
            node = _choose_next(stm, cm, node.id, rng, bindings, events, at)
            continue

        if kind is NodeKind.EXIT_POINT:
            if stack:
                cm, resume_id = stack.pop()
                node = _choose_next(stm, cm, resume_id, rng, bindings, events, at)
                continue
            link = next(
                (l for l in cmset.links
                 if l.from_caremap == cm.id and l.from_exit_node == node.id),
                None,
            )
            if link is None:
                break
            cm = cmset.caremap(link.to_caremap)
            node = cm.node(link.to_entry_node)
            continue

        # exclusion point
        break

    return PatientTrace(f"t{index:06d}", tuple(events))


def _choose_next(stm, cm, node_id, rng, bindings, events, at):
    succ = successors(cm, node_id)
    if len(succ) == 1:
        return succ[0][1]
    mode = stm.model.mode_for(cm.id, node_id)
    node = cm.node(node_id)
    if isinstance(mode, EdgeProbabilities):
        edge_ids = [e for e, _ in mode.probs]
        weights = [p for _, p in mode.probs]
        chosen = rng.choices(edge_ids, weights=weights, k=1)[0]
        if node.kind in DECISION_KINDS:
            events.append(BranchTaken(node_id, chosen))
        return next(n for e, n in succ if e.id == chosen)
    if isinstance(mode, VariableSampler):
        value = _sample(mode.dist, rng)
        events.append(Observation(mode.var, value, mode.unit, at))
        new_bindings = C.bind(bindings, mode.var, value, mode.unit)
        bindings.clear()
        bindings.update(new_bindings)
        branches = [(e.id, e.criterion) for e, _ in succ]
        selection = C.select_branch(branches, bindings)
        assert isinstance(selection, C.Chosen), "compile guarantees decidability"
        return next(n for e, n in succ if e.id == selection.edge_id)
    raise MissingAnnotation(f"{cm.id}.{node_id}")


def generate(stm: STM, n: int, seed: int, step_cap: int = DEFAULT_STEP_CAP) -> Iterator[PatientTrace]:
    """Yield exactly n traces; trace i depends only on (seed, i)."""
    for i in range(n):
        yield generate_one(stm, seed, i, step_cap)


def provenance_header(stm: STM, seed: int) -> str:
    p = stm.provenance_dict()
    return (
        f"# tasc-synth v1 seed={seed} caremap_sha={p['caremap_sha']} "
        f"model_sha={p['model_sha']} rng={p['rng']}"
    )


# --- frequency verification -------------------------------------------------


@dataclass(frozen=True)
class FrequencyRow:
    caremap: str
    node: str
    edge: str
    expected: float
    empirical: float

    @property
    def delta(self) -> float:
        return abs(self.expected - self.empirical)


@dataclass(frozen=True)
class FrequencyReport:
    rows: tuple[FrequencyRow, ...]
    unmatched_traces: int = 0

    @property
    def max_delta(self) -> float:
        return max((r.delta for r in self.rows), default=0.0)

    def as_dict(self) -> dict:
        return {
            "rows": [
                {
                    "caremap": r.caremap,
                    "node": r.node,
                    "edge": r.edge,
                    "expected": r.expected,
                    "empirical": r.empirical,
                    "delta": r.delta,
                }
                for r in self.rows
            ],
            "max_delta": self.max_delta,
            "unmatched_traces": self.unmatched_traces,
        }


def frequency_report(traces: list[PatientTrace], stm: STM) -> FrequencyReport:
    """Compare annotated edge probabilities with empirical branch frequencies.

    Traces are replayed to recover the edges each walk took; empirical
    frequency is computed over visits to the branching node only.
    """
    edge_owner: dict[tuple[str, str], str] = {}
    expected: dict[tuple[str, str], float] = {}
    for key, mode in stm.model.branch_modes:
        if not isinstance(mode, EdgeProbabilities):
            continue
        cm_id, node_id = key.split(".", 1)
        for edge_id, p in mode.probs:
            edge_owner[(cm_id, edge_id)] = node_id
            expected[(cm_id, edge_id)] = p

    edge_counts: dict[tuple[str, str], int] = {k: 0 for k in expected}
    node_visits: dict[tuple[str, str], int] = {}
    unmatched = 0
    for trace in traces:
        report, edges = replay_with_edges(stm.cmset, stm.entry_caremap, trace)
        if report.status != "Conformant":
            unmatched += 1
            continue
        for cm_id, edge_id in edges:
            key = (cm_id, edge_id)
            if key in edge_counts:
                edge_counts[key] += 1
                node = edge_owner[key]
                node_visits[(cm_id, node)] = node_visits.get((cm_id, node), 0) + 1

    rows = []
    for (cm_id, edge_id) in sorted(expected):
        node_id = edge_owner[(cm_id, edge_id)]
        visits = node_visits.get((cm_id, node_id), 0)
        empirical = edge_counts[(cm_id, edge_id)] / visits if visits else 0.0
        rows.append(FrequencyRow(cm_id, node_id, edge_id, expected[(cm_id, edge_id)], empirical))
    rows.sort(key=lambda r: (r.caremap, r.node, r.edge))
    return FrequencyReport(tuple(rows), unmatched)
