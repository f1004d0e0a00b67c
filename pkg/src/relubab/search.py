"""Depth-first branch-and-bound over ReLU phases.

Each node runs deduction to a fixpoint (interval propagation, optional
LP tightening, phase deduction), then solves its triangle relaxation for
the most-violating point. A node closes as a conflict when deduction
empties it, and as SAT when even that point satisfies every ReLU exactly
(total SoI within tolerance) together with the output property; the
point's input part is the witness. Splitting deduces both children eagerly
(the sibling's deduction feeds the Pseudo-Impact table), then explores the
chosen phase first.

Event log text format, one record per line:

    node id=<n> parent=<n|-> depth=<n> action=<layer:idx:a|i|-> \
        result=<open|conflict|sat> unfixed=<n> soi=<float|->
    split node=<n> neuron=<layer:idx> phase=<a|i> k=<n>
    verdict outcome=<sat|unsat|timeout> iterations=<n> splits=<n>

``k`` is the number of unfixed neurons at the node before the split; the
reward bookkeeping and the tests recount subtree sizes from these lines.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .heuristics import PI_BETA, compute_scores, pseudo_impact_update, \
    select_split
from .model import Network, NeuronId
from .numeric import BoundsMap, Conflict, Phase, VarMap, propagate_intervals, \
    solve_relaxation, tighten_bounds_lp
from .query import Query, Verdict, check_witness

SAT_SOI_TOL = 1e-6
_CONFLICT_EPS = 1e-9


@dataclass(frozen=True)
class SplitAction:
    neuron: NeuronId
    phase: Phase

    def complement(self) -> "SplitAction":
        other = Phase.INACTIVE if self.phase is Phase.ACTIVE else Phase.ACTIVE
        return SplitAction(self.neuron, other)

    def __str__(self) -> str:
        return f"{self.neuron}:{self.phase.short.lower()}"


@dataclass
class Budget:
    timeout_s: float = 3600.0
    max_iterations: int = 10 ** 9
    seed: int = 0

    def __post_init__(self):
        if self.timeout_s <= 0 or self.max_iterations <= 0:
            raise ValueError("budget must be positive")


class _Timeout(Exception):
    pass


@dataclass
class NodeState:
    """One BaB node after deduction."""

    phases: dict[NeuronId, Phase]
    bounds: BoundsMap | None
    depth: int
    splits_so_far: int
    solution: np.ndarray | None
    vmap: VarMap | None
    soi: float | None
    status: str  # "open" | "conflict" | "sat"
    witness: np.ndarray | None = None
    pi_table: dict[NeuronId, float] = field(default_factory=dict)
    node_id: int = -1
    parent_id: int = -1
    action: SplitAction | None = None

    def unfixed(self) -> list[NeuronId]:
        return sorted(n for n, p in self.phases.items() if p is Phase.UNFIXED)

    def relu_values(self) -> dict[NeuronId, tuple[float, float]] | None:
        """(pre, post) per ReLU neuron from the relaxation solution."""
        if self.solution is None or self.vmap is None:
            return None
        out = {}
        for k in self.vmap.pre:
            pre = self.solution[self.vmap.pre[k]]
            post = self.solution[self.vmap.post[k]]
            for i in range(pre.shape[0]):
                out[NeuronId(k, i)] = (float(pre[i]), float(post[i]))
        return out


# ---------------------------------------------------------------------------
# event log


@dataclass(frozen=True)
class NodeEvent:
    node_id: int
    parent_id: int
    depth: int
    action: SplitAction | None
    result: str
    unfixed: int
    soi: float | None

    def to_line(self) -> str:
        act = str(self.action) if self.action else "-"
        par = str(self.parent_id) if self.parent_id >= 0 else "-"
        soi = f"{self.soi:.17g}" if self.soi is not None else "-"
        return (f"node id={self.node_id} parent={par} depth={self.depth} "
                f"action={act} result={self.result} unfixed={self.unfixed} "
                f"soi={soi}")


@dataclass(frozen=True)
class SplitEvent:
    node_id: int
    neuron: NeuronId
    phase: Phase
    k: int  # unfixed count at the node before this split

    def to_line(self) -> str:
        return (f"split node={self.node_id} neuron={self.neuron} "
                f"phase={self.phase.short.lower()} k={self.k}")


@dataclass(frozen=True)
class VerdictEvent:
    outcome: str
    iterations: int
    splits: int

    def to_line(self) -> str:
        return (f"verdict outcome={self.outcome.lower()} "
                f"iterations={self.iterations} splits={self.splits}")


def events_to_text(events: Iterable) -> str:
    return "\n".join(ev.to_line() for ev in events) + "\n"


def _phase_from_token(tok: str) -> Phase:
    return {"a": Phase.ACTIVE, "i": Phase.INACTIVE}[tok]


def parse_event_log(text: str) -> list:
    """Inverse of events_to_text; malformed input raises ValueError."""
    events = []
    for raw in text.splitlines():
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        kind, *rest = line.split()
        kv = dict(tok.split("=", 1) for tok in rest)
        if kind == "node":
            action = None
            if kv["action"] != "-":
                layer, idx, ph = kv["action"].split(":")
                action = SplitAction(NeuronId(int(layer), int(idx)),
                                     _phase_from_token(ph))
            events.append(NodeEvent(
                node_id=int(kv["id"]),
                parent_id=-1 if kv["parent"] == "-" else int(kv["parent"]),
                depth=int(kv["depth"]), action=action, result=kv["result"],
                unfixed=int(kv["unfixed"]),
                soi=None if kv["soi"] == "-" else float(kv["soi"])))
        elif kind == "split":
            events.append(SplitEvent(
                node_id=int(kv["node"]), neuron=NeuronId.parse(kv["neuron"]),
                phase=_phase_from_token(kv["phase"]), k=int(kv["k"])))
        elif kind == "verdict":
            events.append(VerdictEvent(
                outcome=kv["outcome"].upper(),
                iterations=int(kv["iterations"]), splits=int(kv["splits"])))
        else:
            raise ValueError(f"unknown event kind {kind!r}")
    return events


# ---------------------------------------------------------------------------
# deduction


def deduce_phases(bounds: BoundsMap,
                  phases: dict[NeuronId, Phase] | None = None
                  ) -> list[tuple[NeuronId, Phase]]:
    """Unfixed neurons whose pre bounds pin them to one phase.

    Applying the fixes and re-deducing reaches a fixpoint because fixes only
    shrink intervals.
    """
    fixes = []
    for k in sorted(bounds.pre_lower):
        lo = bounds.pre_lower[k]
        hi = bounds.pre_upper[k]
        for i in range(lo.shape[0]):
            nid = NeuronId(k, i)
            if phases is not None and phases.get(nid, Phase.UNFIXED) is not Phase.UNFIXED:
                continue
            if hi[i] <= 0.0:
                fixes.append((nid, Phase.INACTIVE))
            elif lo[i] >= 0.0:
                fixes.append((nid, Phase.ACTIVE))
    return fixes


def _interval_output_conflict(bounds: BoundsMap, constraints) -> None:
    for con in constraints:
        cp = np.clip(con.coeffs, 0.0, None)
        cm = np.clip(con.coeffs, None, 0.0)
        lo = cp @ bounds.output_lower + cm @ bounds.output_upper
        if lo > con.bound + _CONFLICT_EPS:
            raise Conflict(f"output interval violates {con}")


def _deduce_node(net: Network, query: Query, phases: dict[NeuronId, Phase],
                 clip: BoundsMap | None, tighten: bool):
    """Run deduction to a fixpoint; returns the node ingredients.

    Raises Conflict when the node is empty.
    """
    phases = dict(phases)
    carry = clip
    while True:
        bounds = propagate_intervals(net, query.input_lower, query.input_upper,
                                     phases, clip=carry)
        _interval_output_conflict(bounds, query.constraints)
        fixes = deduce_phases(bounds, phases)
        if fixes:
            phases.update(fixes)
            carry = bounds
            continue
        if not tighten:
            break
        tightened = tighten_bounds_lp(net, bounds, phases, query.constraints)
        fixes = deduce_phases(tightened, phases)
        if fixes:
            phases.update(fixes)
            carry = tightened
            continue
        refreshed = propagate_intervals(net, query.input_lower,
                                        query.input_upper, phases,
                                        clip=tightened)
        _interval_output_conflict(refreshed, query.constraints)
        fixes = deduce_phases(refreshed, phases)
        if fixes:
            phases.update(fixes)
            carry = refreshed
            continue
        bounds = refreshed
        break

    result, vmap = solve_relaxation(net, bounds, phases, query.constraints)
    if not result.feasible:
        raise Conflict("relaxation infeasible")
    sol = result.x
    soi = 0.0
    for k in vmap.pre:
        pre = sol[vmap.pre[k]]
        post = sol[vmap.post[k]]
        soi += float(np.sum(np.minimum(post - pre, post)))

    status, witness = "open", None
    if soi <= SAT_SOI_TOL:
        candidate = sol[vmap.x].copy()
        if check_witness(net, query, candidate):
            status, witness = "sat", candidate
        elif not any(p is Phase.UNFIXED for p in phases.values()):
            raise RuntimeError(
                "fully fixed node is LP-feasible but its witness fails "
                "validation; solver tolerance breach")
    return phases, bounds, sol, vmap, soi, status, witness


# ---------------------------------------------------------------------------
# engine


class FeatureContext:
    """Run-level context the featurizer reads: network size, root bounds
    for normalization, and the running split maximum."""

    def __init__(self, total_relus: int, root_bounds: BoundsMap | None):
        self.total_relus = total_relus
        self.root_bounds = root_bounds
        self.running_max_splits = 0


class _Engine:
    def __init__(self, net: Network, query: Query, strategy, budget: Budget,
                 tighten: bool, force_first, event_sink, collector):
        self.net = net
        self.query = query
        self.strategy = strategy
        self.budget = budget
        self.tighten = tighten
        self.force = list(force_first or [])
        self.events = event_sink if event_sink is not None else []
        self.collector = collector
        self.rng = np.random.default_rng(budget.seed)
        self.out_direction = np.sum([c.coeffs for c in query.constraints],
                                    axis=0)
        self.pi_table: dict[NeuronId, float] = {}
        self.fctx = FeatureContext(net.num_relus, None)
        self.iterations = 0
        self.splits = 0
        self.t0 = time.monotonic()
        self.next_id = 0

    def _elapsed_ms(self) -> float:
        return (time.monotonic() - self.t0) * 1000.0

    def _check_budget(self):
        if self.iterations >= self.budget.max_iterations:
            raise _Timeout
        if time.monotonic() - self.t0 > self.budget.timeout_s:
            raise _Timeout

    def _visit(self, phases: dict[NeuronId, Phase], depth: int,
               parent: NodeState | None, action: SplitAction | None) -> NodeState:
        self._check_budget()
        self.iterations += 1
        node_id = self.next_id
        self.next_id += 1
        clip = parent.bounds if parent is not None else None
        try:
            phases, bounds, sol, vmap, soi, status, witness = _deduce_node(
                self.net, self.query, phases, clip, self.tighten)
            node = NodeState(phases=phases, bounds=bounds, depth=depth,
                             splits_so_far=self.splits, solution=sol,
                             vmap=vmap, soi=soi, status=status,
                             witness=witness, pi_table=self.pi_table,
                             node_id=node_id,
                             parent_id=parent.node_id if parent else -1,
                             action=action)
        except Conflict:
            node = NodeState(phases=dict(phases), bounds=None, depth=depth,
                             splits_so_far=self.splits, solution=None,
                             vmap=None, soi=None, status="conflict",
                             pi_table=self.pi_table, node_id=node_id,
                             parent_id=parent.node_id if parent else -1,
                             action=action)
        self.events.append(NodeEvent(
            node_id=node.node_id, parent_id=node.parent_id, depth=depth,
            action=action, result=node.status,
            unfixed=len(node.unfixed()) if node.bounds is not None else 0,
            soi=node.soi))
        if action is not None and parent is not None and parent.soi is not None:
            child_soi = node.soi if node.status == "open" else 0.0
            delta = abs(parent.soi - child_soi)
            self.pi_table[action.neuron] = pseudo_impact_update(
                self.pi_table.get(action.neuron, 0.0), delta, PI_BETA)
        return node

    def _init_pi(self, root: NodeState):
        widths = {}
        for nid in self.net.relu_ids():
            lo, hi = root.bounds.pre(nid)
            widths[nid] = abs(hi - lo)
        wmax = max(widths.values(), default=0.0)
        for nid, w in widths.items():
            self.pi_table[nid] = w / wmax if wmax > 0 else 0.0

    def _pick_action(self, node: NodeState) -> SplitAction:
        scores = compute_scores(self.net, node, self.out_direction)
        if self.force:
            action = self.force.pop(0)
            if node.phases.get(action.neuron) is not Phase.UNFIXED:
                raise ValueError(f"forced action on fixed neuron {action.neuron}")
        else:
            action = select_split(node, self.strategy, self.rng, scores,
                                  net=self.net, fctx=self.fctx)
        self.splits += 1
        self.fctx.running_max_splits = self.splits
        self.events.append(SplitEvent(node_id=node.node_id,
                                      neuron=action.neuron,
                                      phase=action.phase,
                                      k=len(node.unfixed())))
        if self.collector is not None:
            self.collector.on_split(self.net, node, scores, action, self.fctx)
        return action

    def _child_phases(self, node: NodeState, action: SplitAction):
        phases = dict(node.phases)
        phases[action.neuron] = action.phase
        return phases

    def run(self) -> Verdict:
        outcome = "UNSAT"
        witness = None
        try:
            all_unfixed = {nid: Phase.UNFIXED for nid in self.net.relu_ids()}
            root = self._visit(all_unfixed, 0, None, None)
            if root.status == "sat":
                outcome, witness = "SAT", root.witness
            elif root.status == "conflict":
                outcome = "UNSAT"
            else:
                self._init_pi(root)
                self.fctx.root_bounds = root.bounds
                outcome, witness = self._dfs(root)
        except _Timeout:
            outcome = "TIMEOUT"
        self.events.append(VerdictEvent(outcome=outcome,
                                        iterations=self.iterations,
                                        splits=self.splits))
        return Verdict(outcome=outcome, witness=witness,
                       iterations=self.iterations, splits=self.splits,
                       wall_time_ms=self._elapsed_ms())

    def _dfs(self, root: NodeState) -> tuple[str, np.ndarray | None]:
        stack: list[list] = [[root, None]]
        while stack:
            node, pending = stack[-1]
            if pending is None:
                action = self._pick_action(node)
                chosen = self._visit(self._child_phases(node, action),
                                     node.depth + 1, node, action)
                if chosen.status == "sat":
                    return "SAT", chosen.witness
                sib_action = action.complement()
                sibling = self._visit(self._child_phases(node, sib_action),
                                      node.depth + 1, node, sib_action)
                if sibling.status == "sat":
                    return "SAT", sibling.witness
                stack[-1][1] = [c for c in (chosen, sibling)
                                if c.status == "open"]
            elif pending:
                stack.append([pending.pop(0), None])
            else:
                stack.pop()
        return "UNSAT", None


def verify(net: Network, query: Query, strategy="babsr",
           budget: Budget | None = None, *, tighten: bool = True,
           force_first: Sequence[SplitAction] | None = None,
           event_log: list | None = None, collector=None) -> Verdict:
    """Decide a query by branch-and-bound under the given splitting strategy.

    ``strategy`` is one of the static names ("soi", "polarity",
    "pseudo-impact", "babsr") or a policy object with a ``choose`` method.
    ``force_first`` overrides the first decisions (testing hook).
    ``event_log``, when a list, receives the event records of the run.
    """
    engine = _Engine(net, query, strategy, budget or Budget(),
                     tighten, force_first, event_log, collector)
    return engine.run()


def root_node(net: Network, query: Query, *, tighten: bool = True) -> NodeState:
    """Deduced root NodeState (unit-test and inspection helper)."""
    all_unfixed = {nid: Phase.UNFIXED for nid in net.relu_ids()}
    phases, bounds, sol, vmap, soi, status, witness = _deduce_node(
        net, query, all_unfixed, None, tighten)
    return NodeState(phases=phases, bounds=bounds, depth=0, splits_so_far=0,
                     solution=sol, vmap=vmap, soi=soi, status=status,
                     witness=witness)


def apply_split(net: Network, query: Query, node: NodeState,
                action: SplitAction, *, tighten: bool = True) -> NodeState:
    """Child of ``node`` under ``action``, fully re-deduced.

    A Conflict during deduction yields a closed child (status "conflict")
    rather than an exception; the sibling is obtained by applying the
    complementary action.
    """
    if node.phases.get(action.neuron) is not Phase.UNFIXED:
        raise ValueError(f"{action.neuron} is not unfixed in this node")
    phases = dict(node.phases)
    phases[action.neuron] = action.phase
    try:
        phases, bounds, sol, vmap, soi, status, witness = _deduce_node(
            net, query, phases, node.bounds, tighten)
        return NodeState(phases=phases, bounds=bounds, depth=node.depth + 1,
                         splits_so_far=node.splits_so_far + 1, solution=sol,
                         vmap=vmap, soi=soi, status=status, witness=witness,
                         pi_table=node.pi_table)
    except Conflict:
        return NodeState(phases=phases, bounds=None, depth=node.depth + 1,
                         splits_so_far=node.splits_so_far + 1, solution=None,
                         vmap=None, soi=None, status="conflict",
                         pi_table=node.pi_table)
