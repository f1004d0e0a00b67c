"""Branch-and-bound verification of feed-forward ReLU networks with
hand-crafted and learned splitting heuristics."""

from .model import Network, NeuronId, evaluate, load_nnet, emit_nnet, toy_network
from .numeric import BoundsMap, Conflict, LPProblem, LPResult, Phase, solve_lp
from .query import Query, Verdict, check_witness, make_robustness_queries, \
    parse_property
from .search import Budget, NodeState, SplitAction, verify

__all__ = [
    "Network", "NeuronId", "evaluate", "load_nnet", "emit_nnet",
    "toy_network", "BoundsMap", "Conflict", "LPProblem", "LPResult", "Phase",
    "solve_lp", "Query", "Verdict", "check_witness",
    "make_robustness_queries", "parse_property", "Budget", "NodeState",
    "SplitAction", "verify",
]
