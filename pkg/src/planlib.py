"""
Query Planner - Latency budgets over a DAG of model options
Partial latency budgets per node, best-model picks, incremental replanning
from saved latency, and paired Monte Carlo sweeps over SLOs
"""

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import networkx as nx
import numpy as np

from reportlib import require

logger = logging.getLogger(__name__)

EQUAL = "equal"
PROPORTIONAL = "proportional"
POLICIES = (EQUAL, PROPORTIONAL)

DEFAULT_SLOS = tuple(range(60, 161, 10))
DEFAULT_QUERIES = 10000
DEFAULT_HIT_PROBABILITY = 0.3
DEFAULT_HIT_LATENCY_MS = 20.0

DAG_FORMAT = "latebind-dag"
EPS = 1e-9

PartialBudgets = Dict[str, float]
LatencyOracle = Callable[[str, 'ModelOption', float], float]


class DagError(ValueError):
    """DAG description is malformed"""


class UnknownNodeError(KeyError):
    """Node has no budget in the current plan"""


@dataclass(frozen=True)
class ModelOption:
    name: str
    latency_ms: float
    accuracy: float

    def __post_init__(self):
        if not self.latency_ms > 0:
            raise DagError(f"{self.name}: latency must be > 0, got {self.latency_ms}")
        if not 0.0 <= self.accuracy <= 1.0:
            raise DagError(f"{self.name}: accuracy must be in [0, 1], got {self.accuracy}")


class QueryDag:
    """
    Application DAG: nodes carry ordered model options, edges carry a branch
    label and weight. Nodes without options are merge points (no budget).
    """

    def __init__(self, graph: nx.DiGraph, name: str = "dag", slo_ms: Optional[float] = None):
        self.graph = graph
        self.name = name
        self.slo_ms = slo_ms
        self._validate()
        self._paths = [list(p) for p in nx.all_simple_paths(graph, self.root, self.sink)] \
            if self.root != self.sink else [[self.root]]

    def _validate(self):
        g = self.graph
        if g.number_of_nodes() == 0:
            raise DagError("DAG has no nodes")
        if not nx.is_directed_acyclic_graph(g):
            raise DagError("Graph has a cycle")
        roots = [n for n in g.nodes if g.in_degree(n) == 0]
        sinks = [n for n in g.nodes if g.out_degree(n) == 0]
        if len(roots) != 1 or len(sinks) != 1:
            raise DagError(f"Need exactly one root and one sink, found roots={roots} sinks={sinks}")
        self.root, self.sink = roots[0], sinks[0]
        reachable = nx.descendants(g, self.root) | {self.root}
        reaching = nx.ancestors(g, self.sink) | {self.sink}
        stranded = [n for n in g.nodes if n not in reachable or n not in reaching]
        if stranded:
            raise DagError(f"Nodes not on a root-to-sink path: {stranded}")
        if not any(self.options(n) for n in g.nodes):
            raise DagError("No node has model options")

    def options(self, node: str) -> Tuple[ModelOption, ...]:
        if node not in self.graph:
            raise UnknownNodeError(node)
        return self.graph.nodes[node].get('options', ())

    def max_latency(self, node: str) -> float:
        return max(o.latency_ms for o in self.options(node))

    @property
    def model_nodes(self) -> List[str]:
        return [n for n in nx.topological_sort(self.graph) if self.options(n)]

    def paths(self) -> List[List[str]]:
        """Root-to-sink paths restricted to nodes with options"""
        return [[n for n in path if self.options(n)] for path in self._paths]

    def children(self, node: str) -> List[Tuple[str, str, float]]:
        return [(child, data.get('label', ''), data.get('weight', 1.0))
                for child, data in self.graph[node].items()]


def build_dag(nodes: Dict[str, Sequence[ModelOption]], edges: Sequence[Tuple], name: str = "dag",
              slo_ms: Optional[float] = None) -> QueryDag:
    """Edges are (src, dst) or (src, dst, label, weight)"""
    graph = nx.DiGraph()
    for node, options in nodes.items():
        graph.add_node(node, options=tuple(options))
    for edge in edges:
        src, dst = edge[0], edge[1]
        for end in (src, dst):
            if end not in graph:
                raise DagError(f"Edge {src}->{dst} references unknown node '{end}'")
        label = edge[2] if len(edge) > 2 else dst
        weight = float(edge[3]) if len(edge) > 3 else 1.0
        if not weight > 0:
            raise DagError(f"Edge {src}->{dst}: weight must be > 0")
        graph.add_edge(src, dst, label=label, weight=weight)
    return QueryDag(graph, name, slo_ms)


def traffic_dag() -> QueryDag:
    """Traffic analysis: object detection forks to face or vehicle recognition"""
    nodes = {
        'objdet': [ModelOption('ResNet-18', 27.36, 0.911), ModelOption('ResNet-34', 41.05, 0.929),
                   ModelOption('ResNet-50', 54.5, 0.941)],
        'face': [ModelOption('SE-LResNet9E-IR', 17.38, 0.955), ModelOption('SE-LResNet18E-IR', 36.75, 0.976),
                 ModelOption('SE-LResNet50E-IR', 58.34, 0.981), ModelOption('SE-LResNet101E-IR', 110.32, 0.991)],
        'vehicle': [ModelOption('ResNet-9', 16.14, 0.902), ModelOption('ResNet-18', 23.68, 0.918),
                    ModelOption('ResNet-50', 54.12, 0.926), ModelOption('ResNet-101', 111.42, 0.934)],
        'output': [],
    }
    edges = [('objdet', 'face', 'face', 0.5), ('objdet', 'vehicle', 'vehicle', 0.5),
             ('face', 'output', 'done', 1.0), ('vehicle', 'output', 'done', 1.0)]
    return build_dag(nodes, edges, name='traffic', slo_ms=80.0)


def dag_to_dict(dag: QueryDag) -> Dict:
    return {
        'format': DAG_FORMAT,
        'version': 1,
        'name': dag.name,
        'slo_ms': dag.slo_ms,
        'nodes': [{'name': n, 'options': [{'name': o.name, 'latency_ms': o.latency_ms, 'accuracy': o.accuracy}
                                          for o in dag.options(n)]}
                  for n in nx.topological_sort(dag.graph)],
        'edges': [{'src': s, 'dst': d, 'label': data.get('label', d), 'weight': data.get('weight', 1.0)}
                  for s, d, data in dag.graph.edges(data=True)],
    }


def dag_from_dict(payload: Dict) -> QueryDag:
    try:
        nodes = {}
        for node in payload['nodes']:
            if node['name'] in nodes:
                raise DagError(f"Duplicate node '{node['name']}'")
            nodes[node['name']] = [ModelOption(o['name'], float(o['latency_ms']), float(o['accuracy']))
                                   for o in node.get('options', [])]
        edges = [(e['src'], e['dst'], e.get('label', e['dst']), e.get('weight', 1.0)) for e in payload['edges']]
    except (KeyError, TypeError) as e:
        raise DagError(f"Malformed DAG description: {e}") from e
    return build_dag(nodes, edges, payload.get('name', 'dag'), payload.get('slo_ms'))


def load_dag(path) -> QueryDag:
    with open(require(path), 'r', encoding='utf-8') as f:
        try:
            payload = json.load(f)
        except json.JSONDecodeError as e:
            raise DagError(f"{path}: not valid JSON ({e})") from e
    return dag_from_dict(payload)


def dump_dag(dag: QueryDag, path):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w', encoding='utf-8') as f:
        json.dump(dag_to_dict(dag), f, indent=2)
        f.write('\n')


def _check_policy(policy: str):
    if policy not in POLICIES:
        raise ValueError(f"policy must be one of {POLICIES}, got {policy!r}")


def _shares(dag: QueryDag, nodes: Sequence[str], amount: float, policy: str) -> List[float]:
    if policy == EQUAL:
        return [amount / len(nodes)] * len(nodes)
    weights = [dag.max_latency(n) for n in nodes]
    return [amount * w / sum(weights) for w in weights]


def compute_budgets(dag: QueryDag, slo_ms: float, policy: str = EQUAL) -> PartialBudgets:
    """
    Split the SLO along every root-to-sink path; a node shared by several
    paths keeps the smallest of its per-path shares
    """
    _check_policy(policy)
    if not slo_ms > 0:
        raise ValueError(f"SLO must be > 0, got {slo_ms}")
    budgets: PartialBudgets = {}
    for path in dag.paths():
        if not path:
            continue
        for node, share in zip(path, _shares(dag, path, slo_ms, policy)):
            budgets[node] = min(budgets.get(node, share), share)
    return budgets


@dataclass(frozen=True)
class Pick:
    option: ModelOption
    slo_risk: bool = False


def pick_best_model(options: Sequence[ModelOption], budget: float) -> Pick:
    """
    Most accurate option within the budget (ties to lower latency); when none
    fits, the fastest option flagged as an SLO risk
    """
    if not options:
        raise DagError("Node has no model options")
    fits = [o for o in options if o.latency_ms <= budget + EPS]
    if fits:
        return Pick(max(fits, key=lambda o: (o.accuracy, -o.latency_ms)))
    fastest = min(options, key=lambda o: (o.latency_ms, -o.accuracy))
    logger.debug("no option fits %.2f ms, falling back to %s (%.2f ms)", budget, fastest.name, fastest.latency_ms)
    return Pick(fastest, True)


def on_execution_complete(budgets: PartialBudgets, dag: QueryDag, node: str, observed_ms: float,
                          policy: str = EQUAL) -> PartialBudgets:
    """
    Hand the latency a node saved to the nodes after it

    saved = max(0, budget - observed). Along each path through the node the
    saving is split over the downstream nodes (equally or by max option
    latency); a downstream node on several paths gets its smallest share.

    Returns:
        New budget map (the input is not modified)
    """
    _check_policy(policy)
    if node not in budgets:
        raise UnknownNodeError(node)
    saved = max(0.0, budgets[node] - observed_ms)
    updated = dict(budgets)
    if saved == 0.0:
        return updated

    extra: Dict[str, float] = {}
    for path in dag.paths():
        if node not in path:
            continue
        downstream = path[path.index(node) + 1:]
        if not downstream:
            continue
        for nxt, share in zip(downstream, _shares(dag, downstream, saved, policy)):
            extra[nxt] = min(extra.get(nxt, share), share)
    for nxt, share in extra.items():
        updated[nxt] = updated[nxt] + share
    return updated


def fixed_latency_oracle() -> LatencyOracle:
    """Every option runs at its profiled latency"""
    def oracle(node: str, option: ModelOption, u: float) -> float:
        return option.latency_ms
    return oracle


def cache_hit_oracle(cached_node: str, hit_probability: float = DEFAULT_HIT_PROBABILITY,
                     hit_latency_ms: float = DEFAULT_HIT_LATENCY_MS) -> LatencyOracle:
    """The cached node finishes early (at hit_latency_ms) with the given probability"""
    if not 0.0 <= hit_probability <= 1.0:
        raise ValueError(f"hit_probability must be in [0, 1], got {hit_probability}")

    def oracle(node: str, option: ModelOption, u: float) -> float:
        if node == cached_node and u < hit_probability:
            return min(hit_latency_ms, option.latency_ms)
        return option.latency_ms
    return oracle


@dataclass
class QueryResult:
    path: List[str]
    choices: Dict[str, str]
    total_latency_ms: float
    correct: bool
    expected_accuracy: float
    slo_violated: bool
    slo_risk: bool
    audit: List[Dict] = field(default_factory=list)


def run_query(dag: QueryDag, slo_ms: float, policy: str, oracle: LatencyOracle, replan: bool,
              rng: np.random.Generator) -> QueryResult:
    """
    Execute one query through the DAG

    Three uniforms are drawn per visited node (branch, latency, correctness)
    regardless of mode, so runs with and without replanning that share an rng
    seed see the same random numbers.
    """
    budgets = compute_budgets(dag, slo_ms, policy)
    node = dag.root
    path, choices, audit = [], {}, []
    total, correct, expected, risk = 0.0, True, 1.0, False

    while True:
        u_branch, u_latency, u_correct = rng.random(3)
        path.append(node)
        options = dag.options(node)
        if options:
            before = dict(budgets)
            pick = pick_best_model(options, budgets[node])
            observed = oracle(node, pick.option, u_latency)
            total += observed
            correct = correct and u_correct < pick.option.accuracy
            expected *= pick.option.accuracy
            risk = risk or pick.slo_risk
            choices[node] = pick.option.name
            if replan:
                budgets = on_execution_complete(budgets, dag, node, observed, policy)
            audit.append({'node': node, 'budget_ms': before[node], 'option': pick.option.name,
                          'slo_risk': pick.slo_risk, 'observed_ms': observed,
                          'saved_ms': max(0.0, before[node] - observed),
                          'budgets_before': before, 'budgets_after': dict(budgets)})

        children = dag.children(node)
        if not children:
            break
        weights = np.array([w for _, _, w in children])
        cumulative = np.cumsum(weights / weights.sum())
        node = children[min(int(np.searchsorted(cumulative, u_branch, side='right')), len(children) - 1)][0]

    return QueryResult(path, choices, total, correct, expected, total > slo_ms + EPS, risk, audit)


def slo_sweep(dag: QueryDag, slos: Sequence[float], policy: str, oracle: LatencyOracle,
              queries: int = DEFAULT_QUERIES, seed: int = 0,
              audit_queries: int = 0) -> Tuple[List[Dict], List[Dict]]:
    """
    Paired Monte Carlo over an SLO grid, replanning off and on

    Query q uses the same random stream in both modes.

    Returns:
        Tuple of (summary rows per SLO and mode, audit entries of the first audit_queries queries)
    """
    rows, audits = [], []
    for slo in slos:
        for replan in (False, True):
            correct = expected = latency = 0.0
            violations = risks = 0
            for q in range(queries):
                result = run_query(dag, slo, policy, oracle, replan, np.random.default_rng([seed, q]))
                correct += result.correct
                expected += result.expected_accuracy
                latency += result.total_latency_ms
                violations += result.slo_violated
                risks += result.slo_risk
                if q < audit_queries:
                    audits.append({'slo_ms': slo, 'replan': replan, 'query': q, 'path': result.path,
                                   'choices': result.choices, 'total_latency_ms': result.total_latency_ms,
                                   'steps': result.audit})
            rows.append({'slo_ms': slo, 'replan': replan, 'queries': queries,
                         'mean_accuracy': correct / queries, 'mean_expected_accuracy': expected / queries,
                         'mean_latency_ms': latency / queries, 'slo_violations': violations,
                         'slo_risk_queries': risks})
    return rows, audits
