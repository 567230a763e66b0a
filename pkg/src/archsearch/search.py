"""Exact per-layer block selection under multi-dimension budgets.

The problem: pick exactly one block variant per layer so that every budget
dimension (one time budget per serving scenario, optionally a KV-cache byte
budget) is satisfied and the summed degradation score is minimal. This is a
multiple-choice knapsack; layer counts here are small, so we solve it exactly
with best-first branch and bound and can cross-check against brute-force
enumeration bit for bit:

* Costs are integers (nanoseconds, bytes), so feasibility checks are exact.
* Degradations are accumulated left to right over layers in both solvers, so
  the optimal objective compares equal, not just close.
* The heap is keyed by (lower bound, choice path). Bounds never decrease from
  parent to child, so the first completed selection popped is optimal; among
  equally good optima the lexicographically smallest choice vector wins, which
  pins down one deterministic answer.

The lower bound at a node relaxes the remaining layers: each remaining layer
contributes its cheapest-degradation variant among those that could still fit
if every other remaining layer took its per-dimension minimum cost. A node
whose relaxation already overruns some budget is pruned; an empty heap means
the problem is infeasible and the binding dimensions are named.
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .costs import Budget, CostTable, HardwareProfile, Scenario, build_cost_table
from .costs import kv_bytes_layer, scenario_time_budget
from .library import ArchitectureSpec, BlockLibrary, ExpertRanking, LayerBlockSpec
from .model import ConfigError, ModelConfig
from .scoring import SIGNAL_ACTIVATION_MSE, SIGNAL_TASK_DROP, ScoreTable

BRUTE_FORCE_CAP = 10_000_000


class InfeasibleError(RuntimeError):
    """No selection satisfies the budgets; names the binding dimensions."""

    def __init__(self, binding: tuple[str, ...]):
        self.binding = binding
        super().__init__(
            "no block selection satisfies the budgets; binding dimension(s): "
            + ", ".join(binding)
        )


@dataclass(frozen=True)
class VariantChoice:
    """One selectable block for one layer with its score and integer costs."""

    id: str
    degradation: float
    costs: tuple[int, ...]

    def __post_init__(self) -> None:
        if not (self.degradation >= 0.0):  # also rejects NaN
            raise ConfigError(
                f"variant {self.id}: degradation must be >= 0, got {self.degradation!r}"
            )
        for c in self.costs:
            if not isinstance(c, int) or c < 0:
                raise ConfigError(f"variant {self.id}: costs must be non-negative ints")


@dataclass(frozen=True)
class SelectionProblem:
    layers: tuple[tuple[VariantChoice, ...], ...]
    budgets: tuple[Budget, ...]

    def __post_init__(self) -> None:
        if not self.layers:
            raise ConfigError("selection problem needs at least one layer")
        d = len(self.budgets)
        for i, layer in enumerate(self.layers):
            if not layer:
                raise ConfigError(f"layer {i} offers no variants")
            for v in layer:
                if len(v.costs) != d:
                    raise ConfigError(
                        f"layer {i} variant {v.id}: {len(v.costs)} costs for {d} budgets"
                    )

    @property
    def limits(self) -> tuple[int, ...]:
        return tuple(b.limit for b in self.budgets)


@dataclass(frozen=True)
class Solution:
    status: str  # "optimal" | "infeasible"
    chosen: tuple[int, ...]  # per-layer variant indices (empty when infeasible)
    chosen_ids: tuple[str, ...]
    total_degradation: float
    totals: tuple[int, ...]  # per-dimension cost of the selection
    binding: tuple[str, ...] = ()  # infeasible only: dimensions that block
    nodes_expanded: int = 0

    @property
    def is_optimal(self) -> bool:
        return self.status == "optimal"


def _layer_cost_minima(problem: SelectionProblem) -> tuple[list[list[int]], list[list[int]]]:
    """Per-layer per-dimension minimum costs, and suffix sums of those minima."""
    n, d = len(problem.layers), len(problem.budgets)
    layer_min = [
        [min(v.costs[k] for v in layer) for k in range(d)] for layer in problem.layers
    ]
    suffix = [[0] * d for _ in range(n + 1)]
    for i in range(n - 1, -1, -1):
        suffix[i] = [suffix[i + 1][k] + layer_min[i][k] for k in range(d)]
    return layer_min, suffix


def _lower_bound(
    problem: SelectionProblem,
    layer_min: list[list[int]],
    suffix: list[list[int]],
    depth: int,
    spent: tuple[int, ...],
    deg: float,
) -> float | None:
    """Admissible lower bound for completions of this node, None if provably none fit."""
    limits = problem.limits
    d = len(limits)
    n = len(problem.layers)
    if depth == n:
        return deg if all(spent[k] <= limits[k] for k in range(d)) else None
    total = deg
    for layer_idx in range(depth, n):
        best = None
        for v in problem.layers[layer_idx]:
            fits = True
            for k in range(d):
                rest = suffix[depth][k] - layer_min[layer_idx][k]
                if spent[k] + rest + v.costs[k] > limits[k]:
                    fits = False
                    break
            if fits and (best is None or v.degradation < best):
                best = v.degradation
        if best is None:
            return None
        total += best
    return total


def _binding_dimensions(problem: SelectionProblem) -> tuple[str, ...]:
    """Name the budget dimensions that make the problem infeasible.

    Dimensions whose budget is exceeded even when every layer takes its
    per-dimension minimum are individually binding. If the infeasibility only
    arises from interactions, report every dimension that rules out some
    variant in the root relaxation.
    """
    layer_min, suffix = _layer_cost_minima(problem)
    limits = problem.limits
    over = [b.name for k, b in enumerate(problem.budgets) if suffix[0][k] > limits[k]]
    if over:
        return tuple(over)
    names = set()
    for layer_idx, layer in enumerate(problem.layers):
        for v in layer:
            for k in range(len(limits)):
                rest = suffix[0][k] - layer_min[layer_idx][k]
                if rest + v.costs[k] > limits[k]:
                    names.add(problem.budgets[k].name)
    if names:
        return tuple(sorted(names))
    return tuple(b.name for b in problem.budgets)


def solve(problem: SelectionProblem) -> Solution:
    """Exact best-first branch and bound; see the module docstring for the invariants."""
    n = len(problem.layers)
    d = len(problem.budgets)
    layer_min, suffix = _layer_cost_minima(problem)
    root_spent = (0,) * d
    root_bound = _lower_bound(problem, layer_min, suffix, 0, root_spent, 0.0)
    nodes = 0
    if root_bound is not None:
        heap: list[tuple[float, tuple[int, ...], tuple[int, ...], float]] = [
            (root_bound, (), root_spent, 0.0)
        ]
        while heap:
            _, path, spent, deg = heapq.heappop(heap)
            nodes += 1
            depth = len(path)
            if depth == n:
                return Solution(
                    status="optimal",
                    chosen=path,
                    chosen_ids=tuple(
                        problem.layers[i][j].id for i, j in enumerate(path)
                    ),
                    total_degradation=deg,
                    totals=spent,
                    nodes_expanded=nodes,
                )
            for j, v in enumerate(problem.layers[depth]):
                child_spent = tuple(spent[k] + v.costs[k] for k in range(d))
                child_deg = deg + v.degradation
                bound = _lower_bound(
                    problem, layer_min, suffix, depth + 1, child_spent, child_deg
                )
                if bound is not None:
                    heapq.heappush(heap, (bound, path + (j,), child_spent, child_deg))
    return Solution(
        status="infeasible",
        chosen=(),
        chosen_ids=(),
        total_degradation=math.inf,
        totals=(),
        binding=_binding_dimensions(problem),
        nodes_expanded=nodes,
    )


def brute_force(problem: SelectionProblem, cap: int = BRUTE_FORCE_CAP) -> Solution:
    """Enumerate every selection (vectorized); ties break to the lexicographically
    smallest choice vector, matching solve()."""
    counts = [len(layer) for layer in problem.layers]
    total = math.prod(counts)
    if total > cap:
        raise ConfigError(f"brute force spans {total} selections, over the cap of {cap}")
    d = len(problem.budgets)
    degs = np.zeros(1, dtype=np.float64)
    costs = np.zeros((1, d), dtype=np.int64)
    for layer in problem.layers:
        layer_degs = np.asarray([v.degradation for v in layer], dtype=np.float64)
        layer_costs = np.asarray([v.costs for v in layer], dtype=np.int64).reshape(
            len(layer), d
        )
        degs = (degs[:, None] + layer_degs[None, :]).reshape(-1)
        costs = (costs[:, None, :] + layer_costs[None, :, :]).reshape(-1, d)
    limits = np.asarray(problem.limits, dtype=np.int64).reshape(1, d)
    feasible = (costs <= limits).all(axis=1)
    if not feasible.any():
        return Solution(
            status="infeasible",
            chosen=(),
            chosen_ids=(),
            total_degradation=math.inf,
            totals=(),
            binding=_binding_dimensions(problem),
            nodes_expanded=total,
        )
    masked = np.where(feasible, degs, np.inf)
    best = masked.min()
    flat = int(np.argmax(masked == best))  # first hit = lexicographically smallest
    chosen = tuple(int(i) for i in np.unravel_index(flat, counts))
    return Solution(
        status="optimal",
        chosen=chosen,
        chosen_ids=tuple(problem.layers[i][j].id for i, j in enumerate(chosen)),
        total_degradation=float(degs[flat]),
        totals=tuple(int(c) for c in costs[flat]),
        nodes_expanded=total,
    )


# ---------------------------------------------------------------------------
# assembling the selection problem from scores and costs


@dataclass(frozen=True)
class KvBudget:
    """Optional cache-footprint budget: bytes one sequence may pin at `length`."""

    length: int
    precision: str
    max_bytes_per_seq: int

    def __post_init__(self) -> None:
        if self.length < 1:
            raise ConfigError("kv budget length must be positive")
        if self.max_bytes_per_seq < 0:
            raise ConfigError("kv budget max_bytes_per_seq must be non-negative")

    @staticmethod
    def from_json(obj: dict) -> "KvBudget":
        return KvBudget(
            length=int(obj["length"]),
            precision=str(obj.get("precision", "bf16")),
            max_bytes_per_seq=int(obj["max_bytes_per_seq"]),
        )


def minmax_normalizer(values: Sequence[float]):
    """Map raw scores to [0, 1] by min-max; constant inputs map to 0."""
    lo, hi = min(values), max(values)
    span = hi - lo

    def norm(v: float) -> float:
        if span <= 0.0:
            return 0.0
        return (v - lo) / span

    return norm, (lo, hi)


@dataclass
class SearchResult:
    arch: ArchitectureSpec
    solution: Solution
    problem: SelectionProblem
    report: dict = field(default_factory=dict)


def build_selection_problem(
    config: ModelConfig,
    library: BlockLibrary,
    score_table: ScoreTable,
    scenarios: Sequence[Scenario],
    target_speedups: Mapping[str, float],
    hw: HardwareProfile,
    cost_table: CostTable,
    attention_signal: str = SIGNAL_TASK_DROP,
    kv_budget: KvBudget | None = None,
) -> tuple[SelectionProblem, dict]:
    """Combine per-signal scores and per-scenario costs into one knapsack.

    A block variant's degradation is the sum of its attention score and its
    FFN score, each min-max normalized within its signal across the whole
    table so the two kinds of damage are on a comparable scale. The parent
    block always scores exactly 0.
    """
    budgets = []
    for scenario in scenarios:
        if scenario.name not in target_speedups:
            raise ConfigError(f"no target speedup given for scenario {scenario.name!r}")
        budgets.append(
            scenario_time_budget(config, scenario, hw, target_speedups[scenario.name])
        )
    if kv_budget is not None:
        budgets.append(Budget(name="kv_bytes_per_seq", limit=kv_budget.max_bytes_per_seq))

    attn_values = [r.value for r in score_table.rows if r.signal == attention_signal]
    mse_values = [
        r.value
        for r in score_table.rows
        if r.signal == SIGNAL_ACTIVATION_MSE and r.variant_id.startswith("ffn:")
    ]
    if not attn_values:
        raise ConfigError(
            f"score table has no rows for attention signal {attention_signal!r}"
        )
    if not mse_values:
        raise ConfigError("score table has no FFN activation-distance rows")
    norm_attn, attn_range = minmax_normalizer(attn_values)
    norm_mse, mse_range = minmax_normalizer(mse_values)

    layers = []
    for layer_idx, layer_lib in enumerate(library.layers):
        choices = []
        for variant in layer_lib.block_variants():
            attn_row = score_table.get(
                layer_idx, variant.attention.variant_id, attention_signal
            )
            ffn_row = score_table.get(
                layer_idx, f"ffn:keep:{variant.keep_count}", SIGNAL_ACTIVATION_MSE
            )
            degradation = norm_attn(attn_row.value) + norm_mse(ffn_row.value)
            costs = [
                cost_table.get(layer_idx, variant.variant_id, s.name).time_ns
                for s in scenarios
            ]
            if kv_budget is not None:
                costs.append(
                    kv_bytes_layer(
                        variant.attention, config, kv_budget.length, kv_budget.precision
                    )
                )
            choices.append(
                VariantChoice(
                    id=variant.variant_id, degradation=degradation, costs=tuple(costs)
                )
            )
        layers.append(tuple(choices))
    problem = SelectionProblem(layers=tuple(layers), budgets=tuple(budgets))
    meta = {
        "attention_signal": attention_signal,
        "normalization": {
            attention_signal: list(attn_range),
            SIGNAL_ACTIVATION_MSE: list(mse_range),
        },
        "budgets": [{"name": b.name, "limit": b.limit} for b in budgets],
    }
    return problem, meta


def _arch_from_choice_ids(
    config: ModelConfig,
    library: BlockLibrary,
    ranking: ExpertRanking,
    chosen: Sequence[int],
) -> ArchitectureSpec:
    specs = []
    for layer_idx, choice in enumerate(chosen):
        variant = library.layers[layer_idx].block_variants()[choice]
        specs.append(
            LayerBlockSpec(
                attention=variant.attention,
                expert_keep_set=ranking.keep_set(layer_idx, variant.keep_count),
            )
        )
    return ArchitectureSpec(layers=tuple(specs))


def search_pipeline(
    config: ModelConfig,
    library: BlockLibrary,
    score_table: ScoreTable,
    ranking: ExpertRanking,
    scenarios: Sequence[Scenario],
    target_speedups: Mapping[str, float],
    hw: HardwareProfile,
    cost_table: CostTable | None = None,
    attention_signal: str = SIGNAL_TASK_DROP,
    kv_budget: KvBudget | None = None,
) -> SearchResult:
    """Scores + costs -> budgets -> exact selection -> architecture.

    Raises InfeasibleError (naming the binding budget dimensions) when no
    selection fits.
    """
    if cost_table is None:
        cost_table = build_cost_table(config, library, scenarios, hw)
    problem, meta = build_selection_problem(
        config,
        library,
        score_table,
        scenarios,
        target_speedups,
        hw,
        cost_table,
        attention_signal=attention_signal,
        kv_budget=kv_budget,
    )
    solution = solve(problem)
    if not solution.is_optimal:
        raise InfeasibleError(solution.binding)
    arch = _arch_from_choice_ids(config, library, ranking, solution.chosen)
    report = dict(meta)
    report["objective"] = solution.total_degradation
    report["nodes_expanded"] = solution.nodes_expanded
    report["choices"] = [
        {
            "layer": i,
            "variant": solution.chosen_ids[i],
            "attention": arch.layers[i].attention.variant_id,
            "experts_kept": arch.layers[i].experts_kept,
        }
        for i in range(len(solution.chosen))
    ]
    report["budget_usage"] = [
        {
            "name": b.name,
            "limit": b.limit,
            "total": solution.totals[k],
            "slack": b.limit - solution.totals[k],
        }
        for k, b in enumerate(problem.budgets)
    ]
    return SearchResult(arch=arch, solution=solution, problem=problem, report=report)
