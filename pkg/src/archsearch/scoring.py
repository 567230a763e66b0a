"""Block and expert quality scoring on fixed probe sets.

Two signals are produced. Activation MSE: replace one block in the parent,
re-run the probes, and measure mean squared drift of the final hidden states.
Task drop: accuracy loss on a synthetic long-range retrieval task whose answer
sits far behind the query. Expert contribution scores measure how much each
expert's removal (with routing re-selected over the remaining experts) moves a
layer's FFN output.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .library import ArchitectureSpec, BlockLibrary, ExpertRanking
from .model import (
    AttentionVariant,
    ConfigError,
    MismatchError,
    ModelConfig,
    ModelParams,
    forward_batch,
    route_tokens,
)

F32 = np.float32

SIGNAL_ACTIVATION_MSE = "activation_mse"
SIGNAL_TASK_DROP = "task_drop"

PAD_TOKEN = 0
QUERY_MARKER = 1


class ProbeError(ValueError):
    """Probe sequences are malformed for the task they claim to encode."""


# ---------------------------------------------------------------------------
# probe sets


@dataclass(frozen=True)
class ProbeSet:
    kind: str  # "lm" | "retrieval"
    tokens: np.ndarray  # [count, length] int64
    answers: np.ndarray | None  # [count] int64 for retrieval, else None
    manifest: dict

    @property
    def count(self) -> int:
        return int(self.tokens.shape[0])

    @property
    def length(self) -> int:
        return int(self.tokens.shape[1])


def _probe_rng(seed: int, label: str) -> np.random.Generator:
    digest = hashlib.blake2b(f"{seed}:probes:{label}".encode(), digest_size=16).digest()
    return np.random.Generator(np.random.Philox(key=int.from_bytes(digest, "little")))


def _vocab_ranges(vocab_size: int) -> tuple[range, range, range]:
    """Disjoint filler/key/value id ranges; ids 0 and 1 are reserved."""
    usable = vocab_size - 2
    if usable < 6:
        raise ConfigError(f"vocab_size {vocab_size} too small for retrieval probes")
    n_keys = usable // 3
    n_fill = usable - 2 * n_keys
    fill = range(2, 2 + n_fill)
    keys = range(2 + n_fill, 2 + n_fill + n_keys)
    values = range(2 + n_fill + n_keys, vocab_size)
    return fill, keys, values


def make_lm_probes(config: ModelConfig, count: int, length: int, seed: int) -> ProbeSet:
    """Uniform random token sequences (ids 2.. so reserved ids stay out)."""
    if length > config.max_seq_len:
        raise ConfigError(f"probe length {length} exceeds max_seq_len {config.max_seq_len}")
    rng = _probe_rng(seed, "lm")
    tokens = rng.integers(2, config.vocab_size, size=(count, length), dtype=np.int64)
    return ProbeSet(
        kind="lm",
        tokens=tokens,
        answers=None,
        manifest={"kind": "lm", "count": count, "length": length, "seed": seed},
    )


def make_retrieval_probes(
    config: ModelConfig, count: int, length: int, n_pairs: int, seed: int
) -> ProbeSet:
    """Key/value pairs planted at the start, queried at the very end.

    Layout: [k1 v1 ... km vm  filler...  QUERY_MARKER k_q]; the expected next
    token is the value that followed k_q. The gap between the queried pair and
    the query exceeds length - 2*n_pairs - 2, so narrow attention windows
    cannot see the pair.
    """
    if length > config.max_seq_len:
        raise ConfigError(f"probe length {length} exceeds max_seq_len {config.max_seq_len}")
    if n_pairs < 1 or 2 * n_pairs + 2 > length:
        raise ConfigError(f"n_pairs={n_pairs} does not fit in length {length}")
    fill, keys, values = _vocab_ranges(config.vocab_size)
    if n_pairs > len(keys):
        raise ConfigError(f"n_pairs={n_pairs} exceeds {len(keys)} distinct keys")
    rng = _probe_rng(seed, "retrieval")
    tokens = np.empty((count, length), dtype=np.int64)
    answers = np.empty(count, dtype=np.int64)
    key_ids = np.arange(keys.start, keys.stop, dtype=np.int64)
    for i in range(count):
        ks = rng.choice(key_ids, size=n_pairs, replace=False)
        vs = rng.integers(values.start, values.stop, size=n_pairs, dtype=np.int64)
        row = np.empty(length, dtype=np.int64)
        row[0 : 2 * n_pairs : 2] = ks
        row[1 : 2 * n_pairs + 1 : 2] = vs
        row[2 * n_pairs : length - 2] = rng.integers(
            fill.start, fill.stop, size=length - 2 - 2 * n_pairs, dtype=np.int64
        )
        q = int(rng.integers(0, n_pairs))
        row[length - 2] = QUERY_MARKER
        row[length - 1] = ks[q]
        tokens[i] = row
        answers[i] = vs[q]
    return ProbeSet(
        kind="retrieval",
        tokens=tokens,
        answers=answers,
        manifest={
            "kind": "retrieval",
            "count": count,
            "length": length,
            "n_pairs": n_pairs,
            "seed": seed,
        },
    )


def probes_from_manifest(config: ModelConfig, manifest: Mapping) -> ProbeSet:
    kind = manifest.get("kind")
    if kind == "lm":
        return make_lm_probes(config, manifest["count"], manifest["length"], manifest["seed"])
    if kind == "retrieval":
        return make_retrieval_probes(
            config, manifest["count"], manifest["length"], manifest["n_pairs"], manifest["seed"]
        )
    raise ConfigError(f"unknown probe kind {kind!r}")


def validate_retrieval_probes(probes: ProbeSet) -> None:
    if probes.kind != "retrieval":
        raise ProbeError(f"expected retrieval probes, got kind {probes.kind!r}")
    if probes.answers is None:
        raise ProbeError("retrieval probes carry no answers")
    tokens = probes.tokens
    if tokens.shape[0] != probes.answers.shape[0]:
        raise ProbeError("answers do not align with sequences")
    if not np.all(tokens[:, -2] == QUERY_MARKER):
        raise ProbeError("malformed task sequences: query marker missing at position -2")


# ---------------------------------------------------------------------------
# long-context task scoring


def long_context_task_score(params: ModelParams, arch: ArchitectureSpec, probes: ProbeSet) -> float:
    """Retrieval accuracy: does the top next-token prediction equal the planted value?"""
    validate_retrieval_probes(probes)
    trace = forward_batch(params, arch, probes.tokens)
    predicted = np.argmax(trace.logits[:, -1, :], axis=-1)
    return float(np.mean(predicted == probes.answers))


def _retrieval_correct(params: ModelParams, arch: ArchitectureSpec, probes: ProbeSet) -> np.ndarray:
    validate_retrieval_probes(probes)
    trace = forward_batch(params, arch, probes.tokens)
    predicted = np.argmax(trace.logits[:, -1, :], axis=-1)
    return (predicted == probes.answers).astype(np.float64)


# ---------------------------------------------------------------------------
# expert contribution scores


@dataclass(frozen=True)
class ExpertScores:
    layer: int
    expert_ids: tuple[int, ...]  # ascending ids the scores align to
    scores: np.ndarray  # [n] float64, >= 0
    per_sample: np.ndarray  # [n, n_probes] float64 per-sequence MSE

    def ranking_order(self) -> tuple[int, ...]:
        # most important first; ties break toward the lower expert id
        order = sorted(range(len(self.expert_ids)), key=lambda i: (-self.scores[i], self.expert_ids[i]))
        return tuple(self.expert_ids[i] for i in order)


def expert_contribution_scores(
    params: ModelParams,
    arch: ArchitectureSpec,
    layer: int,
    probes: ProbeSet,
    ffn_input: np.ndarray | None = None,
) -> ExpertScores:
    """Mean squared FFN-output change from removing each kept expert.

    Removing expert i re-selects the per-token top-k over the remaining experts
    and renormalizes the routing weights. Tokens that never routed to i are
    untouched, so an expert outside every token's top-k scores exactly 0.
    """
    c = params.config
    lp = params.layers[layer]
    keep = arch.layers[layer].expert_keep_set
    if ffn_input is None:
        trace = forward_batch(params, arch, probes.tokens, capture_layers=(layer,))
        ffn_input = trace.ffn_io[layer][0]
    n_probes, seq_len, d = ffn_input.shape
    x = ffn_input.reshape(-1, d)
    n_tokens = x.shape[0]

    allowed = np.array([eid in set(keep) for eid in lp.expert_ids], dtype=bool)
    logits = x @ lp.router.T

    # Expert outputs are routing-independent; cache them once.
    outputs = np.zeros((len(lp.expert_ids), n_tokens, d), dtype=F32)
    from .model import _silu  # internal on purpose: identical math to the forward pass

    for pos, on in enumerate(allowed):
        if on:
            outputs[pos] = _silu(x @ lp.experts[pos].w_in) @ lp.experts[pos].w_out

    def mix(allowed_mask: np.ndarray, rows: np.ndarray | None = None) -> np.ndarray:
        lg = logits if rows is None else logits[rows]
        idx, w = route_tokens(lg, allowed_mask, c.top_k)
        row_ids = np.arange(lg.shape[0]) if rows is None else rows
        out = np.zeros((lg.shape[0], d), dtype=F32)
        for j in range(c.top_k):
            out += w[:, j, None] * outputs[idx[:, j], row_ids]
        return out

    base_idx, _ = route_tokens(logits, allowed, c.top_k)
    base = mix(allowed)

    kept_positions = [pos for pos, on in enumerate(allowed) if on]
    ids = tuple(int(lp.expert_ids[pos]) for pos in kept_positions)
    scores = np.zeros(len(kept_positions), dtype=np.float64)
    per_sample = np.zeros((len(kept_positions), n_probes), dtype=np.float64)
    for out_i, pos in enumerate(kept_positions):
        affected = np.nonzero((base_idx == pos).any(axis=-1))[0]
        if affected.size == 0:
            continue  # never routed: removal changes nothing, score exactly 0
        smaller = allowed.copy()
        smaller[pos] = False
        alt = mix(smaller, affected)
        sq = np.square(base[affected].astype(np.float64) - alt.astype(np.float64)).mean(axis=-1)
        row_total = np.zeros(n_tokens, dtype=np.float64)
        row_total[affected] = sq
        per_seq = row_total.reshape(n_probes, seq_len).mean(axis=1)
        per_sample[out_i] = per_seq
        scores[out_i] = per_seq.mean()
    return ExpertScores(layer=layer, expert_ids=ids, scores=scores, per_sample=per_sample)


def rank_experts(params: ModelParams, arch: ArchitectureSpec, probes: ProbeSet) -> ExpertRanking:
    """Per-layer expert importance ranking from contribution scores."""
    n_layers = len(params.layers)
    trace = forward_batch(params, arch, probes.tokens, capture_layers=range(n_layers))
    orders = []
    score_rows = []
    for layer in range(n_layers):
        es = expert_contribution_scores(
            params, arch, layer, probes, ffn_input=trace.ffn_io[layer][0]
        )
        order = es.ranking_order()
        by_id = {eid: float(s) for eid, s in zip(es.expert_ids, es.scores)}
        orders.append(order)
        score_rows.append(tuple(by_id[eid] for eid in order))
    return ExpertRanking(orders=tuple(orders), scores=tuple(score_rows))


# ---------------------------------------------------------------------------
# replace-one-block scoring


def replace_one_block_score(
    params: ModelParams,
    arch: ArchitectureSpec,
    layer: int,
    probes: ProbeSet,
    attention: AttentionVariant | None = None,
    expert_keep_set: tuple[int, ...] | None = None,
    baseline_final: np.ndarray | None = None,
) -> tuple[float, np.ndarray]:
    """Final-hidden MSE against the unmodified model with one layer's block swapped.

    Returns (mean squared error, per-sequence MSE array).
    """
    if attention is None and expert_keep_set is None:
        raise ConfigError("nothing to replace: give attention and/or expert_keep_set")
    if baseline_final is None:
        baseline_final = forward_batch(params, arch, probes.tokens).final_hidden
    variant_arch = arch.with_layer(layer, attention=attention, expert_keep_set=expert_keep_set)
    variant_final = forward_batch(params, variant_arch, probes.tokens).final_hidden
    diff = baseline_final.astype(np.float64) - variant_final.astype(np.float64)
    per_seq = np.square(diff).mean(axis=(1, 2))
    return float(per_seq.mean()), per_seq


# ---------------------------------------------------------------------------
# score table


@dataclass(frozen=True)
class ScoreRow:
    layer: int
    variant_id: str  # "attn:..." or "ffn:keep:N"
    signal: str
    value: float  # aggregate degradation, >= 0
    raw: float  # signed aggregate (task drop can be negative)
    n_samples: int
    per_sample: tuple[float, ...] = ()

    def to_json(self) -> dict:
        return {
            "layer": self.layer,
            "variant": self.variant_id,
            "signal": self.signal,
            "value": self.value,
            "raw": self.raw,
            "n_samples": self.n_samples,
            "per_sample": list(self.per_sample),
        }

    @staticmethod
    def from_json(obj: dict) -> "ScoreRow":
        return ScoreRow(
            layer=int(obj["layer"]),
            variant_id=str(obj["variant"]),
            signal=str(obj["signal"]),
            value=float(obj["value"]),
            raw=float(obj["raw"]),
            n_samples=int(obj["n_samples"]),
            per_sample=tuple(float(v) for v in obj.get("per_sample", [])),
        )


@dataclass
class ScoreTable:
    rows: list[ScoreRow] = field(default_factory=list)

    def sorted_rows(self) -> list[ScoreRow]:
        return sorted(self.rows, key=lambda r: (r.layer, r.variant_id, r.signal))

    def get(self, layer: int, variant_id: str, signal: str) -> ScoreRow:
        for r in self.rows:
            if r.layer == layer and r.variant_id == variant_id and r.signal == signal:
                return r
        raise KeyError(f"no score for layer={layer} variant={variant_id} signal={signal}")

    def has(self, layer: int, variant_id: str, signal: str) -> bool:
        try:
            self.get(layer, variant_id, signal)
            return True
        except KeyError:
            return False

    def signals(self) -> tuple[str, ...]:
        return tuple(sorted({r.signal for r in self.rows}))

    def save(self, path: Path | str) -> None:
        with open(path, "w") as fh:
            for r in self.sorted_rows():
                fh.write(json.dumps(r.to_json(), sort_keys=True) + "\n")

    @staticmethod
    def load(path: Path | str) -> "ScoreTable":
        rows = []
        with open(path) as fh:
            for ln, line in enumerate(fh, start=1):
                line = line.strip()
                if not line:
                    continue
                try:
                    rows.append(ScoreRow.from_json(json.loads(line)))
                except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                    raise ValueError(f"bad score row at line {ln}: {exc}") from exc
        return ScoreTable(rows=rows)


def score_library(
    params: ModelParams,
    arch: ArchitectureSpec,
    library: BlockLibrary,
    ranking: ExpertRanking,
    lm_probes: ProbeSet,
    retrieval_probes: ProbeSet | None,
    signals: Sequence[str] = (SIGNAL_ACTIVATION_MSE, SIGNAL_TASK_DROP),
) -> ScoreTable:
    """Score every library variant of every layer against the unmodified model.

    Activation MSE covers both attention and FFN variants (on the LM probes).
    Task drop is restricted to attention variants (on the retrieval probes).
    """
    unknown = set(signals) - {SIGNAL_ACTIVATION_MSE, SIGNAL_TASK_DROP}
    if unknown:
        raise ConfigError(f"unknown scoring signals: {sorted(unknown)}")
    if library.n_layers != len(params.layers):
        raise MismatchError("library and parameters disagree on layer count")
    want_mse = SIGNAL_ACTIVATION_MSE in signals
    want_task = SIGNAL_TASK_DROP in signals and retrieval_probes is not None

    baseline_final = forward_batch(params, arch, lm_probes.tokens).final_hidden if want_mse else None
    parent_correct = _retrieval_correct(params, arch, retrieval_probes) if want_task else None
    parent_acc = float(parent_correct.mean()) if want_task else 0.0

    rows: list[ScoreRow] = []
    for layer_idx, layer_lib in enumerate(library.layers):
        for attn in layer_lib.attention_options:
            # The parent variant leaves the architecture unchanged; the forward
            # pass is pure, so rescoring it would reproduce the baseline
            # bit-for-bit. Record the identity outcome without the re-run.
            is_parent = arch.layers[layer_idx].attention == attn
            if want_mse:
                if is_parent:
                    mse, per_seq = 0.0, np.zeros(lm_probes.count)
                else:
                    mse, per_seq = replace_one_block_score(
                        params, arch, layer_idx, lm_probes, attention=attn,
                        baseline_final=baseline_final,
                    )
                rows.append(
                    ScoreRow(
                        layer=layer_idx, variant_id=attn.variant_id,
                        signal=SIGNAL_ACTIVATION_MSE, value=mse, raw=mse,
                        n_samples=lm_probes.count, per_sample=tuple(per_seq.tolist()),
                    )
                )
            if want_task:
                if is_parent:
                    correct = parent_correct
                else:
                    variant_arch = arch.with_layer(layer_idx, attention=attn)
                    correct = _retrieval_correct(params, variant_arch, retrieval_probes)
                drop = parent_acc - float(correct.mean())
                per_seq = parent_correct - correct
                rows.append(
                    ScoreRow(
                        layer=layer_idx, variant_id=attn.variant_id,
                        signal=SIGNAL_TASK_DROP, value=max(0.0, drop), raw=drop,
                        n_samples=retrieval_probes.count, per_sample=tuple(per_seq.tolist()),
                    )
                )
        if want_mse:
            for count in layer_lib.keep_counts:
                keep = ranking.keep_set(layer_idx, count)
                if keep == arch.layers[layer_idx].expert_keep_set:
                    mse, per_seq = 0.0, np.zeros(lm_probes.count)
                else:
                    mse, per_seq = replace_one_block_score(
                        params, arch, layer_idx, lm_probes, expert_keep_set=keep,
                        baseline_final=baseline_final,
                    )
                rows.append(
                    ScoreRow(
                        layer=layer_idx, variant_id=f"ffn:keep:{count}",
                        signal=SIGNAL_ACTIVATION_MSE, value=mse, raw=mse,
                        n_samples=lm_probes.count, per_sample=tuple(per_seq.tolist()),
                    )
                )
    return ScoreTable(rows=rows)


# ---------------------------------------------------------------------------
# per-sample rank averaging (diagnostic aggregation)


def _average_ranks_desc(scores: np.ndarray) -> np.ndarray:
    """1-based ranks, largest score ranked 1; ties share the mean rank."""
    order = np.argsort(-scores, kind="stable")
    ranks = np.empty(len(scores), dtype=np.float64)
    i = 0
    pos = 1.0
    while i < len(order):
        j = i
        while j + 1 < len(order) and scores[order[j + 1]] == scores[order[i]]:
            j += 1
        group = order[i : j + 1]
        ranks[group] = pos + (j - i) / 2.0
        pos += j - i + 1
        i = j + 1
    return ranks


def rank_average(per_sample: Mapping[object, Sequence[float]]) -> dict[object, float]:
    """Mean per-sample rank per item (rank 1 = most degradation on that sample)."""
    keys = sorted(per_sample.keys(), key=repr)
    if not keys:
        return {}
    mat = np.asarray([list(per_sample[k]) for k in keys], dtype=np.float64)
    if mat.ndim != 2:
        raise ConfigError("per-sample score lists must share one length")
    ranks = np.stack([_average_ranks_desc(mat[:, s]) for s in range(mat.shape[1])], axis=1)
    means = ranks.mean(axis=1)
    return {k: float(m) for k, m in zip(keys, means)}
