"""Per-layer block library: attention alternatives and expert keep-count menus.

A library enumerates, for every layer, the candidate attention variants and the
candidate expert keep-counts. Keep-sets are always prefixes of a per-layer
expert ranking, so smaller keep-counts are contained in larger ones.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .model import (
    AttentionVariant,
    ConfigError,
    LayerParams,
    MismatchError,
    ModelConfig,
    ModelParams,
    ExpertParams,
    global_attention,
    window_attention,
)

F32 = np.float32


# ---------------------------------------------------------------------------
# architecture specs


@dataclass(frozen=True)
class LayerBlockSpec:
    attention: AttentionVariant
    expert_keep_set: tuple[int, ...]  # ascending original expert ids

    def __post_init__(self) -> None:
        keep = tuple(sorted(set(int(e) for e in self.expert_keep_set)))
        if len(keep) != len(self.expert_keep_set):
            raise ConfigError("expert_keep_set has duplicate ids")
        if keep and keep[0] < 0:
            raise ConfigError("expert ids must be non-negative")
        object.__setattr__(self, "expert_keep_set", keep)

    @property
    def experts_kept(self) -> int:
        return len(self.expert_keep_set)

    def to_json(self) -> dict:
        return {
            "attention": self.attention.to_json(),
            "experts_kept": self.experts_kept,
            "expert_keep_set": list(self.expert_keep_set),
        }

    @staticmethod
    def from_json(obj: dict) -> "LayerBlockSpec":
        spec = LayerBlockSpec(
            attention=AttentionVariant.from_json(obj["attention"]),
            expert_keep_set=tuple(obj["expert_keep_set"]),
        )
        if "experts_kept" in obj and int(obj["experts_kept"]) != spec.experts_kept:
            raise ConfigError(
                f"experts_kept={obj['experts_kept']} disagrees with keep set of size {spec.experts_kept}"
            )
        return spec


@dataclass(frozen=True)
class ArchitectureSpec:
    layers: tuple[LayerBlockSpec, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "layers", tuple(self.layers))

    @property
    def n_layers(self) -> int:
        return len(self.layers)

    def with_layer(
        self,
        index: int,
        attention: AttentionVariant | None = None,
        expert_keep_set: tuple[int, ...] | None = None,
    ) -> "ArchitectureSpec":
        old = self.layers[index]
        new = LayerBlockSpec(
            attention=attention if attention is not None else old.attention,
            expert_keep_set=expert_keep_set if expert_keep_set is not None else old.expert_keep_set,
        )
        layers = list(self.layers)
        layers[index] = new
        return ArchitectureSpec(tuple(layers))

    def to_json(self) -> dict:
        return {"layers": [s.to_json() for s in self.layers]}

    @staticmethod
    def from_json(obj: dict) -> "ArchitectureSpec":
        if not isinstance(obj, dict) or "layers" not in obj:
            raise ConfigError("architecture spec must be an object with a 'layers' list")
        return ArchitectureSpec(tuple(LayerBlockSpec.from_json(s) for s in obj["layers"]))

    def save(self, path: Path | str) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n")

    @staticmethod
    def load(path: Path | str) -> "ArchitectureSpec":
        return ArchitectureSpec.from_json(json.loads(Path(path).read_text()))


def parent_spec(config: ModelConfig) -> ArchitectureSpec:
    """The unmodified architecture: config's attention layout, all experts kept."""
    all_experts = tuple(range(config.n_experts))
    return ArchitectureSpec(
        tuple(LayerBlockSpec(attention=v, expert_keep_set=all_experts) for v in config.attn_pattern)
    )


# ---------------------------------------------------------------------------
# expert rankings


@dataclass(frozen=True)
class ExpertRanking:
    """Per layer, expert ids ordered most-important-first plus their scores."""

    orders: tuple[tuple[int, ...], ...]
    scores: tuple[tuple[float, ...], ...]

    def __post_init__(self) -> None:
        if len(self.orders) != len(self.scores):
            raise ConfigError("ranking orders and scores must align per layer")
        for order, sc in zip(self.orders, self.scores):
            if len(order) != len(sc):
                raise ConfigError("ranking order and score lengths differ")
            if len(set(order)) != len(order):
                raise ConfigError("ranking order has duplicate expert ids")

    @property
    def n_layers(self) -> int:
        return len(self.orders)

    def keep_set(self, layer: int, count: int) -> tuple[int, ...]:
        """The top-`count` experts of `layer`, as an ascending id tuple."""
        order = self.orders[layer]
        if not (1 <= count <= len(order)):
            raise ConfigError(f"keep count {count} out of range for layer with {len(order)} experts")
        return tuple(sorted(order[:count]))

    def to_json(self) -> dict:
        return {
            "layers": [
                {"order": list(order), "scores": [float(s) for s in sc]}
                for order, sc in zip(self.orders, self.scores)
            ]
        }

    @staticmethod
    def from_json(obj: dict) -> "ExpertRanking":
        layers = obj["layers"]
        return ExpertRanking(
            orders=tuple(tuple(int(e) for e in l["order"]) for l in layers),
            scores=tuple(tuple(float(s) for s in l["scores"]) for l in layers),
        )

    def save(self, path: Path | str) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n")

    @staticmethod
    def load(path: Path | str) -> "ExpertRanking":
        return ExpertRanking.from_json(json.loads(Path(path).read_text()))


# ---------------------------------------------------------------------------
# library construction


@dataclass(frozen=True)
class LibraryMenu:
    """What the library offers: expert keep fractions and window alternatives."""

    keep_fractions: tuple[float, ...] = (1.0,)
    alt_windows: tuple[int, ...] = ()

    def __post_init__(self) -> None:
        fr = tuple(float(f) for f in self.keep_fractions)
        for f in fr:
            if not (0.0 < f <= 1.0):
                raise ConfigError(f"keep fraction must be in (0, 1], got {f}")
        for w in self.alt_windows:
            if not isinstance(w, int) or w < 1:
                raise ConfigError(f"alternative window size must be a positive int, got {w!r}")
        object.__setattr__(self, "keep_fractions", fr)
        object.__setattr__(self, "alt_windows", tuple(self.alt_windows))

    @staticmethod
    def from_json(obj: dict) -> "LibraryMenu":
        return LibraryMenu(
            keep_fractions=tuple(obj.get("keep_fractions", [1.0])),
            alt_windows=tuple(int(w) for w in obj.get("alt_windows", [])),
        )


@dataclass(frozen=True)
class BlockVariant:
    """One candidate block for one layer: an attention variant plus a keep-count."""

    attention: AttentionVariant
    keep_count: int

    @property
    def variant_id(self) -> str:
        return f"{self.attention.variant_id}+ffn:keep:{self.keep_count}"


@dataclass(frozen=True)
class LayerLibrary:
    attention_options: tuple[AttentionVariant, ...]  # parent option first
    keep_counts: tuple[int, ...]  # parent count first, then descending

    def block_variants(self) -> tuple[BlockVariant, ...]:
        return tuple(
            BlockVariant(attention=a, keep_count=c)
            for a in self.attention_options
            for c in self.keep_counts
        )


@dataclass(frozen=True)
class BlockLibrary:
    layers: tuple[LayerLibrary, ...]

    @property
    def n_layers(self) -> int:
        return len(self.layers)


def keep_counts_from_fractions(n_experts: int, fractions: tuple[float, ...], top_k: int) -> tuple[int, ...]:
    """Menu fractions -> distinct keep-counts, parent count first then descending."""
    counts = set()
    for f in fractions:
        c = int(round(f * n_experts))
        if c < top_k:
            raise ConfigError(
                f"keep fraction {f} gives {c} experts, fewer than top_k={top_k}"
            )
        counts.add(c)
    counts.add(n_experts)  # parent always available
    return tuple(sorted(counts, reverse=True))


def build_library(config: ModelConfig, menu: LibraryMenu) -> BlockLibrary:
    """Enumerate per-layer candidate blocks.

    Window alternatives are offered only to layers whose parent attention is
    global (the search only ever narrows attention). The parent variant is
    always the first option in every list.
    """
    counts = keep_counts_from_fractions(config.n_experts, menu.keep_fractions, config.top_k)
    layers = []
    for parent_attn in config.attn_pattern:
        options = [parent_attn]
        if parent_attn.kind == "global":
            options.extend(window_attention(w) for w in menu.alt_windows)
        layers.append(LayerLibrary(attention_options=tuple(options), keep_counts=counts))
    return BlockLibrary(layers=tuple(layers))


# ---------------------------------------------------------------------------
# pruning and assembly


def prune_layer(layer: LayerParams, keep_set: tuple[int, ...]) -> LayerParams:
    """Drop every expert outside keep_set; router rows go with their experts."""
    keep = tuple(sorted(set(int(e) for e in keep_set)))
    if not keep:
        raise MismatchError("keep set is empty")
    present = {eid: pos for pos, eid in enumerate(layer.expert_ids)}
    missing = [e for e in keep if e not in present]
    if missing:
        raise MismatchError(f"keep set references absent experts {missing}")
    positions = [present[e] for e in keep]
    return LayerParams(
        attn_norm=layer.attn_norm.copy(),
        wq=layer.wq.copy(),
        wk=layer.wk.copy(),
        wv=layer.wv.copy(),
        wo=layer.wo.copy(),
        ffn_norm=layer.ffn_norm.copy(),
        router=layer.router[positions].copy(),
        experts=[
            ExpertParams(w_in=layer.experts[p].w_in.copy(), w_out=layer.experts[p].w_out.copy())
            for p in positions
        ],
        expert_ids=keep,
    )


def assemble(parent: ModelParams, arch: ArchitectureSpec) -> ModelParams:
    """Materialize a child model: prune experts per layer, install attention layout.

    The child's config records the chosen attention pattern; its n_experts field
    keeps naming the parent expert-id space.
    """
    c = parent.config
    if arch.n_layers != c.n_layers:
        raise MismatchError(f"architecture has {arch.n_layers} layers, model has {c.n_layers}")
    for i, spec in enumerate(arch.layers):
        if spec.experts_kept < c.top_k:
            raise MismatchError(
                f"layer {i} keeps {spec.experts_kept} experts, fewer than top_k={c.top_k}"
            )
    config = ModelConfig(
        vocab_size=c.vocab_size,
        d_model=c.d_model,
        n_layers=c.n_layers,
        n_heads=c.n_heads,
        n_kv_heads=c.n_kv_heads,
        head_dim=c.head_dim,
        n_experts=c.n_experts,
        top_k=c.top_k,
        expert_hidden=c.expert_hidden,
        max_seq_len=c.max_seq_len,
        rope_base=c.rope_base,
        rope_scale_factor=c.rope_scale_factor,
        attn_pattern=tuple(spec.attention for spec in arch.layers),
    )
    layers = [
        prune_layer(layer, spec.expert_keep_set)
        for layer, spec in zip(parent.layers, arch.layers)
    ]
    return ModelParams(
        config=config,
        embedding=parent.embedding.copy(),
        layers=layers,
        final_norm=parent.final_norm.copy(),
        lm_head=parent.lm_head.copy(),
    )


def assembled_spec(params: ModelParams) -> ArchitectureSpec:
    """The architecture a (possibly pruned) parameter set natively implements."""
    return ArchitectureSpec(
        tuple(
            LayerBlockSpec(attention=v, expert_keep_set=layer.expert_ids)
            for v, layer in zip(params.config.attn_pattern, params.layers)
        )
    )
