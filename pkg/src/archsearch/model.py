"""Deterministic toy decoder-only MoE transformer used as the search substrate.

Forward passes are pure functions of (params, architecture, tokens): float32
activations, no internal mutation, counter-based RNG for init so the same seed
reproduces bit-identical parameters on any platform.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import TYPE_CHECKING, Callable, Iterable, Iterator

import numpy as np

if TYPE_CHECKING:  # pragma: no cover
    from .library import ArchitectureSpec

F32 = np.float32
RMS_EPS = np.float32(1e-6)

# (layer_index, keys, values) -> (keys, values); applied before attention uses them
KvTransform = Callable[[int, np.ndarray, np.ndarray], tuple[np.ndarray, np.ndarray]]


class ConfigError(ValueError):
    """A configuration field is missing or out of range."""


class MismatchError(ValueError):
    """Parameters, architecture, or inputs do not agree structurally."""


# ---------------------------------------------------------------------------
# attention variants


@dataclass(frozen=True)
class AttentionVariant:
    """Per-layer attention behavior: full causal or sliding-window causal.

    A window of size W lets position t attend to the W most recent positions
    including t itself, i.e. keys s with t - W + 1 <= s <= t.
    """

    kind: str  # "global" | "window"
    window_size: int | None = None

    def __post_init__(self) -> None:
        if self.kind not in ("global", "window"):
            raise ConfigError(f"attention kind must be 'global' or 'window', got {self.kind!r}")
        if self.kind == "window":
            if not isinstance(self.window_size, int) or self.window_size < 1:
                raise ConfigError(f"window_size must be a positive int, got {self.window_size!r}")
        elif self.window_size is not None:
            raise ConfigError("global attention takes no window_size")

    @property
    def variant_id(self) -> str:
        return "attn:global" if self.kind == "global" else f"attn:window:{self.window_size}"

    def effective_window(self, length: int) -> int:
        """Number of cached key/value slots one sequence of `length` occupies."""
        if self.kind == "global":
            return length
        return min(length, self.window_size)

    def to_json(self) -> dict:
        if self.kind == "global":
            return {"kind": "global"}
        return {"kind": "window", "window_size": self.window_size}

    @staticmethod
    def from_json(obj: dict) -> "AttentionVariant":
        if not isinstance(obj, dict) or "kind" not in obj:
            raise ConfigError(f"attention variant must be an object with 'kind', got {obj!r}")
        kind = obj["kind"]
        if kind == "global":
            return AttentionVariant("global")
        if kind == "window":
            return AttentionVariant("window", obj.get("window_size"))
        raise ConfigError(f"unknown attention kind {kind!r}")


def global_attention() -> AttentionVariant:
    return AttentionVariant("global")


def window_attention(window_size: int) -> AttentionVariant:
    return AttentionVariant("window", window_size)


# ---------------------------------------------------------------------------
# model config


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    d_model: int
    n_layers: int
    n_heads: int
    n_kv_heads: int
    head_dim: int
    n_experts: int
    top_k: int
    expert_hidden: int
    max_seq_len: int
    rope_base: float = 10000.0
    rope_scale_factor: float = 1.0
    attn_pattern: tuple[AttentionVariant, ...] = ()

    def __post_init__(self) -> None:
        for name in (
            "vocab_size",
            "d_model",
            "n_layers",
            "n_heads",
            "n_kv_heads",
            "head_dim",
            "n_experts",
            "top_k",
            "expert_hidden",
            "max_seq_len",
        ):
            v = getattr(self, name)
            if not isinstance(v, int) or v < 1:
                raise ConfigError(f"{name} must be a positive int, got {v!r}")
        if self.n_heads % self.n_kv_heads != 0:
            raise ConfigError(
                f"n_kv_heads must divide n_heads, got n_heads={self.n_heads} n_kv_heads={self.n_kv_heads}"
            )
        if self.head_dim % 2 != 0:
            raise ConfigError(f"head_dim must be even for rotary pairs, got {self.head_dim}")
        if self.top_k > self.n_experts:
            raise ConfigError(f"top_k={self.top_k} exceeds n_experts={self.n_experts}")
        if not (self.rope_base > 0):
            raise ConfigError(f"rope_base must be positive, got {self.rope_base!r}")
        if not (self.rope_scale_factor > 0):
            raise ConfigError(f"rope_scale_factor must be positive, got {self.rope_scale_factor!r}")
        if len(self.attn_pattern) != self.n_layers:
            raise ConfigError(
                f"attn_pattern has {len(self.attn_pattern)} entries for n_layers={self.n_layers}"
            )
        object.__setattr__(self, "attn_pattern", tuple(self.attn_pattern))

    def to_json(self) -> dict:
        return {
            "vocab_size": self.vocab_size,
            "d_model": self.d_model,
            "n_layers": self.n_layers,
            "n_heads": self.n_heads,
            "n_kv_heads": self.n_kv_heads,
            "head_dim": self.head_dim,
            "n_experts": self.n_experts,
            "top_k": self.top_k,
            "expert_hidden": self.expert_hidden,
            "max_seq_len": self.max_seq_len,
            "rope_base": self.rope_base,
            "rope_scale_factor": self.rope_scale_factor,
            "attn_pattern": [v.to_json() for v in self.attn_pattern],
        }

    @staticmethod
    def from_json(obj: dict) -> "ModelConfig":
        if not isinstance(obj, dict):
            raise ConfigError(f"model config must be an object, got {type(obj).__name__}")
        required = {
            "vocab_size",
            "d_model",
            "n_layers",
            "n_heads",
            "n_kv_heads",
            "head_dim",
            "n_experts",
            "top_k",
            "expert_hidden",
            "max_seq_len",
            "attn_pattern",
        }
        missing = sorted(required - set(obj))
        if missing:
            raise ConfigError(f"model config missing fields: {', '.join(missing)}")
        pattern = tuple(AttentionVariant.from_json(v) for v in obj["attn_pattern"])
        return ModelConfig(
            vocab_size=obj["vocab_size"],
            d_model=obj["d_model"],
            n_layers=obj["n_layers"],
            n_heads=obj["n_heads"],
            n_kv_heads=obj["n_kv_heads"],
            head_dim=obj["head_dim"],
            n_experts=obj["n_experts"],
            top_k=obj["top_k"],
            expert_hidden=obj["expert_hidden"],
            max_seq_len=obj["max_seq_len"],
            rope_base=float(obj.get("rope_base", 10000.0)),
            rope_scale_factor=float(obj.get("rope_scale_factor", 1.0)),
            attn_pattern=pattern,
        )


def toy_config(**overrides) -> ModelConfig:
    """Default desk-scale model: 8 layers alternating Window(4)/Global, 16 experts."""
    fields = dict(
        vocab_size=256,
        d_model=64,
        n_layers=8,
        n_heads=4,
        n_kv_heads=2,
        head_dim=16,
        n_experts=16,
        top_k=2,
        expert_hidden=32,
        max_seq_len=512,
        rope_base=10000.0,
        rope_scale_factor=1.0,
    )
    fields.update(overrides)
    if "attn_pattern" not in fields:
        n = fields["n_layers"]
        fields["attn_pattern"] = tuple(
            window_attention(4) if i % 2 == 0 else global_attention() for i in range(n)
        )
    return ModelConfig(**fields)


# ---------------------------------------------------------------------------
# parameters


@dataclass
class ExpertParams:
    w_in: np.ndarray  # [d_model, expert_hidden]
    w_out: np.ndarray  # [expert_hidden, d_model]


@dataclass
class LayerParams:
    attn_norm: np.ndarray  # [d_model]
    wq: np.ndarray  # [d_model, n_heads * head_dim]
    wk: np.ndarray  # [d_model, n_kv_heads * head_dim]
    wv: np.ndarray  # [d_model, n_kv_heads * head_dim]
    wo: np.ndarray  # [n_heads * head_dim, d_model]
    ffn_norm: np.ndarray  # [d_model]
    router: np.ndarray  # [n_present_experts, d_model]; one row per present expert
    experts: list[ExpertParams]
    expert_ids: tuple[int, ...]  # original parent expert index of each present expert


@dataclass
class ModelParams:
    config: ModelConfig
    embedding: np.ndarray  # [vocab_size, d_model]
    layers: list[LayerParams]
    final_norm: np.ndarray  # [d_model]
    lm_head: np.ndarray  # [d_model, vocab_size]


def param_items(params: ModelParams) -> Iterator[tuple[str, np.ndarray]]:
    """All weight tensors in a fixed canonical order."""
    yield "embedding", params.embedding
    for i, layer in enumerate(params.layers):
        p = f"layers.{i}"
        yield f"{p}.attn_norm", layer.attn_norm
        yield f"{p}.wq", layer.wq
        yield f"{p}.wk", layer.wk
        yield f"{p}.wv", layer.wv
        yield f"{p}.wo", layer.wo
        yield f"{p}.ffn_norm", layer.ffn_norm
        yield f"{p}.router", layer.router
        for j, expert in enumerate(layer.experts):
            yield f"{p}.experts.{j}.w_in", expert.w_in
            yield f"{p}.experts.{j}.w_out", expert.w_out
    yield "final_norm", params.final_norm
    yield "lm_head", params.lm_head


def count_params(params: ModelParams) -> int:
    return sum(int(a.size) for _, a in param_items(params))


def _rng_for(seed: int, name: str) -> np.random.Generator:
    # One Philox stream per tensor, keyed by (seed, tensor name): creation order
    # never matters and the streams are identical on every platform.
    digest = hashlib.blake2b(f"{seed}:{name}".encode(), digest_size=16).digest()
    return np.random.Generator(np.random.Philox(key=int.from_bytes(digest, "little")))


def _uniform_init(seed: int, name: str, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    bound = 1.0 / float(np.sqrt(fan_in))
    rng = _rng_for(seed, name)
    return rng.uniform(-bound, bound, size=shape).astype(F32)


def init_model(config: ModelConfig, seed: int) -> ModelParams:
    """Fresh parameters: scaled-uniform weights in [-1/sqrt(fan_in), 1/sqrt(fan_in)], unit norm gains."""
    c = config
    d, hd = c.d_model, c.head_dim
    layers = []
    for i in range(c.n_layers):
        p = f"layers.{i}"
        experts = [
            ExpertParams(
                w_in=_uniform_init(seed, f"{p}.experts.{j}.w_in", (d, c.expert_hidden), d),
                w_out=_uniform_init(seed, f"{p}.experts.{j}.w_out", (c.expert_hidden, d), c.expert_hidden),
            )
            for j in range(c.n_experts)
        ]
        layers.append(
            LayerParams(
                attn_norm=np.ones(d, dtype=F32),
                wq=_uniform_init(seed, f"{p}.wq", (d, c.n_heads * hd), d),
                wk=_uniform_init(seed, f"{p}.wk", (d, c.n_kv_heads * hd), d),
                wv=_uniform_init(seed, f"{p}.wv", (d, c.n_kv_heads * hd), d),
                wo=_uniform_init(seed, f"{p}.wo", (c.n_heads * hd, d), c.n_heads * hd),
                ffn_norm=np.ones(d, dtype=F32),
                router=_uniform_init(seed, f"{p}.router", (c.n_experts, d), d),
                experts=experts,
                expert_ids=tuple(range(c.n_experts)),
            )
        )
    return ModelParams(
        config=c,
        embedding=_uniform_init(seed, "embedding", (c.vocab_size, d), d),
        layers=layers,
        final_norm=np.ones(d, dtype=F32),
        lm_head=_uniform_init(seed, "lm_head", (d, c.vocab_size), d),
    )


def average_checkpoints(a: ModelParams, b: ModelParams) -> ModelParams:
    """Elementwise arithmetic mean of two same-shaped checkpoints."""
    if a.config != b.config:
        raise MismatchError("checkpoint configs differ")
    for la, lb in zip(a.layers, b.layers):
        if la.expert_ids != lb.expert_ids:
            raise MismatchError("checkpoint expert layouts differ")
    half = np.float32(0.5)

    def mean(x: np.ndarray, y: np.ndarray) -> np.ndarray:
        if x.shape != y.shape:
            raise MismatchError(f"checkpoint tensor shapes differ: {x.shape} vs {y.shape}")
        return (x + y) * half

    layers = [
        LayerParams(
            attn_norm=mean(la.attn_norm, lb.attn_norm),
            wq=mean(la.wq, lb.wq),
            wk=mean(la.wk, lb.wk),
            wv=mean(la.wv, lb.wv),
            wo=mean(la.wo, lb.wo),
            ffn_norm=mean(la.ffn_norm, lb.ffn_norm),
            router=mean(la.router, lb.router),
            experts=[
                ExpertParams(w_in=mean(ea.w_in, eb.w_in), w_out=mean(ea.w_out, eb.w_out))
                for ea, eb in zip(la.experts, lb.experts)
            ],
            expert_ids=la.expert_ids,
        )
        for la, lb in zip(a.layers, b.layers)
    ]
    return ModelParams(
        config=a.config,
        embedding=mean(a.embedding, b.embedding),
        layers=layers,
        final_norm=mean(a.final_norm, b.final_norm),
        lm_head=mean(a.lm_head, b.lm_head),
    )


# ---------------------------------------------------------------------------
# serialization: flat little-endian float32 blob + JSON shape manifest

_PARAMS_FORMAT = "flat-f32-le-v1"


def _flat_bytes(params: ModelParams) -> bytes:
    return b"".join(np.ascontiguousarray(a, dtype="<f4").tobytes() for _, a in param_items(params))


def params_checksum(params: ModelParams) -> str:
    return hashlib.sha256(_flat_bytes(params)).hexdigest()


def manifest_path_for(bin_path: Path | str) -> Path:
    return Path(str(bin_path) + ".json")


def save_params(params: ModelParams, bin_path: Path | str) -> Path:
    """Write the flat binary blob to bin_path and its shape manifest alongside."""
    bin_path = Path(bin_path)
    blob = _flat_bytes(params)
    entries = []
    offset = 0
    for name, a in param_items(params):
        nbytes = int(a.size) * 4
        entries.append({"name": name, "shape": list(a.shape), "offset_bytes": offset})
        offset += nbytes
    manifest = {
        "format": _PARAMS_FORMAT,
        "dtype": "float32",
        "byte_order": "little",
        "total_bytes": len(blob),
        "checksum_sha256": hashlib.sha256(blob).hexdigest(),
        "config": params.config.to_json(),
        "expert_ids": [list(layer.expert_ids) for layer in params.layers],
        "entries": entries,
    }
    bin_path.write_bytes(blob)
    manifest_path_for(bin_path).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return bin_path


def load_params(bin_path: Path | str) -> ModelParams:
    bin_path = Path(bin_path)
    manifest = json.loads(manifest_path_for(bin_path).read_text())
    if manifest.get("format") != _PARAMS_FORMAT:
        raise MismatchError(f"unsupported params format {manifest.get('format')!r}")
    blob = bin_path.read_bytes()
    if len(blob) != manifest["total_bytes"]:
        raise MismatchError(
            f"params blob is {len(blob)} bytes, manifest says {manifest['total_bytes']}"
        )
    digest = hashlib.sha256(blob).hexdigest()
    if digest != manifest["checksum_sha256"]:
        raise MismatchError("params blob checksum does not match manifest")
    config = ModelConfig.from_json(manifest["config"])
    arrays: dict[str, np.ndarray] = {}
    for entry in manifest["entries"]:
        shape = tuple(entry["shape"])
        n = int(np.prod(shape)) if shape else 1
        start = entry["offset_bytes"]
        a = np.frombuffer(blob, dtype="<f4", count=n, offset=start).reshape(shape)
        arrays[entry["name"]] = np.array(a, dtype=F32)  # own writable copy

    expert_ids = manifest["expert_ids"]
    layers = []
    for i in range(config.n_layers):
        p = f"layers.{i}"
        ids = tuple(int(e) for e in expert_ids[i])
        experts = [
            ExpertParams(w_in=arrays[f"{p}.experts.{j}.w_in"], w_out=arrays[f"{p}.experts.{j}.w_out"])
            for j in range(len(ids))
        ]
        layers.append(
            LayerParams(
                attn_norm=arrays[f"{p}.attn_norm"],
                wq=arrays[f"{p}.wq"],
                wk=arrays[f"{p}.wk"],
                wv=arrays[f"{p}.wv"],
                wo=arrays[f"{p}.wo"],
                ffn_norm=arrays[f"{p}.ffn_norm"],
                router=arrays[f"{p}.router"],
                experts=experts,
                expert_ids=ids,
            )
        )
    return ModelParams(
        config=config,
        embedding=arrays["embedding"],
        layers=layers,
        final_norm=arrays["final_norm"],
        lm_head=arrays["lm_head"],
    )


# ---------------------------------------------------------------------------
# forward pass


@dataclass
class ForwardTrace:
    logits: np.ndarray  # [..., T, vocab]
    final_hidden: np.ndarray  # [..., T, d_model]; post final norm, pre LM head
    ffn_io: dict[int, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)
    kv: dict[int, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)


def _rms_norm(x: np.ndarray, gain: np.ndarray) -> np.ndarray:
    ms = np.mean(np.square(x), axis=-1, keepdims=True)
    return x * (np.float32(1.0) / np.sqrt(ms + RMS_EPS)) * gain


def _silu(x: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        return x / (np.float32(1.0) + np.exp(-x))


def _softmax_last(x: np.ndarray) -> np.ndarray:
    m = np.max(x, axis=-1, keepdims=True)
    e = np.exp(x - m)
    return e / np.sum(e, axis=-1, keepdims=True)


def _rope_tables(config: ModelConfig, length: int) -> tuple[np.ndarray, np.ndarray]:
    half = config.head_dim // 2
    inv_freq = config.rope_base ** (-np.arange(half, dtype=np.float64) * 2.0 / config.head_dim)
    # The long-context knob divides every rotary angle; factor 1.0 is the exact
    # unscaled baseline.
    angles = np.arange(length, dtype=np.float64)[:, None] * inv_freq[None, :] / config.rope_scale_factor
    return np.cos(angles).astype(F32), np.sin(angles).astype(F32)


def _apply_rope(x: np.ndarray, cos: np.ndarray, sin: np.ndarray) -> np.ndarray:
    # x: [B, H, T, head_dim]; rotate (even, odd) dim pairs by the position angle.
    xe, xo = x[..., 0::2], x[..., 1::2]
    out = np.empty_like(x)
    out[..., 0::2] = xe * cos - xo * sin
    out[..., 1::2] = xe * sin + xo * cos
    return out


def _attention_mask(variant: AttentionVariant, length: int) -> np.ndarray:
    pos = np.arange(length)
    allowed = pos[None, :] <= pos[:, None]  # causal: key s <= query t
    if variant.kind == "window":
        allowed &= pos[None, :] > pos[:, None] - variant.window_size
    return allowed


@lru_cache(maxsize=64)
def _additive_mask(kind: str, window_size: int | None, length: int) -> np.ndarray:
    allowed = _attention_mask(AttentionVariant(kind, window_size), length)
    return np.where(allowed, F32(0.0), F32(-np.inf))


def route_tokens(
    router_logits: np.ndarray, allowed: np.ndarray, top_k: int
) -> tuple[np.ndarray, np.ndarray]:
    """Pick top_k experts per token among allowed ones; weights renormalize to 1.

    Ties break toward the lower expert index. Returns (indices [..., k],
    weights [..., k]) with weights from a softmax over the selected logits only.
    """
    n_allowed = int(np.count_nonzero(allowed))
    if n_allowed < top_k:
        raise MismatchError(f"only {n_allowed} experts allowed but top_k={top_k}")
    masked = np.where(allowed, router_logits, -np.inf)
    order = np.argsort(-masked, axis=-1, kind="stable")
    idx = order[..., :top_k]
    selected = np.take_along_axis(masked, idx, axis=-1)
    return idx, _softmax_last(selected).astype(F32)


def _expert_allowed_mask(layer: LayerParams, keep_set: Iterable[int], top_k: int) -> np.ndarray:
    keep = set(keep_set)
    present = set(layer.expert_ids)
    missing = sorted(keep - present)
    if missing:
        raise MismatchError(f"architecture keeps experts {missing} absent from parameters")
    if len(keep) < top_k:
        raise MismatchError(f"architecture keeps {len(keep)} experts, fewer than top_k={top_k}")
    return np.array([eid in keep for eid in layer.expert_ids], dtype=bool)


def _moe_layer(
    x: np.ndarray, layer: LayerParams, allowed: np.ndarray, top_k: int
) -> np.ndarray:
    logits = x @ layer.router.T
    idx, weights = route_tokens(logits, allowed, top_k)
    out = np.zeros_like(x)
    flat_x = x.reshape(-1, x.shape[-1])
    flat_idx = idx.reshape(-1, top_k)
    flat_w = weights.reshape(-1, top_k)
    flat_out = out.reshape(-1, x.shape[-1])
    for e, expert in enumerate(layer.experts):
        sel = flat_idx == e
        rows = np.nonzero(sel.any(axis=-1))[0]
        if rows.size == 0:
            continue
        w = (flat_w[rows] * sel[rows]).sum(axis=-1, dtype=F32)
        y = _silu(flat_x[rows] @ expert.w_in) @ expert.w_out
        flat_out[rows] += w[:, None] * y
    return out


def forward_batch(
    params: ModelParams,
    arch: "ArchitectureSpec",
    tokens: np.ndarray,
    capture_layers: Iterable[int] = (),
    capture_kv: bool = False,
    kv_transform: KvTransform | None = None,
) -> ForwardTrace:
    """Run the model on a [batch, length] token array.

    capture_layers records each named layer's FFN (input, output) pair;
    capture_kv records every layer's post-rotary keys/values as the attention
    consumed them; kv_transform rewrites (keys, values) before use, which is
    how cache quantization is injected without a second forward path.
    """
    c = params.config
    tokens = np.asarray(tokens)
    if tokens.ndim != 2:
        raise MismatchError(f"forward_batch expects [batch, length] tokens, got shape {tokens.shape}")
    batch, length = tokens.shape
    if length > c.max_seq_len:
        raise MismatchError(f"sequence length {length} exceeds max_seq_len {c.max_seq_len}")
    if not np.issubdtype(tokens.dtype, np.integer):
        raise MismatchError(f"tokens must be integers, got dtype {tokens.dtype}")
    if tokens.min() < 0 or tokens.max() >= c.vocab_size:
        raise MismatchError("token id out of range for vocab_size")
    layer_specs = list(arch.layers)
    if len(layer_specs) != len(params.layers):
        raise MismatchError(
            f"architecture has {len(layer_specs)} layers, parameters have {len(params.layers)}"
        )

    capture = frozenset(capture_layers)
    cos, sin = _rope_tables(c, length)
    group = c.n_heads // c.n_kv_heads
    scale = np.float32(1.0 / np.sqrt(c.head_dim))
    trace = ForwardTrace(logits=None, final_hidden=None)  # filled below

    # Attention work buffers are the hot allocation; reuse them across layers.
    scores_buf = np.empty((batch, c.n_kv_heads, group * length, length), dtype=F32)
    ctx_buf = np.empty((batch, c.n_kv_heads, group * length, c.head_dim), dtype=F32)

    hidden = params.embedding[tokens]
    for i, (layer, spec) in enumerate(zip(params.layers, layer_specs)):
        att_in = _rms_norm(hidden, layer.attn_norm)
        q = (att_in @ layer.wq).reshape(batch, length, c.n_heads, c.head_dim).transpose(0, 2, 1, 3)
        k = (att_in @ layer.wk).reshape(batch, length, c.n_kv_heads, c.head_dim).transpose(0, 2, 1, 3)
        v = (att_in @ layer.wv).reshape(batch, length, c.n_kv_heads, c.head_dim).transpose(0, 2, 1, 3)
        q = _apply_rope(q, cos, sin)
        k = _apply_rope(k, cos, sin)
        if kv_transform is not None:
            k, v = kv_transform(i, k, v)
        if capture_kv:
            trace.kv[i] = (k.copy(), v.copy())
        # Query heads grouped by their kv head: head h reads kv head h // group,
        # so stacking each group's queries keeps GQA exact while batching GEMMs.
        qg = q.reshape(batch, c.n_kv_heads, group * length, c.head_dim)
        np.matmul(qg, k.transpose(0, 1, 3, 2), out=scores_buf)
        scores = scores_buf.reshape(batch, c.n_heads, length, length)
        scores *= scale
        scores += _additive_mask(spec.attention.kind, spec.attention.window_size, length)
        # softmax over keys, in place; masked slots exp to exactly 0
        scores -= np.max(scores, axis=-1, keepdims=True)
        np.exp(scores, out=scores)
        scores /= np.sum(scores, axis=-1, keepdims=True)
        np.matmul(scores_buf, v, out=ctx_buf)
        ctx = (
            ctx_buf.reshape(batch, c.n_heads, length, c.head_dim)
            .transpose(0, 2, 1, 3)
            .reshape(batch, length, c.n_heads * c.head_dim)
        )
        hidden = hidden + ctx @ layer.wo

        ffn_in = _rms_norm(hidden, layer.ffn_norm)
        allowed_experts = _expert_allowed_mask(layer, spec.expert_keep_set, c.top_k)
        moe_out = _moe_layer(ffn_in, layer, allowed_experts, c.top_k)
        if i in capture:
            trace.ffn_io[i] = (ffn_in.copy(), moe_out.copy())
        hidden = hidden + moe_out

    final = _rms_norm(hidden, params.final_norm)
    trace.final_hidden = final
    trace.logits = final @ params.lm_head
    return trace


def forward(
    params: ModelParams,
    arch: "ArchitectureSpec",
    tokens: np.ndarray,
    capture_layers: Iterable[int] = (),
    capture_kv: bool = False,
    kv_transform: KvTransform | None = None,
) -> ForwardTrace:
    """Single-sequence forward; see forward_batch."""
    tokens = np.asarray(tokens)
    if tokens.ndim != 1:
        raise MismatchError(f"forward expects a 1-D token sequence, got shape {tokens.shape}")
    trace = forward_batch(
        params, arch, tokens[None, :], capture_layers=capture_layers,
        capture_kv=capture_kv, kv_transform=kv_transform,
    )
    return ForwardTrace(
        logits=trace.logits[0],
        final_hidden=trace.final_hidden[0],
        ffn_io={i: (x[0], y[0]) for i, (x, y) in trace.ffn_io.items()},
        kv={i: (k[0], v[0]) for i, (k, v) in trace.kv.items()},
    )


def generate_batch(
    params: ModelParams,
    arch: "ArchitectureSpec",
    prompts: np.ndarray,
    max_new_tokens: int,
    end_token: int,
    kv_transform: KvTransform | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Greedy decoding from [batch, prompt_len] prompts.

    Returns (sequences [batch, prompt_len + emitted], generated_lengths [batch]).
    A sequence stops growing once it emits end_token; generated_lengths counts
    emitted tokens including that end token.
    """
    c = params.config
    seqs = np.asarray(prompts).copy()
    batch = seqs.shape[0]
    done = np.zeros(batch, dtype=bool)
    lengths = np.zeros(batch, dtype=np.int64)
    for _ in range(max_new_tokens):
        if done.all() or seqs.shape[1] >= c.max_seq_len:
            break
        trace = forward_batch(params, arch, seqs, kv_transform=kv_transform)
        nxt = np.argmax(trace.logits[:, -1, :], axis=-1)
        nxt = np.where(done, end_token, nxt)  # finished rows just pad
        lengths += (~done).astype(np.int64)
        done |= nxt == end_token
        seqs = np.concatenate([seqs, nxt[:, None]], axis=1)
    return seqs, lengths
