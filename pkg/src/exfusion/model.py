"""Minimal pre-norm Transformer encoder with pluggable FFN slots.

Each block is ``x + attn(ln(x))`` then ``x + ffn(ln(x))``. The FFN slot is
either a plain dense layer, a token-routed top-k mixture, or a set of
experts fused by static / learned / memory-bank weights. Non-replaced
layers always hold a dense slot. Classification pools the sequence mean;
language modeling applies a causal mask and per-position logits.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass

import numpy as np

from . import fusion as F
from .moe import Router, topk_moe_forward
from .params import Affine, Embedding, ExpertAffine, LayerNorm, affine_forward
from .tensor import (
    ShapeError,
    Tensor,
    add,
    as_np_dtype,
    embedding,
    gather_rows,
    gelu,
    matmul,
    reshape,
    scale,
    softmax,
    tmean,
    transpose,
)

VARIANTS = ("dense", "moe", "sw", "dw", "mb")
OBJECTIVES = ("classification", "lm")
EXPERT_INITS = ("independent", "replicate")
UPDATE_ORDERS = ("update_then_fuse", "fuse_then_update")

MASK_FILL = -1e9


@dataclass
class ModelSpec:
    """Architecture plus FFN-variant configuration.

    ``replaced_layers`` is the set of block indices whose FFN follows
    ``variant``; ``None`` means every layer. ``num_experts``/``top_k``/
    ``momentum``/``shared_router`` only matter for the multi-expert
    variants.
    """

    depth: int
    dim: int
    heads: int
    expansion: int
    vocab_size: int
    num_classes: int
    max_seq_len: int
    objective: str = "classification"
    variant: str = "dense"
    num_experts: int = 4
    top_k: int = 1
    momentum: float = 0.95
    replaced_layers: tuple[int, ...] | None = None
    shared_router: bool = True
    expert_init: str = "independent"
    mb_update_order: str = "update_then_fuse"
    freeze_fusion_weights: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.depth < 1:
            raise ValueError(f"depth must be >= 1; got {self.depth}")
        if self.dim < 1 or self.heads < 1 or self.dim % self.heads != 0:
            raise ValueError(f"dim {self.dim} must be a positive multiple of heads {self.heads}")
        if self.expansion < 1:
            raise ValueError(f"expansion must be >= 1; got {self.expansion}")
        if self.vocab_size < 1:
            raise ValueError(f"vocab_size must be >= 1; got {self.vocab_size}")
        if self.max_seq_len < 1:
            raise ValueError(f"max_seq_len must be >= 1; got {self.max_seq_len}")
        if self.objective not in OBJECTIVES:
            raise ValueError(f"objective must be one of {OBJECTIVES}; got {self.objective!r}")
        if self.objective == "classification" and self.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2; got {self.num_classes}")
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}; got {self.variant!r}")
        if self.num_experts < 1:
            raise ValueError(f"num_experts must be >= 1; got {self.num_experts}")
        if not 1 <= self.top_k <= self.num_experts:
            raise ValueError(
                f"top_k must be in [1, num_experts={self.num_experts}]; got {self.top_k}"
            )
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must be in [0, 1); got {self.momentum}")
        if self.expert_init not in EXPERT_INITS:
            raise ValueError(f"expert_init must be one of {EXPERT_INITS}; got {self.expert_init!r}")
        if self.mb_update_order not in UPDATE_ORDERS:
            raise ValueError(
                f"mb_update_order must be one of {UPDATE_ORDERS}; got {self.mb_update_order!r}"
            )
        if self.replaced_layers is None:
            self.replaced_layers = tuple(range(self.depth))
        else:
            layers = tuple(sorted(set(int(i) for i in self.replaced_layers)))
            if layers and (layers[0] < 0 or layers[-1] >= self.depth):
                raise ValueError(
                    f"replaced_layers {layers} outside valid range [0, {self.depth})"
                )
            self.replaced_layers = layers

    def resolved_replaced(self) -> tuple[int, ...]:
        return self.replaced_layers

    @property
    def hidden(self) -> int:
        return self.dim * self.expansion

    @property
    def head_out(self) -> int:
        return self.num_classes if self.objective == "classification" else self.vocab_size

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["replaced_layers"] = list(self.replaced_layers)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        d = dict(d)
        if d.get("replaced_layers") is not None:
            d["replaced_layers"] = tuple(d["replaced_layers"])
        return cls(**d)


class AttentionLayer:
    """Multi-head scaled dot-product self-attention with output projection."""

    def __init__(self, name: str, dim: int, heads: int, dtype, seed: int):
        self.heads = heads
        self.head_dim = dim // heads
        self.q = Affine(name + ".q", dim, dim, dtype, seed)
        self.k = Affine(name + ".k", dim, dim, dtype, seed)
        self.v = Affine(name + ".v", dim, dim, dtype, seed)
        self.o = Affine(name + ".o", dim, dim, dtype, seed)

    def __call__(self, x: Tensor, mask: np.ndarray | None = None, return_weights: bool = False):
        b, l, d = x.shape

        def heads(t: Tensor) -> Tensor:
            return transpose(reshape(t, (b, l, self.heads, self.head_dim)), (0, 2, 1, 3))

        q, k, v = heads(self.q(x)), heads(self.k(x)), heads(self.v(x))
        scores = scale(matmul(q, transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(self.head_dim))
        if mask is not None:
            scores = add(scores, Tensor(mask.astype(scores.data.dtype)))
        probs = softmax(scores, axis=-1)
        ctx = reshape(transpose(matmul(probs, v), (0, 2, 1, 3)), (b, l, d))
        out = self.o(ctx)
        return (out, probs) if return_weights else out

    def named_parameters(self):
        out = []
        for lin in (self.q, self.k, self.v, self.o):
            out.extend(lin.named_parameters())
        return out


class FFNSlot:
    """Stacked up/down expert sets plus the variant's weight source."""

    def __init__(self, name: str, kind: str, spec: ModelSpec, dtype, seed: int):
        self.name = name
        self.kind = kind
        n = 1 if kind == "dense" else spec.num_experts
        replicate = spec.expert_init == "replicate" and kind != "dense"
        self.up = ExpertAffine(name + ".up", n, spec.dim, spec.hidden, dtype, seed, replicate)
        self.down = ExpertAffine(name + ".down", n, spec.hidden, spec.dim, dtype, seed, replicate)
        self.top_k = spec.top_k
        self.router: Router | None = None
        self.controllers: list = []
        if kind in ("dense", "sw"):
            self.controllers = [F.StaticFusion(n, dtype)]
        elif kind == "dw":
            self.controllers = [
                F.LearnedFusion(name + ".fusion", n, dtype, frozen=spec.freeze_fusion_weights)
            ]
        elif kind == "mb":
            if spec.shared_router:
                router = Router(name + ".router", spec.dim, n, dtype, seed)
                self.controllers = [
                    F.MemoryFusion(name + ".fusion", router, spec.momentum, dtype,
                                   spec.mb_update_order)
                ]
            else:
                self.controllers = [
                    F.MemoryFusion(f"{name}.fusion.{tag}",
                                   Router(f"{name}.router.{tag}", spec.dim, n, dtype, seed),
                                   spec.momentum, dtype, spec.mb_update_order)
                    for tag in ("up", "down")
                ]
        elif kind == "moe":
            self.router = Router(name + ".router", spec.dim, n, dtype, seed)
        else:
            raise ValueError(f"unknown FFN slot kind {kind!r}")

    def forward(self, x: Tensor, training: bool) -> Tensor:
        if self.kind == "dense":
            # single expert with unit weight; skip the fusion reduction
            w_u = reshape(self.up.weight, (self.up.d_in, self.up.d_out))
            b_u = reshape(self.up.bias, (self.up.d_out,))
            w_d = reshape(self.down.weight, (self.down.d_in, self.down.d_out))
            b_d = reshape(self.down.bias, (self.down.d_out,))
            h = gelu(affine_forward(x, w_u, b_u))
            return affine_forward(h, w_d, b_d)
        if self.kind == "moe":
            return topk_moe_forward(x, self.up, self.down, self.router, self.top_k)
        if len(self.controllers) == 1:
            w = self.controllers[0].step_weights(x, training)
            return F.fused_ffn_forward(x, self.up, self.down, w)
        w_up = self.controllers[0].step_weights(x, training)
        w_down = self.controllers[1].step_weights(x, training)
        return F.fused_ffn_forward(x, self.up, self.down, w_up, w_down)

    def export_fusion_weights(self) -> tuple[np.ndarray, np.ndarray]:
        """Final (up, down) fusion weight vectors for the dense collapse."""
        if self.kind == "moe":
            raise ValueError("a top-k mixture slot has no fusion weights to export")
        if self.kind == "dense":
            one = np.ones(1, dtype=self.up.weight.data.dtype)
            return one, one
        if len(self.controllers) == 1:
            w = self.controllers[0].export_weights()
            return w, w
        return self.controllers[0].export_weights(), self.controllers[1].export_weights()

    def named_parameters(self):
        out = self.up.named_parameters() + self.down.named_parameters()
        if self.router is not None:
            out.extend(self.router.named_parameters())
        for c in self.controllers:
            out.extend(c.named_parameters())
        return out

    def named_buffers(self):
        out = []
        for c in self.controllers:
            out.extend(c.named_buffers())
        return out


class TransformerBlock:
    def __init__(self, name: str, ffn_kind: str, spec: ModelSpec, dtype, seed: int):
        self.ln1 = LayerNorm(name + ".ln1", spec.dim, dtype)
        self.attn = AttentionLayer(name + ".attn", spec.dim, spec.heads, dtype, seed)
        self.ln2 = LayerNorm(name + ".ln2", spec.dim, dtype)
        self.ffn = FFNSlot(name + ".ffn", ffn_kind, spec, dtype, seed)

    def forward(self, x: Tensor, mask: np.ndarray | None, training: bool) -> Tensor:
        x = add(x, self.attn(self.ln1(x), mask))
        return add(x, self.ffn.forward(self.ln2(x), training))

    def named_parameters(self):
        return (self.ln1.named_parameters() + self.attn.named_parameters()
                + self.ln2.named_parameters() + self.ffn.named_parameters())


class Model:
    """Token embedding + positional table + blocks + final norm + head."""

    def __init__(self, spec: ModelSpec, dtype: str = "f32"):
        self.spec = spec
        self.dtype = dtype
        seed = spec.seed
        replaced = set(spec.resolved_replaced())
        self.embed = Embedding("embed", spec.vocab_size, spec.dim, dtype, seed)
        self.pos = Embedding("pos", spec.max_seq_len, spec.dim, dtype, seed)
        self.blocks = []
        for i in range(spec.depth):
            kind = spec.variant if (spec.variant != "dense" and i in replaced) else "dense"
            self.blocks.append(TransformerBlock(f"blocks.{i}", kind, spec, dtype, seed))
        self.final_ln = LayerNorm("final_ln", spec.dim, dtype)
        self.head = Affine("head", spec.dim, spec.head_out, dtype, seed)

    # -- forward ----------------------------------------------------------------

    def forward(self, tokens: np.ndarray, training: bool = False) -> Tensor:
        tokens = np.asarray(tokens)
        if tokens.ndim != 2:
            raise ShapeError(f"tokens must be [batch, seq]; got shape {tokens.shape}")
        b, l = tokens.shape
        if l > self.spec.max_seq_len:
            raise ShapeError(f"sequence length {l} exceeds max_seq_len {self.spec.max_seq_len}")
        x = embedding(self.embed.weight, tokens)
        x = add(x, gather_rows(self.pos.weight, np.arange(l), unique=True))
        mask = self._causal_mask(l) if self.spec.objective == "lm" else None
        for block in self.blocks:
            x = block.forward(x, mask, training)
        x = self.final_ln(x)
        if self.spec.objective == "classification":
            return self.head(tmean(x, axis=1))
        return self.head(x)

    __call__ = forward

    @staticmethod
    def _causal_mask(l: int) -> np.ndarray:
        return np.triu(np.full((l, l), MASK_FILL), k=1)

    # -- state ------------------------------------------------------------------

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out = self.embed.named_parameters() + self.pos.named_parameters()
        for block in self.blocks:
            out.extend(block.named_parameters())
        out.extend(self.final_ln.named_parameters())
        out.extend(self.head.named_parameters())
        return out

    def named_buffers(self) -> list[tuple[str, np.ndarray]]:
        out = []
        for block in self.blocks:
            out.extend(block.ffn.named_buffers())
        return out

    def _bank_owners(self) -> dict:
        owners = {}
        for block in self.blocks:
            for c in block.ffn.controllers:
                for name, _ in c.named_buffers():
                    owners[name] = c
        return owners

    def param_count(self) -> int:
        return sum(t.data.size for _, t in self.named_parameters())

    def state_arrays(self) -> dict[str, np.ndarray]:
        """Parameters plus buffers as plain arrays (live references)."""
        out = {name: t.data for name, t in self.named_parameters()}
        out.update({name: buf for name, buf in self.named_buffers()})
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        owners = self._bank_owners()
        for name, t in self.named_parameters():
            if name not in arrays:
                raise KeyError(f"missing parameter {name!r}")
            arr = arrays[name]
            if arr.shape != t.data.shape:
                raise ShapeError(f"parameter {name!r}: shape {arr.shape} != {t.data.shape}")
            t.data = arr.astype(t.data.dtype, copy=True)
        for name, _ in self.named_buffers():
            if name not in arrays:
                raise KeyError(f"missing buffer {name!r}")
            owner = owners[name]
            owner.bank = arrays[name].astype(owner.bank.dtype, copy=True)

    def bank_state(self) -> dict[str, np.ndarray]:
        return {name: buf.copy() for name, buf in self.named_buffers()}

    def set_bank_state(self, state: dict[str, np.ndarray]) -> None:
        owners = self._bank_owners()
        for name, arr in state.items():
            owners[name].bank = arr.copy()

    def zero_grad(self) -> None:
        for _, t in self.named_parameters():
            t.grad = None

    def cast(self, dtype: str) -> "Model":
        """Copy of this model with every parameter/buffer cast to ``dtype``."""
        other = Model(self.spec, dtype=dtype)
        target = as_np_dtype(dtype)
        arrays = {name: arr.astype(target) for name, arr in self.state_arrays().items()}
        other.load_state_arrays(arrays)
        return other


def build_model(spec: ModelSpec, dtype: str = "f32") -> Model:
    return Model(spec, dtype=dtype)


def expected_param_count(spec: ModelSpec) -> int:
    """Closed-form parameter count for a ModelSpec; must match the model exactly."""
    d, h = spec.dim, spec.hidden
    total = spec.vocab_size * d + spec.max_seq_len * d  # embeddings
    replaced = set(spec.resolved_replaced())
    router_params = d * spec.num_experts + spec.num_experts
    for i in range(spec.depth):
        total += 2 * d + 2 * d              # two layernorms
        total += 4 * (d * d + d)            # attention projections
        n = spec.num_experts if (spec.variant != "dense" and i in replaced) else 1
        total += n * (d * h + h) + n * (h * d + d)
        if spec.variant != "dense" and i in replaced:
            if spec.variant == "dw":
                total += spec.num_experts
            elif spec.variant == "mb":
                total += router_params if spec.shared_router else 2 * router_params
            elif spec.variant == "moe":
                total += router_params
    total += 2 * d                           # final layernorm
    total += d * spec.head_out + spec.head_out
    return total


def collapse_to_dense(model: Model) -> Model:
    """Export a plain dense model whose eval outputs match the source.

    Every multi-expert slot is replaced by the single affine pair obtained
    from its final fusion weights; routers and banks are dropped. The fused
    arrays are computed by the same reduction the source model uses at eval
    time, so eval logits agree bitwise.
    """
    if model.spec.variant == "moe":
        raise ValueError("top-k mixture models cannot be collapsed; experts are not fused")
    dense_spec = dataclasses.replace(model.spec, variant="dense", replaced_layers=())
    dense = Model(dense_spec, dtype=model.dtype)
    arrays = {}
    skip = {name for name, _ in model.named_buffers()}
    param_names = {name for name, _ in dense.named_parameters()}
    for name, arr in model.state_arrays().items():
        if name in skip:
            continue
        if name in param_names:
            arrays[name] = arr.copy()
    for i, block in enumerate(model.blocks):
        slot = block.ffn
        if slot.kind == "dense":
            continue
        w_up, w_down = slot.export_fusion_weights()
        prefix = f"blocks.{i}.ffn"
        arrays[f"{prefix}.up.weight"] = np.tensordot(w_up, slot.up.weight.data, axes=(0, 0))[None]
        arrays[f"{prefix}.up.bias"] = np.tensordot(w_up, slot.up.bias.data, axes=(0, 0))[None]
        arrays[f"{prefix}.down.weight"] = np.tensordot(w_down, slot.down.weight.data, axes=(0, 0))[None]
        arrays[f"{prefix}.down.bias"] = np.tensordot(w_down, slot.down.bias.data, axes=(0, 0))[None]
    dense.load_state_arrays(arrays)
    return dense
