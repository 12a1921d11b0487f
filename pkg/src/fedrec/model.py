"""Group-gated causal transformer for CTR prediction.

Per-position item embeddings are the concatenation of one embedding row
per attribute plus a learnable absolute positional row. Each transformer
block runs causal multi-head self-attention, then a gating MLP assigns the
user to one of `n_groups` feed-forward experts, and the block output is
LayerNorm(attn + user_ffn(attn) + group_ffn(attn)) with post-norm
residuals. The final valid position, the user embedding, and the candidate
item embedding feed an MLP that emits a single pre-sigmoid logit.

Routing is hard top-1: the gating network's probabilities select exactly
one group FFN, so gate parameters receive gradient only through the
routing-balance regularizer, never through the recommendation loss.

Parameters are named strings and carry a partition tag:

* PRIVATE  -- `user_emb` and every `block{l}.ffn_u.*`; never uploaded.
* GROUP    -- `block{l}.ffn_g{g}.*`; aggregated within the routed group.
* GLOBAL   -- everything else; aggregated over all participants.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, DegenerateInputError
from .rng import Rng

PRIVATE = "private"
GLOBAL = "global"
GROUP = "group"

MASK_OFF = -1e9


class PartitionTag(NamedTuple):
    kind: str
    block: int | None = None
    group: int | None = None


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters; width of the trunk is d_model * n_attrs."""

    d_model: int = 8
    n_attrs: int = 1
    n_heads: int = 2
    n_blocks: int = 2
    n_groups: int = 4
    max_seq_len: int = 12
    ffn_hidden: int = 16
    gate_hidden: int = 8
    pred_hidden: tuple[int, ...] = (16,)
    dropout_p: float = 0.0
    attr_vocab_sizes: tuple[int, ...] = (50,)
    n_users: int = 1
    d_user: int = 0          # 0 means "same as d_model"
    group_ffn_enabled: bool = True
    # std for the gate output bias; nonzero breaks routing symmetry so that
    # untrained gates route unevenly and the balance loss has work to do
    gate_bias_std: float = 0.5

    def __post_init__(self):
        if self.d_model < 1 or self.n_attrs < 1:
            raise ConfigError(f"d_model/n_attrs must be positive, got {self.d_model}/{self.n_attrs}")
        if self.n_blocks < 1 or self.n_groups < 1:
            raise ConfigError("need at least one block and one group")
        if self.max_seq_len < 1:
            raise ConfigError("max_seq_len must be >= 1")
        if len(self.attr_vocab_sizes) != self.n_attrs:
            raise ConfigError(
                f"{len(self.attr_vocab_sizes)} vocab sizes for {self.n_attrs} attributes"
            )
        if (self.d_model * self.n_attrs) % self.n_heads != 0:
            raise ConfigError(
                f"trunk width {self.d_model * self.n_attrs} not divisible by {self.n_heads} heads"
            )
        if not 0.0 <= self.dropout_p < 1.0:
            raise ConfigError(f"dropout_p must be in [0, 1), got {self.dropout_p}")

    @property
    def width(self) -> int:
        return self.d_model * self.n_attrs

    @property
    def user_width(self) -> int:
        return self.d_user if self.d_user else self.d_model


@dataclass
class GateDecision:
    """One routing decision per (forward pass, block)."""

    probs: T.Tensor     # [n_groups], batch-averaged, sums to 1
    group: int          # argmax with lowest-index tie-break


def param_shapes(config: ModelConfig):
    """Yield (name, shape, PartitionTag) for every model parameter.

    Single source of truth for initialization, partitioning, and counting.
    """
    d = config.width
    du = config.user_width
    h = config.ffn_hidden
    yield "user_emb", (1, du), PartitionTag(PRIVATE)
    for a, vocab in enumerate(config.attr_vocab_sizes):
        yield f"item_emb.{a}", (vocab, config.d_model), PartitionTag(GLOBAL)
    yield "pos_emb", (config.max_seq_len, d), PartitionTag(GLOBAL)
    for l in range(config.n_blocks):
        for w in ("wq", "wk", "wv", "wo"):
            yield f"block{l}.attn.{w}", (d, d), PartitionTag(GLOBAL)
        for ln in ("ln1", "ln2"):
            yield f"block{l}.{ln}.gain", (d,), PartitionTag(GLOBAL)
            yield f"block{l}.{ln}.bias", (d,), PartitionTag(GLOBAL)
        yield f"block{l}.gate.w1", (d + du, config.gate_hidden), PartitionTag(GLOBAL)
        yield f"block{l}.gate.b1", (config.gate_hidden,), PartitionTag(GLOBAL)
        yield f"block{l}.gate.w2", (config.gate_hidden, config.n_groups), PartitionTag(GLOBAL)
        yield f"block{l}.gate.b2", (config.n_groups,), PartitionTag(GLOBAL)
        yield f"block{l}.ffn_u.w1", (d, h), PartitionTag(PRIVATE)
        yield f"block{l}.ffn_u.b1", (h,), PartitionTag(PRIVATE)
        yield f"block{l}.ffn_u.w2", (h, d), PartitionTag(PRIVATE)
        yield f"block{l}.ffn_u.b2", (d,), PartitionTag(PRIVATE)
        for g in range(config.n_groups):
            tag = PartitionTag(GROUP, l, g)
            yield f"block{l}.ffn_g{g}.w1", (d, h), tag
            yield f"block{l}.ffn_g{g}.b1", (h,), tag
            yield f"block{l}.ffn_g{g}.w2", (h, d), tag
            yield f"block{l}.ffn_g{g}.b2", (d,), tag
    widths = [2 * d + du, *config.pred_hidden, 1]
    for i in range(len(widths) - 1):
        yield f"pred.w{i}", (widths[i], widths[i + 1]), PartitionTag(GLOBAL)
        yield f"pred.b{i}", (widths[i + 1],), PartitionTag(GLOBAL)


def partition_params(config: ModelConfig) -> dict[str, PartitionTag]:
    return {name: tag for name, _, tag in param_shapes(config)}


def partition_tag(config: ModelConfig, name: str) -> PartitionTag:
    tags = partition_params(config)
    if name not in tags:
        raise ContractError(f"unknown parameter name {name!r}")
    return tags[name]


def _init_value(name: str, shape, config: ModelConfig, rng: Rng, dtype) -> np.ndarray:
    r = rng.derive(name)
    if name.endswith(".gain"):
        return np.ones(shape, dtype=dtype)
    if name == "user_emb" or name.startswith("item_emb") or name == "pos_emb":
        return r.normal(shape, std=0.1, dtype=dtype)
    if name.endswith(".b2") and ".gate." in name:
        return r.normal(shape, std=config.gate_bias_std, dtype=dtype)
    if name.endswith((".bias", ".b1", ".b2")) or ".b" in name.rsplit(".", 1)[-1]:
        return np.zeros(shape, dtype=dtype)
    if ".ffn_g" in name and not config.group_ffn_enabled:
        return np.zeros(shape, dtype=dtype)
    fan_in, fan_out = shape[0], shape[-1]
    std = float(np.sqrt(2.0 / (fan_in + fan_out)))
    return r.normal(shape, std=std, dtype=dtype)


def init_params(config: ModelConfig, rng: Rng, dtype=np.float32,
                kinds: tuple[str, ...] = (PRIVATE, GLOBAL, GROUP)) -> dict[str, np.ndarray]:
    """Initialize the requested partitions; per-name derived RNG streams."""
    return {
        name: _init_value(name, shape, config, rng, dtype)
        for name, shape, tag in param_shapes(config)
        if tag.kind in kinds
    }


@dataclass(frozen=True)
class ParamCounts:
    private: int
    global_: int
    group: int

    @property
    def total(self) -> int:
        return self.private + self.global_ + self.group


def count_params(config: ModelConfig) -> ParamCounts:
    """Exact per-partition parameter counts, derived from the real shapes."""
    sums = {PRIVATE: 0, GLOBAL: 0, GROUP: 0}
    for _, shape, tag in param_shapes(config):
        sums[tag.kind] += int(np.prod(shape))
    return ParamCounts(private=sums[PRIVATE], global_=sums[GLOBAL], group=sums[GROUP])


# ---------------------------------------------------------------------------
# forward pieces


def as_tensors(arrays: dict[str, np.ndarray], trainable: bool = True) -> dict[str, T.Tensor]:
    return {k: T.Tensor(v, requires_grad=trainable) for k, v in arrays.items()}


def attention_mask(valid: np.ndarray, dtype=np.float32) -> np.ndarray:
    """Additive mask [B,T,T]: query t sees keys <= t that are valid.

    The diagonal is always open so padding query rows still have one
    finite key and softmax stays well defined.
    """
    B, t = valid.shape
    causal = np.tril(np.ones((t, t), dtype=bool))
    allowed = causal[None, :, :] & (valid[:, None, :].astype(bool) | np.eye(t, dtype=bool)[None])
    return np.where(allowed, 0.0, MASK_OFF).astype(dtype)


def embed_sequence(attrs: np.ndarray, params: dict[str, T.Tensor],
                   config: ModelConfig) -> T.Tensor:
    """[B,T,n_attrs] int ids -> [B,T,width] via per-attribute concat + positions."""
    B, t, n_attrs = attrs.shape
    if n_attrs != config.n_attrs:
        raise ContractError(f"expected {config.n_attrs} attribute columns, got {n_attrs}")
    if t > config.max_seq_len:
        raise ContractError(f"sequence length {t} exceeds max_seq_len {config.max_seq_len}")
    parts = [T.embedding_lookup(params[f"item_emb.{a}"], attrs[:, :, a]) for a in range(n_attrs)]
    x = parts[0] if len(parts) == 1 else T.concat(parts, axis=-1)
    pos = T.embedding_lookup(params["pos_emb"], np.arange(t))
    return x + pos


def embed_candidates(cand_attrs: np.ndarray, params: dict[str, T.Tensor],
                     config: ModelConfig) -> T.Tensor:
    """[B,n_attrs] int ids -> [B,width], no positional term."""
    parts = [T.embedding_lookup(params[f"item_emb.{a}"], cand_attrs[:, a])
             for a in range(config.n_attrs)]
    return parts[0] if len(parts) == 1 else T.concat(parts, axis=-1)


def _tile_rows(row: T.Tensor, n: int) -> T.Tensor:
    # [1,d] -> [n,d] with gradient accumulation over the batch
    ones = T.Tensor(np.ones((n, 1), dtype=row.data.dtype))
    return T.matmul(ones, row)


def attention_block(x: T.Tensor, params: dict[str, T.Tensor], block: int,
                    mask: np.ndarray, config: ModelConfig,
                    train: bool = False, rng: Rng | None = None) -> T.Tensor:
    """Causal multi-head self-attention with post-norm residual."""
    B, t, d = x.shape
    heads = config.n_heads
    dh = d // heads
    p = lambda s: params[f"block{block}.{s}"]

    def split_heads(m):
        return m.reshape(B, t, heads, dh).transpose((0, 2, 1, 3))

    q = split_heads(T.matmul(x, p("attn.wq")))
    k = split_heads(T.matmul(x, p("attn.wk")))
    v = split_heads(T.matmul(x, p("attn.wv")))
    scores = T.matmul(q, k.transpose((0, 1, 3, 2))) * (1.0 / np.sqrt(dh))
    scores = scores + T.Tensor(mask[:, None, :, :])
    weights = T.softmax(scores, axis=-1)
    ctx = T.matmul(weights, v).transpose((0, 2, 1, 3)).reshape(B, t, d)
    out = T.matmul(ctx, p("attn.wo"))
    if train and config.dropout_p > 0:
        out = T.dropout(out, config.dropout_p, rng)
    return T.layer_norm(x + out, p("ln1.gain"), p("ln1.bias"))


def group_gate(attn_out: T.Tensor, valid: np.ndarray, user_emb: T.Tensor,
               params: dict[str, T.Tensor], block: int,
               config: ModelConfig) -> GateDecision:
    """Masked mean-pool + user embedding -> 2-layer MLP -> softmax over groups.

    Probabilities are averaged over the batch so one forward pass yields a
    single routing decision; ties resolve to the lowest group index.
    """
    if valid.sum() == 0:
        raise DegenerateInputError("group_gate: all-padding sequence")
    B = attn_out.shape[0]
    pooled = T.mean_pool(attn_out, valid)
    gin = T.concat([pooled, _tile_rows(user_emb, B)], axis=-1)
    p = lambda s: params[f"block{block}.gate.{s}"]
    hidden = T.relu(T.matmul(gin, p("w1")) + p("b1"))
    logits = T.matmul(hidden, p("w2")) + p("b2")
    probs = T.softmax(logits, axis=-1).mean(axis=0)
    return GateDecision(probs=probs, group=int(np.argmax(probs.data)))


def _ffn(x: T.Tensor, params: dict[str, T.Tensor], prefix: str) -> T.Tensor:
    h = T.relu(T.matmul(x, params[f"{prefix}.w1"]) + params[f"{prefix}.b1"])
    return T.matmul(h, params[f"{prefix}.w2"]) + params[f"{prefix}.b2"]


def dual_ffn_block(attn_out: T.Tensor, gate: GateDecision,
                   params: dict[str, T.Tensor], block: int, config: ModelConfig,
                   train: bool = False, rng: Rng | None = None) -> T.Tensor:
    """LayerNorm(attn + FFN_user(attn) + FFN_group(attn)) with hard routing."""
    fu = _ffn(attn_out, params, f"block{block}.ffn_u")
    if train and config.dropout_p > 0:
        fu = T.dropout(fu, config.dropout_p, rng)
    y = attn_out + fu
    if config.group_ffn_enabled:
        if not 0 <= gate.group < config.n_groups:
            raise ContractError(f"group index {gate.group} outside 0..{config.n_groups - 1}")
        fg = _ffn(attn_out, params, f"block{block}.ffn_g{gate.group}")
        if train and config.dropout_p > 0:
            fg = T.dropout(fg, config.dropout_p, rng)
        y = y + fg
    p = lambda s: params[f"block{block}.{s}"]
    return T.layer_norm(y, p("ln2.gain"), p("ln2.bias"))


def forward(params: dict[str, T.Tensor], attrs: np.ndarray, valid: np.ndarray,
            cand_attrs: np.ndarray, config: ModelConfig,
            train: bool = False, rng: Rng | None = None) -> tuple[T.Tensor, list[GateDecision]]:
    """Score a batch of (history, candidate) pairs for one user.

    attrs: [B,T,n_attrs] left-padded item attribute ids; valid: [B,T] 0/1;
    cand_attrs: [B,n_attrs]. Returns logits [B] plus one GateDecision per block.
    """
    if attrs.ndim != 3 or attrs.shape[1] == 0:
        raise DegenerateInputError("forward: empty sequence")
    if (np.asarray(valid).sum(axis=-1) == 0).any():
        raise DegenerateInputError("forward: a sequence has no valid positions")
    if train and config.dropout_p > 0 and rng is None:
        raise ContractError("forward: training with dropout requires an rng")
    B, t, _ = attrs.shape
    mask = attention_mask(valid, dtype=params["pos_emb"].data.dtype)
    x = embed_sequence(attrs, params, config)
    if train and config.dropout_p > 0:
        x = T.dropout(x, config.dropout_p, rng)
    gates: list[GateDecision] = []
    for l in range(config.n_blocks):
        a = attention_block(x, params, l, mask, config, train, rng)
        gate = group_gate(a, valid, params["user_emb"], params, l, config)
        gates.append(gate)
        x = dual_ffn_block(a, gate, params, l, config, train, rng)
    x_last = T.slice_axis(x, 1, t - 1, t).reshape(B, config.width)
    user = _tile_rows(params["user_emb"], B)
    cand = embed_candidates(cand_attrs, params, config)
    h = T.concat([x_last, user, cand], axis=-1)
    n_layers = len(config.pred_hidden) + 1
    for i in range(n_layers):
        h = T.matmul(h, params[f"pred.w{i}"]) + params[f"pred.b{i}"]
        if i < n_layers - 1:
            h = T.relu(h)
    return h.reshape(B), gates
