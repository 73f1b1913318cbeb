"""Toy masked-LM training: synthetic corpus, objective, optimizer, distillation.

The model is a small encoder: token embeddings, a stack of residual blocks
(attention plus an FFN that is dense, switch-routed, or a top-2 mixture),
and an output projection. Training masks a fraction of each sequence,
replaces the masked tokens with a sentinel, and minimizes cross-entropy at
the masked positions plus the routers' balance penalties. The synthetic
corpus draws each sequence from one of K cluster-specific bigram processes
over disjoint token ranges, so there is genuine structure for experts to
specialize on.

Determinism contract: every random draw during a run derives from
(seed, purpose label, step), never from call order, so two runs with one
config produce bit-identical metric streams and a resumed run continues the
interrupted one exactly.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field, replace

import numpy as np

from .router import RouterConfig
from .switch_layer import (
    AttentionConfig,
    AttentionWeights,
    SwitchLayerParams,
    attention_bwd,
    attention_fwd,
    dense_ffn_bwd,
    dense_ffn_fwd,
    init_attention_weights,
    init_switch_layer_params,
    moe_topk_ffn_bwd,
    moe_topk_ffn_fwd,
    switch_ffn_bwd,
    switch_ffn_fwd,
)
from .tensor_core import (
    InvalidArgumentError,
    NumericError,
    RngStream,
    softmax,
    trunc_normal_init,
)

__all__ = [
    "TrainConfig",
    "MetricRow",
    "SyntheticCorpus",
    "ToyModel",
    "AdamState",
    "gen_synthetic_corpus",
    "sample_sequences",
    "mask_tokens",
    "build_model",
    "named_parameters",
    "model_fwd",
    "model_bwd",
    "train_step",
    "train",
    "evaluate",
    "batch_for_step",
    "neg_log_perplexity",
    "distill_loss",
    "distill_loss_backward",
    "init_student_from_teacher",
    "distill_train",
]

FFN_KINDS = ("dense", "switch", "moe2")
ATTENTION_KINDS = ("dense", "switch")
MODES = ("pretrain", "finetune", "distill")

# Fine-tuning regularization profile: low dropout outside the experts, much
# higher inside them.
FINETUNE_DROPOUT = 0.1
FINETUNE_EXPERT_DROPOUT = 0.4


@dataclass
class TrainConfig:
    """One seeded experiment: data, model shape, and optimization settings."""

    vocab: int = 64
    seq_len: int = 16
    batch_tokens: int = 128
    steps: int = 200
    learning_rate: float = 1e-3
    mask_rate: float = 0.15
    sentinel_id: int | None = None  # defaults to vocab - 1
    seed: int = 0
    mode: str = "pretrain"
    # model shape
    d_model: int = 32
    d_ff: int = 64
    num_layers: int = 2
    num_heads: int = 1
    ffn_kind: str = "dense"
    attention_kind: str = "dense"
    expert_every: int = 2  # expert FFN at every expert_every-th block
    init_scale: float = 0.1
    dropout_rate: float | None = None  # None = mode default
    expert_dropout_rate: float | None = None  # None = mode default
    tie_embeddings: bool = False
    # synthetic data
    num_clusters: int = 4
    corpus_size: int = 512
    # distillation
    hard_weight: float = 0.75

    def __post_init__(self) -> None:
        if self.mode not in MODES:
            raise InvalidArgumentError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.ffn_kind not in FFN_KINDS:
            raise InvalidArgumentError(
                f"ffn_kind must be one of {FFN_KINDS}, got {self.ffn_kind!r}"
            )
        if self.attention_kind not in ATTENTION_KINDS:
            raise InvalidArgumentError(
                f"attention_kind must be one of {ATTENTION_KINDS}, got {self.attention_kind!r}"
            )
        if not 0.0 < self.mask_rate < 1.0:
            raise InvalidArgumentError(
                f"mask_rate must be in (0, 1), got {self.mask_rate}"
            )
        if self.sentinel_id is None:
            self.sentinel_id = self.vocab - 1
        if not 0 <= self.sentinel_id < self.vocab:
            raise InvalidArgumentError(
                f"sentinel_id {self.sentinel_id} outside vocab of {self.vocab}"
            )
        if self.batch_tokens % self.seq_len != 0:
            raise InvalidArgumentError(
                f"batch_tokens {self.batch_tokens} not a multiple of seq_len {self.seq_len}"
            )
        if self.expert_every < 1:
            raise InvalidArgumentError(f"expert_every must be >= 1, got {self.expert_every}")
        if not 0.0 <= self.hard_weight <= 1.0:
            raise InvalidArgumentError(
                f"hard_weight must be in [0, 1], got {self.hard_weight}"
            )

    @property
    def sequences_per_batch(self) -> int:
        return self.batch_tokens // self.seq_len

    def resolved_dropout(self) -> tuple[float, float]:
        """(non-expert, expert) dropout rates after applying mode defaults."""
        d = self.dropout_rate
        ed = self.expert_dropout_rate
        if self.mode == "finetune":
            d = FINETUNE_DROPOUT if d is None else d
            ed = FINETUNE_EXPERT_DROPOUT if ed is None else ed
        else:
            d = 0.0 if d is None else d
            ed = 0.0 if ed is None else ed
        return d, ed


@dataclass
class MetricRow:
    """One training step's record; total = cross_entropy + aux (1e-6)."""

    step: int
    total_loss: float
    cross_entropy: float
    aux_loss: float
    neg_log_perplexity: float
    dropped_fraction: float
    expert_fractions: np.ndarray | None = None


# ---------------------------------------------------------------------------
# Synthetic corpus
# ---------------------------------------------------------------------------


@dataclass
class SyntheticCorpus:
    sequences: np.ndarray  # [size, seq_len] int64
    cluster_ids: np.ndarray  # [size]
    transitions: list[np.ndarray]  # per-cluster bigram tables over its range
    token_ranges: list[tuple[int, int]]  # half-open [lo, hi) per cluster

    @property
    def size(self) -> int:
        return int(self.sequences.shape[0])


def gen_synthetic_corpus(
    vocab: int, num_clusters: int, seq_len: int, size: int, rng: RngStream,
    sharpness: float = 3.0,
) -> SyntheticCorpus:
    """Sequences from K cluster-specific bigram chains over disjoint token ranges.

    The top token id is reserved for the mask sentinel; the rest splits
    evenly into per-cluster ranges, each with its own randomly drawn
    transition table (``sharpness`` scales the table logits: larger means
    more peaked rows and more per-cluster structure to memorize). A sequence
    picks a cluster, a uniform start token in that cluster's range, and then
    walks the chain.
    """
    if num_clusters < 1:
        raise InvalidArgumentError(f"num_clusters must be >= 1, got {num_clusters}")
    if num_clusters > vocab // 4:
        raise InvalidArgumentError(
            f"num_clusters={num_clusters} too large for vocab={vocab} (need K <= V/4)"
        )
    usable = vocab - 1  # reserve the final id for the sentinel
    width = usable // num_clusters
    ranges = [(k * width, (k + 1) * width) for k in range(num_clusters)]

    transitions = []
    for k in range(num_clusters):
        logits = sharpness * rng.substream(f"cluster{k}/table").normal((width, width))
        transitions.append(softmax(logits, axis=-1))

    sequences, cluster_ids = _walk_chains(transitions, ranges, seq_len, size, rng)
    return SyntheticCorpus(sequences, cluster_ids, transitions, ranges)


def sample_sequences(corpus: SyntheticCorpus, size: int, rng: RngStream) -> SyntheticCorpus:
    """Fresh sequences from an existing corpus's cluster processes (held-out data)."""
    seq_len = corpus.sequences.shape[1] if corpus.sequences.ndim == 2 else 0
    sequences, cluster_ids = _walk_chains(
        corpus.transitions, corpus.token_ranges, seq_len, size, rng
    )
    return SyntheticCorpus(sequences, cluster_ids, corpus.transitions, corpus.token_ranges)


def _walk_chains(
    transitions: list[np.ndarray],
    ranges: list[tuple[int, int]],
    seq_len: int,
    size: int,
    rng: RngStream,
) -> tuple[np.ndarray, np.ndarray]:
    num_clusters = len(transitions)
    width = transitions[0].shape[0] if transitions else 0
    sequences = np.zeros((size, seq_len), dtype=np.int64)
    cluster_ids = np.zeros(size, dtype=np.int64)
    if size > 0 and seq_len > 0:
        cluster_ids = rng.substream("clusters").integers(0, num_clusters, size)
        starts = rng.substream("starts").uniform(size)
        chain = rng.substream("chain")
        current = (starts * width).astype(np.int64)  # offset within the range
        lo = np.array([ranges[c][0] for c in cluster_ids])
        sequences[:, 0] = lo + current
        for pos in range(1, seq_len):
            u = chain.uniform(size)
            nxt = np.zeros(size, dtype=np.int64)
            for k in range(num_clusters):
                rows = cluster_ids == k
                if not rows.any():
                    continue
                cdf = np.cumsum(transitions[k][current[rows]], axis=1)
                cdf[:, -1] = 1.0
                nxt[rows] = (u[rows, None] > cdf).sum(axis=1)
            current = nxt
            sequences[:, pos] = lo + current
    return sequences, cluster_ids


def mask_tokens(
    seq: np.ndarray, rate: float, sentinel: int, rng: RngStream
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Replace floor(rate * len) positions (at least one) with the sentinel.

    Returns (masked sequence, masked positions in ascending order, original
    ids at those positions).
    """
    seq = np.asarray(seq)
    if seq.ndim != 1 or seq.size == 0:
        raise InvalidArgumentError(f"mask_tokens requires a nonempty 1-D sequence, got {seq.shape}")
    if not 0.0 < rate < 1.0:
        raise InvalidArgumentError(f"mask rate must be in (0, 1), got {rate}")
    n_mask = max(1, int(rate * seq.size))
    positions = np.sort(rng.choice_without_replacement(seq.size, n_mask))
    masked = seq.copy()
    masked[positions] = sentinel
    return masked, positions, seq[positions]


@dataclass
class Batch:
    input_ids: np.ndarray  # [S, L] with sentinels in place
    target_rows: np.ndarray  # flat masked-position coordinates
    target_cols: np.ndarray
    target_ids: np.ndarray


def batch_for_step(
    corpus: SyntheticCorpus, step: int, config: TrainConfig
) -> Batch:
    """Deterministic batch: epoch-shuffled sequence picks plus per-step masking."""
    s_per_batch = config.sequences_per_batch
    if corpus.size % s_per_batch != 0:
        raise InvalidArgumentError(
            f"corpus size {corpus.size} must be a multiple of the "
            f"{s_per_batch} sequences per batch"
        )
    root = RngStream(config.seed)
    batches_per_epoch = corpus.size // s_per_batch
    epoch, offset = divmod(step, batches_per_epoch)
    order = root.substream(f"epoch{epoch}/order").permutation(corpus.size)
    rows = order[offset * s_per_batch : (offset + 1) * s_per_batch]
    seqs = corpus.sequences[rows]

    mask_rng = root.substream(f"step{step}/mask")
    inputs = np.empty_like(seqs)
    t_rows, t_cols, t_ids = [], [], []
    for i in range(s_per_batch):
        masked, pos, ids = mask_tokens(seqs[i], config.mask_rate, config.sentinel_id, mask_rng)
        inputs[i] = masked
        t_rows.append(np.full(pos.size, i))
        t_cols.append(pos)
        t_ids.append(ids)
    return Batch(
        inputs,
        np.concatenate(t_rows),
        np.concatenate(t_cols),
        np.concatenate(t_ids),
    )


# ---------------------------------------------------------------------------
# Model
# ---------------------------------------------------------------------------


@dataclass
class BlockParams:
    attn_weights: AttentionWeights
    attn_q_switch: SwitchLayerParams | None
    ffn_kind: str  # dense | switch | moe2
    ffn_w_in: np.ndarray | None  # dense FFN weights
    ffn_w_out: np.ndarray | None
    ffn_switch: SwitchLayerParams | None


@dataclass
class ToyModel:
    config: TrainConfig
    router_config: RouterConfig
    embedding: np.ndarray  # [V, d]
    blocks: list[BlockParams]
    out_proj: np.ndarray | None  # [d, V]; None when tied to the embedding

    def expert_block_indices(self) -> list[int]:
        return [i for i, b in enumerate(self.blocks) if b.ffn_kind != "dense"]


def _is_expert_position(i: int, config: TrainConfig) -> bool:
    return config.ffn_kind != "dense" and (i % config.expert_every == config.expert_every - 1)


def build_model(
    config: TrainConfig, router_config: RouterConfig, rng: RngStream
) -> ToyModel:
    """Initialize a model; expert FFNs sit at every ``expert_every``-th block."""
    d, dff, v = config.d_model, config.d_ff, config.vocab
    scale = config.init_scale
    dropout, expert_dropout = config.resolved_dropout()

    embedding = trunc_normal_init((v, d), scale, d, rng.substream("embedding"))
    blocks = []
    for i in range(config.num_layers):
        brng = rng.substream(f"block{i}")
        q_switch = None
        if config.attention_kind == "switch":
            attn_weights = init_attention_weights(d, brng.substream("attn"), scale, dense_q=False)
            q_switch = init_switch_layer_params(
                d, dff, router_config.num_experts, brng.substream("attn.q"),
                scale, expert_form="linear", expert_dropout_rate=expert_dropout,
            )
        else:
            attn_weights = init_attention_weights(d, brng.substream("attn"), scale, dense_q=True)

        if _is_expert_position(i, config):
            ffn_switch = init_switch_layer_params(
                d, dff, router_config.num_experts, brng.substream("ffn"),
                scale, dropout_rate=dropout, expert_dropout_rate=expert_dropout,
            )
            kind = config.ffn_kind
            w_in = w_out = None
        else:
            ffn_switch = None
            kind = "dense"
            w_in = trunc_normal_init((d, dff), scale, d, brng.substream("ffn.w_in"))
            w_out = trunc_normal_init((dff, d), scale, dff, brng.substream("ffn.w_out"))
        blocks.append(BlockParams(attn_weights, q_switch, kind, w_in, w_out, ffn_switch))

    out_proj = None
    if not config.tie_embeddings:
        out_proj = trunc_normal_init((d, v), scale, d, rng.substream("out_proj"))
    return ToyModel(config, router_config, embedding, blocks, out_proj)


def named_parameters(model: ToyModel) -> dict[str, np.ndarray]:
    """Stable name -> array view of every trainable tensor."""
    params: dict[str, np.ndarray] = {"embedding": model.embedding}
    for i, blk in enumerate(model.blocks):
        p = f"block{i}"
        w = blk.attn_weights
        if w.w_q is not None:
            params[f"{p}.attn.w_q"] = w.w_q
        params[f"{p}.attn.w_k"] = w.w_k
        params[f"{p}.attn.w_v"] = w.w_v
        params[f"{p}.attn.w_o"] = w.w_o
        if blk.attn_q_switch is not None:
            params[f"{p}.attn.q.w_router"] = blk.attn_q_switch.w_router
            params[f"{p}.attn.q.w_in"] = blk.attn_q_switch.w_in
            if blk.attn_q_switch.w_out is not None:
                params[f"{p}.attn.q.w_out"] = blk.attn_q_switch.w_out
        if blk.ffn_kind == "dense":
            params[f"{p}.ffn.w_in"] = blk.ffn_w_in
            params[f"{p}.ffn.w_out"] = blk.ffn_w_out
        else:
            params[f"{p}.ffn.w_router"] = blk.ffn_switch.w_router
            params[f"{p}.ffn.w_in"] = blk.ffn_switch.w_in
            params[f"{p}.ffn.w_out"] = blk.ffn_switch.w_out
    if model.out_proj is not None:
        params["out_proj"] = model.out_proj
    return params


def set_parameter(model: ToyModel, name: str, value: np.ndarray) -> None:
    """Overwrite one named tensor in place (shape-checked)."""
    params = named_parameters(model)
    if name not in params:
        raise InvalidArgumentError(f"unknown parameter {name!r}")
    if params[name].shape != value.shape:
        raise InvalidArgumentError(
            f"parameter {name!r} has shape {params[name].shape}, got {value.shape}"
        )
    params[name][...] = value


# ---------------------------------------------------------------------------
# Forward / backward
# ---------------------------------------------------------------------------


@dataclass
class ModelCache:
    input_ids: np.ndarray
    block_inputs: list[np.ndarray]  # hidden state entering each block
    attn_caches: list
    post_attn: list[np.ndarray]
    ffn_caches: list
    final_hidden: np.ndarray
    layer_mode: str


@dataclass
class ForwardResult:
    logits: np.ndarray  # [S, L, V]
    aux_loss: float
    dropped_fraction: float
    expert_fractions: np.ndarray | None
    cache: ModelCache


def _layer_mode(config: TrainConfig, training: bool) -> str:
    return "train" if training else "eval"


def model_fwd(
    model: ToyModel, input_ids: np.ndarray, rng: RngStream, training: bool = True
) -> ForwardResult:
    config = model.config
    mode = _layer_mode(config, training)
    s, l = input_ids.shape
    d = config.d_model
    dropout, _ = config.resolved_dropout()

    h = model.embedding[input_ids]
    block_inputs, attn_caches, post_attn, ffn_caches = [], [], [], []
    aux_total = 0.0
    dropped, fractions = [], []
    attn_config = AttentionConfig(config.num_heads, "linear", model.router_config)

    for i, blk in enumerate(model.blocks):
        block_inputs.append(h)
        attn_out, a_cache = attention_fwd(
            h, blk.attn_weights, attn_config, rng.substream(f"block{i}.attn"),
            mode, q_params=blk.attn_q_switch,
        )
        aux_total += attn_out.aux_loss
        if blk.attn_q_switch is not None:
            dropped.append(attn_out.dropped_fraction)
            fractions.append(attn_out.stats.f)
        h = h + attn_out.y
        post_attn.append(h)
        attn_caches.append(a_cache)

        flat = h.reshape(s * l, d)
        if blk.ffn_kind == "dense":
            y, f_cache = dense_ffn_fwd(
                flat, blk.ffn_w_in, blk.ffn_w_out, dropout,
                rng.substream(f"block{i}.ffn.dropout"), mode,
            )
        elif blk.ffn_kind == "switch":
            out, f_cache = switch_ffn_fwd(
                flat, blk.ffn_switch, model.router_config,
                rng.substream(f"block{i}.ffn"), mode,
            )
            y = out.y
            aux_total += out.aux_loss
            dropped.append(out.dropped_fraction)
            fractions.append(out.stats.f)
        else:  # moe2
            out, f_cache = moe_topk_ffn_fwd(
                flat, blk.ffn_switch, 2, model.router_config,
                rng.substream(f"block{i}.ffn"), mode,
            )
            y = out.y
            aux_total += out.aux_loss
            dropped.append(out.dropped_fraction)
            fractions.append(out.stats.f)
        h = h + y.reshape(s, l, d)
        ffn_caches.append(f_cache)

    logits = h.reshape(s * l, d) @ (
        model.out_proj if model.out_proj is not None else model.embedding.T
    )
    logits = logits.reshape(s, l, -1)

    cache = ModelCache(input_ids, block_inputs, attn_caches, post_attn, ffn_caches, h, mode)
    return ForwardResult(
        logits,
        aux_total,
        float(np.mean(dropped)) if dropped else 0.0,
        np.mean(fractions, axis=0) if fractions else None,
        cache,
    )


def model_bwd(
    model: ToyModel, cache: ModelCache, d_logits: np.ndarray, aux_weight: float = 1.0
) -> dict[str, np.ndarray]:
    """Backprop a [S, L, V] logits gradient; returns grads keyed like named_parameters."""
    config = model.config
    s, l = cache.input_ids.shape
    d = config.d_model
    grads: dict[str, np.ndarray] = {}

    flat_final = cache.final_hidden.reshape(s * l, d)
    dl = d_logits.reshape(s * l, -1)
    if model.out_proj is not None:
        grads["out_proj"] = flat_final.T @ dl
        dh = (dl @ model.out_proj.T).reshape(s, l, d)
        d_emb = np.zeros_like(model.embedding)
    else:
        d_emb = dl.T @ flat_final  # logits = h @ E^T contributes to the embedding
        dh = (dl @ model.embedding).reshape(s, l, d)

    for i in reversed(range(len(model.blocks))):
        blk = model.blocks[i]
        p = f"block{i}"
        flat_dh = dh.reshape(s * l, d)
        if blk.ffn_kind == "dense":
            dx, dw_in, dw_out = dense_ffn_bwd(flat_dh, cache.ffn_caches[i])
            grads[f"{p}.ffn.w_in"] = dw_in
            grads[f"{p}.ffn.w_out"] = dw_out
        else:
            bwd = switch_ffn_bwd if blk.ffn_kind == "switch" else moe_topk_ffn_bwd
            g = bwd(flat_dh, cache.ffn_caches[i], aux_weight)
            dx = g["x"]
            grads[f"{p}.ffn.w_router"] = g["w_router"]
            grads[f"{p}.ffn.w_in"] = g["w_in"]
            grads[f"{p}.ffn.w_out"] = g["w_out"]
        dh = dh + dx.reshape(s, l, d)  # residual: gradient flows to both paths

        a_grads = attention_bwd(dh, cache.attn_caches[i], aux_weight)
        grads[f"{p}.attn.w_k"] = a_grads["w_k"]
        grads[f"{p}.attn.w_v"] = a_grads["w_v"]
        grads[f"{p}.attn.w_o"] = a_grads["w_o"]
        if blk.attn_q_switch is None:
            grads[f"{p}.attn.w_q"] = a_grads["w_q"]
        else:
            grads[f"{p}.attn.q.w_router"] = a_grads["q.w_router"]
            grads[f"{p}.attn.q.w_in"] = a_grads["q.w_in"]
            if "q.w_out" in a_grads:
                grads[f"{p}.attn.q.w_out"] = a_grads["q.w_out"]
        dh = dh + a_grads["x"]

    np.add.at(d_emb, cache.input_ids.reshape(-1), dh.reshape(s * l, d))
    grads["embedding"] = d_emb
    return grads


def masked_cross_entropy(
    logits: np.ndarray, batch: Batch
) -> tuple[float, np.ndarray]:
    """Mean CE over masked positions; also returns d(loss)/d(logits)."""
    rows, cols, ids = batch.target_rows, batch.target_cols, batch.target_ids
    picked = logits[rows, cols]  # [n_targets, V]
    shifted = picked - picked.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1))
    logp = shifted[np.arange(ids.size), ids] - logz
    ce = float(-logp.mean())
    probs = softmax(picked, axis=-1)
    d_picked = probs.copy()
    d_picked[np.arange(ids.size), ids] -= 1.0
    d_picked /= ids.size
    d_logits = np.zeros_like(logits)
    np.add.at(d_logits, (rows, cols), d_picked)
    return ce, d_logits


def neg_log_perplexity(logits: np.ndarray, target_ids: np.ndarray) -> float:
    """Mean log-probability of the targets; higher is better."""
    logits = np.asarray(logits)
    ids = np.asarray(target_ids).reshape(-1)
    if ids.size == 0:
        raise InvalidArgumentError("neg_log_perplexity requires at least one target")
    flat = logits.reshape(ids.size, logits.shape[-1])
    shifted = flat - flat.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1))
    logp = shifted[np.arange(ids.size), ids] - logz
    return float(logp.mean())


# ---------------------------------------------------------------------------
# Optimization
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_update(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float,
) -> None:
    state.step += 1
    t = state.step
    for name, p in params.items():
        g = grads[name].astype(np.float32)
        if name not in state.m:
            state.m[name] = np.zeros_like(p, dtype=np.float32)
            state.v[name] = np.zeros_like(p, dtype=np.float32)
        m, v = state.m[name], state.v[name]
        m *= state.beta1
        m += (1 - state.beta1) * g
        v *= state.beta2
        v += (1 - state.beta2) * g * g
        m_hat = m / (1 - state.beta1**t)
        v_hat = v / (1 - state.beta2**t)
        p -= (lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(p.dtype)


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------


def _step_rng(config: TrainConfig, step: int) -> RngStream:
    return RngStream(config.seed).substream(f"step{step}/model")


def train_step(
    model: ToyModel, batch: Batch, opt_state: AdamState, config: TrainConfig
) -> MetricRow:
    """One forward/backward/update; mutates model and opt_state in place."""
    step = opt_state.step
    rng = _step_rng(config, step)
    fwd = model_fwd(model, batch.input_ids, rng, training=True)
    ce, d_logits = masked_cross_entropy(fwd.logits, batch)
    total = ce + fwd.aux_loss
    if not np.isfinite(total):
        raise NumericError(
            f"non-finite loss at step {step}: ce={ce}, aux={fwd.aux_loss}"
        )
    grads = model_bwd(model, fwd.cache, d_logits, aux_weight=1.0)
    adam_update(named_parameters(model), grads, opt_state, config.learning_rate)
    nlp = neg_log_perplexity(fwd.logits[batch.target_rows, batch.target_cols], batch.target_ids)
    return MetricRow(step, total, ce, fwd.aux_loss, nlp, fwd.dropped_fraction, fwd.expert_fractions)


def train(
    config: TrainConfig,
    router_config: RouterConfig,
    corpus: SyntheticCorpus | None = None,
    model: ToyModel | None = None,
    opt_state: AdamState | None = None,
    start_step: int = 0,
) -> tuple[ToyModel, AdamState, list[MetricRow]]:
    """Run (or resume) a seeded training loop; returns the metric stream."""
    root = RngStream(config.seed)
    if corpus is None:
        corpus = gen_synthetic_corpus(
            config.vocab, config.num_clusters, config.seq_len, config.corpus_size,
            root.substream("corpus"),
        )
    if model is None:
        model = build_model(config, router_config, root.substream("init"))
    if opt_state is None:
        opt_state = AdamState(step=start_step)
    rows = []
    for step in range(start_step, config.steps):
        batch = batch_for_step(corpus, step, config)
        rows.append(train_step(model, batch, opt_state, config))
    return model, opt_state, rows


def evaluate(
    model: ToyModel,
    config: TrainConfig,
    corpus: SyntheticCorpus | None = None,
    num_sequences: int = 256,
) -> MetricRow:
    """Deterministic eval on held-out sequences from the training distribution.

    Rebuilds the seeded training corpus's cluster processes and samples fresh
    sequences from them, so the score measures generalization on the same
    task, not memorization of the training set. No noise, no updates.
    """
    root = RngStream(config.seed)
    if corpus is None:
        corpus = gen_synthetic_corpus(
            config.vocab, config.num_clusters, config.seq_len, 0,
            root.substream("corpus"),
        )
    heldout = sample_sequences(corpus, num_sequences, root.substream("eval_sequences"))
    mask_rng = root.substream("eval_mask")
    seqs = heldout.sequences
    inputs = np.empty_like(seqs)
    t_rows, t_cols, t_ids = [], [], []
    for i in range(seqs.shape[0]):
        masked, pos, ids = mask_tokens(seqs[i], config.mask_rate, config.sentinel_id, mask_rng)
        inputs[i] = masked
        t_rows.append(np.full(pos.size, i))
        t_cols.append(pos)
        t_ids.append(ids)
    batch = Batch(inputs, np.concatenate(t_rows), np.concatenate(t_cols), np.concatenate(t_ids))
    fwd = model_fwd(model, batch.input_ids, root.substream("eval_model"), training=False)
    ce, _ = masked_cross_entropy(fwd.logits, batch)
    nlp = neg_log_perplexity(fwd.logits[batch.target_rows, batch.target_cols], batch.target_ids)
    return MetricRow(-1, ce + fwd.aux_loss, ce, fwd.aux_loss, nlp, fwd.dropped_fraction, fwd.expert_fractions)


# ---------------------------------------------------------------------------
# Distillation
# ---------------------------------------------------------------------------


def distill_loss(
    student_logits: np.ndarray,
    teacher_logits: np.ndarray,
    target_ids: np.ndarray,
    hard_weight: float = 0.75,
) -> float:
    """hard_weight * CE(student, targets) + (1 - hard_weight) * CE(student, teacher).

    The teacher distribution is a constant target; equivalently this is the
    cross-entropy of the student against the mixture
    hard_weight * one_hot(target) + (1 - hard_weight) * softmax(teacher).
    """
    loss, _ = _distill_loss_and_grad(student_logits, teacher_logits, target_ids, hard_weight)
    return loss


def distill_loss_backward(
    student_logits: np.ndarray,
    teacher_logits: np.ndarray,
    target_ids: np.ndarray,
    hard_weight: float = 0.75,
) -> np.ndarray:
    _, grad = _distill_loss_and_grad(student_logits, teacher_logits, target_ids, hard_weight)
    return grad


def _distill_loss_and_grad(
    student_logits: np.ndarray,
    teacher_logits: np.ndarray,
    target_ids: np.ndarray,
    hard_weight: float,
) -> tuple[float, np.ndarray]:
    student_logits = np.asarray(student_logits)
    teacher_logits = np.asarray(teacher_logits)
    if student_logits.shape != teacher_logits.shape:
        raise InvalidArgumentError(
            f"logit shapes differ: student {student_logits.shape}, "
            f"teacher {teacher_logits.shape}"
        )
    ids = np.asarray(target_ids).reshape(-1)
    n = ids.size
    flat_s = student_logits.reshape(n, student_logits.shape[-1])
    flat_t = teacher_logits.reshape(n, teacher_logits.shape[-1])

    shifted = flat_s - flat_s.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - logz
    q = softmax(flat_t, axis=-1)
    target = hard_weight * np.eye(flat_s.shape[1], dtype=flat_s.dtype)[ids] + (1 - hard_weight) * q
    loss = float(-(target * logp).sum(axis=1).mean())
    grad = (np.exp(logp) - target) / n
    return loss, grad.reshape(student_logits.shape)


def init_student_from_teacher(teacher: ToyModel, student: ToyModel) -> ToyModel:
    """Copy every non-expert weight from teacher into a fresh student.

    Embeddings, attention projections, dense FFNs at non-expert positions,
    and the output projection transfer; the student's FFNs at the teacher's
    expert positions keep their fresh initialization (no expert weight is
    copied, in any form).
    """
    if len(teacher.blocks) != len(student.blocks):
        raise InvalidArgumentError(
            f"block counts differ: teacher {len(teacher.blocks)}, student {len(student.blocks)}"
        )
    out = copy.deepcopy(student)

    def copy_tensor(dst: np.ndarray, src: np.ndarray, name: str) -> None:
        if dst.shape != src.shape:
            raise InvalidArgumentError(
                f"{name}: teacher shape {src.shape} does not match student {dst.shape}"
            )
        dst[...] = src

    copy_tensor(out.embedding, teacher.embedding, "embedding")
    if teacher.out_proj is not None and out.out_proj is not None:
        copy_tensor(out.out_proj, teacher.out_proj, "out_proj")
    for i, (tb, sb) in enumerate(zip(teacher.blocks, out.blocks)):
        name = f"block{i}"
        copy_tensor(sb.attn_weights.w_k, tb.attn_weights.w_k, f"{name}.attn.w_k")
        copy_tensor(sb.attn_weights.w_v, tb.attn_weights.w_v, f"{name}.attn.w_v")
        copy_tensor(sb.attn_weights.w_o, tb.attn_weights.w_o, f"{name}.attn.w_o")
        if tb.attn_weights.w_q is not None and sb.attn_weights.w_q is not None:
            copy_tensor(sb.attn_weights.w_q, tb.attn_weights.w_q, f"{name}.attn.w_q")
        if tb.ffn_kind == "dense" and sb.ffn_kind == "dense":
            copy_tensor(sb.ffn_w_in, tb.ffn_w_in, f"{name}.ffn.w_in")
            copy_tensor(sb.ffn_w_out, tb.ffn_w_out, f"{name}.ffn.w_out")
        # expert positions: student keeps its fresh dense init
    return out


def distill_train(
    teacher: ToyModel,
    config: TrainConfig,
    router_config: RouterConfig,
    corpus: SyntheticCorpus | None = None,
    init_from_teacher: bool = True,
) -> tuple[ToyModel, AdamState, list[MetricRow]]:
    """Train a dense student against teacher logits mixed with hard targets.

    Teacher logits are computed in eval mode (no exploration noise, no
    dropout) and treated as constants. The student is all-dense; with
    ``init_from_teacher`` its non-expert weights start from the teacher.
    """
    student_config = replace(config, ffn_kind="dense", attention_kind="dense", mode="distill")
    root = RngStream(config.seed)
    if corpus is None:
        corpus = gen_synthetic_corpus(
            config.vocab, config.num_clusters, config.seq_len, config.corpus_size,
            root.substream("corpus"),
        )
    student = build_model(student_config, router_config, root.substream("student_init"))
    if init_from_teacher:
        student = init_student_from_teacher(teacher, student)

    opt_state = AdamState()
    rows = []
    for step in range(student_config.steps):
        batch = batch_for_step(corpus, step, student_config)
        rng = _step_rng(student_config, step)
        teacher_fwd = model_fwd(
            teacher, batch.input_ids, RngStream(config.seed).substream(f"step{step}/teacher"),
            training=False,
        )
        fwd = model_fwd(student, batch.input_ids, rng, training=True)
        s_logits = fwd.logits[batch.target_rows, batch.target_cols]
        t_logits = teacher_fwd.logits[batch.target_rows, batch.target_cols]
        loss, d_picked = _distill_loss_and_grad(
            s_logits, t_logits, batch.target_ids, student_config.hard_weight
        )
        total = loss + fwd.aux_loss
        if not np.isfinite(total):
            raise NumericError(f"non-finite distillation loss at step {step}")
        d_logits = np.zeros_like(fwd.logits)
        np.add.at(d_logits, (batch.target_rows, batch.target_cols), d_picked)
        grads = model_bwd(student, fwd.cache, d_logits, aux_weight=1.0)
        adam_update(named_parameters(student), grads, opt_state, student_config.learning_rate)
        nlp = neg_log_perplexity(s_logits, batch.target_ids)
        rows.append(
            MetricRow(step, total, loss, fwd.aux_loss, nlp, fwd.dropped_fraction, fwd.expert_fractions)
        )
    return student, opt_state, rows
