"""Hybrid encoder: u unidirectional layers (the first being the embedding
layer) followed by b bidirectional layers, with dual prediction heads.

Offline forward runs the whole stack over a complete sentence. In streaming
mode the unidirectional side is extended one token at a time from per-layer
caches; the bidirectional side is recomputed from the cached unidirectional
encodings whenever a restart is requested. Training optimizes both heads
with equal weight, but the unidirectional head's loss is blocked from
reaching any parameter outside that head.
"""

from __future__ import annotations

import json
from collections import defaultdict
from dataclasses import dataclass, asdict
from typing import Sequence

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Tensor, no_grad
from .data import TaggedSentence, Vocabulary
from .errors import (
    CapacityError,
    ConfigurationError,
    ContractViolation,
    InputError,
    NumericError,
)

UNI_KIND_ATTENTION = "causal-attention"
UNI_KIND_GRU = "gru"

ATTN_PARAM_NAMES = ("wq", "wk", "wv", "wo")
ATTN_BIAS_NAMES = ("bq", "bk", "bv", "bo")


@dataclass(frozen=True)
class HybridConfig:
    """Layer budget and dimensions. ``u + b`` is the total layer count; the
    embedding layer is counted as the first unidirectional layer, so u >= 1.
    b = 0 degenerates to a purely unidirectional model."""

    u: int = 2
    b: int = 2
    d_model: int = 64
    n_heads: int = 4
    d_ffn: int = 128
    vocab_size: int = 32
    n_labels: int = 4
    max_len: int = 64
    uni_kind: str = UNI_KIND_ATTENTION
    seed: int = 0

    def __post_init__(self):
        if self.u < 1:
            raise ConfigurationError("u must be >= 1 (the embedding layer)")
        if self.b < 0:
            raise ConfigurationError("b must be >= 0")
        if self.d_model % self.n_heads != 0:
            raise ConfigurationError("d_model must be divisible by n_heads")
        if self.uni_kind not in (UNI_KIND_ATTENTION, UNI_KIND_GRU):
            raise ConfigurationError(f"unknown uni_kind {self.uni_kind!r}")
        if self.max_len < 1 or self.vocab_size < 1 or self.n_labels < 1:
            raise ConfigurationError("max_len, vocab_size, n_labels must be >= 1")

    @property
    def total_layers(self) -> int:
        return self.u + self.b

    @property
    def n_uni_blocks(self) -> int:
        """Unidirectional layers beyond the embedding layer."""
        return self.u - 1


@dataclass
class EncoderOutputs:
    h_uni: np.ndarray  # [T, d]
    h_bi: np.ndarray  # [T, d]
    uni_logits: np.ndarray  # [T, C]
    bi_logits: np.ndarray  # [T, C]


@dataclass
class StreamStep:
    """Cache-resident quantities produced when one new token is consumed."""

    t: int  # 1-based position of the new token
    h_uni: np.ndarray  # [d]
    q: np.ndarray  # [d] first-bidirectional-layer query row (zeros if b=0)
    k: np.ndarray  # [d] first-bidirectional-layer key row (zeros if b=0)
    attn_scores: np.ndarray  # [H*m] right-aligned, zero-padded per head
    real_scores: int  # how many of the m slots per head are real


class UniState:
    """Per-sentence streaming state: append-only unidirectional caches, the
    cached unidirectional encodings, and the first bidirectional layer's
    cached query/key rows."""

    def __init__(self, model: "HybridEncoder", m: int):
        cfg = model.config
        self.m = m
        self.t = 0
        d = cfg.d_model
        self.h_uni = np.zeros((cfg.max_len, d), dtype=np.float32)
        self.q_rows = np.zeros((cfg.max_len, d), dtype=np.float32)
        self.k_rows = np.zeros((cfg.max_len, d), dtype=np.float32)
        if cfg.uni_kind == UNI_KIND_ATTENTION:
            self.caches = [nn.AttnCache(cfg.max_len, d)
                           for _ in range(cfg.n_uni_blocks)]
        else:
            self.caches = [np.zeros(d, dtype=np.float32)
                           for _ in range(cfg.n_uni_blocks)]


class HybridEncoder:
    """The model under test; owns its parameters and its vocabulary."""

    def __init__(self, config: HybridConfig, vocab: Vocabulary,
                 params: nn.ParameterSet | None = None):
        if vocab.n_tokens > config.vocab_size or vocab.n_labels > config.n_labels:
            raise ConfigurationError(
                "vocabulary does not fit the configured table sizes")
        self.config = config
        self.vocab = vocab
        self.params = params if params is not None else self._init_params()

    # -- construction ---------------------------------------------------------
    def _init_params(self) -> nn.ParameterSet:
        cfg = self.config
        rng = np.random.default_rng(cfg.seed)
        p = nn.ParameterSet()
        d, f = cfg.d_model, cfg.d_ffn
        p.add("embed/token", nn.init_embedding(rng, cfg.vocab_size, d))
        p.add("embed/pos", nn.init_embedding(rng, cfg.max_len, d))
        p.add("embed/indicator", nn.init_embedding(rng, 2, d))
        for i in range(cfg.n_uni_blocks):
            if cfg.uni_kind == UNI_KIND_ATTENTION:
                self._add_attn_block(p, rng, f"uni{i}/")
            else:
                p.add(f"uni{i}/gru/wi", nn.init_weight(rng, d, 3 * d))
                p.add(f"uni{i}/gru/wh", nn.init_weight(rng, d, 3 * d))
                p.add(f"uni{i}/gru/bi", np.zeros(3 * d, dtype=np.float32))
                p.add(f"uni{i}/gru/bh", np.zeros(3 * d, dtype=np.float32))
        for j in range(cfg.b):
            self._add_attn_block(p, rng, f"bi{j}/")
        p.add("head_uni/w", nn.init_weight(rng, d, cfg.n_labels))
        p.add("head_uni/b", np.zeros(cfg.n_labels, dtype=np.float32))
        p.add("head_bi/w", nn.init_weight(rng, d, cfg.n_labels))
        p.add("head_bi/b", np.zeros(cfg.n_labels, dtype=np.float32))
        return p

    def _add_attn_block(self, p: nn.ParameterSet, rng, prefix: str) -> None:
        d, f = self.config.d_model, self.config.d_ffn
        p.add(prefix + "ln1_g", np.ones(d, dtype=np.float32))
        p.add(prefix + "ln1_b", np.zeros(d, dtype=np.float32))
        for name in ATTN_PARAM_NAMES:
            p.add(prefix + name, nn.init_weight(rng, d, d))
        for name in ATTN_BIAS_NAMES:
            p.add(prefix + name, np.zeros(d, dtype=np.float32))
        p.add(prefix + "ln2_g", np.ones(d, dtype=np.float32))
        p.add(prefix + "ln2_b", np.zeros(d, dtype=np.float32))
        p.add(prefix + "ffn_w1", nn.init_weight(rng, d, f))
        p.add(prefix + "ffn_b1", np.zeros(f, dtype=np.float32))
        p.add(prefix + "ffn_w2", nn.init_weight(rng, f, d))
        p.add(prefix + "ffn_b2", np.zeros(d, dtype=np.float32))

    def uni_head_paths(self) -> set[str]:
        return {"head_uni/w", "head_uni/b"}

    # -- shared blocks ----------------------------------------------------------
    def _attn_block(self, x: Tensor, prefix: str, causal: bool) -> Tensor:
        """Pre-norm transformer block with residual connections."""
        p = self.params.subset(prefix)
        h = nn.layer_norm(x, p["ln1_g"], p["ln1_b"])
        a, _ = nn.multi_head_attention(h, p, self.config.n_heads, causal=causal)
        x = x + a
        h = nn.layer_norm(x, p["ln2_g"], p["ln2_b"])
        ff = nn.linear_forward(h, p["ffn_w1"], p["ffn_b1"]).relu()
        ff = nn.linear_forward(ff, p["ffn_w2"], p["ffn_b2"])
        return x + ff

    def _gru_layer(self, x: Tensor, prefix: str) -> Tensor:
        """Unidirectional GRU scan over the time axis of [..., T, d]."""
        p = self.params.subset(prefix + "gru/")
        t_len = x.shape[-2]
        lead = x.shape[:-2]
        h = Tensor(np.zeros(lead + (self.config.d_model,), dtype=np.float32))
        rows = []
        for t in range(t_len):
            h = nn.gru_cell(x[..., t, :], h, p)
            rows.append(ad.reshape(h, lead + (1, self.config.d_model)))
        return ad.concat(rows, axis=-2)

    def _embed(self, ids: np.ndarray, indicators: np.ndarray | None) -> Tensor:
        cfg = self.config
        t_len = ids.shape[-1]
        if t_len > cfg.max_len:
            raise CapacityError(
                f"sentence length {t_len} exceeds max stream length {cfg.max_len}")
        if ids.min() < 0 or ids.max() >= cfg.vocab_size:
            raise InputError("token id out of vocabulary range")
        x = ad.embedding(self.params["embed/token"], ids)
        x = x + ad.embedding(self.params["embed/pos"], np.arange(t_len))
        if indicators is None:
            indicators = np.zeros(ids.shape, dtype=np.int64)
        x = x + ad.embedding(self.params["embed/indicator"], indicators)
        return x

    def _forward_graph(
        self, ids: np.ndarray, indicators: np.ndarray | None = None,
    ) -> tuple[Tensor, Tensor, Tensor, Tensor]:
        cfg = self.config
        x = self._embed(ids, indicators)
        for i in range(cfg.n_uni_blocks):
            if cfg.uni_kind == UNI_KIND_ATTENTION:
                x = self._attn_block(x, f"uni{i}/", causal=True)
            else:
                x = self._gru_layer(x, f"uni{i}/")
        h_uni = x
        for j in range(cfg.b):
            x = self._attn_block(x, f"bi{j}/", causal=False)
        h_bi = x
        # the unidirectional head never sends gradient into the trunk
        uni_logits = nn.linear_forward(
            h_uni.detach(), self.params["head_uni/w"], self.params["head_uni/b"])
        bi_logits = nn.linear_forward(
            h_bi, self.params["head_bi/w"], self.params["head_bi/b"])
        return h_uni, h_bi, uni_logits, bi_logits

    # -- offline ------------------------------------------------------------------
    def offline_forward(
        self,
        token_ids: Sequence[int] | np.ndarray,
        indicators: Sequence[int] | np.ndarray | None = None,
    ) -> EncoderOutputs:
        """Full forward over one complete sentence; deterministic."""
        ids = np.asarray(token_ids, dtype=np.int64)
        if ids.ndim != 1 or ids.shape[0] < 1:
            raise InputError("offline_forward expects a non-empty id sequence")
        ind = None if indicators is None else np.asarray(indicators, dtype=np.int64)
        with no_grad():
            h_uni, h_bi, uni_logits, bi_logits = self._forward_graph(ids, ind)
        return EncoderOutputs(h_uni.data, h_bi.data, uni_logits.data, bi_logits.data)

    # -- streaming -----------------------------------------------------------------
    def start_stream(self, m: int = 8) -> UniState:
        if m < 1:
            raise ConfigurationError("attention score window m must be >= 1")
        return UniState(self, m)

    def stream_extend(
        self, state: UniState, token_id: int, indicator: int = 0,
    ) -> StreamStep:
        """Consume one token: compute only its unidirectional encoding from the
        caches, plus the first bidirectional layer's query/key row and the
        forward attention scores of cached queries against the new key."""
        cfg = self.config
        if state.t >= cfg.max_len:
            raise CapacityError(f"stream exceeds max length {cfg.max_len}")
        if not (0 <= token_id < cfg.vocab_size):
            raise InputError(f"token id {token_id} out of vocabulary")
        t = state.t + 1
        pos = state.t
        x = (self.params["embed/token"].data[token_id]
             + self.params["embed/pos"].data[pos]
             + self.params["embed/indicator"].data[int(indicator)])
        for i in range(cfg.n_uni_blocks):
            if cfg.uni_kind == UNI_KIND_ATTENTION:
                x = self._attn_block_step(x, f"uni{i}/", state.caches[i])
            else:
                p = self.params.subset(f"uni{i}/gru/")
                state.caches[i] = nn.np_gru_cell(x, state.caches[i], p)
                x = state.caches[i]
        state.h_uni[pos] = x

        h, m = cfg.n_heads, state.m
        scores = np.zeros((h, m), dtype=np.float32)
        real = 0
        if cfg.b > 0:
            p = self.params.subset("bi0/")
            z = nn.np_layer_norm(x, p["ln1_g"].data, p["ln1_b"].data)
            q_row = z @ p["wq"].data + p["bq"].data
            k_row = z @ p["wk"].data + p["bk"].data
            state.q_rows[pos] = q_row
            state.k_rows[pos] = k_row
            real = min(pos, m)
            if real > 0:
                dh = cfg.d_model // h
                prev_q = state.q_rows[pos - real:pos].reshape(real, h, dh)
                k_heads = k_row.reshape(h, dh)
                # forward attention: past queries against the new key, unnormalized
                scores[:, m - real:] = np.einsum("jhd,hd->hj", prev_q, k_heads)
            q_out, k_out = q_row, k_row
        else:
            q_out = np.zeros(cfg.d_model, dtype=np.float32)
            k_out = np.zeros(cfg.d_model, dtype=np.float32)
        state.t = t
        return StreamStep(t=t, h_uni=x, q=q_out, k=k_out,
                          attn_scores=scores.reshape(-1), real_scores=real)

    def _attn_block_step(self, x: np.ndarray, prefix: str,
                         cache: nn.AttnCache) -> np.ndarray:
        p = self.params.subset(prefix)
        h = nn.np_layer_norm(x, p["ln1_g"].data, p["ln1_b"].data)
        a, _ = nn.multi_head_attention(
            Tensor(h.reshape(1, -1)), p, self.config.n_heads,
            causal=True, cache=cache)
        x = x + a.data.reshape(-1)
        h = nn.np_layer_norm(x, p["ln2_g"].data, p["ln2_b"].data)
        ff = np.maximum(h @ p["ffn_w1"].data + p["ffn_b1"].data, 0.0)
        ff = ff @ p["ffn_w2"].data + p["ffn_b2"].data
        return x + ff

    def restart_bidirectional(self, state: UniState) -> np.ndarray:
        """Run all bidirectional layers over the cached unidirectional
        encodings and return label ids for every received token."""
        if state.t < 1:
            raise ContractViolation("restart on an empty stream")
        with no_grad():
            x = Tensor(state.h_uni[: state.t].copy())
            for j in range(self.config.b):
                x = self._attn_block(x, f"bi{j}/", causal=False)
            logits = nn.linear_forward(
                x, self.params["head_bi/w"], self.params["head_bi/b"])
        return np.argmax(logits.data, axis=-1)

    def predict_uni_label(self, h_uni_t: np.ndarray) -> int:
        """Argmax over the unidirectional head; ties break to the lowest id."""
        if h_uni_t.shape != (self.config.d_model,):
            raise ContractViolation(
                f"expected a d_model vector, got shape {h_uni_t.shape}")
        logits = h_uni_t @ self.params["head_uni/w"].data \
            + self.params["head_uni/b"].data
        return int(np.argmax(logits))

    # -- training ------------------------------------------------------------------
    def encode_sentence(
        self, sentence: TaggedSentence,
    ) -> tuple[np.ndarray, np.ndarray, np.ndarray | None]:
        ids = self.vocab.encode_tokens(sentence.tokens)
        labels = self.vocab.encode_labels(sentence.labels)
        ind = (np.asarray(sentence.indicators, dtype=np.int64)
               if sentence.indicators is not None else None)
        return ids, labels, ind

    def train_step(
        self, batch: Sequence[TaggedSentence], lr: float = 1e-3,
    ) -> tuple[float, float]:
        """One optimizer update on a batch; returns (loss_bi, loss_uni).

        Sentences are grouped by length so each group runs as one dense
        forward; group losses are combined weighted by token counts, then a
        single Adam step is applied.
        """
        if not batch:
            raise InputError("train_step: empty batch")
        groups: dict[int, list[tuple[np.ndarray, np.ndarray, np.ndarray | None]]] = \
            defaultdict(list)
        for sentence in batch:
            enc = self.encode_sentence(sentence)
            groups[len(sentence)].append(enc)
        total_tokens = sum(len(s) for s in batch)
        loss_bi_terms: list[Tensor] = []
        loss_uni_terms: list[Tensor] = []
        for t_len, items in sorted(groups.items()):
            ids = np.stack([it[0] for it in items])
            labels = np.stack([it[1] for it in items])
            if any(it[2] is not None for it in items):
                ind = np.stack([
                    it[2] if it[2] is not None else np.zeros(t_len, dtype=np.int64)
                    for it in items])
            else:
                ind = None
            _, _, uni_logits, bi_logits = self._forward_graph(ids, ind)
            weight = (t_len * len(items)) / total_tokens
            loss_bi_terms.append(
                nn.softmax_cross_entropy(bi_logits, labels) * weight)
            loss_uni_terms.append(
                nn.softmax_cross_entropy(uni_logits, labels) * weight)
        loss_bi = loss_bi_terms[0]
        for term in loss_bi_terms[1:]:
            loss_bi = loss_bi + term
        loss_uni = loss_uni_terms[0]
        for term in loss_uni_terms[1:]:
            loss_uni = loss_uni + term
        total = loss_bi + loss_uni
        if not np.isfinite(total.data):
            raise NumericError("training loss is non-finite")
        self.params.zero_grads()
        total.backward()
        # embedding/indicator rows may be untouched in a batch; Adam still
        # expects a gradient buffer for every trainable parameter
        for path, tensor in self.params.items():
            if self.params.is_trainable(path) and tensor.grad is None:
                tensor.grad = np.zeros_like(tensor.data)
        nn.adam_step(self.params, lr)
        return float(loss_bi.data), float(loss_uni.data)

    def predict_offline(
        self, sentences: Sequence[TaggedSentence],
    ) -> list[list[str]]:
        """Offline bidirectional-head labels for each sentence (length-batched)."""
        order: dict[int, list[int]] = defaultdict(list)
        encoded = [self.encode_sentence(s) for s in sentences]
        for idx, s in enumerate(sentences):
            order[len(s)].append(idx)
        out: list[list[str] | None] = [None] * len(sentences)
        with no_grad():
            for t_len, idxs in sorted(order.items()):
                ids = np.stack([encoded[i][0] for i in idxs])
                if any(encoded[i][2] is not None for i in idxs):
                    ind = np.stack([
                        encoded[i][2] if encoded[i][2] is not None
                        else np.zeros(t_len, dtype=np.int64) for i in idxs])
                else:
                    ind = None
                _, _, _, bi_logits = self._forward_graph(ids, ind)
                preds = np.argmax(bi_logits.data, axis=-1)
                for row, i in enumerate(idxs):
                    out[i] = self.vocab.decode_labels(preds[row])
        return out  # type: ignore[return-value]

    # -- persistence ---------------------------------------------------------------
    def save(self, path: str) -> None:
        header = {
            "kind": "hybrid-encoder",
            "config": asdict(self.config),
            "vocab": self.vocab.to_dict(),
        }
        nn.save_parameters(path, self.params, header)

    @classmethod
    def load(cls, path: str) -> "HybridEncoder":
        params, header = nn.load_parameters(path)
        if header.get("kind") != "hybrid-encoder":
            raise InputError(f"{path}: not a hybrid encoder file")
        config = HybridConfig(**header["config"])
        vocab = Vocabulary.from_dict(header["vocab"])
        return cls(config, vocab, params)


def offline_f1(model: HybridEncoder, sentences: Sequence[TaggedSentence],
               scheme: str = "BIO") -> float:
    """Micro span F1 of the offline bidirectional predictions."""
    from .metrics import chunk_f1_corpus

    preds = model.predict_offline(sentences)
    _, _, f1 = chunk_f1_corpus(
        [(p, list(s.labels)) for p, s in zip(preds, sentences)], scheme)
    return f1
