"""Adaptive restart module: a single-layer GRU + linear + sigmoid classifier
over cache-resident streaming features, trained against the greedy restart
policy with binary cross-entropy, plus the alpha/beta decision postprocessor.

Features for token t are the concatenation of the last unidirectional
encoding, the first bidirectional layer's query and key rows, and the
unnormalized forward attention scores of the most recent m prefix queries
against the new key (right-aligned, zero-padded, per head). None of these
require running the bidirectional layers.
"""

from __future__ import annotations

import json
from collections import defaultdict
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Tensor, no_grad
from .data import TaggedSentence
from .encoder import HybridEncoder, StreamStep
from .errors import ConfigurationError, ContractViolation, InputError

ALPHA_BETA_GRID = (0, 1, 2, 3, 5, 10)


def feature_size(d_model: int, n_heads: int, m: int) -> int:
    return 3 * d_model + m * n_heads


def extract_features(step: StreamStep, m: int) -> np.ndarray:
    """Concatenate [h_uni_t, q_t, k_t, a_t]; a_t slots beyond the available
    prefix are exactly zero. Triggers no encoder recomputation."""
    n_heads = 0 if m == 0 else step.attn_scores.size // m
    if step.attn_scores.size != m * n_heads:
        raise ContractViolation(
            f"attention scores were streamed with a different window "
            f"({step.attn_scores.size} entries, expected multiple of m={m})")
    return np.concatenate([step.h_uni, step.q, step.k, step.attn_scores])


class ArmModel:
    """GRU restart classifier plus its decision-postprocessing settings."""

    def __init__(
        self,
        d_model: int,
        n_heads: int,
        m: int = 8,
        d_arm: int = 64,
        alpha: int = 0,
        beta: int = 10,
        tau: float = 0.5,
        exclude_latest: bool = False,
        seed: int = 0,
        params: nn.ParameterSet | None = None,
    ):
        if not 0 <= alpha < beta:
            raise ConfigurationError(f"need 0 <= alpha < beta, got {alpha}, {beta}")
        if m < 1 or d_arm < 1:
            raise ConfigurationError("m and d_arm must be >= 1")
        self.d_model = d_model
        self.n_heads = n_heads
        self.m = m
        self.d_arm = d_arm
        self.alpha = alpha
        self.beta = beta
        self.tau = tau
        self.exclude_latest = exclude_latest
        self.seed = seed
        self.params = params if params is not None else self._init_params()

    @property
    def feature_size(self) -> int:
        return feature_size(self.d_model, self.n_heads, self.m)

    def _init_params(self) -> nn.ParameterSet:
        rng = np.random.default_rng(self.seed)
        p = nn.ParameterSet()
        f, d = self.feature_size, self.d_arm
        p.add("gru/wi", nn.init_weight(rng, f, 3 * d))
        p.add("gru/wh", nn.init_weight(rng, d, 3 * d))
        p.add("gru/bi", np.zeros(3 * d, dtype=np.float32))
        p.add("gru/bh", np.zeros(3 * d, dtype=np.float32))
        p.add("out/w", nn.init_weight(rng, d, 1))
        p.add("out/b", np.zeros(1, dtype=np.float32))
        return p

    def initial_state(self) -> np.ndarray:
        return np.zeros(self.d_arm, dtype=np.float32)

    def forward(
        self, features: np.ndarray, state: np.ndarray,
    ) -> tuple[float, np.ndarray]:
        """One recurrent step; returns (restart probability, new state).

        The probability is strictly inside (0, 1) for finite inputs.
        """
        if features.shape != (self.feature_size,):
            raise ContractViolation(
                f"expected features of size {self.feature_size}, "
                f"got {features.shape}")
        if state.shape != (self.d_arm,):
            raise ContractViolation("recurrent state has the wrong width")
        gru = self.params.subset("gru/")
        new_state = nn.np_gru_cell(features, state, gru)
        logit = new_state @ self.params["out/w"].data + self.params["out/b"].data
        prob = float(ad.np_sigmoid(logit)[0])
        return prob, new_state

    def sequence_logits(self, features: Tensor) -> Tensor:
        """Differentiable scan over [B, T, F] features -> [B, T] logits."""
        b, t_len, _ = features.shape
        gru = self.params.subset("gru/")
        h = Tensor(np.zeros((b, self.d_arm), dtype=np.float32))
        cols = []
        for t in range(t_len):
            h = nn.gru_cell(features[:, t, :], h, gru)
            logit = nn.linear_forward(h, self.params["out/w"],
                                      self.params["out/b"])
            cols.append(logit)  # [B, 1]
        return ad.concat(cols, axis=-1)  # [B, T]

    def sequence_probs(self, features: np.ndarray) -> np.ndarray:
        """Inference probabilities for one sentence's [T, F] features."""
        state = self.initial_state()
        probs = np.empty(features.shape[0], dtype=np.float64)
        for t in range(features.shape[0]):
            probs[t], state = self.forward(features[t], state)
        return probs

    # -- persistence -----------------------------------------------------------
    def save(self, path: str) -> None:
        header = {
            "kind": "adaptive-restart",
            "d_model": self.d_model,
            "n_heads": self.n_heads,
            "m": self.m,
            "d_arm": self.d_arm,
            "alpha": self.alpha,
            "beta": self.beta,
            "tau": self.tau,
            "exclude_latest": self.exclude_latest,
            "seed": self.seed,
        }
        nn.save_parameters(path, self.params, header)

    @classmethod
    def load(cls, path: str) -> "ArmModel":
        params, header = nn.load_parameters(path)
        if header.get("kind") != "adaptive-restart":
            raise InputError(f"{path}: not an adaptive-restart model file")
        header = dict(header)
        header.pop("kind")
        return cls(params=params, **header)


def arm_forward(
    model: ArmModel, features: np.ndarray, state: np.ndarray,
) -> tuple[float, np.ndarray]:
    return model.forward(features, state)


def postprocess_decision(
    prob: float,
    history: Sequence[int],
    alpha: int,
    beta: int,
    tau: float,
) -> int:
    """Clamp raw restart probabilities against too-infrequent and
    too-frequent restarts.

    ``history`` holds the restart bits of timesteps before the current one.
    If granting a non-restart would leave the trailing window of beta steps
    (ending at the current step) without any restart, force 1. Otherwise, if
    a restart happened within the last alpha steps, force 0 (alpha = 0
    disables this). Otherwise threshold the probability at tau.
    """
    if alpha >= beta:
        raise ConfigurationError(f"need alpha < beta, got {alpha} >= {beta}")
    lookback = list(history[-(beta - 1):]) if beta > 1 else []
    if not any(lookback):
        return 1
    if alpha > 0 and any(history[-alpha:]):
        return 0
    return int(prob >= tau)


class ArmStreamContext:
    """Per-sentence mutable state of the adaptive policy: the recurrent
    state plus the emitted-decision history the postprocessor looks at."""

    def __init__(self, model: ArmModel):
        self.model = model
        self.state = model.initial_state()
        self.history: list[int] = []
        self.feature_size = model.feature_size
        self.d_arm = model.d_arm

    def decide(self, step: StreamStep) -> int:
        features = extract_features(step, self.model.m)
        prob, self.state = self.model.forward(features, self.state)
        return postprocess_decision(
            prob, self.history, self.model.alpha, self.model.beta,
            self.model.tau)

    def record(self, restart: int) -> None:
        self.history.append(int(restart))


def simulate_decisions(
    probs: Sequence[float], n: int, alpha: int, beta: int, tau: float,
) -> list[int]:
    """Emitted restart bits for a prob sequence, mirroring the live policy:
    postprocessed decisions with the final step forced to restart."""
    history: list[int] = []
    for t in range(1, n + 1):
        bit = 1 if t == n else postprocess_decision(
            probs[t - 1], history, alpha, beta, tau)
        history.append(bit)
    return history


def lint_restart_schedule(flags: Sequence[int], alpha: int, beta: int) -> list[str]:
    """Violations of the postprocessing guarantee in a decision sequence:
    every window of beta consecutive timesteps must contain a restart, no
    two restarts may fall within alpha of each other (final-step forcing
    excepted), and the final step must restart."""
    n = len(flags)
    problems = []
    if n and flags[-1] != 1:
        problems.append("final step did not restart")
    for start in range(0, n - beta + 1):
        window = flags[start:start + beta]
        if not any(window):
            problems.append(
                f"no restart in window [{start + 1}, {start + beta}]")
    if alpha > 0:
        restarts = [i + 1 for i, f in enumerate(flags) if f]
        for a, b in zip(restarts, restarts[1:]):
            if b - a <= alpha and b != n:
                problems.append(
                    f"restarts at {a} and {b} are within alpha={alpha}")
    return problems


# -- training -------------------------------------------------------------------------

@dataclass
class PolicyRecord:
    """Everything needed to learn and tune restart decisions for one
    sentence, collected from a frozen encoder in a single streaming pass."""

    features: np.ndarray  # [T, F]
    greedy_bits: list[int]  # pure match-count policy labels
    transcript: object  # every-step StreamingTranscript


def collect_policy_records(
    model: HybridEncoder,
    sentences: Sequence[TaggedSentence],
    m: int,
) -> list[PolicyRecord]:
    from .policy import EveryStep, greedy_policy_labels, run_stream

    records = []
    for idx, sentence in enumerate(sentences):
        tr = run_stream(model, EveryStep(), sentence, sentence_id=idx,
                        m=m, record_features=True)
        bits = greedy_policy_labels(
            tr.gold_labels, tr.uni_labels, tr.bi_label_sequences())
        records.append(PolicyRecord(tr.features, bits, tr))
    return records


def training_bits(record: PolicyRecord) -> list[int]:
    # the final step restarts unconditionally, so it is labeled 1
    bits = list(record.greedy_bits)
    bits[-1] = 1
    return bits


def train_arm(
    encoder: HybridEncoder,
    train_sentences: Sequence[TaggedSentence],
    dev_sentences: Sequence[TaggedSentence],
    m: int = 8,
    d_arm: int = 64,
    tau: float = 0.5,
    lr: float = 1e-3,
    epochs: int = 5,
    batch_size: int = 32,
    seed: int = 0,
) -> tuple[ArmModel, dict]:
    """Fit the restart classifier against greedy policy labels.

    The encoder is frozen (its checksum is asserted unchanged). Returns the
    model (postprocessing thresholds still at defaults) and held-out
    intrinsic metrics on the dev split.
    """
    if not train_sentences:
        raise InputError("train_arm: empty dataset")
    checksum_before = encoder.params.checksum()
    train_records = collect_policy_records(encoder, train_sentences, m)
    dev_records = collect_policy_records(encoder, dev_sentences, m)
    model = ArmModel(encoder.config.d_model, encoder.config.n_heads,
                     m=m, d_arm=d_arm, tau=tau, seed=seed)
    rng = np.random.default_rng(seed)
    for _ in range(epochs):
        order = rng.permutation(len(train_records))
        for start in range(0, len(order), batch_size):
            chunk = [train_records[i] for i in order[start:start + batch_size]]
            groups: dict[int, list[PolicyRecord]] = defaultdict(list)
            for rec in chunk:
                groups[rec.features.shape[0]].append(rec)
            terms = []
            total = sum(r.features.shape[0] for r in chunk)
            for t_len, recs in sorted(groups.items()):
                feats = Tensor(np.stack([r.features for r in recs]))
                bits = np.stack([training_bits(r) for r in recs])
                logits = model.sequence_logits(feats)
                weight = (t_len * len(recs)) / total
                terms.append(nn.bce_with_logits(logits, bits) * weight)
            loss = terms[0]
            for term in terms[1:]:
                loss = loss + term
            model.params.zero_grads()
            loss.backward()
            nn.adam_step(model.params, lr)
    if encoder.params.checksum() != checksum_before:
        raise ContractViolation("encoder changed during adaptive-restart training")
    intrinsic = arm_intrinsic_f1(model, dev_records)
    return model, intrinsic


def arm_intrinsic_f1(model: ArmModel, records: Sequence[PolicyRecord]) -> dict:
    """Micro-averaged F1 of thresholded raw probabilities against the policy
    labels (no alpha/beta postprocessing), pooled over all timesteps."""
    tp = fp = fn = tn = 0
    for rec in records:
        probs = model.sequence_probs(rec.features)
        preds = (probs >= model.tau).astype(int)
        for p, y in zip(preds, training_bits(rec)):
            if p and y:
                tp += 1
            elif p and not y:
                fp += 1
            elif not p and y:
                fn += 1
            else:
                tn += 1
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    total = tp + fp + fn + tn
    positive_rate = (tp + fn) / total if total else 0.0
    majority_positive = positive_rate >= 0.5
    if majority_positive:
        maj_f1 = 2 * positive_rate / (positive_rate + 1.0)
    else:
        maj_f1 = 0.0
    return {
        "micro_f1": f1,
        "precision": precision,
        "recall": recall,
        "accuracy": (tp + tn) / total if total else 0.0,
        "positive_rate": positive_rate,
        "majority_f1": maj_f1,
        "n_steps": total,
    }


def tune_postprocessing(
    model: ArmModel,
    dev_records: Sequence[PolicyRecord],
    grid: Sequence[int] = ALPHA_BETA_GRID,
) -> tuple[int, int, bool, dict]:
    """Select alpha/beta (alpha < beta) and the exclude-latest flag on the
    dev split by maximizing streaming exact match; ties prefer fewer FLOPs.

    Works from recorded every-step transcripts: raw probabilities are
    schedule-independent, so each candidate is evaluated by simulating the
    postprocessed decisions and replaying the transcript.
    """
    from .metrics import streaming_em, transcript_flops
    from .policy import replay_transcript

    probs = [model.sequence_probs(rec.features) for rec in dev_records]
    overhead = (model.feature_size, model.d_arm)
    best = None
    results = {}
    for beta in grid:
        for alpha in grid:
            if not alpha < beta:
                continue
            for exclude in (False, True):
                em_sum = 0.0
                flops = 0
                for rec, p in zip(dev_records, probs):
                    tr = rec.transcript
                    n = len(tr.steps)
                    bits = simulate_decisions(p, n, alpha, beta, model.tau)
                    replay = replay_transcript(tr, bits, exclude_latest=exclude,
                                               arm_overhead=overhead)
                    em_sum += streaming_em(replay, replay.gold_labels)
                    flops += transcript_flops(replay)
                em = em_sum / len(dev_records)
                results[(alpha, beta, exclude)] = em
                key = (em, -flops, -beta, -alpha, not exclude)
                if best is None or key > best[0]:
                    best = (key, alpha, beta, exclude)
    _, alpha, beta, exclude = best
    return alpha, beta, exclude, results
