"""Waited-restart policy engine.

Per timestep the policy either restarts the bidirectional layers (emitting
fresh labels for every received token) or copies the previous label sequence
and appends the unidirectional label of the new token. The final timestep
always restarts. Transcripts record emitted labels, restart decisions and
FLOP events, and can be replayed under alternative schedules without
re-running the encoder.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .data import TaggedSentence
from .encoder import HybridEncoder, StreamStep, UNI_KIND_ATTENTION
from .errors import ConfigurationError, ContractViolation, InputError
from .metrics import (
    FlopEvent,
    attention_layer_flops,
    causal_step_flops,
    embedding_flops,
    gru_step_flops,
    linear_flops,
)
from .nn import atomic_write_text


# -- policies -------------------------------------------------------------------

@dataclass(frozen=True)
class EveryStep:
    """Restart at every timestep."""

    def begin(self, n: int):
        return None

    def decide(self, ctx, t: int, step: StreamStep) -> int:
        return 1


@dataclass(frozen=True)
class FixedK:
    """Restart exactly when t is a multiple of k (plus the forced final)."""

    k: int

    def __post_init__(self):
        if self.k < 1:
            raise ConfigurationError("k must be >= 1")

    def begin(self, n: int):
        return None

    def decide(self, ctx, t: int, step: StreamStep) -> int:
        return int(t % self.k == 0)


@dataclass(frozen=True)
class OracleSchedule:
    """Replay a precomputed restart bit sequence."""

    bits: tuple[int, ...]

    def begin(self, n: int):
        if len(self.bits) != n:
            raise InputError(
                f"schedule length {len(self.bits)} != sentence length {n}")
        return None

    def decide(self, ctx, t: int, step: StreamStep) -> int:
        return int(self.bits[t - 1])


class ArmPolicy:
    """Decides restarts with a trained classifier over cache-resident
    features; defined in streamtag.arm and duck-typed here. The policy object
    wraps the model and spawns per-sentence mutable state."""

    def __init__(self, arm_model):
        self.arm = arm_model

    @property
    def exclude_latest(self) -> bool:
        return self.arm.exclude_latest

    @property
    def m(self) -> int:
        return self.arm.m

    def begin(self, n: int):
        from .arm import ArmStreamContext

        return ArmStreamContext(self.arm)

    def decide(self, ctx, t: int, step: StreamStep) -> int:
        return ctx.decide(step)


RestartPolicy = EveryStep | FixedK | OracleSchedule | ArmPolicy


# -- transcripts -------------------------------------------------------------------

@dataclass
class StepRecord:
    labels: list[str]
    restart: int
    flops: list[FlopEvent] = field(default_factory=list)


@dataclass
class StreamingTranscript:
    """Per-timestep record of one streamed sentence.

    ``uni_labels`` (the per-position unidirectional labels) and
    ``flop_params`` (the dimension constants of the producing model) make a
    transcript self-contained for replay under alternative schedules.
    """

    sentence_id: int | str
    tokens: list[str]
    gold_labels: list[str]
    uni_labels: list[str]
    steps: list[StepRecord]
    flop_params: dict
    features: np.ndarray | None = None  # [T, F]; never serialized

    @property
    def final_labels(self) -> list[str]:
        return self.steps[-1].labels

    @property
    def restart_flags(self) -> list[int]:
        return [s.restart for s in self.steps]

    def bi_label_sequences(self) -> list[list[str]]:
        """Per-prefix bidirectional predictions; requires an every-step
        transcript (each step must have restarted)."""
        if any(s.restart != 1 for s in self.steps):
            raise InputError(
                "transcript is missing bidirectional predictions for some "
                "prefixes (not recorded under an every-step policy)")
        return [list(s.labels) for s in self.steps]

    def to_json(self) -> str:
        return json.dumps({
            "sentence_id": self.sentence_id,
            "tokens": self.tokens,
            "gold_labels": self.gold_labels,
            "uni_labels": self.uni_labels,
            "flop_params": self.flop_params,
            "steps": [
                {"labels": s.labels, "restart": s.restart,
                 "flops": [[e.kind, e.tokens, e.flops] for e in s.flops]}
                for s in self.steps
            ],
        })

    @classmethod
    def from_json(cls, line: str) -> "StreamingTranscript":
        d = json.loads(line)
        steps = [
            StepRecord(
                labels=list(s["labels"]), restart=int(s["restart"]),
                flops=[FlopEvent(k, int(t), int(f)) for k, t, f in s["flops"]])
            for s in d["steps"]
        ]
        return cls(d["sentence_id"], list(d["tokens"]), list(d["gold_labels"]),
                   list(d["uni_labels"]), steps, dict(d["flop_params"]))


def write_transcripts(path: str, transcripts: Sequence[StreamingTranscript]) -> None:
    atomic_write_text(path, "".join(t.to_json() + "\n" for t in transcripts))


def read_transcripts(path: str) -> list[StreamingTranscript]:
    out = []
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if line:
                out.append(StreamingTranscript.from_json(line))
    return out


# -- FLOP event assembly --------------------------------------------------------------

def flop_params_from_config(cfg) -> dict:
    return {
        "d_model": cfg.d_model,
        "d_ffn": cfg.d_ffn,
        "n_heads": cfg.n_heads,
        "n_labels": cfg.n_labels,
        "n_uni_blocks": cfg.n_uni_blocks,
        "b": cfg.b,
        "uni_kind": cfg.uni_kind,
        "m": 8,
    }


def base_step_events(fp: dict, t: int) -> list[FlopEvent]:
    """Per-token cost that every policy pays: embedding, unidirectional
    layers, and (when bidirectional layers exist) the cached query/key row
    plus the forward attention scores."""
    d, f = fp["d_model"], fp["d_ffn"]
    events = [FlopEvent("embedding_step", 1, embedding_flops(1, d))]
    for _ in range(fp["n_uni_blocks"]):
        if fp["uni_kind"] == UNI_KIND_ATTENTION:
            events.append(
                FlopEvent("uni_attention_step", t, causal_step_flops(t, d, f)))
        else:
            events.append(FlopEvent("uni_gru_step", 1, gru_step_flops(d, d)))
    if fp["b"] > 0:
        real = min(t - 1, fp["m"])
        events.append(FlopEvent(
            "stream_qk_step", 1, 2 * linear_flops(1, d, d) + 2 * d * real))
    return events


def restart_events(fp: dict, t: int) -> list[FlopEvent]:
    d, f, c = fp["d_model"], fp["d_ffn"], fp["n_labels"]
    events = [FlopEvent("bi_attention_restart", t, attention_layer_flops(t, d, f))
              for _ in range(fp["b"])]
    events.append(FlopEvent("bi_head", t, linear_flops(t, d, c)))
    return events


def uni_head_event(fp: dict) -> FlopEvent:
    return FlopEvent("uni_head", 1, linear_flops(1, fp["d_model"], fp["n_labels"]))


def arm_step_event(fp: dict, feature_size: int, d_arm: int) -> FlopEvent:
    cost = gru_step_flops(feature_size, d_arm) + linear_flops(1, d_arm, 1)
    return FlopEvent("arm_step", 1, cost)


# -- streaming driver -------------------------------------------------------------------

def run_stream(
    model: HybridEncoder,
    policy: RestartPolicy,
    sentence: TaggedSentence,
    sentence_id: int | str = 0,
    m: int = 8,
    record_features: bool = False,
) -> StreamingTranscript:
    """Stream one sentence under a restart policy.

    Non-restart steps copy the previous label sequence and append the
    unidirectional label; the final step always restarts. With an
    adaptive-restart policy configured to exclude the latest token, a
    non-final restart keeps the unidirectional label at the newest position.
    """
    n = len(sentence)
    if n < 1:
        raise InputError("run_stream: empty sentence")
    is_arm = isinstance(policy, ArmPolicy)
    if is_arm:
        m = policy.m
    fp = flop_params_from_config(model.config)
    fp["m"] = m
    ids, _, _ = model.encode_sentence(sentence)
    indicators = sentence.indicators or (0,) * n

    state = model.start_stream(m=m)
    ctx = policy.begin(n)
    steps: list[StepRecord] = []
    uni_labels: list[str] = []
    feature_rows: list[np.ndarray] = [] if record_features else None
    emitted: list[str] = []
    for t in range(1, n + 1):
        step = model.stream_extend(state, int(ids[t - 1]), int(indicators[t - 1]))
        events = base_step_events(fp, t)
        uni_label = model.vocab.id_to_label[model.predict_uni_label(step.h_uni)]
        uni_labels.append(uni_label)
        if record_features:
            feature_rows.append(
                np.concatenate([step.h_uni, step.q, step.k, step.attn_scores]))
        decision = policy.decide(ctx, t, step)
        if is_arm:
            events.append(arm_step_event(fp, ctx.feature_size, ctx.d_arm))
        restart = 1 if t == n else int(decision)
        if is_arm:
            ctx.record(restart)
        if restart:
            label_ids = model.restart_bidirectional(state)
            emitted = model.vocab.decode_labels(label_ids)
            events.extend(restart_events(fp, t))
            if is_arm and policy.exclude_latest and t < n:
                emitted[-1] = uni_label
                events.append(uni_head_event(fp))
        else:
            emitted = emitted + [uni_label]
            events.append(uni_head_event(fp))
        steps.append(StepRecord(labels=list(emitted), restart=restart,
                                flops=events))
    features = np.stack(feature_rows) if record_features else None
    return StreamingTranscript(
        sentence_id=sentence_id,
        tokens=list(sentence.tokens),
        gold_labels=list(sentence.labels),
        uni_labels=uni_labels,
        steps=steps,
        flop_params=fp,
        features=features,
    )


# -- policy learning targets ------------------------------------------------------------

def greedy_policy_labels(
    gold: Sequence,
    uni_preds: Sequence,
    bi_preds_per_prefix: Sequence[Sequence],
) -> list[int]:
    """Restart iff the bidirectional predictions match strictly more gold
    labels over the prefix than the unidirectional predictions."""
    n = len(gold)
    if len(uni_preds) != n or len(bi_preds_per_prefix) != n:
        raise InputError("greedy_policy_labels: length mismatch")
    bits = []
    uni_matches = 0
    for t in range(1, n + 1):
        if len(bi_preds_per_prefix[t - 1]) != t:
            raise InputError(
                f"bi predictions at step {t} must cover {t} positions")
        uni_matches += int(gold[t - 1] == uni_preds[t - 1])
        bi_matches = sum(
            int(gold[i] == bi_preds_per_prefix[t - 1][i]) for i in range(t))
        bits.append(1 if uni_matches < bi_matches else 0)
    return bits


def oracle_schedule(
    gold: Sequence,
    uni_preds: Sequence,
    bi_preds_per_prefix: Sequence[Sequence],
    objective: str = "streaming_em",
) -> list[int]:
    """Restart schedule maximizing the number of timesteps whose emitted
    sequence equals the gold prefix, by dynamic programming over
    (timestep, last restart time). Ties prefer fewer restarts, then earlier
    restart times; the final bit is always 1.
    """
    if objective != "streaming_em":
        raise ConfigurationError(f"unsupported oracle objective {objective!r}")
    n = len(gold)
    if len(uni_preds) != n or len(bi_preds_per_prefix) != n:
        raise InputError("oracle_schedule: length mismatch")

    # uni_hits[i] = number of positions j < i where gold[j] == uni[j]
    uni_hits = [0] * (n + 1)
    for i in range(n):
        uni_hits[i + 1] = uni_hits[i] + int(gold[i] == uni_preds[i])
    bi_ok = [False] * (n + 1)  # bi predictions at prefix r match gold[:r]
    for r in range(1, n + 1):
        preds = bi_preds_per_prefix[r - 1]
        if len(preds) != r:
            raise InputError(
                f"bi predictions at step {r} must cover {r} positions")
        bi_ok[r] = all(gold[i] == preds[i] for i in range(r))

    def match_fast(t: int, r: int) -> int:
        """Emitted sequence at t with last restart r equals the gold prefix?"""
        tail_ok = uni_hits[t] - uni_hits[r] == t - r
        if r == 0:
            return int(tail_ok)
        return int(bi_ok[r] and tail_ok)

    # DP value: (matches, -restarts, restart-times tuple); maximize matches,
    # then fewer restarts, then lexicographically earlier restart times
    # (encoded negated so that tuple max prefers earlier times).
    def better(a, b):
        if a is None:
            return b
        if b is None:
            return a
        ka = (a[0], -a[1], tuple(-x for x in a[2]))
        kb = (b[0], -b[1], tuple(-x for x in b[2]))
        return a if ka >= kb else b

    # state[r] = best value with last restart at r after processing step t
    state: list = [None] * (n + 1)
    state[0] = (0, 0, ())
    for t in range(1, n + 1):
        new_state: list = [None] * (n + 1)
        best_prev = None
        for r in range(t):
            best_prev = better(best_prev, state[r])
        if t < n:
            for r in range(t):  # skip the restart at step t
                if state[r] is not None:
                    v = state[r]
                    new_state[r] = (v[0] + match_fast(t, r), v[1], v[2])
        if best_prev is not None:  # restart at step t
            new_state[t] = (best_prev[0] + match_fast(t, t),
                            best_prev[1] + 1, best_prev[2] + (t,))
        state = new_state
    final = state[n]
    bits = [0] * n
    for r in final[2]:
        bits[r - 1] = 1
    return bits


def replay_transcript(
    transcript: StreamingTranscript,
    schedule: Sequence[int],
    exclude_latest: bool = False,
    arm_overhead: tuple[int, int] | None = None,
) -> StreamingTranscript:
    """Re-emit a recorded stream under a different restart schedule.

    The source transcript must have been recorded under the every-step
    policy so every prefix's bidirectional predictions are available. FLOPs
    are recomputed for the new schedule; ``arm_overhead`` (feature size,
    classifier width) adds the per-step classifier cost for adaptive
    schedules.
    """
    n = len(transcript.steps)
    if len(schedule) != n:
        raise InputError("replay: schedule length mismatch")
    bi_preds = transcript.bi_label_sequences()
    uni = transcript.uni_labels
    fp = transcript.flop_params
    steps: list[StepRecord] = []
    emitted: list[str] = []
    for t in range(1, n + 1):
        restart = 1 if t == n else int(schedule[t - 1])
        events = base_step_events(fp, t)
        if arm_overhead is not None:
            events.append(arm_step_event(fp, *arm_overhead))
        if restart:
            emitted = list(bi_preds[t - 1])
            events.extend(restart_events(fp, t))
            if exclude_latest and t < n:
                emitted[-1] = uni[t - 1]
                events.append(uni_head_event(fp))
        else:
            emitted = emitted + [uni[t - 1]]
            events.append(uni_head_event(fp))
        steps.append(StepRecord(labels=list(emitted), restart=restart,
                                flops=events))
    return StreamingTranscript(
        sentence_id=transcript.sentence_id,
        tokens=list(transcript.tokens),
        gold_labels=list(transcript.gold_labels),
        uni_labels=list(uni),
        steps=steps,
        flop_params=dict(fp),
    )


def parse_policy_spec(spec: str):
    """CLI policy grammar: ``every`` | ``fixed:k`` | ``arm:path`` | ``oracle``.

    Returns EveryStep/FixedK instances, the string "oracle", or an ArmPolicy
    loaded from the given path.
    """
    if spec == "every":
        return EveryStep()
    if spec == "oracle":
        return "oracle"
    if spec.startswith("fixed:"):
        try:
            k = int(spec.split(":", 1)[1])
        except ValueError:
            raise InputError(f"malformed policy spec {spec!r}") from None
        return FixedK(k)
    if spec.startswith("arm:"):
        from .arm import ArmModel

        return ArmPolicy(ArmModel.load(spec.split(":", 1)[1]))
    raise InputError(
        f"malformed policy spec {spec!r}; expected every|fixed:k|arm:path|oracle")
