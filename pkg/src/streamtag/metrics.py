"""Streaming and offline evaluation metrics plus the analytic FLOP model.

Transcripts are consumed duck-typed: anything with ``steps`` (each step
carrying ``labels`` and ``restart``), ``gold_labels`` and ``final_labels``
works, so the metrics stay decoupled from the policy engine.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Mapping, Sequence

from .errors import ConfigurationError, InputError
from .nn import atomic_write_text

NO_LABEL = None  # "old label" of a freshly appended token


@dataclass(frozen=True)
class Edit:
    position: int  # 0-based token index
    old: str | None
    new: str


@dataclass(frozen=True)
class FlopEvent:
    kind: str
    tokens: int
    flops: int


def edit_log(transcript) -> list[list[Edit]]:
    """Per-timestep label edits between consecutive emitted sequences.

    Appending token t always contributes exactly one edit with old=None.
    """
    log: list[list[Edit]] = []
    prev: list[str] = []
    for step in transcript.steps:
        cur = list(step.labels)
        edits = [Edit(i, prev[i], cur[i])
                 for i in range(len(prev)) if cur[i] != prev[i]]
        edits.append(Edit(len(cur) - 1, NO_LABEL, cur[-1]))
        log.append(edits)
        prev = cur
    return log


def edit_overhead(transcript) -> float:
    """Fraction of edits whose written label differs from that token's final
    label. A single-token stream has one necessary edit, so EO = 0."""
    final = list(transcript.final_labels)
    total = 0
    unnecessary = 0
    for edits in edit_log(transcript):
        for e in edits:
            total += 1
            if e.new != final[e.position]:
                unnecessary += 1
    return unnecessary / total if total else 0.0


def relative_correctness(transcript) -> float:
    """Fraction of timesteps whose emitted sequence prefixes the final one."""
    final = list(transcript.final_labels)
    steps = transcript.steps
    hits = sum(1 for t, s in enumerate(steps, 1) if list(s.labels) == final[:t])
    return hits / len(steps)


def streaming_em(transcript, gold: Sequence[str]) -> float:
    """Fraction of timesteps whose emitted sequence equals the gold prefix."""
    gold = list(gold)
    steps = transcript.steps
    if len(gold) != len(steps):
        raise InputError(
            f"gold length {len(gold)} != stream length {len(steps)}")
    hits = sum(1 for t, s in enumerate(steps, 1) if list(s.labels) == gold[:t])
    return hits / len(steps)


# -- span extraction and chunk F1 ------------------------------------------------

def extract_spans(labels: Sequence[str], scheme: str = "BIO") -> set[tuple[str, int, int]]:
    """(type, start, end) spans with end exclusive; invalid continuations are
    treated as span starts (standard CoNLL-style repair)."""
    scheme = scheme.upper()
    if scheme not in ("BIO", "BIOES"):
        raise ConfigurationError(f"unknown tagging scheme {scheme!r}")
    spans: set[tuple[str, int, int]] = set()
    n = len(labels)
    i = 0
    while i < n:
        tag = labels[i]
        if tag == "O" or "-" not in tag:
            i += 1
            continue
        prefix, typ = tag.split("-", 1)
        if scheme == "BIOES" and prefix == "S":
            spans.add((typ, i, i + 1))
            i += 1
            continue
        if scheme == "BIOES" and prefix == "E":
            # E- with no open span acts as a single-token span
            spans.add((typ, i, i + 1))
            i += 1
            continue
        # B- or a repaired I- opens a span
        j = i + 1
        if scheme == "BIO":
            while j < n and labels[j] == f"I-{typ}":
                j += 1
            spans.add((typ, i, j))
        else:
            while j < n and labels[j] == f"I-{typ}":
                j += 1
            if j < n and labels[j] == f"E-{typ}":
                j += 1
            spans.add((typ, i, j))
        i = j
    return spans


def chunk_f1(
    pred: Sequence[str],
    gold: Sequence[str],
    scheme: str = "BIO",
) -> tuple[float, float, float]:
    """Exact span-match precision/recall/F1 for one sentence.

    Both sides empty counts as perfect agreement (F1 = 1.0).
    """
    p_spans = extract_spans(pred, scheme)
    g_spans = extract_spans(gold, scheme)
    return _prf(len(p_spans & g_spans), len(p_spans - g_spans),
                len(g_spans - p_spans))


def chunk_f1_corpus(
    pairs: Sequence[tuple[Sequence[str], Sequence[str]]],
    scheme: str = "BIO",
) -> tuple[float, float, float]:
    """Micro-averaged span F1 over (pred, gold) sentence pairs."""
    tp = fp = fn = 0
    for pred, gold in pairs:
        p_spans = extract_spans(pred, scheme)
        g_spans = extract_spans(gold, scheme)
        tp += len(p_spans & g_spans)
        fp += len(p_spans - g_spans)
        fn += len(g_spans - p_spans)
    return _prf(tp, fp, fn)


def _prf(tp: int, fp: int, fn: int) -> tuple[float, float, float]:
    if tp == 0 and fp == 0 and fn == 0:
        return 1.0, 1.0, 1.0
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return precision, recall, f1


# -- analytic FLOP model -----------------------------------------------------------
#
# One multiply-accumulate counts as 2 FLOPs; layer normalization is
# approximated as 5 FLOPs per element (two per layer-norm'd transformer
# sublayer pair gives the 10*T*d term).

def linear_flops(t: int, d_in: int, d_out: int) -> int:
    return 2 * t * d_in * d_out


def attention_layer_flops(t: int, d: int, d_ffn: int) -> int:
    """Full transformer layer over t tokens: q/k/v/o projections, scores and
    context, two-layer FFN, and normalization terms."""
    return 8 * t * d * d + 4 * t * t * d + 4 * t * d * d_ffn + 10 * t * d


def causal_step_flops(t: int, d: int, d_ffn: int) -> int:
    """Incremental causal step at position t: per-row projections/FFN/norm
    plus attention work against t cached positions (O(t*d), not O(t^2*d))."""
    return 8 * d * d + 4 * d * d_ffn + 10 * d + 4 * t * d


def gru_step_flops(d_in: int, d_h: int) -> int:
    return 6 * d_in * d_h + 6 * d_h * d_h


def embedding_flops(t: int, d: int) -> int:
    # table lookups are free; the token+position (+indicator) adds are counted
    return 2 * t * d


def flop_model(kind: str, tokens: int, config: Mapping[str, int]) -> int:
    """Closed-form FLOP count for one layer event.

    Kinds: ``linear`` (needs d_in/d_out), ``attention`` (full layer over
    ``tokens``), ``attention_step`` (incremental causal step at position
    ``tokens``), ``gru_step`` (needs d_in/d_h), ``embedding``, ``head``
    (linear d_model -> n_labels over ``tokens`` rows).
    """
    if tokens < 1:
        raise InputError(f"token count must be >= 1, got {tokens}")
    if kind == "linear":
        return linear_flops(tokens, config["d_in"], config["d_out"])
    if kind == "attention":
        return attention_layer_flops(tokens, config["d_model"], config["d_ffn"])
    if kind == "attention_step":
        return causal_step_flops(tokens, config["d_model"], config["d_ffn"])
    if kind == "gru_step":
        return gru_step_flops(config["d_in"], config["d_h"])
    if kind == "embedding":
        return embedding_flops(tokens, config["d_model"])
    if kind == "head":
        return linear_flops(tokens, config["d_model"], config["n_labels"])
    raise ConfigurationError(f"unknown flop kind {kind!r}")


def transcript_flops(transcript) -> int:
    """Ledger total: the plain sum of all recorded events."""
    return sum(e.flops for step in transcript.steps for e in step.flops)


def restart_count(transcript) -> int:
    return sum(int(step.restart) for step in transcript.steps)


# -- aggregate reporting -------------------------------------------------------------

REPORT_FIELDS = (
    "offline_f1", "streaming_em", "eo", "rc",
    "gflops_per_example", "restarts_per_example", "n_sentences",
)


def aggregate_report(transcripts: Sequence, scheme: str = "BIO") -> dict:
    """Macro-average streaming metrics, micro span F1 on final labels, mean
    FLOPs and restarts per example."""
    if not transcripts:
        raise InputError("aggregate_report: empty transcript set")
    n = len(transcripts)
    em = sum(streaming_em(t, t.gold_labels) for t in transcripts) / n
    eo = sum(edit_overhead(t) for t in transcripts) / n
    rc = sum(relative_correctness(t) for t in transcripts) / n
    _, _, f1 = chunk_f1_corpus(
        [(t.final_labels, t.gold_labels) for t in transcripts], scheme)
    gflops = sum(transcript_flops(t) for t in transcripts) / n / 1e9
    restarts = sum(restart_count(t) for t in transcripts) / n
    return {
        "offline_f1": f1,
        "streaming_em": em,
        "eo": eo,
        "rc": rc,
        "gflops_per_example": gflops,
        "restarts_per_example": restarts,
        "n_sentences": n,
    }


def round_sig(x: float, digits: int = 6) -> float:
    return float(f"{x:.{digits}g}")


def write_report(path: str, report: dict) -> None:
    """Report JSON with numbers at 6 significant digits."""
    out = {}
    for key in REPORT_FIELDS:
        value = report[key]
        out[key] = value if isinstance(value, int) else round_sig(float(value))
    atomic_write_text(path, json.dumps(out, indent=2) + "\n")


def read_report(path: str) -> dict:
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)
