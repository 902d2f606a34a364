"""Command-line entry points for reproducible experiments.

Subcommands: ``gen-data`` (synthetic datasets), ``train-encoder``,
``train-arm`` (classifier fit plus postprocessing grid selection),
``eval-stream`` (transcripts + aggregate report for one policy), and
``bench-flops`` (analytic streaming-cost table). Every run writes its
resolved configuration next to its outputs; the ``HEAR_SEED`` environment
variable overrides the configured seed.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import arm as arm_mod
from . import data as data_mod
from . import metrics as metrics_mod
from . import policy as policy_mod
from .encoder import HybridConfig, HybridEncoder, offline_f1
from .errors import ConfigurationError, InputError, StreamTagError
from .nn import atomic_write_text

SEED_ENV_VAR = "HEAR_SEED"


@dataclass
class RunConfig:
    """Resolved settings for one command invocation.

    Defaults are desk-scale; precedence is defaults < config file < CLI
    flags < the seed environment variable.
    """

    # encoder architecture
    u: int = 2
    b: int = 2
    d_model: int = 64
    n_heads: int = 4
    d_ffn: int = 128
    max_len: int = 64
    uni_kind: str = "causal-attention"
    # optimization
    lr: float = 1e-3
    batch_size: int = 32
    epochs: int = 6
    # adaptive restart module
    m: int = 8
    d_arm: int = 64
    alpha: int = 0
    beta: int = 10
    tau: float = 0.5
    exclude_latest: bool = False
    arm_epochs: int = 5
    # data generation
    task: str = "lookahead"
    n_sentences: int = 6250
    len_min: int = 6
    len_max: int = 18
    marker_prob: float = 0.1
    window: int = 3
    scheme: str = "BIO"
    # bookkeeping
    data_dir: str = ""
    out_dir: str = ""
    seed: int = 7
    jobs: int = 1


def load_run_config(path: str | None, overrides: dict) -> RunConfig:
    """Build the resolved config; unknown keys in the file are rejected."""
    fields = {f.name for f in dataclasses.fields(RunConfig)}
    values: dict = {}
    if path:
        with open(path, "r", encoding="utf-8") as f:
            loaded = json.load(f)
        unknown = set(loaded) - fields
        if unknown:
            raise ConfigurationError(
                f"unknown config keys: {sorted(unknown)}")
        values.update(loaded)
    values.update({k: v for k, v in overrides.items()
                   if k in fields and v is not None})
    cfg = RunConfig(**values)
    env_seed = os.environ.get(SEED_ENV_VAR)
    if env_seed is not None:
        cfg.seed = int(env_seed)
    return cfg


def write_resolved_config(cfg: RunConfig, out_dir: str) -> None:
    os.makedirs(out_dir, exist_ok=True)
    atomic_write_text(os.path.join(out_dir, "resolved_config.json"),
                      json.dumps(dataclasses.asdict(cfg), indent=2) + "\n")


# -- gen-data -----------------------------------------------------------------------

def cmd_gen_data(cfg: RunConfig) -> int:
    if cfg.task == "lookahead":
        sentences = data_mod.gen_lookahead(
            cfg.n_sentences, (cfg.len_min, cfg.len_max),
            cfg.marker_prob, cfg.window, cfg.seed)
    elif cfg.task == "local":
        sentences = data_mod.gen_local(
            cfg.n_sentences, (cfg.len_min, cfg.len_max), cfg.seed)
    else:
        raise ConfigurationError(f"unknown task {cfg.task!r}")
    train, dev, test = data_mod.split_dataset(sentences)
    out = cfg.out_dir
    write_resolved_config(cfg, out)
    for name, split in (("train", train), ("dev", dev), ("test", test)):
        data_mod.write_conll(os.path.join(out, f"{name}.conll"), split)
    data_mod.write_dataset_manifest(os.path.join(out, "manifest.json"), {
        "task": cfg.task,
        "n_sentences": cfg.n_sentences,
        "length_range": [cfg.len_min, cfg.len_max],
        "marker_prob": cfg.marker_prob,
        "window": cfg.window,
        "seed": cfg.seed,
        "splits": {"train": len(train), "dev": len(dev), "test": len(test)},
    })
    print(f"wrote {len(train)}/{len(dev)}/{len(test)} sentences to {out}")
    return 0


def load_splits(data_dir: str) -> tuple[list, list, list]:
    return tuple(
        data_mod.read_conll(os.path.join(data_dir, f"{name}.conll"))
        for name in ("train", "dev", "test"))  # type: ignore[return-value]


# -- train-encoder ------------------------------------------------------------------

def cmd_train_encoder(cfg: RunConfig) -> int:
    train, dev, _ = load_splits(cfg.data_dir)
    vocab = data_mod.build_vocab(train)
    model_cfg = HybridConfig(
        u=cfg.u, b=cfg.b, d_model=cfg.d_model, n_heads=cfg.n_heads,
        d_ffn=cfg.d_ffn, vocab_size=vocab.n_tokens, n_labels=vocab.n_labels,
        max_len=cfg.max_len, uni_kind=cfg.uni_kind, seed=cfg.seed)
    model = HybridEncoder(model_cfg, vocab)
    write_resolved_config(cfg, cfg.out_dir)
    model_path = os.path.join(cfg.out_dir, "model.bin")
    log_path = os.path.join(cfg.out_dir, "train_log.jsonl")
    rng = np.random.default_rng(cfg.seed)
    best_f1 = -1.0
    log_lines = []
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(train))
        losses_bi, losses_uni = [], []
        for start in range(0, len(order), cfg.batch_size):
            batch = [train[i] for i in order[start:start + cfg.batch_size]]
            loss_bi, loss_uni = model.train_step(batch, lr=cfg.lr)
            losses_bi.append(loss_bi)
            losses_uni.append(loss_uni)
        dev_f1 = offline_f1(model, dev, cfg.scheme)
        entry = {
            "epoch": epoch,
            "loss_bi": float(np.mean(losses_bi)),
            "loss_uni": float(np.mean(losses_uni)),
            "dev_f1": dev_f1,
        }
        log_lines.append(json.dumps(entry))
        print(f"epoch {epoch}: loss_bi={entry['loss_bi']:.4f} "
              f"loss_uni={entry['loss_uni']:.4f} dev_f1={dev_f1:.4f}")
        if dev_f1 > best_f1:
            best_f1 = dev_f1
            model.save(model_path)
    atomic_write_text(log_path, "\n".join(log_lines) + "\n")
    print(f"best dev F1 {best_f1:.4f}; model at {model_path}")
    return 0


# -- train-arm ----------------------------------------------------------------------

def cmd_train_arm(cfg: RunConfig, encoder_path: str) -> int:
    train, dev, _ = load_splits(cfg.data_dir)
    encoder = HybridEncoder.load(encoder_path)
    write_resolved_config(cfg, cfg.out_dir)
    model, intrinsic = arm_mod.train_arm(
        encoder, train, dev, m=cfg.m, d_arm=cfg.d_arm, tau=cfg.tau,
        lr=cfg.lr, epochs=cfg.arm_epochs, batch_size=cfg.batch_size,
        seed=cfg.seed)
    dev_records = arm_mod.collect_policy_records(encoder, dev, cfg.m)
    alpha, beta, exclude, _ = arm_mod.tune_postprocessing(model, dev_records)
    model.alpha = alpha
    model.beta = beta
    model.exclude_latest = exclude
    arm_path = os.path.join(cfg.out_dir, "arm.bin")
    model.save(arm_path)
    report = dict(intrinsic)
    report.update({"alpha": alpha, "beta": beta, "exclude_latest": exclude,
                   "tau": cfg.tau, "m": cfg.m, "d_arm": cfg.d_arm})
    atomic_write_text(os.path.join(cfg.out_dir, "intrinsic_report.json"),
                      json.dumps(report, indent=2) + "\n")
    print(f"selected alpha={alpha} beta={beta} exclude_latest={exclude}; "
          f"intrinsic micro-F1 {intrinsic['micro_f1']:.4f} "
          f"(majority baseline {intrinsic['majority_f1']:.4f})")
    print(f"classifier at {arm_path}")
    return 0


# -- eval-stream --------------------------------------------------------------------

def _stream_one(model, policy, sentence, idx, m):
    return policy_mod.run_stream(model, policy, sentence, sentence_id=idx, m=m)


def _oracle_transcript(model, sentence, idx, m):
    recorded = policy_mod.run_stream(
        model, policy_mod.EveryStep(), sentence, sentence_id=idx, m=m)
    bits = policy_mod.oracle_schedule(
        recorded.gold_labels, recorded.uni_labels,
        recorded.bi_label_sequences())
    return policy_mod.replay_transcript(recorded, bits)


def cmd_eval_stream(cfg: RunConfig, encoder_path: str, policy_spec: str,
                    split: str = "test") -> int:
    splits = dict(zip(("train", "dev", "test"), load_splits(cfg.data_dir)))
    if split not in splits:
        raise InputError(f"unknown split {split!r}")
    sentences = splits[split]
    model = HybridEncoder.load(encoder_path)
    policy = policy_mod.parse_policy_spec(policy_spec)
    if isinstance(policy, policy_mod.ArmPolicy):
        if (policy.arm.d_model != model.config.d_model
                or policy.arm.n_heads != model.config.n_heads):
            raise ConfigurationError(
                "adaptive-restart model dimensions do not match the encoder")
    write_resolved_config(cfg, cfg.out_dir)

    if policy == "oracle":
        def work(pair):
            idx, sentence = pair
            return _oracle_transcript(model, sentence, idx, cfg.m)
    else:
        def work(pair):
            idx, sentence = pair
            return _stream_one(model, policy, sentence, idx, cfg.m)

    items = list(enumerate(sentences))
    if cfg.jobs > 1:
        with ThreadPoolExecutor(max_workers=cfg.jobs) as pool:
            transcripts = list(pool.map(work, items))
    else:
        transcripts = [work(item) for item in items]

    policy_mod.write_transcripts(
        os.path.join(cfg.out_dir, "transcripts.jsonl"), transcripts)
    report = metrics_mod.aggregate_report(transcripts, cfg.scheme)
    metrics_mod.write_report(os.path.join(cfg.out_dir, "report.json"), report)
    print(json.dumps({k: metrics_mod.round_sig(float(v))
                      if not isinstance(v, int) else v
                      for k, v in report.items()}))
    return 0


# -- bench-flops --------------------------------------------------------------------

def streaming_flops_everystep(cfg: RunConfig, b: int, length: int) -> int:
    """Analytic per-example streaming cost of restarting at every step."""
    model_cfg = HybridConfig(
        u=cfg.u + cfg.b - b, b=b, d_model=cfg.d_model, n_heads=cfg.n_heads,
        d_ffn=cfg.d_ffn, vocab_size=32, n_labels=4, max_len=max(cfg.max_len, length),
        uni_kind=cfg.uni_kind, seed=0)
    fp = policy_mod.flop_params_from_config(model_cfg)
    fp["m"] = cfg.m
    total = 0
    for t in range(1, length + 1):
        total += sum(e.flops for e in policy_mod.base_step_events(fp, t))
        total += sum(e.flops for e in policy_mod.restart_events(fp, t))
    return total


def cmd_bench_flops(cfg: RunConfig, lengths: list[int]) -> int:
    if any(l < 1 for l in lengths):
        raise InputError("lengths must be >= 1")
    total_layers = cfg.u + cfg.b
    b_values = list(range(total_layers))  # u >= 1 keeps b below the budget
    rows = []
    for length in lengths:
        row = {"length": length}
        for b in b_values:
            row[f"b={b}"] = streaming_flops_everystep(cfg, b, length)
        rows.append(row)
    header = ["length"] + [f"b={b}" for b in b_values]
    widths = [max(len(h), 14) for h in header]
    lines = ["  ".join(h.rjust(w) for h, w in zip(header, widths))]
    for row in rows:
        lines.append("  ".join(
            str(row[h]).rjust(w) for h, w in zip(header, widths)))
    table = "\n".join(lines)
    print(table)
    if cfg.out_dir:
        write_resolved_config(cfg, cfg.out_dir)
        atomic_write_text(os.path.join(cfg.out_dir, "flops.json"),
                          json.dumps(rows, indent=2) + "\n")
        atomic_write_text(os.path.join(cfg.out_dir, "flops.txt"), table + "\n")
    return 0


# -- argument parsing -----------------------------------------------------------------

def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file (unknown keys rejected)")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", dest="out_dir")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="streamtag",
        description="streaming sequence tagging experiments")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset")
    _add_common(p)
    p.add_argument("--task", choices=["lookahead", "local"])
    p.add_argument("--n", dest="n_sentences", type=int)
    p.add_argument("--len-min", dest="len_min", type=int)
    p.add_argument("--len-max", dest="len_max", type=int)
    p.add_argument("--marker-prob", dest="marker_prob", type=float)
    p.add_argument("--window", type=int)

    p = sub.add_parser("train-encoder", help="train the hybrid encoder")
    _add_common(p)
    p.add_argument("--data", dest="data_dir", required=True)
    p.add_argument("--u", type=int)
    p.add_argument("--b", type=int)
    p.add_argument("--d-model", dest="d_model", type=int)
    p.add_argument("--n-heads", dest="n_heads", type=int)
    p.add_argument("--d-ffn", dest="d_ffn", type=int)
    p.add_argument("--uni-kind", dest="uni_kind",
                   choices=["causal-attention", "gru"])
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--lr", type=float)

    p = sub.add_parser("train-arm", help="train the adaptive restart module")
    _add_common(p)
    p.add_argument("--encoder", required=True)
    p.add_argument("--data", dest="data_dir", required=True)
    p.add_argument("--m", type=int)
    p.add_argument("--d-arm", dest="d_arm", type=int)
    p.add_argument("--arm-epochs", dest="arm_epochs", type=int)
    p.add_argument("--tau", type=float)
    p.add_argument("--lr", type=float)

    p = sub.add_parser("eval-stream", help="stream a dataset under a policy")
    _add_common(p)
    p.add_argument("--encoder", required=True)
    p.add_argument("--policy", required=True,
                   help="every | fixed:k | arm:path | oracle")
    p.add_argument("--data", dest="data_dir", required=True)
    p.add_argument("--split", default="test",
                   choices=["train", "dev", "test"])
    p.add_argument("--scheme", choices=["BIO", "BIOES"])
    p.add_argument("--jobs", type=int)

    p = sub.add_parser("bench-flops", help="analytic streaming FLOP table")
    _add_common(p)
    p.add_argument("--lengths", default="8,16,32,64",
                   help="comma-separated sentence lengths")
    p.add_argument("--u", type=int)
    p.add_argument("--b", type=int)
    p.add_argument("--d-model", dest="d_model", type=int)
    p.add_argument("--d-ffn", dest="d_ffn", type=int)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    overrides = {k: v for k, v in vars(args).items()
                 if k not in ("command", "config", "encoder", "policy",
                              "split", "lengths")}
    try:
        cfg = load_run_config(args.config, overrides)
        if args.command in ("gen-data", "train-encoder", "train-arm",
                            "eval-stream") and not cfg.out_dir:
            parser.error("--out is required")
        if args.command == "gen-data":
            return cmd_gen_data(cfg)
        if args.command == "train-encoder":
            return cmd_train_encoder(cfg)
        if args.command == "train-arm":
            return cmd_train_arm(cfg, args.encoder)
        if args.command == "eval-stream":
            return cmd_eval_stream(cfg, args.encoder, args.policy, args.split)
        if args.command == "bench-flops":
            lengths = [int(x) for x in str(args.lengths).split(",") if x]
            return cmd_bench_flops(cfg, lengths)
        parser.error(f"unknown command {args.command!r}")
    except StreamTagError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
