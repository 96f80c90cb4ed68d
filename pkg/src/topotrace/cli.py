"""Command-line driver for the generate / label / pairs / SimPO pipeline.

Every subcommand takes ``--config FILE`` (INI). Flags override values from
the file, which override built-in defaults. Exit codes: 0 success, 1 usage
or validation error, 2 when more than 10% of generation cells failed.
"""

from __future__ import annotations

import argparse
import logging
import sys
import time
from pathlib import Path
from typing import Sequence

from topotrace import analytics, labeling, pairs, simpo
from topotrace.config import PipelineConfig, check, load_config
from topotrace.errors import TopoTraceError, ValidationError
from topotrace.labeling import Difficulty, QuestionLabels
from topotrace.records import (
    GenerationRecord,
    Question,
    iter_jsonl,
    load_questions,
    load_responses,
    write_jsonl,
)

log = logging.getLogger("topotrace")

EXIT_OK, EXIT_INVALID, EXIT_PARTIAL = 0, 1, 2

SUBCOMMANDS = (
    "generate",
    "label",
    "segment",
    "analyze",
    "build-sft",
    "build-pairs",
    "simpo-check",
    "simpo-train",
    "report",
    "serve-mock",
)


class UsageError(Exception):
    def __init__(self, message: str, usage: str):
        super().__init__(message)
        self.usage = usage


class _Parser(argparse.ArgumentParser):
    # argparse exits 2 on bad usage; this pipeline reserves 2 for partial failure
    def error(self, message: str):
        raise UsageError(message, self.format_usage())


# shared helpers


def _config(args) -> PipelineConfig:
    cfg = load_config(args.config)
    for section, key, attr in getattr(args, "_overrides", ()):
        cfg.override(section, key, getattr(args, attr, None))
    check(cfg)
    return cfg


def _labeled(cfg: PipelineConfig) -> tuple[list[Question], dict[str, Question], list[GenerationRecord]]:
    questions = load_questions(cfg.path("questions"))
    qmap = {q.id: q for q in questions}
    records = labeling.label_records(load_responses(cfg.path("responses")), qmap)
    return questions, qmap, records


def _question_order(questions: Sequence[Question], records: Sequence[GenerationRecord]) -> list[str]:
    present = {r.question_id for r in records}
    return [q.id for q in questions if q.id in present]


def _load_labels(path: Path) -> list[QuestionLabels]:
    return [QuestionLabels.from_json(o) for o in iter_jsonl(path)]


def _try_win_rate(questions, records) -> analytics.WinRateReport | None:
    try:
        labels = labeling.question_labels(records, _question_order(questions, records))
        return analytics.win_rate(labels)
    except ValidationError as exc:
        log.warning("win rate skipped: %s", exc)
        return None


# subcommands


def cmd_generate(args) -> int:
    from topotrace.genclient import GenConfig, Generator, parse_topologies

    cfg = _config(args)
    g = cfg.values["generate"]
    gen_cfg = GenConfig(
        base_url=g["base_url"],
        model_name=g["model_name"],
        cache_dir=str(cfg.path("cache_dir")),
        api_key_env_name=g["api_key_env_name"],
        temperature=g["temperature"],
        n_samples_per_topology=g["n_samples_per_topology"],
        max_tokens=g["max_tokens"],
        concurrency_limit=g["concurrency_limit"],
        max_depth=g["max_depth"],
        n_children=g["n_children"],
        n_neighbors=g["n_neighbors"],
        timeout=g["timeout"],
        max_attempts=g["max_attempts"],
        backoff_base=g["backoff_base"],
        backoff_max=g["backoff_max"],
    )
    questions = load_questions(cfg.path("questions"))
    topologies = parse_topologies(g["topologies"])
    t0 = time.monotonic()
    with Generator(gen_cfg) as gen:
        summary = gen.run(questions, topologies, cfg.path("responses"), cfg.path("errors"), resume=args.resume)
    print(
        f"cells={summary.n_cells} resumed={summary.n_resumed} cached={summary.n_from_cache} "
        f"requested={summary.n_requested} failed={summary.n_failed} "
        f"elapsed={time.monotonic() - t0:.1f}s"
    )
    if summary.partial_failure:
        print(
            f"error: {summary.n_failed}/{summary.n_cells} cells failed; see {cfg.path('errors')}",
            file=sys.stderr,
        )
        return EXIT_PARTIAL
    return EXIT_OK


def cmd_label(args) -> int:
    cfg = _config(args)
    questions, _, records = _labeled(cfg)
    # every question in the file gets a row; a missing topology is an error
    labels = labeling.question_labels(records, [q.id for q in questions])
    n = write_jsonl(cfg.path("labels"), (ql.to_json() for ql in labels))
    if args.labeled_out:
        write_jsonl(args.labeled_out, (r.to_json() for r in records))
    print(f"wrote {n} question labels to {cfg.path('labels')}")
    return EXIT_OK


def cmd_segment(args) -> int:
    cfg = _config(args)
    src = Path(args.input) if args.input else cfg.path("labels")
    labels = _load_labels(src)
    lab = cfg.values["labeling"]
    tiers = labeling.segment_difficulty(labels, q_hi=lab["q_hi"], q_lo=lab["q_lo"])
    out = Path(args.out) if args.out else src
    write_jsonl(out, (ql.to_json() for ql in labeling.with_difficulty(labels, tiers)))
    counts = {d: sum(1 for t in tiers.values() if t is d) for d in Difficulty}
    print(" ".join(f"{d.value}={counts[d]}" for d in Difficulty))
    return EXIT_OK


def _analytics(cfg: PipelineConfig):
    questions, qmap, records = _labeled(cfg)
    rep = _try_win_rate(questions, records)
    cells = analytics.subject_accuracy(records, qmap)
    stats = analytics.length_stats(records)
    fractions = analytics.topology_fractions(records, {q.id: q.dataset for q in questions})
    return records, rep, cells, stats, fractions


def _write_csvs(out_dir: Path, rep, cells, stats, fractions) -> list[Path]:
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    if rep is not None:
        analytics.write_win_rate_csv(out_dir / "win_rate.csv", rep)
        written.append(out_dir / "win_rate.csv")
    analytics.write_subject_accuracy_csv(out_dir / "subject_accuracy.csv", cells)
    analytics.write_length_stats_csv(out_dir / "length_stats.csv", stats)
    analytics.write_topology_fractions_csv(out_dir / "topology_fractions.csv", fractions)
    written += [out_dir / n for n in ("subject_accuracy.csv", "length_stats.csv", "topology_fractions.csv")]
    return written


def cmd_analyze(args) -> int:
    cfg = _config(args)
    _, rep, cells, stats, fractions = _analytics(cfg)
    print(analytics.format_summary(rep, cells, stats, fractions), end="")
    if args.out_dir:
        _write_csvs(Path(args.out_dir), rep, cells, stats, fractions)
    return EXIT_OK


def cmd_report(args) -> int:
    cfg = _config(args)
    records, rep, cells, stats, fractions = _analytics(cfg)
    out = cfg.path("report_dir")
    written = _write_csvs(out, rep, cells, stats, fractions)
    (out / "summary.txt").write_text(analytics.format_summary(rep, cells, stats, fractions), encoding="utf-8")
    written.append(out / "summary.txt")
    if cfg.get("report", "figures") and not args.no_figures:
        from topotrace import plotting

        figs = [
            plotting.length_violin(records, out / "length_violin.png"),
            plotting.win_rate_bar(rep, out / "win_rate.png") if rep is not None else None,
            plotting.subject_accuracy_bars(cells, out / "subject_accuracy.png"),
            plotting.fractions_stacked(fractions, out / "topology_fractions.png"),
        ]
        written += [f for f in figs if f is not None]
    for p in written:
        print(p)
    return EXIT_OK


def _tier_quotas(cfg: PipelineConfig) -> dict[Difficulty, int]:
    p = cfg.values["pairs"]
    return {Difficulty.EASY: p["k_easy"], Difficulty.MEDIUM: p["k_medium"], Difficulty.HARD: p["k_hard"]}


def cmd_build_sft(args) -> int:
    if args.k_tier is not None:
        args.k_easy = args.k_medium = args.k_hard = args.k_tier
    cfg = _config(args)
    _, qmap, records = _labeled(cfg)
    labels = _load_labels(cfg.path("labels"))
    scorer = pairs.StubORM({ql.question_id: ql for ql in labels})
    sft = pairs.build_sft(
        records, qmap, labels, scorer, _tier_quotas(cfg), keep_top_m=cfg.get("pairs", "keep_top_m"), seed=cfg.seed
    )
    n = write_jsonl(cfg.path("sft"), (s.to_json() for s in sft))
    print(f"wrote {n} SFT records to {cfg.path('sft')}")
    return EXIT_OK


def cmd_build_pairs(args) -> int:
    cfg = _config(args)
    _, qmap, records = _labeled(cfg)
    p = cfg.values["pairs"]
    variants = pairs.VARIANTS if args.variant == "all" else (args.variant,)
    out = []
    for v in variants:
        built = pairs.build_pairs(records, qmap, v, max_pairs=p["max_pairs"], p=p["length_quantile"])
        print(f"{v}: {len(built)} pairs")
        out += built
    write_jsonl(cfg.path("pairs"), (pp.to_json() for pp in out))
    return EXIT_OK


def cmd_simpo_check(args) -> int:
    t0 = time.monotonic()
    res = simpo.gradient_check(n_instances=args.instances, seed=args.seed, h=args.h)
    ok = res.max_rel_error <= simpo.GRAD_RTOL
    print(
        f"instances={res.n_instances} max_relative_error={res.max_rel_error:.3e} "
        f"tolerance={simpo.GRAD_RTOL:.0e} {'PASS' if ok else 'FAIL'} ({time.monotonic() - t0:.1f}s)"
    )
    return EXIT_OK if ok else EXIT_INVALID


def cmd_simpo_train(args) -> int:
    cfg = _config(args)
    s = cfg.values["simpo"]
    seed = cfg.seed
    sc = simpo.SimpoConfig(beta=s["beta"], gamma=s["gamma"])
    if args.separable:
        batch = simpo.separable_pairs(seed=seed)
        vocab = max(max(ex.winner + ex.loser) for ex in batch) + 1
        tok = None
    else:
        vocab = s["vocab_size"]
        tok = simpo.HashingTokenizer(vocab, s["max_tokens"])
        objs = list(iter_jsonl(cfg.path("pairs")))
        if args.variant:
            objs = [o for o in objs if o.get("variant") == args.variant]
        batch = simpo.pairs_to_batch(objs, tok)
    policy = simpo.load_checkpoint(args.init) if args.init else simpo.ToyPolicy.uniform(vocab)
    if policy.vocab_size != vocab:
        raise ValidationError(f"checkpoint vocabulary {policy.vocab_size} does not match {vocab}")
    if s["ntp_steps"] > 0:
        if tok is None:
            seqs = [ex.winner for ex in batch]
        else:
            seqs = [tok(o["response"]) for o in iter_jsonl(cfg.path("sft"))]
        policy = simpo.train_ntp(policy, seqs, s["ntp_steps"], s["ntp_learning_rate"])
    res = simpo.train(policy, batch, sc, s["steps"], s["learning_rate"], seed=seed, batch_size=s["batch_size"])
    out = cfg.path("simpo_dir")
    out.mkdir(parents=True, exist_ok=True)
    simpo.write_metrics_csv(out / "metrics.csv", res.metrics)
    simpo.save_checkpoint(out / "policy.txt", res.policy)
    first, last = res.metrics[0], res.metrics[-1]
    print(
        f"pairs={len(batch)} steps={last.step} loss {first.loss:.4f} -> {last.loss:.4f} "
        f"margin {first.mean_margin:.4f} -> {last.mean_margin:.4f}"
    )
    print(out / "metrics.csv")
    print(out / "policy.txt")
    return EXIT_OK


def cmd_serve_mock(args) -> int:
    from topotrace.genclient.mock import MockEndpoint

    cfg = _config(args)
    questions = load_questions(cfg.path("questions"))
    with MockEndpoint(questions, host=args.host, port=args.port, delay=args.delay) as ep:
        print(f"mock endpoint listening on {ep.url}", flush=True)
        try:
            while True:
                time.sleep(3600)
        except KeyboardInterrupt:
            pass
    return EXIT_OK


# parser


def _add(sub, name: str, func, help: str, overrides=()):
    p = sub.add_parser(name, help=help, description=help)
    p.add_argument("--config", metavar="FILE", help="INI config file; flags override its values")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    p.set_defaults(func=func, _overrides=list(overrides))
    return p


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog="topotrace",
        description="Topology-prompted reasoning data pipeline.",
        epilog="Precedence: command-line flags > --config file > built-in defaults.",
    )
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", required=True)

    p = _add(
        sub,
        "generate",
        cmd_generate,
        "sample responses per (question, topology) from a chat-completions endpoint",
        [
            ("paths", "questions", "questions"),
            ("paths", "responses", "out"),
            ("paths", "errors", "errors_out"),
            ("paths", "cache_dir", "cache_dir"),
            ("generate", "topologies", "topologies"),
            ("generate", "base_url", "base_url"),
            ("generate", "model_name", "model"),
            ("generate", "n_samples_per_topology", "n_samples"),
            ("generate", "concurrency_limit", "concurrency"),
            ("generate", "temperature", "temperature"),
        ],
    )
    p.add_argument("--questions", metavar="FILE", help="questions.jsonl input")
    p.add_argument("--out", metavar="FILE", help="responses.jsonl output")
    p.add_argument("--errors-out", metavar="FILE", help="sidecar file listing failed cells")
    p.add_argument("--cache-dir", metavar="DIR", help="response cache directory")
    p.add_argument("--topologies", metavar="LIST", help="comma-separated subset of chain,tree,graph")
    p.add_argument("--base-url", metavar="URL", help="endpoint root, e.g. http://127.0.0.1:8000")
    p.add_argument("--model", metavar="NAME", help="model name sent with each request")
    p.add_argument("--n-samples", type=int, metavar="N", help="samples per (question, topology), 1..64")
    p.add_argument("--concurrency", type=int, metavar="N", help="maximum in-flight requests")
    p.add_argument("--temperature", type=float, metavar="T", help="sampling temperature")
    p.add_argument("--resume", action="store_true", help="keep complete records already in --out")

    p = _add(
        sub,
        "label",
        cmd_label,
        "attach outcome labels and write per-question topology scores",
        [("paths", "responses", "input"), ("paths", "questions", "questions"), ("paths", "labels", "out")],
    )
    p.add_argument("--in", dest="input", metavar="FILE", help="responses.jsonl input")
    p.add_argument("--questions", metavar="FILE", help="questions.jsonl input")
    p.add_argument("--out", metavar="FILE", help="labels.jsonl output")
    p.add_argument("--labeled-out", metavar="FILE", help="also write responses with outcome set")

    p = _add(
        sub,
        "segment",
        cmd_segment,
        "assign Easy/Medium/Hard tiers from per-topology score quantiles",
        [("labeling", "q_hi", "q_hi"), ("labeling", "q_lo", "q_lo")],
    )
    p.add_argument("--in", dest="input", metavar="FILE", help="labels.jsonl input (default: configured labels path)")
    p.add_argument("--out", metavar="FILE", help="labels.jsonl output with difficulty (default: overwrite input path)")
    p.add_argument("--q-hi", type=float, metavar="Q", help="upper quantile for Easy (default 0.85)")
    p.add_argument("--q-lo", type=float, metavar="Q", help="lower quantile for Hard (default 0.15)")

    analyze_overrides = [("paths", "responses", "input"), ("paths", "questions", "questions")]
    p = _add(sub, "analyze", cmd_analyze, "print win rates, subject accuracy, lengths and topology shares", analyze_overrides)
    p.add_argument("--in", dest="input", metavar="FILE", help="responses.jsonl input")
    p.add_argument("--questions", metavar="FILE", help="questions.jsonl input")
    p.add_argument("--out-dir", metavar="DIR", help="also write the four CSV tables here")

    p = _add(
        sub,
        "report",
        cmd_report,
        "write the four CSV tables, summary.txt and PNG figures",
        analyze_overrides + [("paths", "report_dir", "out_dir")],
    )
    p.add_argument("--in", dest="input", metavar="FILE", help="responses.jsonl input")
    p.add_argument("--questions", metavar="FILE", help="questions.jsonl input")
    p.add_argument("--out-dir", metavar="DIR", help="report directory")
    p.add_argument("--no-figures", action="store_true", help="skip the PNG figures")

    p = _add(
        sub,
        "build-sft",
        cmd_build_sft,
        "select top-scoring correct responses per question across difficulty tiers",
        [
            ("paths", "responses", "input"),
            ("paths", "questions", "questions"),
            ("paths", "labels", "labels"),
            ("paths", "sft", "out"),
            ("pairs", "k_easy", "k_easy"),
            ("pairs", "k_medium", "k_medium"),
            ("pairs", "k_hard", "k_hard"),
            ("pairs", "keep_top_m", "keep_top_m"),
            ("run", "seed", "seed"),
        ],
    )
    p.add_argument("--in", dest="input", metavar="FILE", help="responses.jsonl input")
    p.add_argument("--questions", metavar="FILE", help="questions.jsonl input")
    p.add_argument("--labels", metavar="FILE", help="segmented labels.jsonl input")
    p.add_argument("--out", metavar="FILE", help="sft.jsonl output")
    p.add_argument("--k-tier", type=int, metavar="N", help="question quota for every tier")
    p.add_argument("--k-easy", type=int, metavar="N", help="question quota for Easy")
    p.add_argument("--k-medium", type=int, metavar="N", help="question quota for Medium")
    p.add_argument("--k-hard", type=int, metavar="N", help="question quota for Hard")
    p.add_argument("--keep-top-m", type=int, metavar="M", help="responses kept per question")
    p.add_argument("--seed", type=int, help="seed for tier sampling")

    p = _add(
        sub,
        "build-pairs",
        cmd_build_pairs,
        "build (winner, loser) preference pairs",
        [
            ("paths", "responses", "input"),
            ("paths", "questions", "questions"),
            ("paths", "pairs", "out"),
            ("pairs", "max_pairs", "max_pairs"),
            ("pairs", "length_quantile", "p"),
        ],
    )
    p.add_argument("--in", dest="input", metavar="FILE", help="responses.jsonl input")
    p.add_argument("--questions", metavar="FILE", help="questions.jsonl input")
    p.add_argument("--out", metavar="FILE", help="pairs.jsonl output")
    p.add_argument(
        "--variant", choices=pairs.VARIANTS + ("all",), default="standard", help="pair construction rule (default standard)"
    )
    p.add_argument("--max-pairs", type=int, metavar="K", help="pairs per question cap (default 4)")
    p.add_argument("--p", type=float, metavar="P", help="length quantile for the frugal variants (default 0.25)")

    p = sub.add_parser(
        "simpo-check",
        help="verify the analytic SimPO gradient against finite differences",
        description="verify the analytic SimPO gradient against finite differences",
    )
    p.add_argument("--instances", type=int, default=100, metavar="N", help="random instances (default 100)")
    p.add_argument("--seed", type=int, default=0, help="instance generator seed")
    p.add_argument("--h", type=float, default=1e-5, help="finite-difference step (default 1e-5)")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    p.set_defaults(func=cmd_simpo_check)

    p = _add(
        sub,
        "simpo-train",
        cmd_simpo_train,
        "train the toy bigram policy on preference pairs",
        [
            ("paths", "pairs", "pairs"),
            ("paths", "sft", "sft"),
            ("paths", "simpo_dir", "out_dir"),
            ("simpo", "beta", "beta"),
            ("simpo", "gamma", "gamma"),
            ("simpo", "learning_rate", "lr"),
            ("simpo", "steps", "steps"),
            ("simpo", "vocab_size", "vocab_size"),
            ("simpo", "batch_size", "batch_size"),
            ("simpo", "ntp_steps", "ntp_steps"),
            ("run", "seed", "seed"),
        ],
    )
    p.add_argument("--pairs", metavar="FILE", help="pairs.jsonl input")
    p.add_argument("--variant", choices=pairs.VARIANTS, help="train on one variant only")
    p.add_argument("--separable", action="store_true", help="use the built-in linearly separable toy dataset")
    p.add_argument("--sft", metavar="FILE", help="sft.jsonl used for the next-token warm start")
    p.add_argument("--ntp-steps", type=int, metavar="N", help="warm-start steps before SimPO (default 0)")
    p.add_argument("--init", metavar="FILE", help="start from a saved policy checkpoint")
    p.add_argument("--out-dir", metavar="DIR", help="writes metrics.csv and policy.txt here")
    p.add_argument("--beta", type=float, help="reward scale (default 2.0)")
    p.add_argument("--gamma", type=float, help="target margin (default 0.5)")
    p.add_argument("--lr", type=float, help="learning rate (default 0.1)")
    p.add_argument("--steps", type=int, help="gradient steps (default 500)")
    p.add_argument("--vocab-size", type=int, metavar="V", help="hashing tokenizer vocabulary (default 64)")
    p.add_argument("--batch-size", type=int, metavar="B", help="minibatch size (default full batch)")
    p.add_argument("--seed", type=int, help="seed for minibatch sampling and the toy dataset")

    p = _add(
        sub,
        "serve-mock",
        cmd_serve_mock,
        "serve the deterministic local endpoint for the given questions",
        [("paths", "questions", "questions")],
    )
    p.add_argument("--questions", metavar="FILE", help="questions.jsonl the endpoint answers")
    p.add_argument("--host", default="127.0.0.1", help="bind address")
    p.add_argument("--port", type=int, default=8000, help="bind port (0 picks a free one)")
    p.add_argument("--delay", type=float, default=0.0, help="seconds to hold each request")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        sys.stderr.write(exc.usage)
        print(f"topotrace: error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s"
    )
    try:
        return args.func(args)
    except (TopoTraceError, OSError) as exc:
        print(f"topotrace {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
