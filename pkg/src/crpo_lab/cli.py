"""``crpo-lab`` command-line entry point.

Exit codes: 0 ok, 2 configuration error, 3 runtime error, 4 empty input.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
from pathlib import Path
from typing import Any, Sequence

from . import config as cfgmod
from .benchmark import (
    BenchmarkItem,
    Consistency,
    ItemKind,
    combine_subset_reports,
    compute_consistency_rate,
    compute_win_rate,
    judge_open_ended,
    load_human_labels,
    render_table,
    score_mcq,
)
from .core import SCHEMA_VERSION, Judgment, Response, check_schema_version
from .corpus import corpus_stats, load_corpus, render_bars
from .errors import ConfigError, CrpoLabError, EmptyCorpus, SchemaError
from .judging import (
    ApiJudge,
    ApiJudgeConfig,
    CachingJudge,
    JudgmentCache,
    PairwiseTask,
    RetryPolicy,
    SimJudge,
    SimJudgeConfig,
    dispatch_judgments,
    template_digest,
)
from .optimizer import OptimizerConfig, StepRecord, train
from .reward import RewardMode, SeparabilitySetup, reward_separability
from .toy import make_gold_problem

logger = logging.getLogger("crpo_lab")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_EMPTY = 0, 2, 3, 4
METRIC_COLUMNS = ("step", "loss", "kl", "mean_reward", "grad_norm")


# ---------------------------------------------------------------------------
# file helpers
# ---------------------------------------------------------------------------


def _dumps(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, ensure_ascii=False)


def write_json(path: Path, obj: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, sort_keys=True, indent=2, ensure_ascii=False) + "\n",
                    encoding="utf-8", newline="\n")


def read_json(path: Path) -> dict:
    raw = json.loads(Path(path).read_text(encoding="utf-8"))
    check_schema_version(raw)
    return raw


def read_jsonl(path: Path) -> list[dict]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                rec = json.loads(line)
                check_schema_version(rec)
                out.append(rec)
    return out


def metrics_rows(records: Sequence[StepRecord]) -> list[dict]:
    """Per-step means over queries."""
    by_step: dict[int, list[StepRecord]] = {}
    for rec in records:
        by_step.setdefault(rec.step, []).append(rec)
    rows = []
    for step, recs in sorted(by_step.items()):
        n = len(recs)
        rewards = [r for rec in recs for r in rec.rewards.rewards]
        rows.append({
            "step": step,
            "loss": sum(r.loss for r in recs) / n,
            "kl": sum(r.kl for r in recs) / n,
            "mean_reward": sum(rewards) / len(rewards),
            "grad_norm": sum(r.grad_norm for r in recs) / n,
        })
    return rows


def write_metrics_csv(path: Path, records: Sequence[StepRecord]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=METRIC_COLUMNS, lineterminator="\n")
    writer.writeheader()
    for row in metrics_rows(records):
        writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
    path.write_text(buf.getvalue(), encoding="utf-8", newline="\n")


# ---------------------------------------------------------------------------
# judges
# ---------------------------------------------------------------------------


def build_judge(judge_cfg: dict, cache_path: Path | None):
    if judge_cfg["kind"] == "sim":
        sim = SimJudge(SimJudgeConfig(
            judge_cfg["noise_sigma"], judge_cfg["tie_threshold"], judge_cfg["seed"]
        ))
        return CachingJudge(sim, JudgmentCache(cache_path)) if cache_path else sim
    api_cfg = ApiJudgeConfig(
        endpoint_url=judge_cfg["endpoint_url"],
        model_name=judge_cfg["model_name"],
        prompt_template_id=judge_cfg["prompt_template_id"],
        max_in_flight=judge_cfg["max_in_flight"],
        retry_policy=RetryPolicy(judge_cfg["max_attempts"], judge_cfg["backoff_base_ms"]),
        cache_path=str(cache_path) if cache_path else None,
        api_key_env=judge_cfg["api_key_env"],
        order_seed=judge_cfg["seed"],
    )
    return ApiJudge(api_cfg)


def judge_calls(judge) -> int:
    if isinstance(judge, CachingJudge):
        return judge.calls
    return getattr(judge, "requests_sent", 0)


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------


def cmd_train(args: argparse.Namespace) -> int:
    try:
        raw = cfgmod.load_toml(args.config)
        resolved = cfgmod.resolve(raw, {
            "run.seed": args.seed,
            "run.reward_mode": args.reward_mode,
            "run.tie_credit": args.tie_credit,
            "judge.kind": args.judge,
        })
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    run, prob, opt = resolved["run"], resolved["problem"], resolved["optimizer"]
    chash = cfgmod.config_hash(resolved)
    steps_path = out / "steps.jsonl"
    metrics_path = Path(args.metrics_csv) if args.metrics_csv else out / "metrics.csv"
    partial_steps = steps_path.with_name(steps_path.name + ".partial")
    records: list[StepRecord] = []

    try:
        problem = make_gold_problem(
            prob["n_queries"], prob["n_templates"], prob["n_counterparts"], seed=prob["seed"]
        )
        cache = Path(args.cache) if args.cache else None
        judge = build_judge(resolved["judge"], cache)
        opt_cfg = OptimizerConfig(
            group_size=opt["group_size"],
            clip_epsilon=opt["clip_epsilon"],
            kl_coeff=opt["kl_coeff"],
            learning_rate=opt["learning_rate"],
            std_floor=opt["std_floor"],
            steps=opt["steps"],
            seed=run["seed"],
            epochs_per_group=opt["epochs_per_group"],
            max_grad_norm=opt["max_grad_norm"] or None,
            tie_credit=run["tie_credit"],
        )
    except (ValueError, CrpoLabError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    fh = open(partial_steps, "w", encoding="utf-8", newline="\n")

    def on_step(rec: StepRecord) -> None:
        records.append(rec)
        fh.write(_dumps({"schema_version": SCHEMA_VERSION, **rec.to_dict()}) + "\n")
        fh.flush()

    try:
        policy, _ = train(
            problem.initial_policy(prob["temperature"]),
            problem.queries,
            problem.roster,
            RewardMode(run["reward_mode"]),
            judge,
            opt_cfg,
            max_in_flight=run["max_in_flight"],
            on_step=on_step,
        )
    except (CrpoLabError, ValueError, FloatingPointError) as exc:
        fh.close()
        write_metrics_csv(metrics_path.with_name(metrics_path.name + ".partial"), records)
        print(f"runtime error in training: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    fh.close()
    os.replace(partial_steps, steps_path)
    write_metrics_csv(metrics_path, records)
    provenance = {"config_hash": chash, "seed": run["seed"], "reward_mode": run["reward_mode"],
                  "judge_id": judge.judge_id}
    write_json(out / "policy.json", {
        "schema_version": SCHEMA_VERSION,
        "provenance": provenance,
        "policy": policy.to_dict(),
        "gold_probability": problem.gold_probabilities(policy),
    })
    write_json(out / "run.json", {
        "schema_version": SCHEMA_VERSION,
        "provenance": provenance,
        "config": resolved,
        "metrics_csv": metrics_path.name,
    })
    logger.info("trained %d steps; judge calls: %d", opt["steps"], judge_calls(judge))
    return EXIT_OK


# ---------------------------------------------------------------------------
# evaluate
# ---------------------------------------------------------------------------


def _load_items(path: Path) -> tuple[list[BenchmarkItem], list[str]]:
    items, errors = [], []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                items.append(BenchmarkItem.from_dict(json.loads(line)))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError, CrpoLabError) as exc:
                errors.append(f"line {lineno}: {type(exc).__name__}: {exc}")
    return items, errors


def _attach_baselines(items: list[BenchmarkItem], directory: Path) -> list[BenchmarkItem]:
    extra: dict[str, dict[str, Response]] = {}
    for path in sorted(directory.glob("*.jsonl")):
        for line in path.read_text(encoding="utf-8").splitlines():
            if line.strip():
                resp = Response.from_dict(json.loads(line))
                extra.setdefault(resp.query_id, {})[path.stem] = resp
    out = []
    for item in items:
        merged = {**item.baseline_responses, **extra.get(item.id, {})}
        out.append(BenchmarkItem(item.query, item.subject_response, merged, item.kind,
                                 item.mcq, item.reference_answer))
    return out


def cmd_evaluate(args: argparse.Namespace) -> int:
    try:
        raw = cfgmod.load_toml(args.config) if args.config else {}
        resolved = cfgmod.resolve(
            raw, {"judge.kind": args.judge, "judge.seed": args.seed}, required_sections=()
        )
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    try:
        items, errors = _load_items(Path(args.benchmark))
        if args.baselines_dir:
            items = _attach_baselines(items, Path(args.baselines_dir))
    except (OSError, SchemaError, json.JSONDecodeError) as exc:
        print(f"runtime error reading inputs: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    if not items and not errors:
        print("benchmark file is empty", file=sys.stderr)
        return EXIT_EMPTY

    cache_path = Path(args.cache) if args.cache else out / "judge_cache.jsonl"
    try:
        judge = build_judge(resolved["judge"], cache_path)
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    max_in_flight = resolved["judge"]["max_in_flight"]

    dialogue = [i for i in items if i.kind is ItemKind.DIALOGUE]
    subsets: dict[str, list[BenchmarkItem]] = {}
    for item in dialogue:
        subsets.setdefault(item.query.metadata.get("subset", "benchmark"), []).append(item)

    subset_reports = {}
    judged: list[Judgment] = []
    successes = 0
    for name, subset_items in sorted(subsets.items()):
        baselines = sorted({b for it in subset_items for b in it.baseline_responses})
        pairs = [(it, b) for it in subset_items for b in baselines]
        missing = [(it, b) for it, b in pairs if b not in it.baseline_responses]
        for it, b in missing:
            errors.append(f"{it.id} vs {b}: MissingBaselineResponse")
        present = [(it, b) for it, b in pairs if b in it.baseline_responses]
        outcomes = dispatch_judgments(
            [PairwiseTask(it.subject_response, it.baseline_responses[b], it.query) for it, b in present],
            judge,
            max_in_flight,
        )
        results = [(b, res, it.id) for (it, b), res in zip(present, outcomes)]
        ok = []
        for baseline, res, item_id in results:
            if isinstance(res, Exception):
                errors.append(f"{item_id} vs {baseline}: {type(res).__name__}: {res}")
            else:
                ok.append(res)
        successes += len(ok)
        judged.extend(ok)
        if ok:
            subset_reports[name] = compute_win_rate(ok)

    mcq_items = [i for i in items if i.kind is ItemKind.MCQ]
    mcq = score_mcq(mcq_items) if mcq_items else None
    successes += len(mcq_items)

    open_items = [i for i in items if i.kind is ItemKind.OPEN_ENDED]
    open_rate = None
    if open_items:
        verdicts = judge_open_ended(open_items, judge, max_in_flight)
        good = [v for v in verdicts if not isinstance(v, Exception)]
        for item, v in zip(open_items, verdicts):
            if isinstance(v, Exception):
                errors.append(f"{item.id}: {type(v).__name__}: {v}")
        successes += len(good)
        if good:
            open_rate = sum(v is Consistency.CONSISTENT for v in good) / len(good)

    consistency = None
    if args.labels:
        try:
            consistency = compute_consistency_rate(judged, load_human_labels(args.labels))
        except (CrpoLabError, OSError, KeyError) as exc:
            errors.append(f"labels: {type(exc).__name__}: {exc}")

    template = (template_digest(resolved["judge"]["prompt_template_id"])
                if resolved["judge"]["kind"] == "api" else None)
    report = {
        "schema_version": SCHEMA_VERSION,
        "provenance": {
            "config_hash": cfgmod.config_hash(resolved),
            "seed": resolved["judge"]["seed"],
            "judge_id": judge.judge_id,
            "judge_template_id": template,
        },
        "subsets": {name: rep.to_dict() for name, rep in subset_reports.items()},
        "aggregate_win_rate": (
            combine_subset_reports(list(subset_reports.values())) if subset_reports else None
        ),
        "mcq_accuracy": mcq.accuracy if mcq else None,
        "mcq_traces": [t.__dict__ for t in mcq.traces] if mcq else [],
        "open_ended_consistent_rate": open_rate,
        "consistency": consistency,
        "errors": errors,
    }
    write_json(out / "report.json", report)
    tables = [f"## {name}\n\n{render_table(rep)}" for name, rep in subset_reports.items()]
    if report["aggregate_win_rate"] is not None:
        tables.append(f"average win rate over subsets: {100 * report['aggregate_win_rate']:.1f}%")
    (out / "report.txt").write_text("\n\n".join(tables) + "\n", encoding="utf-8", newline="\n")
    logger.info("judge calls: %d", judge_calls(judge))
    if successes == 0:
        print("every item failed; see report errors", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


# ---------------------------------------------------------------------------
# compare-scoring
# ---------------------------------------------------------------------------


def cmd_compare_scoring(args: argparse.Namespace) -> int:
    try:
        sigmas = [float(s) for s in args.sigmas.split(",") if s.strip()]
        if any(s < 0 for s in sigmas) or args.trials < 1:
            raise ValueError("sigmas must be >= 0 and trials >= 1")
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["sigma", "crpo_sep", "abs_sep"])
    for sigma in sigmas:
        setup = SeparabilitySetup(
            sim=SimJudgeConfig(sigma, args.tie_threshold, args.seed),
            low_quality=args.low_quality,
            gap=args.gap,
        )
        writer.writerow([
            repr(sigma),
            repr(reward_separability(RewardMode.CRPO, setup, args.trials)),
            repr(reward_separability(RewardMode.ABSOLUTE, setup, args.trials)),
        ])
    if args.out:
        Path(args.out).write_text(buf.getvalue(), encoding="utf-8", newline="\n")
    else:
        sys.stdout.write(buf.getvalue())
    return EXIT_OK


# ---------------------------------------------------------------------------
# stats
# ---------------------------------------------------------------------------


def cmd_stats(args: argparse.Namespace) -> int:
    try:
        corpus, errors = load_corpus(args.corpus)
        stats = corpus_stats(corpus)
    except EmptyCorpus as exc:
        print(f"empty corpus: {exc}", file=sys.stderr)
        return EXIT_EMPTY
    except OSError as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    payload = {
        "schema_version": SCHEMA_VERSION,
        **stats.to_dict(),
        "errors": [{"line": e.line, "message": e.message} for e in errors],
    }
    text = "\n\n".join(
        f"{title}\n{render_bars(hist)}"
        for title, hist in (
            ("turns per dialogue", stats.turns),
            ("departments", stats.departments),
            ("image modalities", stats.modalities),
        )
    )
    if args.out:
        out = Path(args.out)
        write_json(out / "stats.json", payload)
        (out / "stats.txt").write_text(text + "\n", encoding="utf-8", newline="\n")
    else:
        print(json.dumps(payload, sort_keys=True, indent=2))
    print(text, file=sys.stderr)
    return EXIT_OK


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------


def _training_section(train_dir: Path) -> str:
    run = read_json(train_dir / "run.json")
    policy = read_json(train_dir / "policy.json")
    with open(train_dir / run.get("metrics_csv", "metrics.csv"), encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise SchemaError("metrics CSV has no rows")
    prov = run["provenance"]
    first, last = rows[0], rows[-1]
    gold = policy.get("gold_probability", {})
    lines = [
        "## Training",
        "",
        f"- config hash: `{prov['config_hash']}`, seed: {prov['seed']}, "
        f"reward mode: {prov['reward_mode']}, judge: `{prov['judge_id']}`",
        f"- steps: {len(rows)}",
        f"- mean reward: {float(first['mean_reward']):.4f} -> {float(last['mean_reward']):.4f}",
        f"- final loss: {float(last['loss']):.6f}, final KL: {float(last['kl']):.6f}",
    ]
    if gold:
        lines.append(f"- min gold-template probability: {min(gold.values()):.4f}")
    return "\n".join(lines)


def _eval_section(path: Path) -> str:
    report = read_json(path)
    prov = report["provenance"]
    lines = [
        "## Evaluation",
        "",
        f"- config hash: `{prov['config_hash']}`, seed: {prov['seed']}, judge: `{prov['judge_id']}`, "
        f"template: `{prov.get('judge_template_id')}`",
    ]
    if report.get("aggregate_win_rate") is not None:
        lines.append(f"- average win rate: {100 * report['aggregate_win_rate']:.1f}%")
    for name, sub in sorted(report.get("subsets", {}).items()):
        lines += ["", f"### {name}", "", "| baseline | win | tie | loss |", "|---|---|---|---|"]
        for baseline, cells in sorted(sub["per_baseline"].items()):
            c = cells["all"]
            lines.append(f"| {baseline} | {100 * c['win_rate']:.1f}% | "
                         f"{100 * c['tie_rate']:.1f}% | {100 * c['loss_rate']:.1f}% |")
    if report.get("mcq_accuracy") is not None:
        lines.append(f"\n- MCQ accuracy: {100 * report['mcq_accuracy']:.1f}%")
    if report.get("consistency"):
        lines += ["", "### Judge/expert consistency", ""]
        lines += [f"- {k}: {100 * v:.1f}%" for k, v in report["consistency"].items()]
    if report.get("errors"):
        lines.append(f"\n- {len(report['errors'])} item errors (see report.json)")
    return "\n".join(lines)


def cmd_report(args: argparse.Namespace) -> int:
    sections, notes = [], []
    inputs = [("training", args.train, _training_section), ("evaluation", args.eval, _eval_section)]
    for name, path, render in inputs:
        if not path:
            notes.append(f"missing: {name}")
            continue
        try:
            sections.append(render(Path(path)))
        except (OSError, KeyError, ValueError, TypeError, CrpoLabError) as exc:
            notes.append(f"skipped {name}: {type(exc).__name__}: {exc}")
    if not sections:
        print("no artifact could be rendered: " + "; ".join(notes), file=sys.stderr)
        return EXIT_EMPTY
    doc = "# CRPO lab report\n\n" + "\n\n".join(sections)
    if notes:
        doc += "\n\n## Notes\n\n" + "\n".join(f"- {n}" for n in notes)
    doc += "\n"
    if args.out:
        Path(args.out).write_text(doc, encoding="utf-8", newline="\n")
    else:
        sys.stdout.write(doc)
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="crpo-lab", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train the toy policy")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--judge", choices=("sim", "api"))
    p.add_argument("--reward-mode", choices=("crpo", "absolute"))
    p.add_argument("--tie-credit", type=float, choices=(0.0, 0.5))
    p.add_argument("--metrics-csv")
    p.add_argument("--cache")
    p.add_argument("--out", default="crpo_run")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="pairwise benchmark evaluation")
    p.add_argument("benchmark")
    p.add_argument("--baselines-dir")
    p.add_argument("--config")
    p.add_argument("--judge", choices=("sim", "api"))
    p.add_argument("--seed", type=int)
    p.add_argument("--cache")
    p.add_argument("--labels", help="expert agreement CSV")
    p.add_argument("--out", default="crpo_eval")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("compare-scoring", help="separability of comparison vs absolute rewards")
    p.add_argument("--sigmas", default="0,0.05,0.1,0.15,0.2,0.3")
    p.add_argument("--trials", type=int, default=2000)
    p.add_argument("--gap", type=float, default=0.1)
    p.add_argument("--low-quality", type=float, default=0.55)
    p.add_argument("--tie-threshold", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_compare_scoring)

    p = sub.add_parser("stats", help="corpus histograms")
    p.add_argument("corpus")
    p.add_argument("--out")
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("report", help="merge artifacts into a markdown report")
    p.add_argument("--train", help="training output directory")
    p.add_argument("--eval", help="evaluation report.json")
    p.add_argument("--out")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
