"""Command-line surface: role management, the generate/score/filter/stats
pipeline, the numeric verification suite, and training-config export.

Exit codes: 0 success, 1 operational error, 2 usage error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys

from . import captions, dataset, filtering, numerics, roles as roles_mod
from .gateway import ChatGateway, EndpointConfig, default_generation_params

__all__ = ["main", "build_parser"]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rolecap",
        description="Role-conditioned caption synthesis, scoring, and budgeted curation.",
    )
    parser.add_argument("--config", help="JSON config file; values in it override flags")
    parser.add_argument("--endpoint", default="http://127.0.0.1:8000/v1", help="chat endpoint base URL")
    parser.add_argument("--model", default="default", help="model name sent to the endpoint")
    parser.add_argument("--api-key-env", default="ROLECAP_API_KEY", help="env var holding the API key")
    parser.add_argument("--timeout", type=float, default=120.0, help="per-request timeout, seconds")
    parser.add_argument("--max-retries", type=int, default=3, help="retry budget per request")
    parser.add_argument("--concurrency", type=int, default=4, help="max in-flight endpoint requests")
    parser.add_argument("--seed", type=int, default=None, help="fix for byte-reproducible runs")

    sub = parser.add_subparsers(dest="command", required=True)

    p_roles = sub.add_parser("roles", help="show, generate, or validate role files")
    roles_sub = p_roles.add_subparsers(dest="roles_command", required=True)
    p_show = roles_sub.add_parser("show", help="print the active role set")
    p_show.add_argument("--roles", help="role file (default: builtin roles)")
    p_show.add_argument("--json", action="store_true", help="print full records as JSON")
    p_rgen = roles_sub.add_parser("generate", help="design a role set via the endpoint")
    p_rgen.add_argument("--out", required=True, help="role file to write")
    p_rval = roles_sub.add_parser("validate", help="check a role file")
    p_rval.add_argument("file", help="role file to validate")

    p_generate = sub.add_parser("generate", help="synthesize captions for an image corpus")
    p_generate.add_argument("--images", nargs="+", required=True, help="image files")
    p_generate.add_argument("--roles", help="role file (default: builtin roles)")
    p_generate.add_argument("--run-dir", required=True, help="resumable working directory")
    p_generate.add_argument("--out", help="stage directory for the completed shards")
    p_generate.add_argument(
        "--granularities", default="long,short", help="comma list from {long,short}"
    )
    p_generate.add_argument("--max-cells", type=int, default=None, help="process at most N cells")
    p_generate.add_argument("--shard-size", type=int, default=1000)

    p_score = sub.add_parser("score", help="score generated captions against their images")
    p_score.add_argument("--in", dest="in_dir", required=True, help="generated stage directory")
    p_score.add_argument("--images", nargs="+", required=True, help="the corpus image files")
    p_score.add_argument("--roles", help="role file (default: builtin roles)")
    p_score.add_argument("--out", required=True, help="stage directory for scored shards")
    p_score.add_argument("--shard-size", type=int, default=1000)

    p_filter = sub.add_parser("filter", help="budgeted cap-and-refill selection")
    p_filter.add_argument("--in", dest="in_dir", required=True, help="scored stage directory")
    p_filter.add_argument("--out", required=True, help="stage directory for filtered shards")
    p_filter.add_argument("--target-pairs", type=int, required=True)
    p_filter.add_argument("--k-max", type=int, default=5)
    p_filter.add_argument("--k-min", type=int, default=1)
    p_filter.add_argument("--dedup", dest="dedup", action="store_true", default=True)
    p_filter.add_argument("--no-dedup", dest="dedup", action="store_false")
    p_filter.add_argument("--epsilon", type=float, default=1e-8)
    p_filter.add_argument("--prefilter-fraction", type=float, default=0.5)
    p_filter.add_argument(
        "--split-granularities",
        action="store_true",
        help="filter long and short pools separately, splitting the target proportionally",
    )
    p_filter.add_argument("--stats-json", help="also write selection stats to this file")
    p_filter.add_argument("--shard-size", type=int, default=1000)

    p_stats = sub.add_parser("stats", help="corpus statistics for any stage directory")
    p_stats.add_argument("--in", dest="in_dir", required=True)
    p_stats.add_argument("--json", action="store_true", help="machine-readable output")

    p_verify = sub.add_parser("verify", help="run the numeric invariant suite")
    p_verify.add_argument("--verify-seed", type=int, default=20240817)
    p_verify.add_argument("--similarity", help="plain-text numeric matrix file (ad-hoc loss check)")
    p_verify.add_argument("--correspondence", help="plain-text 0/1 matrix file")
    p_verify.add_argument("--tau", type=float, default=1.0)

    p_export = sub.add_parser("export-config", help="write trainer settings")
    p_export.add_argument("--out", default="training_config.json")

    return parser


def _apply_config_file(parser: argparse.ArgumentParser, args: argparse.Namespace) -> None:
    if not args.config:
        return
    try:
        with open(args.config, encoding="utf-8") as fh:
            overrides = json.load(fh)
    except (OSError, ValueError) as exc:
        parser.error(f"cannot read config file {args.config}: {exc}")
    if not isinstance(overrides, dict):
        parser.error(f"config file {args.config} must hold a JSON object")
    for key, value in overrides.items():
        attr = key.replace("-", "_")
        if not hasattr(args, attr):
            parser.error(f"config file key {key!r} matches no known option")
        setattr(args, attr, value)


def _gateway(args: argparse.Namespace) -> ChatGateway:
    cfg = EndpointConfig(
        base_url=args.endpoint,
        model_name=args.model,
        api_key_source=args.api_key_env,
        timeout=args.timeout,
        max_retries=args.max_retries,
        max_concurrency=args.concurrency,
    )
    return ChatGateway(cfg)


def _load_roleset(path: str | None) -> roles_mod.RoleSet:
    return roles_mod.load_roles(path) if path else roles_mod.builtin_roles()


def _print_table(rows: dict, stream=None) -> None:
    # resolve sys.stdout lazily so redirection after import still applies
    stream = stream if stream is not None else sys.stdout
    width = max((len(str(k)) for k in rows), default=0)
    for key, value in rows.items():
        print(f"{str(key):<{width}}  {value}", file=stream)


def _cmd_roles(args) -> int:
    if args.roles_command == "show":
        role_set = _load_roleset(args.roles)
        if args.json:
            print(json.dumps([r.to_record() for r in role_set.roles], indent=2, ensure_ascii=False))
        else:
            for role in role_set.roles:
                print(f"{role.agent_name}: {role.agent_speciality}")
        return 0
    if args.roles_command == "generate":
        gateway = _gateway(args)
        try:
            role_set = roles_mod.generate_roles(gateway)
        except roles_mod.RoleExtractionError as exc:
            print(f"error: {exc}", file=sys.stderr)
            print(f"raw response:\n{exc.raw_response}", file=sys.stderr)
            return 1
        roles_mod.write_roles(role_set, args.out)
        print(f"wrote {len(role_set.roles)} roles to {args.out}")
        for role in role_set.roles:
            print(f"  {role.agent_name}")
        return 0
    # validate
    role_set = roles_mod.load_roles(args.file)
    print(f"OK: {len(role_set.roles)} valid roles")
    return 0


def _granularities_arg(parser, text: str) -> tuple:
    kinds = [part.strip() for part in text.split(",") if part.strip()]
    try:
        chosen = tuple(captions.granularity(kind) for kind in kinds)
    except ValueError as exc:
        parser.error(str(exc))
    if not chosen:
        parser.error("at least one granularity is required")
    return chosen


def _stage_fingerprint(parts: dict) -> str:
    canonical = json.dumps(parts, sort_keys=True, ensure_ascii=False)
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def _cmd_generate(args, parser) -> int:
    grans = _granularities_arg(parser, args.granularities)
    corpus = captions.load_corpus(sorted(args.images))
    role_set = _load_roleset(args.roles)
    gateway = _gateway(args)
    clock = captions.deterministic_clock(args.seed) if args.seed is not None else None
    manifest = captions.run_generation(
        corpus,
        role_set,
        gateway,
        default_generation_params(),
        args.run_dir,
        granularities=grans,
        workers=args.concurrency,
        max_cells=args.max_cells,
        clock=clock,
    )
    total_cells = len(corpus) * len(role_set.roles) * len(grans)
    done = len(manifest.completed)
    _print_table(
        {
            "cells completed": f"{done}/{total_cells}",
            **{k: v for k, v in manifest.counts.items()},
        }
    )
    if done < total_cells:
        print("run incomplete; rerun with the same --run-dir to resume")
        return 0
    if args.out:
        records_file = os.path.join(args.run_dir, "records.ndjson")
        records = []
        if os.path.exists(records_file):
            with open(records_file, encoding="utf-8") as fh:
                records = [json.loads(line) for line in fh if line.strip()]
        fingerprint = _stage_fingerprint(
            {
                "stage": "generated",
                "roles": manifest.roles_fingerprint,
                "corpus": [c["image_id"] for c in manifest.corpus],
                "granularities": manifest.granularities,
                "seed": args.seed,
            }
        )
        dataset.write_shards(
            records, args.out, args.shard_size, stage="generated", config_fingerprint=fingerprint
        )
        print(f"wrote {len(records)} records to {args.out}")
    return 0


def _cmd_score(args) -> int:
    records = [
        captions.CaptionRecord.from_record(r) for r in dataset.iter_shard_records(args.in_dir)
    ]
    corpus = captions.load_corpus(sorted(args.images))
    role_set = _load_roleset(args.roles)
    gateway = _gateway(args)
    scored = filtering.score_pairs(
        records, role_set, gateway, corpus, workers=args.concurrency
    )
    in_manifest = dataset.load_manifest(args.in_dir)
    fingerprint = _stage_fingerprint(
        {"stage": "scored", "input": in_manifest.config_fingerprint, "model": args.model}
    )
    dataset.write_shards(
        (sr.to_record() for sr in scored),
        args.out,
        args.shard_size,
        stage="scored",
        config_fingerprint=fingerprint,
    )
    ok = sum(1 for sr in scored if sr.score_status == "ok")
    _print_table({"scored": len(scored), "ok": ok, "parse_failed": len(scored) - ok})
    print(f"wrote {len(scored)} records to {args.out}")
    return 0


def _split_targets(sizes: dict[str, int], target: int) -> dict[str, int]:
    """Largest-remainder proportional split of the pair budget across pools."""
    total = sum(sizes.values())
    if total == 0:
        return {k: 0 for k in sizes}
    shares = {k: target * n / total for k, n in sizes.items()}
    floors = {k: int(share) for k, share in shares.items()}
    leftover = target - sum(floors.values())
    order = sorted(sizes, key=lambda k: (-(shares[k] - floors[k]), k))
    for k in order[:leftover]:
        floors[k] += 1
    return floors


def _cmd_filter(args, parser) -> int:
    try:
        cfg = filtering.FilterConfig(
            k_max=args.k_max,
            k_min=args.k_min,
            target_pairs=args.target_pairs,
            dedup=args.dedup,
            epsilon=args.epsilon,
            prefilter_fraction=args.prefilter_fraction,
        )
    except ValueError as exc:
        parser.error(str(exc))
    pool = [
        filtering.ScoredRecord.from_record(r) for r in dataset.iter_shard_records(args.in_dir)
    ]
    if args.split_granularities:
        pools: dict[str, list] = {}
        for sr in pool:
            pools.setdefault(sr.record.granularity, []).append(sr)
        targets = _split_targets({k: len(v) for k, v in pools.items()}, cfg.target_pairs)
        kept = []
        stats_by_pool = {}
        for kind in sorted(pools):
            if targets[kind] < 1:
                stats_by_pool[kind] = {"pairs_kept": 0, "notes": ["zero target allocated"]}
                continue
            sub_cfg = filtering.FilterConfig(
                k_max=cfg.k_max,
                k_min=cfg.k_min,
                target_pairs=targets[kind],
                dedup=cfg.dedup,
                epsilon=cfg.epsilon,
                prefilter_fraction=cfg.prefilter_fraction,
            )
            result = filtering.cap_and_refill(pools[kind], sub_cfg)
            kept.extend(result.kept)
            stats_by_pool[kind] = result.stats
        kept.sort(key=filtering.selection_sort_key)
        result = filtering.SelectionResult(kept=tuple(kept), stats={"pools": stats_by_pool})
        report = filtering.selection_stats(result)
        report["pools"] = stats_by_pool
    else:
        result = filtering.cap_and_refill(pool, cfg)
        report = filtering.selection_stats(result)
        report["branch"] = result.stats["branch"]
        report["notes"] = result.stats["notes"]
    in_manifest = dataset.load_manifest(args.in_dir)
    fingerprint = _stage_fingerprint(
        {
            "stage": "filtered",
            "input": in_manifest.config_fingerprint,
            "k_max": cfg.k_max,
            "k_min": cfg.k_min,
            "target_pairs": cfg.target_pairs,
            "dedup": cfg.dedup,
            "epsilon": cfg.epsilon,
            "prefilter_fraction": cfg.prefilter_fraction,
            "split_granularities": bool(args.split_granularities),
        }
    )
    dataset.write_shards(
        (filtering.normalized_to_record(nr) for nr in result.kept),
        args.out,
        args.shard_size,
        stage="filtered",
        config_fingerprint=fingerprint,
    )
    flat = {
        k: (json.dumps(v) if isinstance(v, (dict, list)) else v)
        for k, v in report.items()
    }
    _print_table(flat)
    if args.stats_json:
        with open(args.stats_json, "w", encoding="utf-8") as fh:
            json.dump(report, fh, indent=2, sort_keys=True, ensure_ascii=False)
            fh.write("\n")
    print(f"wrote {len(result.kept)} records to {args.out}")
    return 0


def _cmd_stats(args) -> int:
    report = dataset.corpus_stats(args.in_dir)
    if args.json:
        print(json.dumps(report, indent=2, sort_keys=True, ensure_ascii=False))
    else:
        flat = {
            k: (json.dumps(v, sort_keys=True) if isinstance(v, dict) else v)
            for k, v in report.items()
        }
        _print_table(flat)
    return 0


def _cmd_verify(args) -> int:
    import numpy as np

    if args.similarity or args.correspondence:
        if not (args.similarity and args.correspondence):
            print("error: --similarity and --correspondence go together", file=sys.stderr)
            return 2
        s = np.loadtxt(args.similarity, ndmin=2)
        m = np.loadtxt(args.correspondence, ndmin=2)
        batch = numerics.SimilarityBatch(s=s, tau=args.tau)
        cm = numerics.CorrespondenceMatrix(m=m)
        loss = numerics.multipositive_loss(batch, cm)
        grad = numerics.loss_gradient(batch, cm)
        print(f"loss      {loss:.12f}")
        print(f"grad_max  {float(abs(grad).max()):.12e}")
        return 0
    results = numerics.run_verification(seed=args.verify_seed)
    width = max(len(name) for name, _, _ in results)
    failed = 0
    for name, passed, detail in results:
        mark = "PASS" if passed else "FAIL"
        if not passed:
            failed += 1
        suffix = f"  ({detail})" if detail else ""
        print(f"[{mark}] {name:<{width}}{suffix}")
    print(f"{len(results) - failed}/{len(results)} checks passed")
    return 0 if failed == 0 else 1


def _cmd_export_config(args) -> int:
    config = dataset.export_training_config(args.out)
    _print_table(config.to_json())
    print(f"wrote {args.out}")
    return 0


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    _apply_config_file(parser, args)
    try:
        if args.command == "roles":
            return _cmd_roles(args)
        if args.command == "generate":
            return _cmd_generate(args, parser)
        if args.command == "score":
            return _cmd_score(args)
        if args.command == "filter":
            return _cmd_filter(args, parser)
        if args.command == "stats":
            return _cmd_stats(args)
        if args.command == "verify":
            return _cmd_verify(args)
        if args.command == "export-config":
            return _cmd_export_config(args)
        parser.error(f"unknown command {args.command!r}")
    except (
        OSError,
        ValueError,
        KeyError,
        roles_mod.RoleValidationError,
        dataset.ChecksumError,
    ) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # gateway and endpoint failures land here
        from .gateway import GatewayError

        if isinstance(exc, GatewayError):
            print(f"error: {exc}", file=sys.stderr)
            return 1
        raise
    return 2


if __name__ == "__main__":
    sys.exit(main())
