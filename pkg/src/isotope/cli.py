"""Operator surface: one subcommand per pipeline stage.

    gen-data      synthesize a train/test dataset directory pair
    make-mark     create a mark file
    mark-dataset  plant a mark into a dataset class
    train         train a classifier on a dataset directory
    serve         expose a model file over HTTP
    verify        audit an endpoint for one (mark, class) hypothesis
    distinguish   bidirectional two-mark audit
    sweep         alpha/p/Q/seed grid of full experiments -> CSV
    attack        countermeasure grid -> CSV
    report        aggregate result CSVs into tidy means

Exit codes: 0 success, 1 usage error, 2 runtime failure.  ``--json``
switches stderr errors to machine-readable JSON.  Relative output paths
resolve under $ISOTOPE_HOME when it is set.
"""

from __future__ import annotations

import argparse
import csv
import glob as globmod
import json
import os
import sys
from dataclasses import replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

SWEEP_SCHEMA_VERSION = 1


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # argparse default exits 2; we reserve 2 for runtime
        raise UsageError(message)


def _out_path(path: str) -> Path:
    p = Path(path)
    home = os.environ.get("ISOTOPE_HOME")
    if home and not p.is_absolute():
        return Path(home) / p
    return p


def _parse_dims(text: str) -> tuple[int, int, int]:
    parts = text.lower().replace("x", ",").split(",")
    if len(parts) != 3:
        raise UsageError(f"dims must be CxHxW, got {text!r}")
    c, h, w = (int(v) for v in parts)
    return c, h, w


def _parse_grid_values(text: str) -> list[float]:
    """Grid axis syntax: 'a,b,c' or 'lo..hi' (5 points) or 'lo..hi:k'."""
    if ".." in text:
        span, _, count = text.partition(":")
        lo, _, hi = span.partition("..")
        k = int(count) if count else 5
        return [float(v) for v in np.linspace(float(lo), float(hi), k)]
    return [float(v) for v in text.split(",")]


def _endpoint_from_args(args) -> object:
    from . import model as model_mod
    from . import serve as serve_mod

    if getattr(args, "url", None):
        return serve_mod.remote_endpoint(args.url)
    if getattr(args, "model", None):
        m = model_mod.load_model(args.model)
        if getattr(args, "mode", "probability") == "rank":
            return model_mod.wrap_topk(m, args.k or m.num_classes)
        return m
    raise UsageError("give either --url or --model")


def _verifier_config(args):
    from .verifier import VerifierConfig

    return VerifierConfig(
        significance=args.significance,
        positive_fraction=args.delta,
        rounds=args.rounds,
        sample_size=args.n,
        mode=args.mode,
    )


def _add_verify_flags(p: _Parser) -> None:
    p.add_argument("--url", help="remote endpoint base URL")
    p.add_argument("--model", help="local model file to query in process")
    p.add_argument("--aux", required=True, help="auxiliary dataset directory")
    p.add_argument("--significance", "--lambda", dest="significance", type=float,
                   default=0.1, help="per-round p-value threshold (default 0.1)")
    p.add_argument("--delta", type=float, default=0.6,
                   help="required fraction of positive rounds (default 0.6)")
    p.add_argument("--rounds", "-Q", type=int, default=5)
    p.add_argument("--n", type=int, default=250, help="images per round")
    p.add_argument("--mode", choices=["probability", "rank", "unpaired"],
                   default="probability")
    p.add_argument("--k", type=int, default=0, help="top-K for rank mode")
    p.add_argument("--seed", type=int, default=0)


# -- subcommand implementations ---------------------------------------------


def _cmd_gen_data(args) -> int:
    from .imgdata import Rng, compute_norm_stats, generate_synthetic_dataset, save_dataset

    rng = Rng(args.seed)
    dims = _parse_dims(args.dims)
    train = generate_synthetic_dataset(args.classes, args.per_class, dims, rng, "train")
    mean, std = compute_norm_stats(train)
    train = train.with_norm_stats(mean, std)
    test = generate_synthetic_dataset(
        args.classes, args.test_per_class, dims, rng, "test"
    ).with_norm_stats(mean, std)
    out = _out_path(args.out)
    save_dataset(train, out / "train")
    save_dataset(test, out / "test")
    print(f"wrote {train.n} train / {test.n} test images under {out}")
    return 0


def _cmd_make_mark(args) -> int:
    from .imgdata import Rng
    from .marks import make_mark, save_mark

    kwargs: dict = {"alpha": args.alpha}
    if args.kind == "pixel_square":
        kwargs.update(square_size=args.square_size, top=args.top, left=args.left)
    elif args.kind == "random_pixels":
        kwargs.update(count=args.count)
    if args.id:
        kwargs["mark_id"] = args.id
    mark = make_mark(args.kind, _parse_dims(args.dims), Rng(args.seed), **kwargs)
    out = _out_path(args.out)
    save_mark(mark, out)
    print(f"wrote mark {mark.id!r} ({mark.kind}, alpha={mark.alpha}) to {out}")
    return 0


def _cmd_mark_dataset(args) -> int:
    from .imgdata import Rng, load_dataset, save_dataset
    from .marks import IsotopePlan, apply_plan, load_mark

    dataset = load_dataset(args.data)
    mark = load_mark(args.mark)
    plan = IsotopePlan(
        mark=mark,
        target_class=args.target_class,
        fraction=args.fraction,
        count=args.count,
        rng=Rng(args.seed),
    )
    marked = apply_plan(dataset, plan)
    out = _out_path(args.out)
    save_dataset(marked, out)
    n_marked = sum(1 for m in marked.mark_ids if m == mark.id)
    print(f"marked {n_marked} images of class {args.target_class}; wrote {out}")
    return 0


def _cmd_train(args) -> int:
    from .imgdata import AugmentationPolicy, Rng, load_dataset
    from .model import Architecture, init_classifier, save_model
    from .trainer import TrainConfig, train

    dataset = load_dataset(args.data)
    test = load_dataset(args.test) if args.test else None
    config = TrainConfig(
        optimizer=args.optimizer,
        lr=args.lr,
        momentum=args.momentum,
        weight_decay=args.weight_decay,
        epochs=args.epochs,
        batch_size=args.batch_size,
        schedule_every=args.schedule_every,
        schedule_gamma=args.schedule_gamma,
        frozen_layers=args.frozen_layers,
        seed=args.seed,
    )
    policy = AugmentationPolicy.for_dataset(
        dataset, flip_prob=args.flip_prob, crop_padding=args.crop_padding,
        rotation_degrees=args.rotation_degrees,
    )
    arch = Architecture(input_dims=dataset.dims, num_classes=dataset.num_classes)
    model = init_classifier(arch, Rng(args.seed, 1))
    trained, metrics = train(model, dataset, config, policy, eval_dataset=test)
    out = _out_path(args.out)
    save_model(trained, out)
    if args.metrics_csv:
        with open(_out_path(args.metrics_csv), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "split", "loss", "accuracy"])
            for m in metrics:
                w.writerows(m.csv_rows())
    last = metrics[-1] if metrics else None
    if last is not None:
        acc = f" train_acc={last.train_acc:.3f}"
        if last.eval_acc is not None:
            acc += f" test_acc={last.eval_acc:.3f}"
        print(f"trained {config.epochs} epochs;{acc}; wrote {out}")
    else:
        print(f"epochs=0: wrote initialized model to {out}")
    return 0


def _cmd_serve(args) -> int:
    from .imgdata import Rng
    from .model import load_model, wrap_logit_noise, wrap_topk
    from .serve import serve_model

    endpoint: object = load_model(args.model)
    if args.logit_noise_sigma > 0:
        endpoint = wrap_logit_noise(endpoint, args.logit_noise_sigma, Rng(args.noise_seed))
    if args.mode == "topk":
        endpoint = wrap_topk(endpoint, args.k)
    server = serve_model(endpoint, host=args.host, port=args.port,
                         test_mode=args.test_mode)
    print(f"serving on {server.url} (mode={args.mode})", flush=True)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        server.stop()
    return 0


def _cmd_verify(args) -> int:
    from .imgdata import Rng, load_dataset
    from .marks import load_mark
    from .verifier import verify

    endpoint = _endpoint_from_args(args)
    aux = load_dataset(args.aux).without_class(args.target_class)
    report = verify(
        endpoint, aux, args.target_class, load_mark(args.mark),
        load_mark(args.external), _verifier_config(args), Rng(args.seed),
    )
    if args.out:
        _out_path(args.out).write_text(report.to_json(), encoding="utf-8")
    print(
        f"verdict={report.verdict} positives={report.positives}/{report.config.rounds} "
        f"p_values={['%.3g' % p for p in report.p_values]} queries={report.query_count}"
    )
    return 0


def _cmd_distinguish(args) -> int:
    from .imgdata import Rng, load_dataset
    from .marks import load_mark
    from .verifier import distinguish

    endpoint = _endpoint_from_args(args)
    aux = load_dataset(args.aux)
    aux = aux.subset(
        np.nonzero((aux.labels != args.class_a) & (aux.labels != args.class_b))[0]
    )
    result = distinguish(
        endpoint, aux,
        (load_mark(args.mark_a), args.class_a),
        (load_mark(args.mark_b), args.class_b),
        _verifier_config(args), Rng(args.seed),
    )
    print(f"distinguish={result}")
    return 0


_SWEEP_COLUMNS = [
    "schema_version", "alpha", "p", "q", "seed",
    "accuracy", "v_t", "v_f", "v_dt", "error",
]


def _cmd_sweep(args) -> int:
    from .experiments import ExperimentSpec, PlanSpec, run_experiment
    from .verifier import VerifierConfig

    grid: dict[str, list[float]] = {}
    for item in args.grid:
        key, _, values = item.partition("=")
        if key not in ("alpha", "p", "q", "seed"):
            raise UsageError(f"unknown grid key {key!r} (use alpha, p, q, seed)")
        grid[key] = _parse_grid_values(values)
    alphas = grid.get("alpha", [0.4])
    ps = grid.get("p", [0.25])
    qs = [int(v) for v in grid.get("q", [5])]
    seeds = [int(v) for v in grid.get("seed", [0])]

    rows = []
    for seed in seeds:
        for alpha in alphas:
            for p in ps:
                for q in qs:
                    row = {
                        "schema_version": SWEEP_SCHEMA_VERSION,
                        "alpha": alpha, "p": p, "q": q, "seed": seed,
                    }
                    try:
                        spec = ExperimentSpec(
                            seed=seed,
                            plans=(PlanSpec(target_class=seed % 10, alpha=alpha,
                                            fraction=p),),
                            verifier=VerifierConfig(rounds=q),
                            externals_per_mark=args.externals,
                        )
                        res = run_experiment(spec)
                        row.update(
                            accuracy=res.accuracy,
                            v_t=res.metrics.true_positive_rate,
                            v_f=res.metrics.false_positive_rate,
                            v_dt="" if res.metrics.distinguisher_rate is None
                            else res.metrics.distinguisher_rate,
                            error="",
                        )
                    except Exception as exc:
                        row.update(accuracy="", v_t="", v_f="", v_dt="", error=str(exc))
                    rows.append(row)
                    print(f"sweep point {row}", flush=True)
    out = _out_path(args.out)
    with open(out, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=_SWEEP_COLUMNS)
        w.writeheader()
        w.writerows(rows)
    print(f"wrote {len(rows)} rows to {out}")
    return 0


def _cmd_attack(args) -> int:
    from .countermeasures import AttackConfig, run_attack_sweep
    from .experiments import ExperimentSpec, PlanSpec
    from .imgdata import Rng
    from .marks import make_mark

    spec = ExperimentSpec(
        seed=args.seed,
        plans=tuple(
            PlanSpec(target_class=c, alpha=args.alpha, fraction=args.fraction)
            for c in args.target_classes
        ),
        externals_per_mark=args.externals,
    )
    values = _parse_grid_values(args.values)
    attacks = []
    for v in values:
        if args.attack == "image_noise":
            attacks.append(AttackConfig(kind="image_noise", sigma=v))
        elif args.attack == "logit_noise":
            attacks.append(AttackConfig(kind="logit_noise", sigma=v))
        elif args.attack == "topk":
            attacks.append(AttackConfig(kind="topk", top_k=int(v)))
        elif args.attack == "extra_mark":
            adv = make_mark("blend_image", spec.dims, Rng(args.seed, 999),
                            alpha=float(v), mark_id=f"adversary-{v:g}")
            attacks.append(AttackConfig(kind="extra_mark", mark=adv, alpha_prime=float(v)))
        else:
            raise UsageError(f"unsupported attack {args.attack!r} for the CLI grid")
    rows = run_attack_sweep(spec, attacks, out_csv=_out_path(args.out))
    print(f"wrote {len(rows)} attack rows to {_out_path(args.out)}")
    return 0


def _cmd_report(args) -> int:
    paths: list[str] = []
    for pattern in args.inputs:
        paths.extend(sorted(globmod.glob(pattern)))
    if not paths:
        raise UsageError("no input CSVs matched")
    rows: list[dict] = []
    for path in paths:
        with open(path, newline="") as fh:
            rows.extend(csv.DictReader(fh))
    group_cols = [c.strip() for c in args.group_by.split(",")] if args.group_by else []
    numeric: dict[tuple, dict[str, list[float]]] = {}
    for row in rows:
        key = tuple(row.get(c, "") for c in group_cols)
        bucket = numeric.setdefault(key, {})
        for col, val in row.items():
            if col in group_cols or val in ("", None):
                continue
            try:
                bucket.setdefault(col, []).append(float(val))
            except ValueError:
                pass
    value_cols = sorted({c for b in numeric.values() for c in b})
    out = _out_path(args.out)
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(group_cols + [f"mean_{c}" for c in value_cols] + ["runs"])
        for key in sorted(numeric):
            bucket = numeric[key]
            means = [
                f"{np.mean(bucket[c]):.6g}" if c in bucket else "" for c in value_cols
            ]
            counts = max((len(v) for v in bucket.values()), default=0)
            w.writerow(list(key) + means + [counts])
    print(f"aggregated {len(rows)} rows from {len(paths)} files into {out}")
    return 0


# -- parser -------------------------------------------------------------------


def build_parser() -> _Parser:
    parser = _Parser(prog="isotope", description=__doc__,
                     formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--json", action="store_true",
                        help="emit machine-readable error JSON on stderr")
    parser.add_argument("--config", help="JSON file with flag defaults")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    parser.sub_map = {}  # type: ignore[attr-defined]
    _add = sub.add_parser

    def add_parser(name, **kwargs):
        p = _add(name, **kwargs)
        parser.sub_map[name] = p  # type: ignore[attr-defined]
        return p

    sub.add_parser = add_parser  # type: ignore[method-assign]

    p = sub.add_parser("gen-data", help="synthesize a dataset directory")
    p.add_argument("--classes", type=int, default=10)
    p.add_argument("--per-class", type=int, default=200)
    p.add_argument("--test-per-class", type=int, default=50)
    p.add_argument("--dims", default="3x32x32")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_gen_data)

    p = sub.add_parser("make-mark", help="create a mark file")
    p.add_argument("--kind", choices=["pixel_square", "random_pixels", "blend_image"],
                   default="blend_image")
    p.add_argument("--dims", default="3x32x32")
    p.add_argument("--alpha", type=float, default=0.4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--square-size", type=int, default=4)
    p.add_argument("--top", type=int, default=0)
    p.add_argument("--left", type=int, default=0)
    p.add_argument("--count", type=int, default=10)
    p.add_argument("--id", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_make_mark)

    p = sub.add_parser("mark-dataset", help="plant a mark into a dataset class")
    p.add_argument("--data", required=True)
    p.add_argument("--mark", required=True)
    p.add_argument("--target-class", type=int, required=True)
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--fraction", type=float, default=None)
    group.add_argument("--count", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_mark_dataset)

    p = sub.add_parser("train", help="train a classifier")
    p.add_argument("--data", required=True)
    p.add_argument("--test", default=None)
    p.add_argument("--optimizer", choices=["sgd", "adam"], default="sgd")
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--weight-decay", type=float, default=1e-3)
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--schedule-every", type=int, default=0)
    p.add_argument("--schedule-gamma", type=float, default=1.0)
    p.add_argument("--frozen-layers", type=int, default=0)
    p.add_argument("--flip-prob", type=float, default=0.5)
    p.add_argument("--crop-padding", type=int, default=2)
    p.add_argument("--rotation-degrees", type=float, default=10.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--metrics-csv", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("serve", help="serve a model over HTTP")
    p.add_argument("--model", required=True)
    p.add_argument("--host", default=os.environ.get("ISOTOPE_BIND_HOST", "127.0.0.1"))
    p.add_argument("--port", type=int, default=8750)
    p.add_argument("--mode", choices=["probs", "topk"], default="probs")
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--logit-noise-sigma", type=float, default=0.0)
    p.add_argument("--noise-seed", type=int, default=0)
    p.add_argument("--test-mode", action="store_true")
    p.set_defaults(func=_cmd_serve)

    p = sub.add_parser("verify", help="audit an endpoint for one mark")
    _add_verify_flags(p)
    p.add_argument("--target-class", type=int, required=True)
    p.add_argument("--mark", required=True)
    p.add_argument("--external", required=True)
    p.add_argument("--out", default=None, help="write the audit report JSON here")
    p.set_defaults(func=_cmd_verify)

    p = sub.add_parser("distinguish", help="bidirectional two-mark audit")
    _add_verify_flags(p)
    p.add_argument("--mark-a", required=True)
    p.add_argument("--class-a", type=int, required=True)
    p.add_argument("--mark-b", required=True)
    p.add_argument("--class-b", type=int, required=True)
    p.set_defaults(func=_cmd_distinguish)

    p = sub.add_parser("sweep", help="grid of full experiments -> CSV")
    p.add_argument("--grid", nargs="+", required=True,
                   help="axes like alpha=0.1,0.4 p=0.02..0.25:4 q=1,5 seed=0,1")
    p.add_argument("--externals", type=int, default=5)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_sweep)

    p = sub.add_parser("attack", help="countermeasure grid -> CSV")
    p.add_argument("--attack", required=True,
                   choices=["image_noise", "logit_noise", "topk", "extra_mark"])
    p.add_argument("--values", required=True, help="parameter grid, e.g. 0.1,0.5,1.0")
    p.add_argument("--alpha", type=float, default=0.4)
    p.add_argument("--fraction", type=float, default=0.25)
    p.add_argument("--target-classes", type=int, nargs="+", default=[3])
    p.add_argument("--externals", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_attack)

    p = sub.add_parser("report", help="aggregate result CSVs")
    p.add_argument("--inputs", nargs="+", required=True, help="CSV paths or globs")
    p.add_argument("--group-by", default="", help="comma-separated grouping columns")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_report)

    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    json_errors = False
    try:
        args = parser.parse_args(argv)
        json_errors = args.json
        if args.config and getattr(args, "command", None):
            # inject file values as subcommand defaults, then re-parse so
            # explicit flags still win
            defaults = json.loads(Path(args.config).read_text(encoding="utf-8"))
            sub = parser.sub_map.get(args.command)
            if sub is not None:
                sub.set_defaults(
                    **{k.replace("-", "_"): v for k, v in defaults.items()}
                )
            args = parser.parse_args(argv)
        if not getattr(args, "command", None):
            parser.print_help()
            return 1
        return args.func(args)
    except UsageError as exc:
        _emit_error(str(exc), "usage", json_errors)
        return 1
    except KeyboardInterrupt:
        _emit_error("interrupted", "runtime", json_errors)
        return 2
    except Exception as exc:
        _emit_error(str(exc), "runtime", json_errors)
        return 2


def _emit_error(message: str, kind: str, as_json: bool) -> None:
    if as_json:
        sys.stderr.write(json.dumps({"error": message, "kind": kind}) + "\n")
    else:
        sys.stderr.write(f"isotope: {kind} error: {message}\n")


if __name__ == "__main__":
    sys.exit(main())
