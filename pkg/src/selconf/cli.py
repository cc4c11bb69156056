"""Command-line entry point: ``selconf <command> [flags]``.

Exit codes: 0 success, 2 validation error, 3 infeasible threshold,
4 numeric failure, 1 anything else raised by the library.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from dataclasses import asdict, replace
from datetime import datetime, timezone
from pathlib import Path

from . import __version__
from .acr import MODES, AcrHeads, acr_table, acr_train, alpha_stats, rrh_table
from .analysis import best_fixed_lambda, brier_decomposition_check, fusion_report, separation_report
from .confidence import VsParams, msp_table
from .dataset import load_records, save_records, split_eval
from .errors import InfeasibleThresholdError, NumericError, SelconfError, ValidationError
from .metrics import DEFAULT_BINS, DEFAULT_RISKS, rc_curve, threshold_transfer
from .neural import vs_train
from .pipeline import (
    PIPELINE_TRAIN,
    VS_TRAIN,
    RunManifest,
    append_manifest,
    evaluate_methods,
    human_table,
    method_table,
    parse_methods,
    run_pipeline,
    write_rows,
)
from .synth import SynthConfig, bayes_gap, generate, read_s_star, write_s_star

INPUT_ALIASES = {"features": "fused_features", "fused_features": "fused_features", "logits": "logits"}


# ---------------------------------------------------------------------------
# flag parsing helpers
# ---------------------------------------------------------------------------


def _floats(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _ints(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _input_spec(text: str) -> tuple[str, ...]:
    blocks = []
    for item in text.split(","):
        key = item.strip()
        if key not in INPUT_ALIASES:
            raise ValidationError(f"unknown input block {key!r}; use features and/or logits")
        blocks.append(INPUT_ALIASES[key])
    return tuple(dict.fromkeys(blocks))


def _risks(values) -> list[float]:
    for r in values:
        if not 0.0 <= r < 1.0:
            raise ValidationError(f"target risk must be in [0, 1), got {r}")
    return list(values)


def _load_heads(path) -> AcrHeads | None:
    if path is None:
        return None
    return AcrHeads.from_json(Path(path).read_text(encoding="utf-8"))


def _load_vs(path) -> VsParams | None:
    if path is None:
        return None
    return VsParams.from_json(Path(path).read_text(encoding="utf-8"))


def _train_config(args):
    cfg = PIPELINE_TRAIN
    overrides = {
        "seed": args.seed,
        "epochs": args.epochs,
        "learning_rate": args.lr,
        "depth": args.depth,
        "batch_size": args.batch_size,
        "dropout_p": args.dropout,
    }
    return replace(cfg, **{k: v for k, v in overrides.items() if v is not None})


def _emit(text: str, out) -> None:
    if out is None:
        sys.stdout.write(text if text.endswith("\n") else text + "\n")
    else:
        Path(out).write_text(text, encoding="utf-8")


class _Run:
    """Collects manifest fields while a command runs."""

    def __init__(self, args):
        self.args = args
        self.start = time.perf_counter()
        self.started_at = datetime.now(timezone.utc).isoformat(timespec="seconds")
        self.inputs: list[str] = []
        self.outputs: list[str] = []

    def finish(self, anchor, config: dict, seeds) -> None:
        if anchor is None:
            return
        manifest = RunManifest(
            command=self.args.command,
            config=config,
            seeds=list(seeds),
            inputs=[str(p) for p in self.inputs],
            outputs=[str(p) for p in self.outputs],
            tool_version=__version__,
            wall_clock_s=time.perf_counter() - self.start,
            started_at=self.started_at,
        )
        append_manifest(anchor, manifest)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_synth(args) -> int:
    run = _Run(args)
    cfg = SynthConfig(
        n=args.n,
        k_classes=args.k,
        feat_dim=args.d if args.d is not None else max(32, args.k + 1),
        tau=args.tau,
        logit_noise=args.logit_noise,
        mc_passes=args.mc_passes,
        mc_noise=args.mc_noise,
        seed=args.seed,
    )
    data, s_star = generate(cfg)
    out = Path(args.out)
    save_records(data, out)
    side = out.with_name(out.name + ".s_star.csv")
    write_s_star(s_star, side)
    run.outputs += [out, side]
    run.finish(out, asdict(cfg), [args.seed])
    print(f"wrote {len(data)} records to {out} and posteriors to {side}")
    return 0


def cmd_calibrate_vs(args) -> int:
    run = _Run(args)
    data = load_records(args.data)
    run.inputs.append(args.data)
    cfg = replace(VS_TRAIN, seed=args.seed if args.seed is not None else VS_TRAIN.seed)
    if args.epochs is not None:
        cfg = replace(cfg, epochs=args.epochs)
    if args.lr is not None:
        cfg = replace(cfg, learning_rate=args.lr)
    params, history = vs_train(data.logits, data.labels, cfg)
    _emit(params.to_json() + "\n", args.out)
    if args.out:
        run.outputs.append(args.out)
    run.finish(args.out, cfg.to_dict(), [cfg.seed])
    return 0


def cmd_train_heads(args) -> int:
    run = _Run(args)
    train = load_records(args.data)
    run.inputs.append(args.data)
    val = None
    if args.val:
        val = load_records(args.val)
        run.inputs.append(args.val)
    cfg = _train_config(args)
    if val is None:
        cfg = replace(cfg, early_stop_metric="none")
    heads, history = acr_train(
        train, val, cfg, _input_spec(args.input), mode=args.mode, fixed_alpha=args.fixed_alpha
    )
    _emit(heads.to_json() + "\n", args.out)
    if args.out:
        run.outputs.append(args.out)
        print(f"best epoch {history.best_epoch}; heads written to {args.out}", file=sys.stderr)
    run.finish(args.out, {**cfg.to_dict(), "input": args.input, "mode": args.mode}, [cfg.seed])
    return 0


def cmd_eval(args) -> int:
    run = _Run(args)
    data = load_records(args.data)
    run.inputs.append(args.data)
    methods = parse_methods(args.methods)
    reports, _ = evaluate_methods(
        data, methods, _load_heads(args.heads), _load_vs(args.vs_params), _risks(args.risks), args.bins
    )
    rows = [r.as_row() for r in reports]
    print(human_table(rows))
    if args.out:
        write_rows(rows, args.out)
        run.outputs.append(args.out)
    run.finish(args.out, {"methods": methods, "risks": args.risks, "bins": args.bins}, [])
    return 0


def cmd_sweep(args) -> int:
    run = _Run(args)
    data = load_records(args.data)
    run.inputs.append(args.data)
    methods = [m for m in parse_methods(args.methods) if m != "oracle"]
    heads, vs = _load_heads(args.heads), _load_vs(args.vs_params)
    curves = {m: rc_curve(method_table(m, data, heads, vs)) for m in methods}
    if args.out is None:
        if len(curves) != 1:
            raise ValidationError("sweep of several methods needs --out DIR")
        sys.stdout.write(next(iter(curves.values())).to_csv())
        return 0
    out = Path(args.out)
    if out.suffix == ".csv":
        if len(curves) != 1:
            raise ValidationError("a .csv --out holds a single method's curve")
        out.write_text(next(iter(curves.values())).to_csv(), encoding="utf-8")
        run.outputs.append(out)
    else:
        out.mkdir(parents=True, exist_ok=True)
        for name, curve in curves.items():
            path = out / f"{name}.csv"
            path.write_text(curve.to_csv(), encoding="utf-8")
            run.outputs.append(path)
    run.finish(out, {"methods": methods}, [])
    return 0


def cmd_verify(args) -> int:
    run = _Run(args)
    data = load_records(args.data)
    run.inputs.append(args.data)
    heads = _load_heads(args.heads)
    if heads is None:
        raise ValidationError("verify requires a heads file (--heads)")
    s_star = read_s_star(args.s_star) if args.s_star else None
    msp_t = msp_table(data)
    rrh_t = rrh_table(heads, data)
    acr_t = acr_table(heads, data)
    out = {
        "data": str(args.data),
        "n": len(data),
        **fusion_report(msp_t, rrh_t),
        "fixed_lambda": best_fixed_lambda(msp_t, rrh_t, acr_t).to_dict(),
        "alpha": asdict(alpha_stats(heads, data)),
        "separation": {},
    }
    for table in (msp_t, rrh_t, acr_t):
        try:
            out["separation"][table.method_name] = separation_report(table).to_dict()
        except (ValidationError, NumericError) as exc:
            out["separation"][table.method_name] = {"error": str(exc)}
    if s_star is not None:
        run.inputs.append(args.s_star)
        out["bayes"] = {
            t.method_name: dict(
                zip(("mse", "mae"), bayes_gap(t, s_star)),
                brier_residual=brier_decomposition_check(t, s_star),
            )
            for t in (msp_t, rrh_t, acr_t)
        }
    _emit(json.dumps(out, indent=2) + "\n", args.out)
    if args.out:
        run.outputs.append(args.out)
    run.finish(args.out, {"heads": args.heads}, [])
    return 0


def cmd_thresholds(args) -> int:
    run = _Run(args)
    data = load_records(args.data)
    run.inputs.append(args.data)
    seed = args.seed if args.seed is not None else 0
    val_g, test = split_eval(data, args.fraction_val_g, seed)
    heads, vs = _load_heads(args.heads), _load_vs(args.vs_params)
    rows, infeasible = [], False
    for method in [m for m in parse_methods(args.methods) if m != "oracle"]:
        val_t = method_table(method, val_g, heads, vs)
        test_t = method_table(method, test, heads, vs)
        for r in _risks(args.risks):
            row = {"method": method, "target_risk": r * 100.0}
            try:
                res = threshold_transfer(val_t, test_t, r)
            except InfeasibleThresholdError as exc:
                infeasible = True
                row.update(status="infeasible", detail=str(exc))
            else:
                row.update(
                    status="ok",
                    gamma=res.gamma,
                    delta_risk=res.delta_risk * 100.0,
                    delta_coverage=res.delta_coverage * 100.0,
                    test_risk=res.test_risk * 100.0,
                    test_coverage=res.test_coverage * 100.0,
                )
            rows.append(row)
    text = json.dumps(rows, indent=2) + "\n"
    _emit(text, args.out)
    if args.out:
        run.outputs.append(args.out)
    run.finish(args.out, {"fraction_val_g": args.fraction_val_g, "risks": args.risks}, [seed])
    if infeasible:
        print("at least one target risk was infeasible on the validation split", file=sys.stderr)
        return InfeasibleThresholdError.exit_code
    return 0


def cmd_pipeline(args) -> int:
    run = _Run(args)
    synth = SynthConfig(
        n=args.n,
        k_classes=args.k,
        feat_dim=args.d if args.d is not None else max(32, args.k + 1),
        tau=args.tau,
    )
    cfg = _train_config(args)
    out = Path(args.out) if args.out else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    result = run_pipeline(args.seeds, synth, cfg, _risks(args.risks), args.bins, out)
    for r in result.runs:
        print(f"seed {r.seed}")
        print(human_table(r.rows()))
    if result.aggregate:
        print("mean and std over seeds (percent)")
        print(human_table(result.aggregate_rows()))
    if out is not None:
        summary = out / "aggregate.json"
        summary.write_text(json.dumps(result.to_dict(), indent=2) + "\n", encoding="utf-8")
        if result.aggregate:
            write_rows(result.aggregate_rows(), out / "aggregate.csv")
            run.outputs.append(out / "aggregate.csv")
        run.outputs.append(summary)
        run.outputs += [out / f"seed_{s}" for s in args.seeds]
        run.finish(out, {"synth": asdict(synth), "train": cfg.to_dict()}, args.seeds)
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def _add_eval_flags(p, methods_default: str) -> None:
    p.add_argument("--data", required=True, help="record file (JSON lines)")
    p.add_argument("--methods", default=methods_default, help="comma-separated subset of msp,mcd,vs,doctor,acr,oracle")
    p.add_argument("--heads", help="trained heads JSON, needed for acr")
    p.add_argument("--vs-params", help="vector-scaling parameters JSON, needed for vs")


def _add_train_flags(p) -> None:
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--depth", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--dropout", type=float)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="selconf", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    risks = ",".join(f"{r:.2f}" for r in DEFAULT_RISKS)

    p = sub.add_parser("synth", help="generate a synthetic record file and its posterior side-file")
    p.add_argument("--n", type=int, default=20_000)
    p.add_argument("--k", type=int, default=8)
    p.add_argument("--d", type=int, help="feature width (default max(32, k+1))")
    p.add_argument("--tau", type=float, default=1.5)
    p.add_argument("--logit-noise", type=float, default=0.3)
    p.add_argument("--mc-passes", type=int, default=10)
    p.add_argument("--mc-noise", type=float, default=0.3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("calibrate-vs", help="fit vector scaling on a record file")
    p.add_argument("--data", required=True)
    p.add_argument("--out")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.set_defaults(func=cmd_calibrate_vs)

    p = sub.add_parser("train-heads", help="train the residual-risk and gating heads")
    p.add_argument("--data", required=True, help="training records (Val-f role)")
    p.add_argument("--val", help="early-stopping records (Val-g role)")
    p.add_argument("--input", default="features,logits", help="head input blocks: features, logits")
    p.add_argument("--mode", default="full", choices=MODES)
    p.add_argument("--fixed-alpha", type=float)
    p.add_argument("--out")
    _add_train_flags(p)
    p.set_defaults(func=cmd_train_heads)

    p = sub.add_parser("eval", help="selective metrics per method plus the oracle row")
    _add_eval_flags(p, "msp,doctor")
    p.add_argument("--risks", type=_floats, default=list(DEFAULT_RISKS), help=f"target risks (default {risks})")
    p.add_argument("--bins", type=int, default=DEFAULT_BINS)
    p.add_argument("--out", help="output .csv or .json")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="risk-coverage curves as CSV")
    _add_eval_flags(p, "msp")
    p.add_argument("--out", help="output .csv (one method) or directory")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("verify", help="error moments, optimal fixed weight and separation statistics")
    p.add_argument("--data", required=True)
    p.add_argument("--heads", required=True)
    p.add_argument("--s-star", help="posterior side-file from synth")
    p.add_argument("--out")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("thresholds", help="fix thresholds on Val-g and measure them on Test")
    _add_eval_flags(p, "msp")
    p.add_argument("--risks", type=_floats, default=[0.05, 0.10, 0.20])
    p.add_argument("--fraction-val-g", type=float, default=0.2)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_thresholds)

    p = sub.add_parser("pipeline", help="synth, split, train and evaluate over several seeds")
    p.add_argument("--seeds", type=_ints, default=[0, 1, 2, 3, 4])
    p.add_argument("--n", type=int, default=20_000)
    p.add_argument("--k", type=int, default=8)
    p.add_argument("--d", type=int)
    p.add_argument("--tau", type=float, default=1.5)
    p.add_argument("--risks", type=_floats, default=list(DEFAULT_RISKS))
    p.add_argument("--bins", type=int, default=DEFAULT_BINS)
    p.add_argument("--out", help="output directory")
    _add_train_flags(p)
    p.set_defaults(func=cmd_pipeline)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except SelconfError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except (OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return ValidationError.exit_code


if __name__ == "__main__":
    sys.exit(main())
