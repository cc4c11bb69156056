"""End-to-end runs: method tables, evaluation rows, manifests and multi-seed sweeps."""

from __future__ import annotations

import contextlib
import csv
import io
import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

from . import __version__
from .acr import AcrHeads, acr_table, acr_train, alpha_stats, rrh_table
from .analysis import best_fixed_lambda, fusion_report, separation_report
from .confidence import VsParams, doctor_table, mcd_table, msp_table, vs_table
from .dataset import ConfidenceTable, EvalSet, Split, split_eval, split_roles
from .errors import NumericError, SelconfError, ValidationError
from .metrics import (
    DEFAULT_BINS,
    DEFAULT_RISKS,
    MetricsReport,
    aggregate_seeds,
    evaluate,
    oracle_metrics,
    rc_curve,
)
from .neural import TrainConfig, vs_train
from .synth import SynthConfig, bayes_gap, generate

METHODS = ("msp", "mcd", "vs", "doctor", "acr", "oracle")
ROLE_FRACTIONS = (0.6, 0.2, 0.2)
ROLES = (Split.TRAIN_F, Split.VAL_F, Split.TEST)
# Val-g share of the held-out 20%, giving 8% Val-g and 12% Test overall.
HOLDOUT_VAL_G = 0.4

# Head training used by the pipeline.  Linear heads with a larger step than
# the library default; see the README for how this was chosen.
PIPELINE_TRAIN = TrainConfig(learning_rate=3e-3, depth=1)
VS_TRAIN = TrainConfig()


@contextlib.contextmanager
def stage(name: str):
    """Prefix errors raised inside the block with the stage name."""
    try:
        yield
    except SelconfError as exc:
        exc.args = (f"[{name}] {exc.args[0] if exc.args else ''}",) + exc.args[1:]
        raise
    except (FloatingPointError, OverflowError, ZeroDivisionError) as exc:
        raise NumericError(f"[{name}] {exc}") from exc


# ---------------------------------------------------------------------------
# per-method tables and evaluation rows
# ---------------------------------------------------------------------------


def parse_methods(text: str | Sequence[str]) -> list[str]:
    items = text.split(",") if isinstance(text, str) else list(text)
    out = [m.strip().lower() for m in items if m.strip()]
    bad = [m for m in out if m not in METHODS]
    if bad or not out:
        raise ValidationError(f"unknown method(s) {bad or out}; choose from {','.join(METHODS)}")
    return list(dict.fromkeys(out))


def method_table(
    method: str,
    evalset: EvalSet,
    heads: AcrHeads | None = None,
    vs_params: VsParams | None = None,
) -> ConfidenceTable:
    if method == "msp":
        return msp_table(evalset)
    if method == "doctor":
        return doctor_table(evalset)
    if method == "mcd":
        return mcd_table(evalset)
    if method == "vs":
        if vs_params is None:
            raise ValidationError("method vs requires a vector-scaling parameter file (--vs-params)")
        return vs_table(evalset, vs_params)
    if method == "acr":
        if heads is None:
            raise ValidationError("method acr requires a heads file (--heads)")
        return acr_table(heads, evalset)
    raise ValidationError(f"method {method!r} has no confidence table")


def evaluate_methods(
    evalset: EvalSet,
    methods: Sequence[str],
    heads: AcrHeads | None = None,
    vs_params: VsParams | None = None,
    targets: Sequence[float] = DEFAULT_RISKS,
    m_bins: int = DEFAULT_BINS,
) -> tuple[list[MetricsReport], dict[str, ConfidenceTable]]:
    """One report per method, with the oracle row always last."""
    reports, tables = [], {}
    for method in methods:
        if method == "oracle":
            continue
        table = method_table(method, evalset, heads, vs_params)
        tables[method] = table
        reports.append(evaluate(table, targets, m_bins))
    reports.append(oracle_metrics(evalset.correct, targets))
    return reports, tables


def rows_to_csv(rows: Sequence[dict]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
    return buf.getvalue()


def human_table(rows: Sequence[dict], digits: int = 2) -> str:
    cols = list(rows[0])
    cells = [[(f"{r[c]:.{digits}f}" if isinstance(r[c], float) else str(r[c])) for c in cols] for r in rows]
    widths = [max(len(c), *(len(row[i]) for row in cells)) for i, c in enumerate(cols)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(cols, widths))]
    lines += ["  ".join(v.ljust(w) for v, w in zip(row, widths)) for row in cells]
    return "\n".join(lines)


def write_rows(rows: Sequence[dict], path) -> None:
    path = Path(path)
    if path.suffix == ".json":
        path.write_text(json.dumps(list(rows), indent=2) + "\n", encoding="utf-8")
    else:
        path.write_text(rows_to_csv(rows), encoding="utf-8")


# ---------------------------------------------------------------------------
# manifests
# ---------------------------------------------------------------------------


@dataclass
class RunManifest:
    command: str
    config: dict
    seeds: list[int]
    inputs: list[str]
    outputs: list[str]
    tool_version: str = __version__
    wall_clock_s: float = 0.0
    started_at: str = ""


def manifest_path(out) -> Path:
    out = Path(out)
    return out / "manifest.jsonl" if out.is_dir() else out.with_name(out.name + ".manifest.jsonl")


def append_manifest(out, manifest: RunManifest) -> Path:
    path = manifest_path(out)
    with open(path, "a", encoding="utf-8") as fh:
        fh.write(json.dumps(asdict(manifest), sort_keys=True) + "\n")
    return path


# ---------------------------------------------------------------------------
# seed runs
# ---------------------------------------------------------------------------


@dataclass
class SeedResult:
    seed: int
    reports: dict[str, MetricsReport]
    fusion: dict
    alpha: dict
    separation: dict[str, dict]
    fixed_lambda: dict
    bayes_mse: dict[str, float]
    heads: AcrHeads = field(repr=False)
    vs_params: VsParams = field(repr=False)
    tables: dict[str, ConfidenceTable] = field(repr=False, default_factory=dict)

    def rows(self) -> list[dict]:
        return [r.as_row() for r in self.reports.values()]

    def summary(self) -> dict:
        return {
            "seed": self.seed,
            "rows": self.rows(),
            "fusion": self.fusion,
            "alpha": self.alpha,
            "separation": self.separation,
            "fixed_lambda": self.fixed_lambda,
            "bayes_mse": self.bayes_mse,
        }


def split_for_seed(evalset: EvalSet, seed: int) -> dict[Split, EvalSet]:
    roles = split_roles(evalset, ROLE_FRACTIONS, ROLES, seed)
    val_g, test = split_eval(roles[Split.TEST], HOLDOUT_VAL_G, seed)
    return {Split.TRAIN_F: roles[Split.TRAIN_F], Split.VAL_F: roles[Split.VAL_F], Split.VAL_G: val_g, Split.TEST: test}


def run_seed(
    seed: int,
    synth: SynthConfig = SynthConfig(),
    train: TrainConfig = PIPELINE_TRAIN,
    targets: Sequence[float] = DEFAULT_RISKS,
    m_bins: int = DEFAULT_BINS,
    out_dir=None,
) -> SeedResult:
    with stage("synth"):
        data, s_star = generate(replace(synth, seed=seed))
    with stage("split"):
        parts = split_for_seed(data, seed)
    val_f, val_g, test = parts[Split.VAL_F], parts[Split.VAL_G], parts[Split.TEST]
    with stage("vs_train"):
        vs_params, _ = vs_train(val_f.logits, val_f.labels, replace(VS_TRAIN, seed=seed))
    with stage("acr_train"):
        heads, _ = acr_train(val_f, val_g, replace(train, seed=seed))
    with stage("eval"):
        methods = [m for m in METHODS if m != "mcd" or test.has_mc_passes]
        reports, tables = evaluate_methods(test, methods, heads, vs_params, targets, m_bins)
        rrh = rrh_table(heads, test)
        fixed = best_fixed_lambda(tables["msp"], rrh, tables["acr"])
        sep = {}
        for name in ("msp", "acr"):
            with contextlib.suppress(ValidationError, NumericError):
                sep[name] = separation_report(tables[name]).to_dict()
        result = SeedResult(
            seed=seed,
            reports={r.method_name: r for r in reports},
            fusion=fusion_report(tables["msp"], rrh),
            alpha=asdict(alpha_stats(heads, test)),
            separation=sep,
            fixed_lambda=fixed.to_dict(),
            bayes_mse={name: bayes_gap(t, s_star)[0] for name, t in {**tables, "rrh": rrh}.items()},
            heads=heads,
            vs_params=vs_params,
            tables={**tables, "rrh": rrh},
        )
    if out_dir is not None:
        with stage("write"):
            write_seed(result, out_dir)
    return result


def write_seed(result: SeedResult, out_dir) -> list[str]:
    out = Path(out_dir)
    (out / "curves").mkdir(parents=True, exist_ok=True)
    rows = result.rows()
    files = {
        "eval.csv": rows_to_csv(rows),
        "eval.json": json.dumps(rows, indent=2) + "\n",
        "report.txt": human_table(rows) + "\n",
        "verify.json": json.dumps(result.summary(), indent=2) + "\n",
        "heads.json": result.heads.to_json() + "\n",
        "vs_params.json": result.vs_params.to_json() + "\n",
    }
    for name, table in result.tables.items():
        files[f"curves/{name}.csv"] = rc_curve(table).to_csv()
    for name, text in files.items():
        (out / name).write_text(text, encoding="utf-8")
    return sorted(files)


def thread_cap(default: int = 1) -> int:
    raw = os.environ.get("SELCONF_THREADS", "")
    if not raw:
        return default
    try:
        n = int(raw)
    except ValueError:
        raise ValidationError(f"SELCONF_THREADS must be an integer, got {raw!r}") from None
    if n < 1:
        raise ValidationError("SELCONF_THREADS must be >= 1")
    return n


@dataclass
class PipelineResult:
    seeds: list[int]
    runs: list[SeedResult]
    aggregate: dict[str, dict[str, tuple[float, float]]]

    def aggregate_rows(self) -> list[dict]:
        rows = []
        for method, stats in self.aggregate.items():
            row = {"method": method}
            for key, (mean, std) in stats.items():
                row[f"{key}_mean"] = mean * 100.0
                row[f"{key}_std"] = std * 100.0
            rows.append(row)
        return rows

    def to_dict(self) -> dict:
        return {
            "seeds": self.seeds,
            "aggregate_percent": self.aggregate_rows(),
            "runs": [r.summary() for r in self.runs],
        }


def run_pipeline(
    seeds: Sequence[int],
    synth: SynthConfig = SynthConfig(),
    train: TrainConfig = PIPELINE_TRAIN,
    targets: Sequence[float] = DEFAULT_RISKS,
    m_bins: int = DEFAULT_BINS,
    out_dir=None,
    threads: int | None = None,
) -> PipelineResult:
    """Run every seed (concurrently up to ``threads``) and aggregate per method."""
    seeds = list(seeds)
    if not seeds or len(set(seeds)) != len(seeds):
        raise ValidationError("seeds must be a non-empty list without repeats")
    workers = min(threads or thread_cap(), len(seeds))

    def one(seed):
        sub = None if out_dir is None else Path(out_dir) / f"seed_{seed}"
        return run_seed(seed, synth, train, targets, m_bins, sub)

    if workers == 1:
        runs = [one(s) for s in seeds]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            runs = list(pool.map(one, seeds))
    aggregate = {}
    if len(runs) >= 2:
        with stage("aggregate"):
            for method in runs[0].reports:
                aggregate[method] = aggregate_seeds([r.reports[method] for r in runs])
    return PipelineResult(seeds, runs, aggregate)


def relative_gain(result: SeedResult, method: str = "acr", baseline: str = "msp") -> float:
    base = result.reports[baseline].aurc
    return (base - result.reports[method].aurc) / base

