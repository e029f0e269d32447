"""Command-line driver: ``wsre-meld {wsre, meld, direct, diagnose}``.

Settings come from an optional YAML config file and are overridden by flags.
Every run writes one directory::

    <out>/chains/     chain CSVs
    <out>/estimates/  WSRE estimate JSON
    <out>/reports/    diagnostics (CSV + JSON)
    <out>/meta.json   command, resolved config, package version

Exit codes: 0 success, 1 runtime failure, 2 usage or config error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import pathlib
import sys
from dataclasses import asdict, replace
from typing import Optional

import numpy as np
import yaml

from . import __version__
from .density import MeldError
from .diagnostics import (CsvFormatError, compare_stuck, ess, long_csv, long_rows, qq_compare, read_chain_csv,
                          stuck_runs)
from .experiments import (DEFAULT_BUDGETS, EVALUATORS, MODELS, Budget, default_wsre_config, gaussian_direct,
                          gaussian_meld, h1n1_meld, hiv_direct, hiv_meld, wsre_target)
from .models.h1n1 import IcuData, h1n1_synthetic
from .models.hiv import HivData
from .wsre import WsreEstimate, wsre_pipeline

log = logging.getLogger("wsre_meld")

OUTPUT_ENV = "WSRE_MELD_OUTPUT"
CONFIG_VERSION = 1

BUDGET_KEYS = tuple(Budget.__dataclass_fields__)


class UsageError(Exception):
    """Bad flags or config; exit code 2."""


# ---------------------------------------------------------------------------
# Config handling
# ---------------------------------------------------------------------------


def load_config(path) -> dict:
    if path is None:
        return {}
    try:
        with open(path) as fh:
            cfg = yaml.safe_load(fh) or {}
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from None
    except yaml.YAMLError as exc:
        raise UsageError(f"config {path} is not valid YAML: {exc}") from None
    if not isinstance(cfg, dict):
        raise UsageError(f"config {path} must be a mapping at top level")
    return cfg


def resolve(args, cfg: dict, keys) -> dict:
    """Merge config values with flags; flags win when given."""
    out = {}
    for k in keys:
        flag = getattr(args, k, None)
        out[k] = flag if flag is not None else cfg.get(k)
    return out


def _budget(model: str, overrides: dict) -> Budget:
    base = asdict(DEFAULT_BUDGETS[model])
    for k, v in (overrides or {}).items():
        if k not in base:
            raise UsageError(f"unknown budget key {k!r}; known: {', '.join(BUDGET_KEYS)}")
        base[k] = v
    try:
        return Budget(**base)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"bad budget: {exc}") from None


def _out_dir(value: Optional[str], command: str, model: str, seed: int) -> pathlib.Path:
    if value:
        return pathlib.Path(value)
    root = pathlib.Path(os.environ.get(OUTPUT_ENV, "runs"))
    return root / f"{command}-{model}-seed{seed}"


def _layout(out: pathlib.Path) -> pathlib.Path:
    for sub in ("chains", "estimates", "reports"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    return out


def _write_meta(out: pathlib.Path, command: str, file_cfg: dict, resolved: dict, extra: Optional[dict] = None):
    meta = {"command": command, "config_file": file_cfg, "resolved": resolved, "version": __version__,
            "config_version": CONFIG_VERSION}
    if extra:
        meta.update(extra)
    (out / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True, default=_json_default) + "\n")


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"cannot serialise {type(o).__name__}")


def _check_model(model):
    if model is None:
        raise UsageError("a model is required (--model gaussian|hiv|h1n1)")
    if model not in MODELS:
        raise UsageError(f"unknown model {model!r}; choose from {', '.join(MODELS)}")


def _hiv_data(path):
    return HivData.from_csv(path) if path else None


def _h1n1_data(cfg: dict, seed: int, T: int):
    icu, vir = cfg.get("icu_csv"), cfg.get("virology_csv")
    if icu or vir:
        if not (icu and vir):
            raise UsageError("give both icu_csv and virology_csv")
        return IcuData.from_csv(icu, vir, T)
    return h1n1_synthetic(seed if cfg.get("data_seed") is None else int(cfg["data_seed"]), T)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_wsre(args, cfg) -> int:
    c = resolve(args, cfg, ("model", "w", "n_per_w", "seed", "workers", "out"))
    _check_model(c["model"])
    seed = int(c["seed"] or 0)
    try:
        wcfg = default_wsre_config(c["model"], seed, c["n_per_w"], c["w"], int(c["workers"] or 1))
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    target = wsre_target(c["model"], _hiv_data(cfg.get("data_csv")) if c["model"] == "hiv" else None)
    est = wsre_pipeline(target, wcfg, label=c["model"])
    out = _layout(_out_dir(c["out"], "wsre", c["model"], seed))
    (out / "estimates" / "wsre.json").write_text(est.to_json() + "\n")
    _write_meta(out, "wsre", cfg, {k: v for k, v in c.items() if k != "out"},
                {"total_draws": est.total_draws, "W": len(est.sets)})
    print(f"wrote {est.total_draws} weighted draws from {len(est.sets)} weighting functions to {out}")
    return 0


def cmd_meld(args, cfg) -> int:
    c = resolve(args, cfg, ("model", "evaluator", "seed", "replicates", "workers", "out", "estimate", "T"))
    _check_model(c["model"])
    model = c["model"]
    evaluator = c["evaluator"] or "wsre"
    if evaluator not in EVALUATORS:
        raise UsageError(f"unknown evaluator {evaluator!r}; choose from {', '.join(EVALUATORS)}")
    if evaluator == "analytic" and model != "gaussian":
        what = "HIV submodel 1" if model == "hiv" else "the H1N1 severity submodel"
        raise UsageError(f"no analytic phi prior marginal exists for {what}; use naive or wsre")
    seed = int(c["seed"] or 0)
    budget_cfg = dict(cfg.get("budget") or {})
    if c["replicates"] is not None:
        budget_cfg["replicates"] = int(c["replicates"])
    b = _budget(model, budget_cfg)
    workers = int(c["workers"] or 1)
    estimate = None
    if c["estimate"]:
        if evaluator != "wsre":
            raise UsageError("--estimate only applies to the wsre evaluator")
        try:
            estimate = WsreEstimate.from_json(pathlib.Path(c["estimate"]).read_text())
        except (OSError, ValueError, KeyError) as exc:
            raise UsageError(f"cannot load estimate {c['estimate']}: {exc}") from None

    if model == "hiv":
        res = hiv_meld(evaluator, seed, b, _hiv_data(cfg.get("data_csv")), estimate, workers)
    elif model == "h1n1":
        T = int(c["T"] or 28)
        res = h1n1_meld(evaluator, seed, b, _h1n1_data(cfg, seed, T), T, estimate, workers=workers)
    else:
        res = gaussian_meld(evaluator, seed, b, estimate=estimate, workers=workers)

    out = _layout(_out_dir(c["out"], "meld", model, seed))
    chains = out / "chains"
    res.runs[0].stage1.to_csv(chains / "stage_one.csv")
    summary = []
    for k, run in enumerate(res.runs):
        name = f"stage_two_r{k + 1:02d}" if len(res.runs) > 1 else "stage_two"
        (chains / f"{name}.csv").write_text(run.stage_two_csv())
        (chains / f"{name}.json").write_text(json.dumps(run.metadata(), indent=2, sort_keys=True,
                                                         default=_json_default) + "\n")
        summary.append({"chain": name, "phi_acceptance": run.phi_acceptance, "indices_ok": run.check_indices()})
    if res.estimate is not None:
        (out / "estimates" / "wsre.json").write_text(res.estimate.to_json() + "\n")
    if model == "h1n1":
        (out / "data").mkdir(exist_ok=True)
        res.data.to_csv(out / "data" / "icu.csv", out / "data" / "virology.csv")
    _write_meta(out, "meld", cfg, {**{k: v for k, v in c.items() if k != "out"}, "budget": asdict(b)},
                {"runs": summary, "stage_one": res.runs[0].stage1.metadata()})
    print(f"wrote stage-one chain and {len(res.runs)} stage-two chain(s) to {out}")
    return 0


def cmd_direct(args, cfg) -> int:
    c = resolve(args, cfg, ("model", "seed", "out"))
    _check_model(c["model"])
    model = c["model"]
    if model == "h1n1":
        raise UsageError("h1n1 has no implied joint model to sample directly; use meld")
    seed = int(c["seed"] or 0)
    b = _budget(model, cfg.get("budget"))
    chain = hiv_direct(seed, b, _hiv_data(cfg.get("data_csv"))) if model == "hiv" else gaussian_direct(seed, b)
    out = _layout(_out_dir(c["out"], "direct", model, seed))
    chain.to_csv(out / "chains" / "direct.csv")
    (out / "chains" / "direct.json").write_text(json.dumps(chain.metadata(), indent=2, sort_keys=True,
                                                          default=_json_default) + "\n")
    _write_meta(out, "direct", cfg, {**{k: v for k, v in c.items() if k != "out"}, "budget": asdict(b)})
    print(f"wrote {len(chain)} direct draws to {out}")
    return 0


def _pick_column(names, data, column, path):
    if column is None:
        for cand in ("phi1", "phi", "pi12"):
            if cand in names:
                column = cand
                break
        else:
            column = names[0]
    if column not in names:
        raise UsageError(f"{path}: no column {column!r}; have {', '.join(names)}")
    return column, data[:, names.index(column)]


def cmd_diagnose(args, cfg) -> int:
    c = resolve(args, cfg, ("column", "out", "replicates_dir", "compare_dir"))
    inputs = list(args.chains or cfg.get("chains") or [])
    if not inputs and not c["replicates_dir"]:
        raise UsageError("give one or two chain CSVs, or --replicates-dir")
    if len(inputs) > 2:
        raise UsageError("at most two chain CSVs can be compared")
    out = _layout(pathlib.Path(c["out"]) if c["out"] else pathlib.Path(os.environ.get(OUTPUT_ENV, "runs")) / "diagnose")
    reports = out / "reports"
    rows, doc = [], {}

    cols = {}
    for path in inputs:
        names, data = read_chain_csv(path)
        col, x = _pick_column(names, data, c["column"], path)
        label = pathlib.Path(path).stem
        cols[label] = x
        e = ess(x) if x.size >= 10 else None
        s = stuck_runs(x)
        doc[label] = {"column": col, "ess": None if e is None else e.to_dict(), "stuck": s.to_dict()}
        if e is not None:
            rows += [(f"ess_{k}", label, v) for k, v in e.to_dict().items() if v is not None]
        rows += [(f"stuck_{k}", label, v) for k, v in s.to_dict().items()]
    if len(cols) == 2:
        (la, a), (lb, b) = cols.items()
        qq = qq_compare(a, b, labels=(la, lb))
        (reports / "qq.csv").write_text(qq.to_csv())
        doc["qq"] = qq.to_dict()
        rows += [("qq_mean_gap", f"{la}|{lb}", qq.mean_gap), ("qq_max_gap", f"{la}|{lb}", qq.max_gap)]

    groups = {}
    for label, d in (("replicates", c["replicates_dir"]), ("compare", c["compare_dir"])):
        if not d:
            continue
        files = sorted(pathlib.Path(d).glob("stage_two*.csv"))
        if not files:
            raise UsageError(f"{d}: no stage_two*.csv files")
        reps = []
        for f in files:
            names, data = read_chain_csv(f)
            col, x = _pick_column(names, data, c["column"], f)
            rep = stuck_runs(x)
            reps.append(rep)
            rows += [(f"stuck_{k}", f"{label}/{f.stem}", v) for k, v in rep.to_dict().items()]
        groups[f"{label}:{d}"] = reps
    if groups:
        agg = compare_stuck(groups)
        doc["stuck_comparison"] = agg
        for g, v in agg.items():
            rows += [(k, g, val) for k, val in v.items()]

    (reports / "diagnostics.csv").write_text(long_csv(rows))
    (reports / "diagnostics.json").write_text(json.dumps(doc, indent=2, sort_keys=True, default=_json_default) + "\n")
    _write_meta(out, "diagnose", cfg, {**{k: v for k, v in c.items() if k != "out"}, "chains": inputs})
    print(f"wrote diagnostics to {reports}")
    return 0


COMMANDS = {"wsre": cmd_wsre, "meld": cmd_meld, "direct": cmd_direct, "diagnose": cmd_diagnose}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="wsre-meld", description="Markov melding with weighted-sample "
                                "self-density ratio estimation.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to standard error")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, model=True):
        sp.add_argument("--config", help="YAML config file; flags override its values")
        sp.add_argument("--out", help=f"run directory (default: ${OUTPUT_ENV} or ./runs, plus a run name)")
        sp.add_argument("--seed", type=int)
        if model:
            sp.add_argument("--model", choices=MODELS)

    sp = sub.add_parser("wsre", help="estimate a prior-marginal self-density ratio by WSRE")
    common(sp)
    sp.add_argument("--w", type=int, help="number of weighting functions")
    sp.add_argument("--n-per-w", dest="n_per_w", type=int, help="post-warmup draws per weighted target")
    sp.add_argument("--workers", type=int, help="processes for the weighted targets")

    sp = sub.add_parser("meld", help="run the two-stage melding sampler")
    common(sp)
    sp.add_argument("--evaluator", choices=EVALUATORS)
    sp.add_argument("--replicates", type=int, help="number of stage-two chains")
    sp.add_argument("--workers", type=int, help="processes for WSRE targets and stage-two replicates")
    sp.add_argument("--estimate", help="reuse a WSRE estimate JSON")
    sp.add_argument("--T", dest="T", type=int, help="H1N1 horizon in days (default 28)")

    sp = sub.add_parser("direct", help="sample the full joint model directly (baseline)")
    common(sp)

    sp = sub.add_parser("diagnose", help="ESS, stuck-run and QQ reports from chain CSVs")
    sp.add_argument("chains", nargs="*", help="one or two chain CSV files")
    sp.add_argument("--config")
    sp.add_argument("--out")
    sp.add_argument("--column", help="column to analyse (default phi1, phi or pi12)")
    sp.add_argument("--replicates-dir", dest="replicates_dir", help="directory of stage_two*.csv replicates")
    sp.add_argument("--compare-dir", dest="compare_dir", help="second replicate directory to compare against")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        return COMMANDS[args.command](args, cfg)
    except UsageError as exc:
        print(f"wsre-meld {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except CsvFormatError as exc:
        print(f"wsre-meld {args.command}: error: {exc}", file=sys.stderr)
        return 1
    except (MeldError, ValueError, OSError) as exc:
        print(f"wsre-meld {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
