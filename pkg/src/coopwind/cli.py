"""Command-line entry point: generate, train, run, report, audit.

Configuration is read from a YAML file; command-line flags override the
file, which overrides built-in defaults. Exit codes: 0 success, 1 usage or
configuration error, 2 numerical or consistency failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import platform
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .allocation import CoherenceError, audit_core, audit_superadditivity
from .data import DatasetManifest, SyntheticSpec, chronological_split, generate_synthetic, load_panel, save_panel
from .hierarchy import ScenarioPanel
from .market import PriceTriple
from .pipeline import METHODS, RunResult, run_method
from .reconcile import TRAINABLE, Reconciler, TrainConfig, load_reconciler, save_reconciler, train
from .scoring import RankHistogram, rebin

log = logging.getLogger("coopwind")

EXIT_USAGE = 1
EXIT_NUMERIC = 2


class ConfigError(ValueError):
    pass


class AuditFailure(ArithmeticError):
    pass


@dataclass
class RunConfig:
    manifest: str | None = None
    synthetic: dict | None = None
    method: str = "nonparametric"
    prices: dict = field(default_factory=lambda: {"pi_f": 25.0, "psi_plus": 4.0, "psi_minus": 12.0})
    split_fraction: float | None = None
    val_fraction: float = 0.2
    training: dict = field(default_factory=dict)
    seed: int = 0
    output_dir: str = "run"
    checkpoint: str | None = None
    threads: int = 1
    n_sim: int = 1000
    level: float = 0.95
    display_bins: int = 17

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"method must be one of {METHODS}, got {self.method!r}")
        if (self.manifest is None) == (self.synthetic is None):
            raise ConfigError("give exactly one data source: manifest or synthetic")
        if self.threads < 1:
            raise ConfigError("threads must be >= 1")
        if not 0 < self.val_fraction < 1:
            raise ConfigError("val_fraction must lie in (0, 1)")
        try:
            self.price_triple
            self.train_config
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    @property
    def price_triple(self) -> PriceTriple:
        return PriceTriple(**{k: float(v) for k, v in self.prices.items()})

    @property
    def train_config(self) -> TrainConfig:
        return TrainConfig(**{**self.training, "seed": self.seed})

    @property
    def checkpoint_path(self) -> Path:
        if self.checkpoint is not None:
            return Path(self.checkpoint)
        return Path(self.output_dir) / f"reconciler_{self.method}.json"


def load_config(path, overrides: dict) -> RunConfig:
    raw = {}
    if path is not None:
        try:
            raw = yaml.safe_load(Path(path).read_text()) or {}
        except OSError as exc:
            raise ConfigError(f"cannot read config: {exc}") from exc
        base = Path(path).parent
        for key in ("manifest", "output_dir", "checkpoint"):
            if raw.get(key) is not None and not Path(raw[key]).is_absolute():
                raw[key] = str(base / raw[key])
    raw.update({k: v for k, v in overrides.items() if v is not None})
    if overrides.get("manifest") is not None:
        raw.pop("synthetic", None)
    known = {f.name for f in fields(RunConfig)}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    try:
        return RunConfig(**raw)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def _load_data(cfg: RunConfig) -> tuple[ScenarioPanel, float, dict]:
    if cfg.manifest is not None:
        manifest = DatasetManifest.from_file(cfg.manifest)
        panel = load_panel(manifest)
        split = manifest.split_fraction
        meta = {"manifest": str(cfg.manifest), "n_scenarios": manifest.n_scenarios}
    else:
        spec = SyntheticSpec(**cfg.synthetic)
        panel, _ = generate_synthetic(spec)
        split = 0.8
        meta = {"synthetic": spec.to_dict(), "n_scenarios": spec.n_scenarios}
    if cfg.split_fraction is not None:
        split = cfg.split_fraction
    return panel, split, meta


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=1, sort_keys=False) + "\n")


def _fmt(v) -> str:
    return repr(float(v))


def _versions() -> dict:
    return {"coopwind": __version__, "numpy": np.__version__, "python": platform.python_version()}


# -- generate ----------------------------------------------------------------

def cmd_generate(args) -> int:
    try:
        raw = yaml.safe_load(Path(args.spec).read_text()) or {}
    except OSError as exc:
        raise ConfigError(f"cannot read spec: {exc}") from exc
    if args.seed is not None:
        raw["seed"] = args.seed
    try:
        spec = SyntheticSpec(**raw)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    panel, _ = generate_synthetic(spec)
    save_panel(panel, out / "forecasts.csv", out / "observations.csv")
    h = panel.hierarchy
    DatasetManifest(
        list(zip(h.names, h.capacities)),
        out / "forecasts.csv",
        out / "observations.csv",
        spec.n_scenarios,
        seed=spec.seed,
    ).write(out / "manifest.yaml")
    _write_json(
        out / "truth.json",
        {
            "generator": "latent-gaussian-logistic",
            "spec": spec.to_dict(),
            "corruption": {"bias": spec.bias, "shrink": spec.shrink, "warp": spec.warp},
            "versions": _versions(),
        },
    )
    print(f"wrote {panel.n_issuance} days x {panel.n_leads} leads x {panel.n_scenarios} scenarios to {out}")
    return 0


# -- train ---------------------------------------------------------------------

def cmd_train(args, cfg: RunConfig) -> int:
    if cfg.method not in TRAINABLE:
        raise ConfigError(f"method {cfg.method} has nothing to train")
    panel, split, meta = _load_data(cfg)
    train_panel, _ = chronological_split(panel, split)
    fit, val = chronological_split(train_panel, 1.0 - cfg.val_fraction)
    rec, report = train(cfg.method, fit, val, cfg.train_config)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    ckpt = cfg.checkpoint_path
    ckpt.parent.mkdir(parents=True, exist_ok=True)
    save_reconciler(rec, ckpt)
    _write_json(out / f"training_report_{cfg.method}.json", report.to_dict())
    _write_json(out / f"training_timing_{cfg.method}.json", {"wall_time_s": report.wall_time})
    print(
        f"{cfg.method}: selected epoch {report.selected_epoch} "
        f"(val AES {report.selected_val_aes:.4f} MW, init {report.val_aes[0]:.4f} MW); "
        f"checkpoint {ckpt}"
    )
    return 0


# -- run -----------------------------------------------------------------------

def _reconciler_for(cfg: RunConfig, panel: ScenarioPanel) -> Reconciler | None:
    if cfg.method == "independent":
        return None
    if cfg.method == "bottom_up":
        return Reconciler.bottom_up(panel.hierarchy)
    path = cfg.checkpoint_path
    if not path.exists():
        raise ConfigError(f"method {cfg.method} needs a checkpoint; {path} not found (run `train` first)")
    rec = load_reconciler(path, panel.hierarchy)
    if rec.variant != cfg.method:
        raise ConfigError(f"checkpoint {path} holds a {rec.variant} reconciler")
    return rec


def write_run(result: RunResult, cfg: RunConfig, out: Path, meta: dict) -> None:
    panel = result.panel
    names = panel.hierarchy.names
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "offers.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("issuance", "lead", "series", "offer_mw", "expected_cost", "realized_cost", "method"))
        for r in result.hours:
            time, lead = panel.issuance_times[r.t], panel.lead_times[r.k]
            if result.method == "independent":
                for i, name in enumerate(names):
                    w.writerow((time, lead, name, _fmt(r.offers[i]), _fmt(r.expected_costs[i]), _fmt(r.c[i]), result.method))
            else:
                w.writerow((time, lead, "aggregate", _fmt(r.offers[0]), _fmt(r.expected_costs[0]), _fmt(r.realized_cost), result.method))
    if result.method != "independent":
        with open(out / "duals.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(("issuance", "lead", "scenario", "dual"))
            for r in result.hours:
                for xi, nu in enumerate(r.duals):
                    w.writerow((panel.issuance_times[r.t], panel.lead_times[r.k], xi, _fmt(nu)))
        reconciled = np.stack([r.scenarios for r in result.hours]).reshape(panel.data.shape)
        save_panel(panel.with_data(reconciled), out / "reconciled.csv", out / "observations.csv")
    with open(out / "allocations.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("issuance", "lead", "producer", "a_i", "c_i", "profit_coop", "profit_indep"))
        for r in result.hours:
            for i, name in enumerate(names):
                w.writerow((
                    panel.issuance_times[r.t], panel.lead_times[r.k], name,
                    _fmt(r.a[i]), _fmt(r.c[i]), _fmt(r.profit_coop[i]), _fmt(r.profit_indep[i]),
                ))
    with open(out / "ranks.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("case", "rank"))
        for case, rank in enumerate(result.ranks):
            w.writerow((case, int(rank)))
    hist = result.histogram(cfg.n_sim, cfg.level)
    _write_histogram(out / "histogram.csv", hist)
    if result.method != "independent":
        _write_json(
            out / "core_audit.json",
            {
                "all_core": bool(all(r.core_ok for r in result.hours)),
                "hours": [
                    {
                        "issuance": panel.issuance_times[r.t],
                        "lead": panel.lead_times[r.k],
                        "worst_violation": r.core_violation,
                        "is_core": r.core_ok,
                    }
                    for r in result.hours
                ],
            },
        )
    metrics = result.metrics(cfg.n_sim, cfg.level)
    _write_json(out / "metrics.json", metrics)
    _write_json(
        out / "run_manifest.json",
        {
            "command": "run",
            "config": asdict(cfg),
            "seed": cfg.seed,
            "data": meta,
            "hierarchy": {"names": list(names), "capacities": list(panel.hierarchy.capacities)},
            "test_issuance": [panel.issuance_times[0], panel.issuance_times[-1]],
            "versions": _versions(),
        },
    )


def _write_histogram(path: Path, hist) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("bin", "count", "lower", "upper"))
        for b in range(hist.n_bins):
            w.writerow((b + 1, int(hist.counts[b]), int(hist.lower[b]), int(hist.upper[b])))


def cmd_run(args, cfg: RunConfig) -> int:
    panel, split, meta = _load_data(cfg)
    _, test = chronological_split(panel, split)
    rec = _reconciler_for(cfg, panel)
    result = run_method(cfg.method, test, rec, cfg.price_triple, cfg.seed, cfg.threads)
    out = Path(cfg.output_dir)
    write_run(result, cfg, out, meta)
    print(
        f"{cfg.method}: AES {result.aes:.4f} MW over {len(result.hours)} hours; "
        f"core pass rate {result.core_pass_rate:.3f}; outputs in {out}"
    )
    return 0


# -- report --------------------------------------------------------------------

def _read_histogram(path: Path) -> RankHistogram:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    counts = np.array([int(r["count"]) for r in rows])
    lower = np.array([int(r["lower"]) for r in rows])
    upper = np.array([int(r["upper"]) for r in rows])
    return RankHistogram(counts, lower, upper)


def cmd_report(args) -> int:
    runs = []
    for d in args.runs:
        d = Path(d)
        if not (d / "metrics.json").is_file():
            raise ConfigError(f"{d} is not a run directory (metrics.json missing)")
        runs.append((d, json.loads((d / "metrics.json").read_text())))
    out = Path(args.out) if args.out else runs[0][0].parent / "report"
    out.mkdir(parents=True, exist_ok=True)
    methods = [m["method"] for _, m in runs]
    producers = list(runs[0][1]["average_profit"])
    has_indep = "independent" in methods
    columns = methods if has_indep else ["independent"] + methods

    def profit(metrics, producer, column):
        if column == "independent" and metrics["method"] != "independent":
            return metrics["average_profit_independent"][producer]
        return metrics["average_profit"][producer]

    table = []
    for producer in producers:
        row = [producer]
        for col in columns:
            src = next((m for _, m in runs if m["method"] == col), runs[0][1])
            row.append(profit(src, producer, col))
        table.append(row)
    with open(out / "profits.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["producer"] + columns)
        for row in table:
            w.writerow([row[0]] + [f"{v:.2f}" for v in row[1:]])
    width = max(12, max(len(p) for p in producers) + 2)
    lines = ["Average profit per producer (currency/hour)", ""]
    lines.append("".join([f"{'producer':<{width}}"] + [f"{c:>15}" for c in columns]))
    for row in table:
        lines.append("".join([f"{row[0]:<{width}}"] + [f"{v:>15.2f}" for v in row[1:]]))
    lines += ["", "Forecast quality", ""]
    lines.append(f"{'method':<{width}}{'AES (MW)':>15}{'deviation':>15}")
    with open(out / "scores.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("method", "aes", "deviation"))
        for d, m in runs:
            w.writerow((m["method"], f"{m['aes']:.4f}", f"{m['deviation']:.4f}"))
            lines.append(f"{m['method']:<{width}}{m['aes']:>15.4f}{m['deviation']:>15.4f}")
            hist = _read_histogram(d / "histogram.csv")
            shown = rebin(hist, args.bins)
            with open(out / f"histogram_{m['method']}.csv", "w", newline="") as hf:
                hw = csv.writer(hf, lineterminator="\n")
                hw.writerow(("bin", "count", "frequency", "lower", "upper"))
                for b in range(shown.n_bins):
                    hw.writerow((
                        b + 1, int(shown.counts[b]), f"{shown.frequencies[b]:.6f}",
                        int(shown.lower[b]), int(shown.upper[b]),
                    ))
    text = "\n".join(lines) + "\n"
    (out / "report.txt").write_text(text)
    print(text, end="")
    return 0


# -- audit ---------------------------------------------------------------------

def cmd_audit(args) -> int:
    run = Path(args.run)
    manifest_path = run / "run_manifest.json"
    if not manifest_path.is_file():
        raise ConfigError(f"{run} is not a run directory")
    meta = json.loads(manifest_path.read_text())
    cfg = meta["config"]
    if cfg["method"] == "independent":
        raise ConfigError("independent runs have no coalition to audit")
    p = PriceTriple(**{k: float(v) for k, v in cfg["prices"].items()})
    h = meta["hierarchy"]
    names = h["names"]
    manifest = DatasetManifest(
        list(zip(names, h["capacities"])),
        run / "reconciled.csv",
        run / "observations.csv",
        meta["data"]["n_scenarios"],
    )
    panel = load_panel(manifest)
    alloc = {}
    costs = {}
    with open(run / "allocations.csv", newline="") as fh:
        for row in csv.DictReader(fh):
            key = (row["issuance"], int(row["lead"]))
            alloc.setdefault(key, {})[row["producer"]] = float(row["a_i"])
            costs.setdefault(key, {})[row["producer"]] = float(row["c_i"])
    realized = {}
    with open(run / "offers.csv", newline="") as fh:
        for row in csv.DictReader(fh):
            realized[(row["issuance"], int(row["lead"]))] = float(row["realized_cost"])
    hours, worst_core, worst_super, unbalanced = [], 0.0, 0.0, 0
    for t, time in enumerate(panel.issuance_times):
        for k, lead in enumerate(panel.lead_times):
            bottom = panel.data[t, k, :, 1:]
            a = np.array([alloc[(time, lead)][n] for n in names])
            core = audit_core(a, bottom, p)
            sup = audit_superadditivity(bottom, p, None if len(names) <= 8 else 2000, seed=cfg["seed"])
            balanced = math.fsum(costs[(time, lead)][n] for n in names) == realized[(time, lead)]
            unbalanced += not balanced
            worst_core = max(worst_core, core.worst_violation)
            worst_super = max(worst_super, sup.worst_violation)
            hours.append({
                "issuance": time, "lead": lead, "is_core": core.is_core,
                "worst_violation": core.worst_violation,
                "superadditive": sup.holds, "budget_balanced": balanced,
            })
    ok = all(hr["is_core"] and hr["superadditive"] and hr["budget_balanced"] for hr in hours)
    _write_json(
        run / "audit.json",
        {
            "passed": ok,
            "worst_core_violation": worst_core,
            "worst_superadditivity_violation": worst_super,
            "unbalanced_hours": unbalanced,
            "hours": hours,
        },
    )
    print(
        f"audit {'passed' if ok else 'FAILED'}: {len(hours)} hours, worst core violation "
        f"{worst_core:.3g}, worst superadditivity violation {worst_super:.3g}, "
        f"{unbalanced} unbalanced hours"
    )
    if not ok:
        raise AuditFailure("coalition audit failed")
    return 0


# -- entry point ---------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="coopwind", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("generate", help="write a seeded synthetic dataset")
    g.add_argument("spec", help="YAML file with synthetic dataset parameters")
    g.add_argument("--out", required=True, help="output directory")
    g.add_argument("--seed", type=int)

    for name, help_ in (("train", "fit a projection or nonparametric reconciler"),
                        ("run", "offer, settle and evaluate over the test split")):
        c = sub.add_parser(name, help=help_)
        c.add_argument("config", nargs="?", help="YAML run configuration")
        c.add_argument("--method", choices=METHODS)
        c.add_argument("--manifest")
        c.add_argument("--seed", type=int)
        c.add_argument("--output-dir", dest="output_dir")
        c.add_argument("--checkpoint")
        c.add_argument("--threads", type=int)

    r = sub.add_parser("report", help="compare run directories")
    r.add_argument("runs", nargs="+")
    r.add_argument("--out")
    r.add_argument("--bins", type=int, default=17, help="display bins for histograms")

    a = sub.add_parser("audit", help="re-audit core membership of a saved run")
    a.add_argument("run")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "generate":
            return cmd_generate(args)
        if args.command in ("report",):
            return cmd_report(args)
        if args.command == "audit":
            return cmd_audit(args)
        overrides = {
            "method": args.method, "manifest": args.manifest, "seed": args.seed,
            "output_dir": args.output_dir, "checkpoint": args.checkpoint, "threads": args.threads,
        }
        cfg = load_config(args.config, overrides)
        return cmd_train(args, cfg) if args.command == "train" else cmd_run(args, cfg)
    except (ArithmeticError, CoherenceError) as exc:
        print(f"coopwind: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, OSError) as exc:
        print(f"coopwind: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
