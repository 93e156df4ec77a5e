"""Command-line entry point: ``qgnntrack <command> [--config FILE] [--key=value ...]``.

Settings come from one flat ``key = value`` file plus ``--key=value`` overrides
(later wins). Every key has a default and unknown keys are rejected.

Exit codes: 0 success, 1 configuration error, 2 I/O error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from . import autodiff as ad
from .events import (
    IngestionError, SynthConfig, event_paths, list_event_ids, load_trackml_event, read_event, subsample_pileup,
    synth_event, write_event,
)
from .graphs import CutConfig, aggregate_stats, graph_from_event, graph_stats, list_graph_ids, load_graph, save_graph
from .model import FEATURE_SCALE, VARIANTS, GNNParams, get_variant
from .train import (
    METRIC_NAMES, TrainConfig, TrainingDiverged, evaluate, pileup_graphs, read_metrics_csv, summarize, train_model,
    write_metrics_csv, write_summary,
)

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERICAL = 0, 1, 2, 3
DATA_ENV = "QGNNTRACK_DATA"
TABLE_ORDER = ("upgraded_qgnn", "upgraded_cgnn", "original_qgnn", "original_cgnn", "parallel_qgnn")
TABLE_NAMES = {"upgraded_qgnn": "Upgraded QGNN", "upgraded_cgnn": "Upgraded CGNN", "original_qgnn": "Original QGNN",
               "original_cgnn": "Original CGNN", "parallel_qgnn": "Parallel QGNN"}


class ConfigError(ValueError):
    pass


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(v) for v in text.split(",") if v.strip())


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in text.split(",") if v.strip())


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


@dataclass(frozen=True)
class Setting:
    parse: Callable[[str], object]
    default: object
    doc: str


_CUTS, _SYNTH, _TRAIN = CutConfig(), SynthConfig(), TrainConfig()

SETTINGS: dict[str, Setting] = {
    # paths
    "data_dir": Setting(str, "", f"root for events/, graphs/ and runs/; defaults to ${DATA_ENV} or ./data"),
    "events_dir": Setting(str, "", "event CSV directory (default <data_dir>/events)"),
    "graphs_dir": Setting(str, "", "graph CSV directory (default <data_dir>/graphs)"),
    "runs_dir": Setting(str, "", "training output directory (default <data_dir>/runs)"),
    "trackml_dir": Setting(str, "", "ingest: directory holding event*-hits/truth/particles.csv"),
    # synth
    "n_events": Setting(int, 60, "synth: number of events"),
    "mu": Setting(int, 40, "synth: vertices per event"),
    "first_event_id": Setting(int, 0, "synth: id of the first event"),
    "synth_seed": Setting(int, _SYNTH.seed, "synth: generator seed"),
    "magnetic_field": Setting(float, _SYNTH.magnetic_field, "synth: solenoid field [T]"),
    "noise_hit_fraction": Setting(float, _SYNTH.noise_hit_fraction, "synth: noise hits per signal hit"),
    # graphs
    "pt_min": Setting(float, _CUTS.pt_min, "build-graphs: minimum particle pT [GeV]"),
    "phi_slope_max": Setting(float, _CUTS.phi_slope_max, "build-graphs: |dphi/dr| cut [rad/mm]"),
    "z0_max": Setting(float, _CUTS.z0_max, "build-graphs: |z0| cut [mm]"),
    "pileup": Setting(int, -1, "build-graphs: subsample each event to this many vertices (-1 keeps all)"),
    "pileup_seed": Setting(int, 0, "build-graphs and sweep: vertex subsampling seed"),
    # training
    "variant": Setting(str, _TRAIN.variant, f"model variant, one of {', '.join(VARIANTS)}"),
    "learning_rate": Setting(float, _TRAIN.learning_rate, "Adam step size"),
    "epochs": Setting(int, _TRAIN.epochs, "training epochs"),
    "k_folds": Setting(int, _TRAIN.k_folds, "cross-validation folds"),
    "folds": Setting(str, "all", "comma list of folds to run, or 'all'"),
    "train_set_size": Setting(int, _TRAIN.train_set_size, "graphs used for cross-validation"),
    "threshold": Setting(float, _TRAIN.threshold, "edge score threshold"),
    "seed": Setting(int, _TRAIN.seed, "training seed (fold split, init, event order)"),
    "n_iter": Setting(int, _TRAIN.n_iter, "message-passing iterations"),
    "feature_scale": Setting(_floats, FEATURE_SCALE, "divisors for r, phi, z before the input network"),
    "run_name": Setting(str, "", "run subdirectory (default: the variant name)"),
    # evaluate
    "checkpoint": Setting(str, "", "evaluate: checkpoint JSON"),
    "eval_ids": Setting(_ints, (), "evaluate: comma list of graph ids (default: all graphs)"),
    "eval_fold": Setting(int, -1, "evaluate: take ids from this fold of the run summary"),
    "eval_split": Setting(str, "val", "evaluate: 'train' or 'val' ids of eval_fold"),
    # report and sweep
    "runs": Setting(str, "", "report: comma list of run names (default: every run)"),
    "report_dir": Setting(str, "", "report: output directory (default <runs_dir>/report)"),
    "plots": Setting(_bool, True, "report: also render PNG figures"),
    "mus": Setting(_ints, (10, 20, 30, 40), "sweep: pileup values"),
    "sweep_name": Setting(str, "sweep", "sweep: run subdirectory"),
}


def parse_config_text(text: str, source: str = "config") -> dict[str, str]:
    raw = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{n}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        raw[key.replace("-", "_")] = value
    return raw


def parse_overrides(tokens: list[str]) -> dict[str, str]:
    raw = {}
    for tok in tokens:
        if not tok.startswith("--") or "=" not in tok:
            raise ConfigError(f"unrecognized argument {tok!r}; settings are given as --key=value")
        key, value = tok[2:].split("=", 1)
        raw[key.replace("-", "_")] = value
    return raw


def resolve(raw: dict[str, str]) -> dict[str, object]:
    unknown = sorted(set(raw) - set(SETTINGS))
    if unknown:
        raise ConfigError(f"unknown setting(s): {', '.join(unknown)}")
    cfg = {k: s.default for k, s in SETTINGS.items()}
    for k, v in raw.items():
        try:
            cfg[k] = SETTINGS[k].parse(v)
        except ValueError as exc:
            raise ConfigError(f"bad value for {k}: {v!r} ({exc})") from None
    data = Path(cfg["data_dir"] or os.environ.get(DATA_ENV) or "data")
    cfg["data_dir"] = str(data)
    for key, sub in (("events_dir", "events"), ("graphs_dir", "graphs"), ("runs_dir", "runs")):
        cfg[key] = cfg[key] or str(data / sub)
    cfg["report_dir"] = cfg["report_dir"] or str(Path(cfg["runs_dir"]) / "report")
    cfg["run_name"] = cfg["run_name"] or cfg["variant"]
    return cfg


def cut_config(cfg) -> CutConfig:
    return CutConfig(pt_min=cfg["pt_min"], phi_slope_max=cfg["phi_slope_max"], z0_max=cfg["z0_max"])


def train_config(cfg) -> TrainConfig:
    folds = None if str(cfg["folds"]).strip().lower() == "all" else _ints(cfg["folds"])
    return TrainConfig(variant=cfg["variant"], learning_rate=cfg["learning_rate"], epochs=cfg["epochs"],
                       k_folds=cfg["k_folds"], train_set_size=cfg["train_set_size"], threshold=cfg["threshold"],
                       seed=cfg["seed"], n_iter=cfg["n_iter"], folds=folds, feature_scale=cfg["feature_scale"])


def _write_config(path: Path, cfg) -> None:
    lines = []
    for k in SETTINGS:
        v = cfg[k]
        lines.append(f"{k} = {','.join(map(str, v)) if isinstance(v, tuple) else v}")
    path.write_text("\n".join(lines) + "\n")


def _load_graphs(cfg, ids=None):
    directory = Path(cfg["graphs_dir"])
    available = list_graph_ids(directory)
    if not available:
        raise FileNotFoundError(f"no graphs found in {directory}")
    if ids:
        missing = sorted(set(ids) - set(available))
        if missing:
            raise FileNotFoundError(f"graphs {missing} not found in {directory}")
        available = list(ids)
    return [load_graph(directory, i) for i in available]


def _load_events(cfg):
    directory = Path(cfg["events_dir"])
    ids = list_event_ids(directory)
    if not ids:
        raise FileNotFoundError(f"no events found in {directory}")
    return [read_event(directory, i) for i in ids]


# --- commands --------------------------------------------------------------

def cmd_synth(cfg, threads):
    synth = SynthConfig(seed=cfg["synth_seed"], magnetic_field=cfg["magnetic_field"],
                        noise_hit_fraction=cfg["noise_hit_fraction"])
    out = Path(cfg["events_dir"])
    n_hits = 0
    for i in range(cfg["n_events"]):
        ev = synth_event(synth, cfg["mu"], event_id=cfg["first_event_id"] + i)
        write_event(ev, out)
        n_hits += len(ev.hits)
    print(f"wrote {cfg['n_events']} events ({n_hits} hits) to {out}")


def cmd_ingest(cfg, threads):
    if not cfg["trackml_dir"]:
        raise ConfigError("ingest needs --trackml_dir")
    src, out = Path(cfg["trackml_dir"]), Path(cfg["events_dir"])
    ids = list_event_ids(src)
    if not ids:
        raise FileNotFoundError(f"no event*-hits.csv files in {src}")
    n_hits = 0
    for i in ids:
        ev = load_trackml_event(*event_paths(src, i), event_id=i)
        write_event(ev, out)
        n_hits += len(ev.hits)
    print(f"ingested {len(ids)} events ({n_hits} hits) into {out}")


def cmd_build_graphs(cfg, threads):
    cuts = cut_config(cfg)
    events = _load_events(cfg)
    out = Path(cfg["graphs_dir"])
    out.mkdir(parents=True, exist_ok=True)
    per_event = []
    for ev in events:
        if cfg["pileup"] >= 0:
            ev = subsample_pileup(ev, cfg["pileup"], np.random.default_rng([cfg["pileup_seed"], ev.event_id]))
        g = graph_from_event(ev, cuts)
        save_graph(g, out)
        per_event.append((ev.event_id, graph_stats(g)))
    stats = [s for _, s in per_event]
    report = {"aggregate": aggregate_stats(stats),
              "graphs": [{"event_id": i, **asdict(s)} for i, s in per_event]}
    (out / "stats.json").write_text(json.dumps(report, indent=2))
    agg = report["aggregate"]
    print(f"built {agg['n_graphs']} graphs: N_V {agg['n_nodes_mean']:.1f} +- {agg['n_nodes_std']:.1f}, "
          f"N_E {agg['n_edges_mean']:.1f} +- {agg['n_edges_std']:.1f}, "
          f"truth fraction {agg['truth_fraction_mean']:.3f} +- {agg['truth_fraction_std']:.3f}")
    if agg["n_empty"]:
        print(f"warning: {agg['n_empty']} graphs have no edges", file=sys.stderr)


def _progress(fold, rec):
    if rec.split == "val":
        print(f"fold {fold} epoch {rec.epoch:3d}  val loss {rec.loss:.4f}  acc {rec.accuracy:.4f}", flush=True)


def _save_run(run_dir: Path, results, config: TrainConfig, cfg) -> dict:
    run_dir.mkdir(parents=True, exist_ok=True)
    write_metrics_csv(run_dir / "metrics.csv", results)
    meta = {"variant": config.variant, "n_iter": config.n_iter, "feature_scale": list(config.feature_scale)}
    for r in results:
        ad.save_arrays(run_dir / f"fold{r.fold}.ckpt.json", r.params.arrays(), {**meta, "fold": r.fold})
    summary = summarize(results, config)
    summary["fold_ids"] = {str(r.fold): {"train": r.train_ids, "val": r.val_ids} for r in results}
    write_summary(run_dir / "summary.json", summary)
    _write_config(run_dir / "config.txt", cfg)
    return summary


def cmd_train(cfg, threads):
    config = train_config(cfg)
    graphs = _load_graphs(cfg)
    results = train_model(graphs, config, threads, on_record=_progress)
    run_dir = Path(cfg["runs_dir"]) / cfg["run_name"]
    s = _save_run(run_dir, results, config, cfg)
    print(f"{config.variant}: accuracy {s['accuracy']['mean']:.4f} +- {s['accuracy']['std']:.4f} "
          f"over {s['n_folds']} folds -> {run_dir}")


def load_checkpoint(path, variant: str) -> GNNParams:
    """Parameters from a checkpoint; the stored variant must equal ``variant``."""
    arrays, meta = ad.load_arrays(path)
    stored = meta.get("variant")
    if stored != variant:
        raise ConfigError(f"checkpoint {path} holds variant {stored!r} but variant {variant!r} was requested")
    model = get_variant(variant).with_iterations(int(meta.get("n_iter", 3)))
    try:
        return GNNParams.from_arrays(model, arrays, tuple(meta.get("feature_scale", FEATURE_SCALE)))
    except ValueError as exc:
        raise ConfigError(f"checkpoint {path} does not fit variant {variant!r}: {exc}") from None


def cmd_evaluate(cfg, threads):
    if not cfg["checkpoint"]:
        raise ConfigError("evaluate needs --checkpoint")
    ckpt = Path(cfg["checkpoint"])
    params = load_checkpoint(ckpt, cfg["variant"])
    ids = list(cfg["eval_ids"])
    label = "eval"
    if cfg["eval_fold"] >= 0:
        if cfg["eval_split"] not in ("train", "val"):
            raise ConfigError("eval_split must be 'train' or 'val'")
        summary = json.loads((ckpt.parent / "summary.json").read_text())
        try:
            ids = summary["fold_ids"][str(cfg["eval_fold"])][cfg["eval_split"]]
        except KeyError:
            raise ConfigError(f"fold {cfg['eval_fold']} not present in {ckpt.parent / 'summary.json'}") from None
        label = cfg["eval_split"]
    rec = evaluate(_load_graphs(cfg, ids), params, cfg["threshold"], split=label)
    out = {"checkpoint": str(ckpt), "variant": cfg["variant"], "graph_ids": ids, "loss": rec.loss,
           **rec.metrics(), "tp": rec.tp, "tn": rec.tn, "fp": rec.fp, "fn": rec.fn, "undefined": list(rec.undefined)}
    path = ckpt.with_name(ckpt.name.replace(".ckpt.json", "") + f".eval-{label}.json")
    path.write_text(json.dumps(out, indent=2))
    print(" ".join(f"{k} {out[k]:.4f}" for k in ("loss",) + METRIC_NAMES) + f"  -> {path}")


def cmd_sweep(cfg, threads):
    config = train_config(cfg)
    events = _load_events(cfg)
    cuts = cut_config(cfg)
    sweep_dir = Path(cfg["runs_dir"]) / cfg["sweep_name"]
    sweep_dir.mkdir(parents=True, exist_ok=True)
    table = {}
    for mu in sorted(cfg["mus"]):
        graphs = pileup_graphs(events, mu, cuts, cfg["pileup_seed"])
        results = train_model(graphs, config, threads)
        write_metrics_csv(sweep_dir / f"curve_mu{mu}.csv", results)
        s = summarize(results, config)
        table[str(mu)] = s
        print(f"mu {mu:4d}: accuracy {s['accuracy']['mean']:.4f} +- {s['accuracy']['std']:.4f}", flush=True)
    write_summary(sweep_dir / "sweep.json", {"variant": config.variant, "mus": sorted(cfg["mus"]), "results": table})
    _write_config(sweep_dir / "config.txt", cfg)


def _mean_curve(rows, split="val", metric="accuracy"):
    by_epoch: dict[int, list[float]] = {}
    for r in rows:
        if r["split"] == split:
            by_epoch.setdefault(r["epoch"], []).append(r[metric])
    epochs = sorted(by_epoch)
    return epochs, [float(np.mean(by_epoch[e])) for e in epochs], [float(np.std(by_epoch[e])) for e in epochs]


def table_rows(summaries: dict[str, dict]) -> list[dict]:
    """Rows shaped like the comparison table: one model per row, mean and std per metric."""
    order = [v for v in TABLE_ORDER if v in summaries] + sorted(set(summaries) - set(TABLE_ORDER))
    rows = []
    for name in order:
        s = summaries[name]
        variant = s.get("config", {}).get("variant", name)
        row = {"run": name, "model": TABLE_NAMES.get(name, TABLE_NAMES.get(variant, name)), "n_folds": s["n_folds"]}
        for m in METRIC_NAMES:
            row[m], row[f"{m}_std"] = s[m]["mean"], s[m]["std"]
        rows.append(row)
    return rows


def _write_csv(path, rows, columns):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=columns)
        w.writeheader()
        w.writerows({k: r[k] for k in columns} for r in rows)


def cmd_report(cfg, threads):
    runs_dir, out = Path(cfg["runs_dir"]), Path(cfg["report_dir"])
    names = [n for n in cfg["runs"].split(",") if n] if cfg["runs"] else \
        sorted(p.parent.name for p in runs_dir.glob("*/summary.json"))
    if not names:
        raise FileNotFoundError(f"no runs with summary.json under {runs_dir}")
    summaries, curves = {}, {}
    for name in names:
        path = runs_dir / name / "summary.json"
        if not path.exists():
            raise FileNotFoundError(f"run {name!r} has no {path}")
        summaries[name] = json.loads(path.read_text())
        curves[name] = _mean_curve(read_metrics_csv(runs_dir / name / "metrics.csv"))
    out.mkdir(parents=True, exist_ok=True)
    rows = table_rows(summaries)
    cols = ["model", "run", "n_folds"] + [c for m in METRIC_NAMES for c in (m, f"{m}_std")]
    _write_csv(out / "table.csv", rows, cols)
    curve_rows = [{"run": n, "epoch": e, "accuracy": m, "accuracy_std": s}
                  for n, (es, ms, ss) in curves.items() for e, m, s in zip(es, ms, ss)]
    _write_csv(out / "curves.csv", curve_rows, ["run", "epoch", "accuracy", "accuracy_std"])

    header = f"{'Model':<16}" + "".join(f"{m.capitalize():>20}" for m in METRIC_NAMES)
    print(header)
    for r in rows:
        print(f"{r['model']:<16}" + "".join(f"{r[m]:>12.3f} +- {r[m + '_std']:.3f}" for m in METRIC_NAMES))

    pileup = None
    sweep_json = runs_dir / cfg["sweep_name"] / "sweep.json"
    if sweep_json.exists():
        sweep = json.loads(sweep_json.read_text())
        pileup = [{"mu": int(mu), "accuracy": s["accuracy"]["mean"], "accuracy_std": s["accuracy"]["std"]}
                  for mu, s in sorted(sweep["results"].items(), key=lambda kv: int(kv[0]))]
        _write_csv(out / "pileup.csv", pileup, ["mu", "accuracy", "accuracy_std"])

    if cfg["plots"]:
        from . import plotting
        plotting.plot_table(rows, out / "table.png")
        plotting.plot_curves({r["model"]: curves[r["run"]] for r in rows}, out / "curves.png")
        if pileup:
            plotting.plot_pileup([p["mu"] for p in pileup], [p["accuracy"] for p in pileup],
                                 [p["accuracy_std"] for p in pileup], out / "pileup.png")
            sweep_curves = {}
            for p in pileup:
                sweep_curves[f"mu={p['mu']}"] = _mean_curve(read_metrics_csv(sweep_json.parent / f"curve_mu{p['mu']}.csv"))
            plotting.plot_curves(sweep_curves, out / "pileup_curves.png")
    print(f"report written to {out}")


COMMANDS = {
    "synth": (cmd_synth, "generate synthetic events"),
    "ingest": (cmd_ingest, "convert TrackML CSV events"),
    "build-graphs": (cmd_build_graphs, "apply cuts and build doublet graphs"),
    "train": (cmd_train, "k-fold training of one variant"),
    "evaluate": (cmd_evaluate, "score a checkpoint on a graph set"),
    "report": (cmd_report, "comparison table, curves and figures"),
    "sweep": (cmd_sweep, "train across pileup values"),
}


def build_parser() -> argparse.ArgumentParser:
    epilog = "settings (--key=value or 'key = value' in the config file):\n" + "\n".join(
        f"  {k:<20} {s.doc}" for k, s in SETTINGS.items())
    parser = argparse.ArgumentParser(prog="qgnntrack", description=__doc__.splitlines()[0], epilog=epilog,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("command", choices=list(COMMANDS), help="; ".join(f"{k}: {v[1]}" for k, v in COMMANDS.items()))
    parser.add_argument("--config", help="flat key = value settings file")
    parser.add_argument("--threads", type=int, default=os.cpu_count() or 1, help="worker processes for k-fold training")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args, rest = parser.parse_known_args(argv)
    try:
        raw = {}
        if args.config:
            try:
                text = Path(args.config).read_text()
            except OSError as exc:
                print(f"error: cannot read config {args.config}: {exc}", file=sys.stderr)
                return EXIT_IO
            raw.update(parse_config_text(text, args.config))
        raw.update(parse_overrides(rest))
        cfg = resolve(raw)
        if args.threads < 1:
            raise ConfigError("--threads must be at least 1")
        COMMANDS[args.command][0](cfg, args.threads)
    except (ConfigError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (IngestionError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (TrainingDiverged, ad.NonFiniteError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
