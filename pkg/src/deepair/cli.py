"""``deepair`` command line: synth, ingest, preprocess, train, evaluate, forecast, report.

Exit status is 0 on success, 1 on a pipeline error (one ``error[module] Type:
message`` line on stderr) and 2 on bad usage.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from datetime import datetime, timezone
from pathlib import Path

from . import __version__
from .config import RunConfig
from .errors import ConfigError, DeepAirError
from .runtime import limit_threads

log = logging.getLogger("deepair")

MANIFEST_VERSION = 1


def _sha256(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


class Run:
    """A run directory holding the effective config, a manifest and a log."""

    def __init__(self, command, cfg, out=None):
        if out is None:
            stamp = datetime.now(timezone.utc).strftime("%Y%m%dT%H%M%S")
            out = Path("runs") / f"{stamp}-seed{cfg.seed}"
        self.dir = Path(out)
        self.dir.mkdir(parents=True, exist_ok=True)
        self.command = command
        self.cfg = cfg
        self.inputs = {}
        self.outputs = []
        cfg.write(self.dir / "config.json")
        self._handler = logging.FileHandler(self.dir / "run.log", mode="w")
        self._handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
        logging.getLogger("deepair").addHandler(self._handler)
        logging.getLogger("deepair").setLevel(logging.INFO)

    def add_input(self, name, path):
        path = Path(path)
        digest = _sha256(path) if path.is_file() else None
        self.inputs[name] = {"path": str(path), "sha256": digest}

    def add_output(self, *names):
        self.outputs.extend(str(n) for n in names)

    def close(self, status="ok"):
        manifest = {
            "format": "deepair-run", "version": MANIFEST_VERSION, "package": __version__,
            "command": self.command, "status": status, "inputs": self.inputs,
            "outputs": sorted(set(self.outputs)),
        }
        with open(self.dir / "manifest.json", "w") as fh:
            json.dump(manifest, fh, indent=2)
        logging.getLogger("deepair").removeHandler(self._handler)
        self._handler.close()


def _dataset_path(path, prefer="observed"):
    """Accept a dataset directory or a synth run directory containing one."""
    p = Path(path)
    if (p / "manifest.json").exists() and not (p / prefer).exists():
        return p
    if (p / prefer / "manifest.json").exists():
        return p / prefer
    raise ConfigError(f"no dataset found at {p}")


def cmd_synth(args, cfg, run):
    from .gridstore import save_dataset
    from .synthcity import plant_missingness, simulate

    truth, observed = simulate(cfg.synth())
    rate = cfg["synth.missing_rate"]
    if rate > 0:
        observed = plant_missingness(observed, rate, cfg["synth.burst_len"], seed=cfg.seed)
    save_dataset(truth, run.dir / "truth")
    save_dataset(observed, run.dir / "observed")
    run.add_output("truth", "observed")
    log.info("synthesized %d hours on %dx%d cells", truth.hours, truth.spec.rows, truth.spec.cols)


def cmd_ingest(args, cfg, run):
    from .gridstore import (align_hourly, canonical_schema, ingest_station_csv, rasterize,
                            save_dataset)

    schema = canonical_schema()
    result = ingest_station_csv(args.csv, schema)
    for rej in result.rejected:
        log.warning("rejected line %d: %s", rej.line, rej.reason)
    m = rasterize(align_hourly(result.observations), cfg.grid(), schema)
    save_dataset(m, run.dir / "dataset")
    with open(run.dir / "rejected.csv", "w") as fh:
        fh.write("line,reason\n")
        for rej in result.rejected:
            fh.write(f"{rej.line},\"{rej.reason}\"\n")
    run.add_input("csv", args.csv)
    run.add_output("dataset", "rejected.csv")


def _load_data(args, run):
    from .gridstore import load_dataset

    path = _dataset_path(args.data)
    run.add_input("data", path / "manifest.json")
    return load_dataset(path)


def cmd_preprocess(args, cfg, run):
    from .pipeline import preprocess

    source = _load_data(args, run)
    prep = preprocess(source, cfg.prep())
    with open(run.dir / "prep_state.json", "w") as fh:
        json.dump(prep.state.to_json(), fh, indent=2)
    prep.state.report.write(run.dir / "correlation.json", prep.state.policy)
    run.add_output("prep_state.json", "correlation.json")


def _checkpoint_meta(model, prep):
    from dataclasses import asdict

    from .model import model_meta

    meta = model_meta(model)
    meta["prep_config"] = asdict(prep.config)
    meta["prep_state"] = prep.state.to_json()
    return meta


def cmd_train(args, cfg, run):
    from .model import build_model
    from .pipeline import preprocess
    from .tensorcore import save_checkpoint
    from .trainer import fit

    source = _load_data(args, run)
    prep = preprocess(source, cfg.prep())
    model = build_model(cfg.model())
    meta = _checkpoint_meta(model, prep)
    if model.trainable:
        result = fit(cfg.train(), model, prep, run.dir, meta=meta)
        log.info("best epoch %d validation MAPE %.4f (%s)", result.best_epoch,
                 result.best_validation, result.stopped)
        run.add_output("train_log.csv", f"ckpt_{result.best_epoch}.bin")
    else:
        save_checkpoint(run.dir / "best.bin", model.params, dict(meta, epoch=0))
    run.add_output("best.bin")


def _restore(args, run):
    from .gridstore import load_dataset
    from .model import load_model
    from .pipeline import PrepConfig, PrepState, preprocess
    from .tensorcore import read_checkpoint

    state, meta = read_checkpoint(args.model)
    run.add_input("model", args.model)
    model = load_model(state, meta)
    pc = dict(meta["prep_config"])
    pc["fractions"] = tuple(pc["fractions"])
    path = _dataset_path(args.data)
    run.add_input("data", path / "manifest.json")
    prep = preprocess(load_dataset(path), PrepConfig(**pc), PrepState.from_json(meta["prep_state"]))
    return model, prep


def cmd_evaluate(args, cfg, run):
    from . import evaluator as ev
    from .trainer import predict_segment

    model, prep = _restore(args, run)
    records = predict_segment(model, prep, cfg["eval.segment"])
    table = ev.AqiLevelTable.load(cfg["eval.aqi_table"])
    report = ev.build_report(records, table, cfg["eval.mape_floor"])
    report["segment"] = cfg["eval.segment"]
    report["model"] = model.kind
    ev.write_predictions(records, run.dir / "predictions.csv")
    ev.write_per_pollutant(report["per_pollutant"], run.dir / "per_pollutant.csv")
    ev.write_scatter(records, run.dir / "scatter.csv")
    ev.write_report(report, run.dir / "report.json")
    run.add_output("predictions.csv", "per_pollutant.csv", "scatter.csv", "report.json")
    print(json.dumps({"mape": report["mape"], "records": report["records"]}))


def cmd_forecast(args, cfg, run):
    from .evaluator import citywide_forecast, write_forecast

    model, prep = _restore(args, run)
    t = cfg["forecast.hour"]
    if t is None:
        t = prep.hours
    forecast = citywide_forecast(model, prep, int(t))
    write_forecast(prep, forecast, int(t), run.dir)
    run.add_output("forecast", "forecast_cells.csv")


def cmd_report(args, cfg, run):
    from . import evaluator as ev

    records = ev.read_predictions(args.predictions)
    run.add_input("predictions", args.predictions)
    report = ev.build_report(records, ev.AqiLevelTable.load(cfg["eval.aqi_table"]),
                             cfg["eval.mape_floor"])
    ev.write_report(report, run.dir / "report.json")
    ev.write_per_pollutant(report["per_pollutant"], run.dir / "per_pollutant.csv")
    run.add_output("report.json", "per_pollutant.csv")
    print(json.dumps({"mape": report["mape"], "records": report["records"]}))


COMMANDS = {
    "synth": (cmd_synth, "generate a synthetic city dataset"),
    "ingest": (cmd_ingest, "rasterize a station CSV onto the grid"),
    "preprocess": (cmd_preprocess, "fit standardization, fill policy and variograms"),
    "train": (cmd_train, "train a model with early stopping"),
    "evaluate": (cmd_evaluate, "score a checkpoint on a data segment"),
    "forecast": (cmd_forecast, "forecast every grid cell for one hour"),
    "report": (cmd_report, "recompute metrics from a predictions CSV"),
}


def build_parser():
    parser = argparse.ArgumentParser(prog="deepair", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--config", help="JSON file with flat section.key settings")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override one config key (repeatable)")
        p.add_argument("--seed", type=int, help="shorthand for --set run.seed=N")
        p.add_argument("--out", help="run directory (default runs/<utc-timestamp>-seed<N>)")
        if name == "ingest":
            p.add_argument("--csv", required=True, help="station CSV file")
        if name in ("preprocess", "train", "evaluate", "forecast"):
            p.add_argument("--data", required=True, help="dataset or synth run directory")
        if name in ("evaluate", "forecast"):
            p.add_argument("--model", required=True, help="checkpoint file (best.bin)")
        if name == "forecast":
            p.add_argument("--hour", type=int, help="target hour index (default: after the data)")
        if name == "report":
            p.add_argument("--predictions", required=True, help="predictions CSV")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    run = None
    try:
        overrides = list(args.set)
        if args.seed is not None:
            overrides.append(f"run.seed={args.seed}")
        if getattr(args, "hour", None) is not None:
            overrides.append(f"forecast.hour={args.hour}")
        cfg = RunConfig.load(args.config, overrides)
        run = Run(args.command, cfg, args.out)
        with limit_threads(cfg["run.deterministic"]):
            COMMANDS[args.command][0](args, cfg, run)
        run.close("ok")
        return 0
    except DeepAirError as exc:
        msg = exc.oneline()
    except (OSError, ValueError, KeyError) as exc:
        msg = f"error[cli] {type(exc).__name__}: {exc}"
    if run is not None:
        log.error(msg)
        run.close("error")
    print(msg.replace("\n", " "), file=sys.stderr)
    return 1


if __name__ == "__main__":
    sys.exit(main())
