"""Command-line entry points: generate | train | evaluate | forecast.

Every command exits 0 on success and nonzero after printing a single
machine-readable JSON error line to stderr. ADVANCE_SEED overrides the
seed found in any config; --threads caps worker parallelism for auxiliary
pools (the pipeline itself is a single deterministic stream).
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace

from . import datagen
from .evaluate import sliding_eval, write_metrics_csv
from .inference import CampaignQuery, build_future_env, forecast, resolve_seed
from .model import AdVanceModel
from .pipeline import LogData
from .train import TrainConfig, train, write_loss_curves


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        print(json.dumps({"error": message, "type": "usage"}), file=sys.stderr)
        raise SystemExit(2)


def _build_parser() -> _Parser:
    p = _Parser(prog="advance", description=__doc__)
    p.add_argument("--threads", type=int, default=1,
                   help="cap on worker parallelism for auxiliary pools")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="generate a synthetic auction log")
    g.add_argument("--config", required=True, help="world config JSON")
    g.add_argument("--out", required=True, help="output log path (JSON Lines)")
    g.add_argument("--truth-out", default=None,
                   help="ground-truth CSV path (default: <out>.truth.csv)")

    t = sub.add_parser("train", help="train a model on a log")
    t.add_argument("--log", required=True)
    t.add_argument("--config", required=True, help="training config JSON")
    t.add_argument("--out", required=True, help="output model path")
    t.add_argument("--curves-out", default=None, help="loss-curve CSV path")

    e = sub.add_parser("evaluate", help="sliding-window WMAPE evaluation")
    e.add_argument("--log", required=True)
    e.add_argument("--model", required=True)
    e.add_argument("--horizons", default="1,6,12,24")
    e.add_argument("--out", required=True, help="metrics CSV path")
    e.add_argument("--fine-tune", action="store_true",
                   help="one training pass over each newly revealed hour")

    f = sub.add_parser("forecast", help="what-if campaign forecast")
    f.add_argument("--log", required=True)
    f.add_argument("--model", required=True)
    f.add_argument("--query", required=True, help="campaign query JSON")
    f.add_argument("--out", required=True, help="output JSON path")
    f.add_argument("--expected-value", action="store_true",
                   help="deterministic rollout instead of sampled events")
    return p


def _cmd_generate(args) -> int:
    with open(args.config) as fh:
        cfg = datagen.WorldConfig.from_json(json.load(fh))
    cfg.seed = resolve_seed(cfg.seed)
    header, records, truth = datagen.generate_log(cfg)
    datagen.write_log(args.out, header, records)
    truth_path = args.truth_out or (args.out + ".truth.csv")
    datagen.write_truth(truth_path, truth)
    print(json.dumps({"records": len(records), "log": args.out, "truth": truth_path}))
    return 0


def _cmd_train(args) -> int:
    header, records = datagen.read_log(args.log)
    config = TrainConfig.load(args.config)
    config = replace(config, seed=resolve_seed(config.seed))
    model, curves = train(header, records, config)
    model.save(args.out)
    if args.curves_out:
        write_loss_curves(args.curves_out, curves)
    print(json.dumps({"model": args.out, "epochs": config.epochs,
                      "final_loss": curves[-1]["loss_total"] if curves else None}))
    return 0


def _cmd_evaluate(args) -> int:
    header, records = datagen.read_log(args.log)
    model = AdVanceModel.load(args.model)
    horizons = tuple(int(h) for h in args.horizons.split(","))
    result = sliding_eval(model, header, records, horizons=horizons,
                          fine_tune=args.fine_tune)
    write_metrics_csv(args.out, result)
    summary = {f"{h}h_{m}": result.timestep_avg(h, m)
               for h in horizons for m in ("cost", "exp", "clk", "cvr")}
    print(json.dumps({"metrics": args.out,
                      "summary": {k: (None if v != v else round(v, 6))
                                  for k, v in summary.items()}}))
    return 0


def _cmd_forecast(args) -> int:
    header, records = datagen.read_log(args.log)
    model = AdVanceModel.load(args.model)
    if isinstance(model, AdVanceModel):
        model.check_data_hash(header)
    with open(args.query) as fh:
        query = CampaignQuery.from_json(json.load(fh))
    query.seed = resolve_seed(query.seed)
    log = LogData(header, records)
    env = build_future_env(log, query)
    perf = forecast(model, log, env, query, expected_value_mode=args.expected_value)
    out = {"cost": perf.cost, "exp": perf.exp, "clk": perf.clk, "cvr": perf.cvr}
    with open(args.out, "w") as fh:
        json.dump(out, fh, sort_keys=True, separators=(",", ":"))
        fh.write("\n")
    print(json.dumps({"forecast": args.out, **out}))
    return 0


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        handler = {"generate": _cmd_generate, "train": _cmd_train,
                   "evaluate": _cmd_evaluate, "forecast": _cmd_forecast}[args.command]
        return handler(args)
    except SystemExit as e:
        return int(e.code or 0)
    except FileNotFoundError as e:
        print(json.dumps({"error": f"missing file: {e.filename}",
                          "type": "missing_file"}), file=sys.stderr)
        return 1
    except Exception as e:  # contract, parse, numeric, and config errors
        print(json.dumps({"error": str(e), "type": type(e).__name__}),
              file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
