"""Seeded, config-driven experiment runner.

    augoverlap <subcommand> [--config PATH_OR_PRESET] [--seed INT] [--out DIR]

Exit codes: 0 success, 2 config error, 3 numerical divergence.
"""
from __future__ import annotations

import argparse
import copy
import json
import logging
import sys
from dataclasses import asdict, fields
from importlib import resources
from pathlib import Path

import numpy as np

from augoverlap import encoder as enc
from augoverlap import evaluation as ev
from augoverlap import graph as gr
from augoverlap import metrics as mt
from augoverlap._io import write_csv, write_json
from augoverlap.sphere import make_dataset, paper_synthetic

log = logging.getLogger("augoverlap")

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED = 0, 2, 3
PRESETS = ("paper_synthetic", "fig12_sweep", "bounds_M_sweep", "scaling_d2", "acr_sweep_small")


class ConfigError(ValueError):
    pass


_TRAIN_KEYS = {f.name: f.default for f in fields(enc.TrainConfig) if f.name != "seed"}

DEFAULTS = {
    "seed": 0,
    "dataset": {
        "kind": "paper_synthetic",
        "n_train": 5000,
        "n_test": 1000,
        "centers": None,
        "cap_size": 1.0,
        "cap_by": "area",
    },
    "train": dict(_TRAIN_KEYS),
    "graph": {"r": 0.1, "connect_factor": 2.0, "diameter": True},
    "metrics": {
        "C": 10,
        "k": 1,
        "n_sources": 500,
        "raw_init": False,
        "features_csv": None,
        "features_init_csv": None,
    },
    "sweep": {
        "r_list": [0.0, 0.049787068367863944, 0.1, 1.5],
        "M_list": [512],
        "N_list": [100, 400, 1600, 6400],
        "d": 2,
        "trials": 20,
        "area": 1.0,
        "diameter": True,
        "acr": True,
    },
    "eval": {
        "M": 512,
        "encoders": ["random", "trained", "constant"],
        "n_batches": 40,
        "batch_size": 256,
        "n_pairs": 10000,
        "lse_trials": 2000,
        "counterexample": [{"N": 10000, "K": 2, "m": 16}, {"N": 100000, "K": 10, "m": 16}],
    },
    "output": {"dir": "runs/out"},
}


def _merge(base: dict, over: dict, where: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, val in over.items():
        if key not in base:
            raise ConfigError(f"unknown config key {where}{key!r}")
        if isinstance(base[key], dict):
            if not isinstance(val, dict):
                raise ConfigError(f"config key {where}{key!r} must be an object")
            out[key] = _merge(base[key], val, f"{where}{key}.")
        else:
            out[key] = val
    return out


def load_config(source: str | None, seed: int | None = None, out: str | None = None) -> dict:
    """Resolve a preset name or JSON path over the defaults, then apply CLI overrides."""
    raw = {}
    if source:
        path = Path(source)
        try:
            if path.exists():
                raw = json.loads(path.read_text())
            elif source in PRESETS:
                raw = json.loads(resources.files("augoverlap.presets").joinpath(f"{source}.json").read_text())
            else:
                raise ConfigError(f"no config file or preset named {source!r} (presets: {', '.join(PRESETS)})")
        except json.JSONDecodeError as e:
            raise ConfigError(f"{source}: invalid JSON ({e})") from e
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    cfg = _merge(DEFAULTS, raw)
    if seed is not None:
        cfg["seed"] = seed
    if out is not None:
        cfg["output"]["dir"] = out
    train_config(cfg)  # validate early
    return cfg


def train_config(cfg: dict, r: float | None = None) -> enc.TrainConfig:
    t = dict(cfg["train"])
    if r is not None:
        t["r"] = r
    try:
        return enc.TrainConfig(seed=int(cfg["seed"]), **t)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"train: {e}") from e


def build_datasets(cfg: dict):
    d = cfg["dataset"]
    seed = int(cfg["seed"])
    try:
        if d["kind"] == "paper_synthetic":
            return paper_synthetic(seed, d["n_train"], d["n_test"])
        if d["kind"] == "custom":
            centers = np.asarray(d["centers"], dtype=float)
            K = len(centers)
            train = make_dataset(K, d["n_train"] // K, centers, d["cap_size"], [seed, 0], by=d["cap_by"])
            test = make_dataset(K, d["n_test"] // K, centers, d["cap_size"], [seed, 1], by=d["cap_by"])
            return train, test
    except (TypeError, ValueError) as e:
        raise ConfigError(f"dataset: {e}") from e
    raise ConfigError(f"dataset.kind must be 'paper_synthetic' or 'custom', got {d['kind']!r}")


def _outdir(cfg: dict) -> Path:
    out = Path(cfg["output"]["dir"])
    out.mkdir(parents=True, exist_ok=True)
    write_json(out / "config.json", cfg)
    return out


def graph_stats(g: gr.AugmentationGraph, diameter: bool = True) -> dict:
    stats = {
        "n_vertices": g.n,
        "n_edges": g.n_edges,
        "r": g.r,
        "connect_factor": g.connect_factor,
        "n_components": gr.n_components(g),
        "classwise_connected": gr.is_classwise_connected(g),
    }
    stats.update(gr.label_consistency_violations(g))
    if diameter:
        per_class, D = gr.intra_class_diameter(g)
        stats["diameter_per_class"] = per_class
        stats["diameter"] = D
    return stats


def cmd_simulate_graph(cfg: dict) -> int:
    out = _outdir(cfg)
    train, _ = build_datasets(cfg)
    g = gr.build_graph(train, cfg["graph"]["r"], cfg["graph"]["connect_factor"])
    g.to_edge_csv(out / "edges.csv")
    g.to_component_csv(out / "components.csv")
    stats = graph_stats(g, cfg["graph"]["diameter"])
    stats["critical_radii"] = asdict(gr.critical_radii(train))
    stats["foreign_points"] = train.foreign_count
    write_json(out / "stats.json", stats)
    log.info("graph: %d edges, %d components", stats["n_edges"], stats["n_components"])
    return EXIT_OK


def _probe(params, train, test) -> ev.ProbeResult:
    return ev.linear_probe(ev.FeatureTable.from_encoder(params, train), ev.FeatureTable.from_encoder(params, test))


def cmd_train(cfg: dict) -> int:
    out = _outdir(cfg)
    train, test = build_datasets(cfg)
    tc = train_config(cfg)
    params, trace = enc.train(train, tc)
    params.save(out / "checkpoint.json")
    trace.to_csv(out / "trace.csv")
    Ztr, Zte = enc.forward(params, train.points), enc.forward(params, test.points)
    enc.write_features_csv(Ztr, train.labels, out / "features_train.csv")
    enc.write_features_csv(Zte, test.labels, out / "features_test.csv")
    probe = _probe(params, train, test)
    table = ev.FeatureTable.from_encoder(params, train)
    report = {
        "r": tc.r,
        "final_loss": float(trace.losses[-1]),
        "train_acc": probe.train_acc,
        "test_acc": probe.test_acc,
        "var_cond": ev.conditional_variance(table),
        "mean_ce_loss": ev.mean_ce_loss(table),
        "acr_init": trace.acr_init,
    }
    write_json(out / "report.json", report)
    log.info("r=%.4g test accuracy %.3f", tc.r, probe.test_acc)
    return EXIT_OK


def _init_encoder(cfg: dict, train):
    if cfg["metrics"]["raw_init"]:
        return None
    tc = train_config(cfg)
    # the same generator call as train() makes, so this is exactly f_init
    return enc.init_params(
        train.dim + 1, tc.hidden_width, tc.output_dim, np.random.default_rng(tc.seed),
        activation=tc.activation, init=tc.init, hidden_scale=tc.hidden_scale,
    )


def cmd_sweep(cfg: dict) -> int:
    out = _outdir(cfg)
    train, test = build_datasets(cfg)
    sw, m = cfg["sweep"], cfg["metrics"]
    f_init = _init_encoder(cfg, train)
    rows = []
    for r in sorted(float(x) for x in sw["r_list"]):
        params, trace = enc.train(train, train_config(cfg, r))
        row = {"r": r, "probe_acc": _probe(params, train, test).test_acc, "final_loss": float(trace.losses[-1])}
        if sw["acr"]:
            srow = mt.acr_sweep(train, f_init, {r: params}, [r], m["C"], m["k"], int(cfg["seed"]), n_sources=m["n_sources"])[0]
            row.update(acr_init=srow.acr_init, acr_final=srow.acr_final, arc=srow.arc)
        if sw["diameter"]:
            g = gr.build_graph(train, r, cfg["graph"]["connect_factor"])
            row["n_components"] = gr.n_components(g)
            row["diameter"] = gr.intra_class_diameter(g)[1]
        rows.append(row)
        log.info("r=%.4g accuracy %.3f", r, row["probe_acc"])
    header = list(rows[0])
    write_csv(out / "sweep.csv", header, [[row[h] for h in header] for row in rows])
    return EXIT_OK


def _constant_encoder(d_in: int, tc: enc.TrainConfig) -> enc.EncoderParams:
    b2 = np.zeros(tc.output_dim)
    b2[0] = 1.0
    return enc.EncoderParams(
        np.zeros((tc.hidden_width, d_in)), np.zeros(tc.hidden_width),
        np.zeros((tc.output_dim, tc.hidden_width)), b2, tc.activation,
    )


def cmd_bounds(cfg: dict) -> int:
    out = _outdir(cfg)
    train, _ = build_datasets(cfg)
    tc = train_config(cfg)
    e = cfg["eval"]
    encoders = {}
    for kind in e["encoders"]:
        if kind == "random":
            encoders[kind] = enc.init_params(train.dim + 1, tc.hidden_width, tc.output_dim, np.random.default_rng([tc.seed, 5]))
        elif kind == "trained":
            encoders[kind] = enc.train(train, tc)[0]
        elif kind == "constant":
            encoders[kind] = _constant_encoder(train.dim + 1, tc)
        else:
            raise ConfigError(f"eval.encoders: unknown encoder kind {kind!r}")
    g = gr.build_graph(train, tc.r, cfg["graph"]["connect_factor"]) if cfg["graph"]["diameter"] else None
    M_list = cfg["sweep"]["M_list"] or [e["M"]]
    reports = []
    for kind, params in encoders.items():
        for M in M_list:
            rep = ev.bounds_report(
                params, train, tc.r, int(M), graph=g, rng=np.random.default_rng([tc.seed, int(M), 7]),
                n_batches=e["n_batches"], batch_size=e["batch_size"], n_pairs=e["n_pairs"], lse_trials=e["lse_trials"],
            )
            reports.append({"encoder": kind, **rep.to_dict()})
            log.info("%s M=%d upper=%s lower=%s", kind, M, rep.upper_holds, rep.lower_holds)
    write_json(out / "bounds.json", reports)
    return EXIT_OK


def cmd_metrics(cfg: dict) -> int:
    out = _outdir(cfg)
    m = cfg["metrics"]
    if m["features_csv"]:
        final = mt.confusion_ratio_all(mt.AugmentedFeatureSet.from_csv(m["features_csv"], k=m["k"]))
        result = {"acr_final": final.acr, "k": final.k, "C": final.C, "distance": final.distance}
        if m["features_init_csv"]:
            init = mt.confusion_ratio_all(mt.AugmentedFeatureSet.from_csv(m["features_init_csv"], k=m["k"]))
            result.update(acr_init=init.acr, arc=mt.arc(init.acr, final.acr))
        result["cr_values"] = final.cr_values
        write_json(out / "confusion.json", result)
        return EXIT_OK
    train, test = build_datasets(cfg)
    tc = train_config(cfg)
    params, _ = enc.train(train, tc)
    rows = mt.acr_sweep(train, _init_encoder(cfg, train), {tc.r: params}, [tc.r], m["C"], m["k"], int(cfg["seed"]), test, m["n_sources"])
    write_json(out / "confusion.json", {**asdict(rows[0]), "k": m["k"], "C": m["C"], "distance": "euclidean"})
    mt.write_sweep_csv(rows, out / "sweep_rows.csv")
    return EXIT_OK


def cmd_scaling(cfg: dict) -> int:
    out = _outdir(cfg)
    sw = cfg["sweep"]
    try:
        recs = gr.scaling_experiment(sw["N_list"], sw["d"], sw["trials"], int(cfg["seed"]), sw["area"])
    except ValueError as e:
        raise ConfigError(f"sweep: {e}") from e
    gr.write_scaling_csv(recs, out / "scaling.csv")
    return EXIT_OK


def cmd_counterexample(cfg: dict) -> int:
    out = _outdir(cfg)
    results = []
    for i, case in enumerate(cfg["eval"]["counterexample"]):
        try:
            res = ev.uniform_counterexample(case["N"], case["K"], case["m"], seed=[int(cfg["seed"]), i])
        except (KeyError, ValueError) as e:
            raise ConfigError(f"eval.counterexample[{i}]: {e}") from e
        res.pop("table")
        results.append(res)
    write_json(out / "counterexample.json", results)
    return EXIT_OK


COMMANDS = {
    "simulate-graph": cmd_simulate_graph,
    "train": cmd_train,
    "sweep": cmd_sweep,
    "bounds": cmd_bounds,
    "metrics": cmd_metrics,
    "scaling": cmd_scaling,
    "counterexample": cmd_counterexample,
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="augoverlap", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", help=f"JSON config path or preset name ({', '.join(PRESETS)})")
        sp.add_argument("--seed", type=int, help="overrides the config seed")
        sp.add_argument("--out", help="output directory (overrides output.dir)")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, args.seed, args.out)
        return COMMANDS[args.command](cfg)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except enc.TrainingDiverged as e:
        print(f"diverged: {e}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
