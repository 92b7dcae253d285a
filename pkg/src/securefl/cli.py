"""Command-line entry point.

Every command writes ``manifest.json`` into ``--out-dir`` describing the
resolved configuration, seed and produced artifacts. Exit codes: 0 success,
1 internal error, 2 usage or data error.
"""

from __future__ import annotations

import argparse
import dataclasses
import datetime
import itertools
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__, attack, bench, federation, inference, metrics, nn
from .data import derive_rng, pixel_statistics, synthetic_images, write_synthetic_nodes
from .errors import DegenerateInputError, ProtocolError
from .idx import load_images, read_idx, write_idx
from .sharing import secure_moments

log = logging.getLogger("securefl")


class UsageError(Exception):
    """Bad arguments or missing/invalid input data (exit code 2)."""


@dataclasses.dataclass
class RunManifest:
    command: str
    config: dict
    seed: int
    artifacts: dict
    version: str = __version__
    timestamp: str = ""

    def write(self, out_dir: Path) -> Path:
        self.timestamp = datetime.datetime.now(datetime.timezone.utc).isoformat()
        path = out_dir / "manifest.json"
        path.write_text(json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True, default=str) + "\n")
        return path


def _write_json(path: Path, obj) -> Path:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n")
    return path


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, Path):
        return str(o)
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


def _data_dir(arg) -> Path:
    if arg is None:
        env = os.environ.get("PRIMIA_DATA_DIR")
        if not env:
            raise UsageError("no data directory given (use --data or set PRIMIA_DATA_DIR)")
        return Path(env)
    return federation.resolve_data_dir(arg)


def _load_dataset(path) -> tuple[np.ndarray, np.ndarray]:
    try:
        x, y = federation.load_node_dataset(path)
    except FileNotFoundError as exc:
        raise UsageError(str(exc)) from exc
    if len(x) == 0:
        raise UsageError(f"dataset at {path} is empty")
    return x, y


def _load_config(args) -> federation.FederationConfig:
    cfg = federation.load_config(args.config) if args.config else federation.FederationConfig()
    overrides = {}
    for key in ("rounds", "local_epochs", "lr", "batch_size", "patience", "nodes", "arch"):
        val = getattr(args, key, None)
        if val is not None:
            overrides[key] = val
    if getattr(args, "secure", None) is not None:
        overrides["secure"] = args.secure
    if args.seed is not None:
        overrides["seed"] = args.seed
    if getattr(args, "data", None):
        overrides["data_dirs"] = list(args.data)
        overrides.setdefault("nodes", len(args.data))
    return dataclasses.replace(cfg, **overrides)


def _norm_json(mean, std) -> dict:
    return {"mean": np.asarray(mean).tolist(), "std": np.asarray(std).tolist()}


def _evaluate_test(params, test_dir, mean, std, out: Path, artifacts: dict, name: str = "test"):
    x = load_images(Path(test_dir) / "images.idx", mean, std)
    y = read_idx(Path(test_dir) / "labels.idx").astype(np.int64)
    report = metrics.evaluate(params, x, y)
    artifacts[f"{name}_metrics"] = _write_json(out / f"{name}_metrics.json", report.to_dict())
    preds = nn.predict(params, x)
    artifacts[f"{name}_predictions"] = _write_json(out / f"{name}_predictions.json",
                                                   {"predictions": preds.tolist(), "truth": y.tolist()})
    return report


# -- commands -----------------------------------------------------------------

def cmd_synth(args, out: Path) -> dict:
    dirs = write_synthetic_nodes(out / "data", args.nodes, args.per_node, args.seed or 0, args.size, args.test)
    artifacts = {f"node{k}": d for k, d in enumerate(dirs)}
    if args.test:
        artifacts["test"] = out / "data" / "test"
    return {"artifacts": artifacts, "config": vars_clean(args)}


def cmd_train_local(args, out: Path) -> dict:
    cfg = _load_config(args)
    data_dir = _data_dir(args.data[0] if args.data else (cfg.data_dirs[0] if cfg.data_dirs else None))
    x, y = _load_dataset(data_dir)
    arch = nn.Architecture.from_tag(cfg.arch)
    epochs = args.epochs or cfg.rounds * cfg.local_epochs
    params, node, st, mean, std = federation.train_local(x, y, arch, epochs, cfg.lr, cfg.batch_size,
                                                        cfg.patience if args.early_stop else 0, cfg.seed,
                                                        cfg.val_fraction)
    artifacts = {"checkpoint": out / "model.pmd", "normalization": out / "normalization.json"}
    nn.save_checkpoint(params, artifacts["checkpoint"])
    _write_json(artifacts["normalization"], _norm_json(mean, std))
    val = metrics.evaluate(params, node.x_val, node.y_val) if len(node.x_val) else None
    artifacts["metrics"] = _write_json(out / "metrics.json", {"validation": val.to_dict() if val else None,
                                                             "training": st})
    if args.test:
        _evaluate_test(params, args.test, mean, std, out, artifacts)
    log.info("trained %d epochs, validation MCC %.4f", st["epochs_run"], val.mcc if val else float("nan"))
    return {"artifacts": artifacts, "config": dataclasses.asdict(cfg) | {"epochs": epochs}}


def cmd_train_federated(args, out: Path) -> dict:
    cfg = _load_config(args)
    if not cfg.data_dirs:
        env = os.environ.get("PRIMIA_DATA_DIR")
        if not env:
            raise UsageError("no node data directories (use --data, data_dir.<k> in the config, or PRIMIA_DATA_DIR)")
        cfg = dataclasses.replace(cfg, data_dirs=[str(Path(env) / f"node{k}") for k in range(cfg.nodes)])
    datasets = [_load_dataset(d) for d in cfg.data_dirs[:cfg.nodes]]
    if len(datasets) < cfg.nodes:
        raise UsageError(f"config asks for {cfg.nodes} nodes but lists {len(datasets)} data directories")
    artifacts = {}
    if args.search_budget:
        cfg, trials = federation.hyperparameter_search(cfg, args.search_budget, datasets, rounds=args.search_rounds)
        artifacts["search"] = _write_json(out / "search.json", {"trials": trials, "best": dataclasses.asdict(cfg)})
    result = federation.run_federation(cfg, datasets)
    artifacts["checkpoint"] = out / "model.pmd"
    nn.save_checkpoint(result.params, artifacts["checkpoint"])
    artifacts["normalization"] = _write_json(out / "normalization.json", _norm_json(result.mean, result.std))
    artifacts["rounds"] = out / "rounds.jsonl"
    artifacts["rounds"].write_text("".join(r.to_json() + "\n" for r in result.reports))
    if args.test:
        _evaluate_test(result.params, args.test, result.mean, result.std, out, artifacts)
    return {"artifacts": artifacts, "config": dataclasses.asdict(cfg)}


def cmd_serve(args, out: Path) -> dict:
    params = _load_checkpoint(args.model)
    srv = inference.InferenceServer((args.host, args.port), params, args.seed or 0,
                                    reveal_logits_allowed=args.allow_logits)
    port_file = out / "server.json"
    _write_json(port_file, {"host": args.host, "port": srv.port, "arch": params.arch.tag})
    log.info("serving %s on %s:%d", params.arch.tag, args.host, srv.port)
    print(f"listening on {args.host}:{srv.port}", flush=True)
    try:
        if args.sessions:
            srv.daemon_threads = False  # so server_close waits for the last session
            for _ in range(args.sessions):
                srv.handle_request()
        else:
            srv.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        srv.server_close()
    return {"artifacts": {"server": port_file}, "config": {"model": args.model, "host": args.host, "port": srv.port,
                                                          "sessions_served": srv.sessions_served}}


def _load_checkpoint(path) -> nn.ModelParams:
    try:
        return nn.load_checkpoint(Path(path).read_bytes())
    except FileNotFoundError as exc:
        raise UsageError(f"checkpoint not found: {path}") from exc
    except ValueError as exc:
        raise UsageError(f"invalid checkpoint {path}: {exc}") from exc


def cmd_infer(args, out: Path) -> dict:
    path = Path(args.images)
    if not path.exists():
        raise UsageError(f"image file not found: {path}")
    mean = std = None
    if args.norm:
        norm = json.loads(Path(args.norm).read_text())
        mean, std = norm["mean"], norm["std"]
    x = load_images(path, mean, std)
    res = inference.request_inference(args.host, args.port, x, args.seed, logits=args.logits)
    labels, probs = res if args.logits else (res, None)
    target = Path(args.out) if args.out else out / "labels.json"
    payload = {"labels": labels.tolist()}
    if probs is not None:
        payload["probabilities"] = np.asarray(probs).tolist()
    _write_json(target, payload)
    return {"artifacts": {"labels": target}, "config": {"host": args.host, "port": args.port, "images": str(path)}}


_ATTACK_KEYS = {"iterations": int, "step_size": float, "tv_weight": float, "restarts": int, "label_mode": str,
                "batch_size": int, "trials": int, "local_steps": int, "lr": float, "nodes": int, "kind": str,
                "image_size": int}


def _attack_config(path) -> dict:
    if not path:
        return {}
    out = {}
    for line in Path(path).read_text().splitlines():
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, _, value = (s.strip() for s in line.partition("="))
        if key not in _ATTACK_KEYS:
            raise UsageError(f"unknown attack config key {key!r}")
        out[key] = _ATTACK_KEYS[key](value)
    return out


def cmd_attack(args, out: Path) -> dict:
    kv = _attack_config(args.config)
    seed = args.seed or 0
    setup = attack.BenchmarkSetup(**{k: v for k, v in kv.items() if k in
                                     {f.name for f in dataclasses.fields(attack.BenchmarkSetup)}})
    if args.trials:
        setup = dataclasses.replace(setup, trials=args.trials)
    cfg = attack.AttackConfig(**{k: v for k, v in kv.items() if k in
                                 {f.name for f in dataclasses.fields(attack.AttackConfig)}}, seed=seed)
    artifacts = {}
    if args.scenario == "all":
        report = attack.attack_benchmark(setup, cfg, seed)
    else:
        rng = derive_rng(seed, "attack-cli")
        params = nn.init_params(setup.arch, rng)
        raw, labels = synthetic_images(setup.nodes * cfg.batch_size, rng, setup.image_size, setup.num_classes)
        x = attack._normalize(raw)
        b = cfg.batch_size
        victim = (x[:b], labels[:b])
        others = [(x[k * b:(k + 1) * b], labels[k * b:(k + 1) * b]) for k in range(1, setup.nodes)]
        upd = attack.capture_update(args.scenario, params, *victim, others=others, local_steps=setup.local_steps,
                                    lr=setup.lr, rng=derive_rng(seed, "attack-agg"))
        rep = attack.invert(upd, params, cfg, victim[0])
        report = {"scenario": args.scenario, **rep.to_dict()}
        recon = rep.reconstructions[rep.best_restart]
        artifacts["reconstruction"] = out / "reconstruction.idx"
        write_idx(artifacts["reconstruction"], recon[:, 0])
        artifacts["ground_truth"] = out / "ground_truth.idx"
        write_idx(artifacts["ground_truth"], victim[0][:, 0])
    target = Path(args.out) if args.out else out / "attack_report.json"
    artifacts["report"] = _write_json(target, report)
    return {"artifacts": artifacts, "config": {"scenario": args.scenario, **dataclasses.asdict(setup),
                                               **dataclasses.asdict(cfg)}}


def cmd_benchmark(args, out: Path) -> dict:
    protocols = ("fss", "baseline") if args.protocol == "both" else (args.protocol,)
    results = []
    for lat in args.latency_ms:
        for proto in protocols:
            r = bench.benchmark_inference(lat, proto, args.repeats, bandwidth=args.bandwidth or None,
                                          rounds_per_comparison=args.rounds_per_comparison, seed=args.seed or 0)
            results.append(r)
            print(f"{proto:8s} latency={lat:g}ms elapsed={r['elapsed_s']:.4f}s rounds={r['rounds']} "
                  f"bytes={r['bytes']} predicted={r['predicted']['elapsed_s']:.4f}s")
    summary = {}
    for lat in args.latency_ms:
        by = {r["protocol"]: r for r in results if r["latency_ms"] == lat}
        if len(by) == 2:
            summary[str(lat)] = 1.0 - by["fss"]["elapsed_s"] / by["baseline"]["elapsed_s"]
    target = Path(args.out) if args.out else out / "bench.json"
    _write_json(target, {"runs": results, "reduction": summary})
    return {"artifacts": {"bench": target}, "config": vars_clean(args)}


def _read_labels(path) -> np.ndarray:
    p = Path(path)
    if not p.exists():
        raise UsageError(f"file not found: {p}")
    if p.suffix == ".json":
        obj = json.loads(p.read_text())
        for key in ("predictions", "labels", "truth"):
            if isinstance(obj, dict) and key in obj:
                return np.asarray(obj[key], dtype=np.int64)
        return np.asarray(obj, dtype=np.int64)
    return read_idx(p).astype(np.int64)


def cmd_compare(args, out: Path) -> dict:
    preds = {Path(p).stem if not n else n: _read_labels(p) for p, n in
             itertools.zip_longest(args.preds, args.names or [])}
    truth = _read_labels(args.truth)
    for name, p in preds.items():
        if len(p) != len(truth):
            raise UsageError(f"{name} has {len(p)} predictions for {len(truth)} labels")
    rows = []
    for (a, pa), (b, pb) in itertools.combinations(preds.items(), 2):
        stat, p = metrics.mcnemar_test(pa, pb, truth)
        rows.append({"a": a, "b": b, "mcnemar_statistic": stat, "mcnemar_p": p, "kappa": metrics.cohens_kappa(pa, pb)})
    k = int(max(truth.max(), *(p.max() for p in preds.values()))) + 1
    report = {"pairs": rows, "models": {n: {"accuracy": float(np.mean(p == truth)),
                                            "mcc": metrics.mcc(truth, p, k),
                                            "kappa_vs_truth": metrics.cohens_kappa(truth, p, k)}
                                        for n, p in preds.items()}}
    target = Path(args.out) if args.out else out / "compare.json"
    _write_json(target, report)
    return {"artifacts": {"compare": target}, "config": vars_clean(args)}


def cmd_stats(args, out: Path) -> dict:
    dirs = args.data or ([str(Path(os.environ["PRIMIA_DATA_DIR"]) / f"node{k}") for k in range(args.nodes)]
                         if os.environ.get("PRIMIA_DATA_DIR") else None)
    if not dirs:
        raise UsageError("no data directories (use --data or set PRIMIA_DATA_DIR)")
    stats = [pixel_statistics(_load_dataset(d)[0]) for d in dirs]
    mom = secure_moments([s[0] for s in stats], [s[1] for s in stats], [s[2] for s in stats],
                         derive_rng(args.seed or 0, "moments"))
    net = mom.network.summary() if mom.network is not None else None
    target = Path(args.out) if args.out else out / "stats.json"
    _write_json(target, {"mean": mom.mean, "std": mom.std, "count": mom.count, "network": net,
                         "nodes": len(dirs)})
    return {"artifacts": {"stats": target}, "config": vars_clean(args)}


def vars_clean(args) -> dict:
    return {k: v for k, v in vars(args).items() if k != "func"}


# -- parser -------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    def global_flags(suppress: bool) -> argparse.ArgumentParser:
        # subcommands repeat the global flags without defaults so values given
        # before the subcommand survive
        p = argparse.ArgumentParser(add_help=False)
        dflt = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
        p.add_argument("--config", default=dflt(None), help="flat key = value config file")
        p.add_argument("--seed", type=int, default=dflt(None), help="root seed (default 0 or the config's seed)")
        p.add_argument("--out-dir", default=dflt("."), help="directory for artifacts and the run manifest")
        p.add_argument("--log-level", default=dflt("WARNING"), choices=["DEBUG", "INFO", "WARNING", "ERROR"])
        return p

    common = global_flags(True)
    parser = argparse.ArgumentParser(prog="securefl", parents=[global_flags(False)],
                                     description="Secure federated training and encrypted inference.")
    parser.add_argument("--version", action="version", version=f"securefl {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_, aliases=()):
        p = sub.add_parser(name, parents=[common], help=help_, aliases=list(aliases))
        p.set_defaults(func=func, command=name)
        return p

    def training_flags(p):
        p.add_argument("--data", nargs="+", help="dataset directories with images.idx and labels.idx")
        p.add_argument("--test", help="held-out test directory to evaluate on")
        p.add_argument("--arch", help="architecture tag, e.g. smallcnn:1x16x16:3")
        p.add_argument("--lr", type=float)
        p.add_argument("--batch-size", type=int)
        p.add_argument("--patience", type=int)
        p.add_argument("--rounds", type=int)
        p.add_argument("--local-epochs", type=int)

    p = add("synth", cmd_synth, "write a synthetic 3-class IDX dataset per node")
    p.add_argument("--nodes", type=int, default=3)
    p.add_argument("--per-node", type=int, default=200)
    p.add_argument("--test", type=int, default=300, help="test images (0 for none)")
    p.add_argument("--size", type=int, default=16)

    p = add("train-local", cmd_train_local, "train one model on a single dataset")
    training_flags(p)
    p.add_argument("--epochs", type=int, help="epochs (default rounds * local_epochs)")
    p.add_argument("--early-stop", action="store_true", help="stop on validation MCC with the config's patience")

    p = add("train-federated", cmd_train_federated, "federated training across node datasets")
    training_flags(p)
    p.add_argument("--nodes", type=int)
    g = p.add_mutually_exclusive_group()
    g.add_argument("--secure", dest="secure", action="store_true", default=None, help="secret-shared aggregation")
    g.add_argument("--plain", dest="secure", action="store_false", help="plaintext aggregation")
    p.add_argument("--search-budget", type=int, default=0, help="hyperparameter trials before the final run")
    p.add_argument("--search-rounds", type=int, default=None, help="rounds per search trial")

    p = add("infer-serve", cmd_serve, "serve encrypted inference for a checkpoint", aliases=("serve",))
    p.add_argument("--model", required=True, help="PMD1 checkpoint")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=9000)
    p.add_argument("--sessions", type=int, default=0, help="exit after this many sessions (0 = run forever)")
    p.add_argument("--allow-logits", action="store_true", help="let clients request probability vectors")

    p = add("infer-client", cmd_infer, "request encrypted inference for IDX images", aliases=("infer",))
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=9000)
    p.add_argument("--images", required=True, help="IDX image file")
    p.add_argument("--norm", help="normalization.json written by training")
    p.add_argument("--out", help="output JSON (default <out-dir>/labels.json)")
    p.add_argument("--logits", action="store_true", help="also request class probabilities")

    p = add("attack", cmd_attack, "gradient-inversion attack on a captured update")
    p.add_argument("--scenario", choices=list(attack.SCENARIOS) + ["all"], default="local")
    p.add_argument("--trials", type=int, help="trials for --scenario all")
    p.add_argument("--out", help="report JSON (default <out-dir>/attack_report.json)")

    p = add("benchmark", cmd_benchmark, "simulated latency of encrypted inference")
    p.add_argument("--latency-ms", type=float, nargs="+", default=[10.0, 100.0])
    p.add_argument("--protocol", choices=["fss", "baseline", "both"], default="both")
    p.add_argument("--repeats", type=int, default=1)
    p.add_argument("--bandwidth", type=float, default=bench.DEFAULT_BANDWIDTH, help="bytes/s (0 = unlimited)")
    p.add_argument("--rounds-per-comparison", type=int, default=bench.BASELINE_ROUNDS_PER_COMPARISON)
    p.add_argument("--out", help="output JSON (default <out-dir>/bench.json)")

    p = add("compare", cmd_compare, "pairwise McNemar tests and Cohen's kappa between prediction files")
    p.add_argument("--preds", nargs="+", required=True, help="prediction files (JSON or IDX)")
    p.add_argument("--names", nargs="+", help="names for the prediction files")
    p.add_argument("--truth", required=True, help="ground-truth labels (JSON or IDX)")
    p.add_argument("--out", help="output JSON (default <out-dir>/compare.json)")

    p = add("stats", cmd_stats, "securely aggregated pixel mean/std across node datasets")
    p.add_argument("--data", nargs="+")
    p.add_argument("--nodes", type=int, default=3)
    p.add_argument("--out", help="output JSON (default <out-dir>/stats.json)")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=getattr(logging, args.log_level), format="%(levelname)s %(name)s: %(message)s")
    out = Path(args.out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        result = args.func(args, out)
        artifacts = {k: str(v) for k, v in result.get("artifacts", {}).items()}
        seed = args.seed if args.seed is not None else result.get("config", {}).get("seed", 0)
        RunManifest(args.command, result.get("config", {}), seed, artifacts).write(out)
        return 0
    except (UsageError, DegenerateInputError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except ProtocolError as exc:
        print(f"protocol error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - top-level guard
        log.exception("internal error")
        print(f"internal error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
