"""Command-line entry point: ``keymem <subcommand> ...``.

Logs go to stderr, artifacts to files.  Failures print one JSON object on
stderr and exit nonzero: 2 for usage errors, 3 for bad or inconsistent
inputs, 4 for anything else.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

log = logging.getLogger("keymem")

EXIT_USAGE, EXIT_INPUT, EXIT_RUNTIME = 2, 3, 4
AXES = ("knowledge-source", "probe", "layer", "chunk", "topk")
DEFAULT_GRIDS = {
    "knowledge-source": "k2k,no-retrieval,doc-only,graph-only",
    "probe": "mean,euclidean,mahalanobis-diag,mahalanobis-full",
    "chunk": "4,8,16",
    "topk": "2,4,8,16",
}
ABLATION_COLUMNS = ["axis", "value", "task", "variant", "seed", "f1", "jaccard", "auprc", "auroc",
                    "config_hash"]


class InputError(Exception):
    """Missing files or artifacts that do not belong together."""


def _fail(kind: str, code: int, exc: BaseException) -> int:
    sys.stderr.write(json.dumps({"error": kind, "message": str(exc), "exit_code": code}) + "\n")
    return code


def _set_threads(n):
    if n:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ[var] = str(n)


def _need(path, what):
    if not Path(path).exists():
        raise InputError(f"{what} not found: {path}")
    return path


def _write(path, text):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


# -- config ------------------------------------------------------------------

def _config(args, extra=()):
    from .experiment import load_config

    if args.config:
        _need(args.config, "config file")
    return load_config(args.config, list(args.set or ()) + list(extra))


def _with_data(cfg, data_dir):
    """Adopt the generator settings the dataset was built with."""
    from .synthdata import GeneratorConfig

    meta = json.loads(Path(_need(Path(data_dir) / "meta.json", "dataset metadata")).read_text())
    cfg.generator = GeneratorConfig(**meta["generator"])
    return cfg, meta["checksum"]


def _check_data(manifest, checksum, what):
    got = manifest.get("meta", {}).get("data_checksum")
    if got != checksum:
        raise InputError(f"{what} was built from different data (checksum {got} vs {checksum})")


def _pipeline_overrides(args):
    out = []
    for flag, key in (("variant", "pipeline.variant"), ("probe", "pipeline.probe"),
                      ("chunk", "pipeline.chunk_len"), ("topk", "pipeline.top_k"),
                      ("layer", "pipeline.layer"), ("task", "pipeline.task"), ("seed", "train.seed")):
        val = getattr(args, flag, None)
        if val is not None:
            out.append(f"{key}={json.dumps(val)}")
    return out


# -- subcommands ---------------------------------------------------------------

def cmd_gen_data(args):
    from .synthdata import generate, write_dataset

    cfg = _config(args)
    ds = generate(cfg.generator)
    info = write_dataset(ds, args.out)
    _write(Path(args.out) / "config.json", json.dumps(
        {"config": cfg.to_dict(), "config_hash": cfg.hash()}, sort_keys=True, indent=1) + "\n")
    log.info("wrote %d records to %s (checksum %s)", len(ds.records), args.out, info["checksum"][:12])


def cmd_infuse(args):
    from . import experiment as X
    from .synthdata import read_dataset

    cfg, checksum = _with_data(_config(args), _need(args.data, "dataset directory"))
    ds = read_dataset(args.data)
    if args.stage == "document":
        enc, info = X.infuse_document(cfg, ds)
        meta = {"stage": "document", "data_checksum": checksum, "perplexity_before": info["perplexity_before"],
                "perplexity_after": info["perplexity_after"]}
    else:
        if not args.doc:
            raise InputError("--stage graph needs --doc <document checkpoint>")
        doc, manifest = X.load_encoder(_need(args.doc, "document checkpoint"))
        _check_data(manifest, checksum, "document checkpoint")
        enc, info = X.infuse_graph(cfg, ds, doc)
        meta = {"stage": "graph", "data_checksum": checksum, "loss_initial": info["loss_initial"],
                "loss_final": info["loss_final"], "doc_config_hash": manifest["config_hash"]}
    X.save_encoder(args.out, enc, cfg, meta=meta)
    log.info("%s infusion written to %s", args.stage, args.out)


def cmd_extract_memory(args):
    from . import experiment as X
    from .memory import extract_document_memory, extract_graph_memory

    enc, manifest = X.load_encoder(_need(args.ckpt, "checkpoint"))
    cfg = X.ExperimentConfig.from_dict(manifest["config"])
    n = enc.config.n_layers
    if not -n <= args.layer < n:
        raise InputError(f"layer {args.layer} out of range for a {n}-layer encoder")
    layer = args.layer % n
    if args.source == "doc":
        mem = extract_document_memory(enc.ffn_layer(layer), layer)
    else:
        if layer not in enc.adapters:
            raise InputError(f"{args.ckpt} carries no adapter at layer {layer}")
        mem = extract_graph_memory(enc.adapters[layer], layer)
    X.save_memory(args.out, mem, cfg, args.source, meta={"from": manifest["config_hash"]})
    log.info("%s memory of layer %d: %d rows", args.source, layer, mem.size)


def _load_stack(args, cfg, checksum):
    from . import experiment as X

    doc, dm = X.load_encoder(_need(args.doc, "document checkpoint"))
    graph, gm = X.load_encoder(_need(args.graph, "graph checkpoint"))
    _check_data(dm, checksum, "document checkpoint")
    _check_data(gm, checksum, "graph checkpoint")
    if gm["meta"].get("doc_config_hash") != dm["config_hash"]:
        raise InputError("graph checkpoint was not infused from this document checkpoint")
    return doc, graph


def cmd_train(args):
    from . import experiment as X
    from .synthdata import read_dataset

    cfg, checksum = _with_data(_config(args, _pipeline_overrides(args)), _need(args.data, "dataset directory"))
    doc, graph = _load_stack(args, cfg, checksum)
    ds = read_dataset(args.data)
    mems = X.extract_memories(doc, graph, X.memory_layer(cfg, doc))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    pl, history = X.fit(cfg, ds, doc, mems, log_path=out / "train_log.jsonl")
    X.save_pipeline(out, pl, cfg, meta={"data_checksum": checksum, "epochs_run": len(history),
                                        "best_dev_auroc": max(h["dev_auroc"] for h in history)})
    log.info("trained %s; best dev auroc %.4f", cfg.pipeline.variant, max(h["dev_auroc"] for h in history))


def cmd_evaluate(args):
    from . import experiment as X
    from . import metrics as M
    from .classifier import evaluate_split
    from .synthdata import read_dataset

    pl, manifest = X.load_pipeline(_need(args.ckpt, "pipeline checkpoint"))
    checksum = X.data_checksum(_need(args.data, "dataset directory"))
    _check_data(manifest, checksum, "pipeline checkpoint")
    ds = read_dataset(args.data)
    rep = evaluate_split(pl, ds.records, ds.vocab, args.split)
    h = manifest["config_hash"]
    prefix = Path(args.out)
    body = {"split": args.split, "task": pl.config.task, "variant": pl.config.variant,
            "config_hash": h, "metrics": rep.to_dict()}
    _write(prefix.with_suffix(".json"), json.dumps(body, sort_keys=True, indent=1) + "\n")
    M.write_csv([rep.csv_row(pl.config.task, pl.config.variant)], prefix.with_suffix(".csv"))
    log.info("%s %s auroc %.4f auprc %.4f", args.split, pl.config.variant, rep.auroc, rep.auprc)


def ablation_rows(axis, grid, cfg, ds, doc, graph, seeds):
    """Train and test-score one configuration per grid value."""
    import copy

    from . import experiment as X
    from .classifier import evaluate_split

    rows = []
    for value in grid:
        c = copy.deepcopy(cfg)
        if axis == "knowledge-source":
            c.pipeline.variant = value
        elif axis == "probe":
            c.pipeline.probe = value
        elif axis == "layer":
            c.pipeline.layer = int(value)
        elif axis == "chunk":
            c.pipeline.chunk_len = int(value)
        else:
            c.pipeline.top_k = int(value)
        c = X.ExperimentConfig.from_dict(c.to_dict())  # re-validate
        mems = X.extract_memories(doc, graph, X.memory_layer(c, doc))
        for seed in seeds:
            pl, _ = X.fit(c, ds, doc, mems, seed=seed)
            rep = evaluate_split(pl, ds.records, ds.vocab, "test")
            rows.append({"axis": axis, "value": str(value), "task": c.pipeline.task,
                         "variant": c.pipeline.variant, "seed": seed,
                         **{k: f"{getattr(rep, k):.6f}" for k in ("f1", "jaccard", "auprc", "auroc")},
                         "config_hash": c.hash()})
            log.info("%s=%s seed %d auroc %.4f", axis, value, seed, rep.auroc)
    return rows


def write_table(rows, path):
    import csv
    import io

    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=ABLATION_COLUMNS, lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    _write(path, buf.getvalue())
    return buf.getvalue()


def cmd_ablate(args):
    from .synthdata import read_dataset

    cfg, checksum = _with_data(_config(args, _pipeline_overrides(args)), _need(args.data, "dataset directory"))
    doc, graph = _load_stack(args, cfg, checksum)
    ds = read_dataset(args.data)
    grid = args.grid or DEFAULT_GRIDS.get(args.axis) or ",".join(str(i) for i in range(doc.config.n_layers))
    values = [v.strip() for v in grid.split(",") if v.strip()]
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else [cfg.train.seed]
    write_table(ablation_rows(args.axis, values, cfg, ds, doc, graph, seeds), args.out)
    log.info("ablation over %s written to %s", args.axis, args.out)


def cmd_bench(args):
    from . import bench

    if args.mode == "retrieval":
        sizes = [int(s) for s in args.sizes.split(",")]
        results = bench.compare_backends(args.d, args.k, sizes) if args.all_backends else \
            [bench.bench_retrieval(args.d, args.k, sizes)]
        _write(Path(args.out).with_suffix(".json"), bench.dumps([r.to_dict() for r in results]))
        _write(Path(args.out).with_suffix(".csv"), bench.retrieval_csv(results))
        for r in results:
            log.info("%s: R^2 %.4f, ns/query %s", r.backend, r.r2, [round(t) for t in r.ns_per_query])
    else:
        from . import experiment as X
        from .synthdata import read_dataset

        if not (args.ckpt and args.data):
            raise InputError("--mode pipeline needs --ckpt and --data")
        pl, manifest = X.load_pipeline(_need(args.ckpt, "pipeline checkpoint"))
        ds = read_dataset(_need(args.data, "dataset directory"))
        rep = bench.bench_pipeline(pl, ds.split("test")[: args.batch], ds.vocab)
        rep["config_hash"] = manifest["config_hash"]
        _write(Path(args.out).with_suffix(".json"), bench.dumps(rep))
        log.info("pipeline stages (ns): %s", {k: round(v) for k, v in rep["stages_ns"].items()})


# -- parser --------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="keymem", description=__doc__.splitlines()[0])
    p.add_argument("--log-level", default="INFO")
    p.add_argument("--threads", type=int, default=None, help="cap BLAS worker threads")
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp):
        sp.add_argument("--config", help="JSON config file")
        sp.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                        help="override one config value (repeatable)")
        return sp

    sp = with_config(sub.add_parser("gen-data", help="write dataset, triples and corpus"))
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_gen_data)

    sp = with_config(sub.add_parser("infuse", help="document or graph knowledge infusion"))
    sp.add_argument("--stage", choices=("document", "graph"), required=True)
    sp.add_argument("--in", dest="data", required=True, help="dataset directory")
    sp.add_argument("--doc", help="document checkpoint (graph stage)")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_infuse)

    sp = sub.add_parser("extract-memory", help="dump one layer's key/value memory")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--layer", type=int, required=True)
    sp.add_argument("--source", choices=("doc", "graph"), required=True)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_extract_memory)

    def with_pipeline(sp):
        with_config(sp)
        sp.add_argument("--data", required=True, help="dataset directory")
        sp.add_argument("--doc", required=True, help="document checkpoint")
        sp.add_argument("--graph", required=True, help="graph checkpoint")
        sp.add_argument("--variant", choices=("k2k", "no-retrieval", "doc-only", "graph-only"))
        sp.add_argument("--probe", choices=("mean", "euclidean", "mahalanobis-diag", "mahalanobis-full"))
        sp.add_argument("--chunk", type=int)
        sp.add_argument("--topk", type=int)
        sp.add_argument("--layer", type=int)
        sp.add_argument("--task", choices=("mortality", "readmission"))
        sp.add_argument("--seed", type=int)
        return sp

    sp = with_pipeline(sub.add_parser("train", help="train a classifier variant"))
    sp.add_argument("--out", required=True, help="pipeline checkpoint directory")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("evaluate", help="score a trained pipeline")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--split", choices=("dev", "test"), default="test")
    sp.add_argument("--out", required=True, help="output prefix; .json and .csv are written")
    sp.set_defaults(func=cmd_evaluate)

    sp = with_pipeline(sub.add_parser("ablate", help="sweep one axis and tabulate test metrics"))
    sp.add_argument("--axis", choices=AXES, required=True)
    sp.add_argument("--grid", help="comma-separated values (default: the axis' standard grid)")
    sp.add_argument("--seeds", help="comma-separated training seeds")
    sp.add_argument("--out", required=True, help="CSV table path")
    sp.set_defaults(func=cmd_ablate)

    sp = sub.add_parser("bench", help="latency benchmarks")
    sp.add_argument("--mode", choices=("retrieval", "pipeline"), required=True)
    sp.add_argument("--d", type=int, default=64)
    sp.add_argument("--k", type=int, default=8)
    sp.add_argument("--sizes", default="1024,4096,16384,65536")
    sp.add_argument("--all-backends", action="store_true")
    sp.add_argument("--ckpt")
    sp.add_argument("--data")
    sp.add_argument("--batch", type=int, default=32)
    sp.add_argument("--out", required=True, help="output prefix")
    sp.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=args.log_level.upper(), stream=sys.stderr,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    _set_threads(args.threads)
    from .checkpoint import CheckpointError

    try:
        args.func(args)
    except (InputError, CheckpointError, FileNotFoundError, KeyError) as exc:
        return _fail(type(exc).__name__, EXIT_INPUT, exc)
    except ValueError as exc:
        return _fail("ValueError", EXIT_USAGE, exc)
    except Exception as exc:  # noqa: BLE001
        log.exception("unexpected failure")
        return _fail(type(exc).__name__, EXIT_RUNTIME, exc)
    return 0


if __name__ == "__main__":
    sys.exit(main())
