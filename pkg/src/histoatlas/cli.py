"""``histoatlas`` command-line driver.

Machine-readable JSON goes to stdout, human summaries to stderr. Exit codes:
0 success, 1 validation error, 2 I/O error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__, plots
from .analytics import analyze, pca_fit
from .annotation import LabelTable, parse_annotations
from .atlas_index import BuildOptions, build_atlas, load_atlas, save_atlas
from .config import PipelineConfig, load_config
from .embedding_io import (
    EmbeddingSet,
    ExtractorEndpoint,
    ExtractorError,
    fetch_embeddings,
    import_csv,
    read_embeddings,
    write_embeddings,
)
from .evaluation import evaluate
from .patching import ExtractionError, extract_patches, open_raster, read_manifest, write_manifest
from .projection import TsneError, overlay, tsne, write_projection_csv
from .service import RequestError, handle_search, make_server

log = logging.getLogger("histoatlas")


def _err(msg: str) -> None:
    print(msg, file=sys.stderr)


def _emit(payload: dict) -> None:
    print(json.dumps(payload, indent=2))


def _write_sidecar(path: Path, argv: list[str], started: float) -> None:
    path.write_text(json.dumps({
        "tool": "histoatlas",
        "version": __version__,
        "argv": argv,
        "started_at": time.strftime("%Y-%m-%dT%H:%M:%S%z", time.localtime(started)),
        "finished_at": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
    }, indent=2) + "\n")


def _echo_config(cfg: PipelineConfig, out: Path, is_dir: bool, argv: list[str], started: float) -> None:
    if is_dir:
        cfg.write(out / "resolved_config.toml")
        _write_sidecar(out / "run_meta.json", argv, started)
    else:
        cfg.write(out.with_name(out.name + ".resolved.toml"))
        _write_sidecar(out.with_name(out.name + ".run_meta.json"), argv, started)


def _parse_n(text: str) -> list[int]:
    try:
        values = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")
    if not values or min(values) < 1:
        raise argparse.ArgumentTypeError("n values must be positive")
    return values


# ---------------------------------------------------------------------------
# commands


def cmd_patch(args, cfg: PipelineConfig) -> int:
    cfg = cfg.override(
        "patching",
        patch_size=args.patch_size,
        cellularity_threshold=args.cellularity_threshold,
        hematoxylin_od_threshold=args.hematoxylin_threshold,
        min_patches_target=args.min_patches,
        inside_fraction=args.inside_fraction,
    )
    labels = LabelTable.from_json(args.labels) if args.labels else LabelTable.reference()
    slide_id = args.slide_id or Path(args.image).stem
    xml_path = Path(args.xml)
    try:
        parsed = parse_annotations(xml_path.read_bytes(), labels, slide_id)
    except ValueError as exc:
        raise ValueError(f"{xml_path}: {exc}") from exc
    raster = open_raster(args.image)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    result = extract_patches(
        raster, parsed.regions, cfg.patching.patch_spec(), cfg.patching.stains(), patch_dir=out / "patches"
    )
    write_manifest(result.records, out / "manifest.jsonl")
    (out / "report.json").write_text(json.dumps({
        "rejected_regions": [vars(r) for r in parsed.rejected],
        "failed_patches": [vars(f) for f in result.failures],
    }, indent=2) + "\n")
    _echo_config(cfg, out, True, args.argv, args.started)
    n_ret, n_all = len(result.retained), len(result.records)
    _err(f"retained {n_ret} / candidates {n_all}")
    _emit({"manifest": str(out / "manifest.jsonl"), "retained": n_ret, "candidates": n_all,
           "rejected_regions": len(parsed.rejected), "failed_patches": len(result.failures)})
    return 0


def cmd_embed(args, cfg: PipelineConfig) -> int:
    cfg = cfg.override("embedding", base_url=args.url, batch_size=args.batch_size)
    records = [r for r in read_manifest(args.manifest) if r.retained]
    patch_dir = Path(args.patch_dir)
    paths = [patch_dir / f"{r.patch_id}.png" for r in records]
    ep = ExtractorEndpoint(**{k: getattr(cfg.embedding, k) for k in vars(cfg.embedding)})
    emb = fetch_embeddings(paths, ep, records=records)
    out = Path(args.out)
    write_embeddings(emb, out)
    _echo_config(cfg, out, False, args.argv, args.started)
    _err(f"embedded {emb.count} patches (dim {emb.dim})")
    _emit({"embeddings": str(out), "count": emb.count, "dim": emb.dim})
    return 0


def cmd_import_csv(args, cfg: PipelineConfig) -> int:
    emb = import_csv(args.csv, args.dim)
    write_embeddings(emb, args.out)
    _echo_config(cfg, Path(args.out), False, args.argv, args.started)
    _emit({"embeddings": str(args.out), "count": emb.count, "dim": emb.dim})
    return 0


def cmd_build(args, cfg: PipelineConfig) -> int:
    cfg = cfg.override("index", normalize=args.normalize)
    emb = read_embeddings(args.embeddings)
    labels = LabelTable.from_json(args.labels) if args.labels else LabelTable.reference()
    atlas = build_atlas(emb, labels, BuildOptions(normalize=cfg.index.normalize))
    out = Path(args.out)
    save_atlas(atlas, out)
    _echo_config(cfg, out, False, args.argv, args.started)
    _err(f"atlas: {atlas.count} vectors, dim {atlas.dim}, checksum {atlas.checksum}")
    _emit({"atlas": str(out), "count": atlas.count, "dim": atlas.dim, "checksum": atlas.checksum})
    return 0


def cmd_query(args, cfg: PipelineConfig) -> int:
    atlas = load_atlas(args.atlas)
    if args.vector is not None:
        vector = json.loads(args.vector)
    elif args.embeddings is not None:
        emb = read_embeddings(args.embeddings)
        if not 0 <= args.row < emb.count:
            raise ValueError(f"row {args.row} out of range for {emb.count} embeddings")
        vector = emb.vectors[args.row].astype(np.float64).tolist()
    else:
        raise ValueError("give --vector or --embeddings/--row")
    body = {"vector": vector, "k": args.k}
    if args.n is not None:
        body["majority_n"] = args.n
    try:
        result = handle_search(atlas, body)
    except RequestError as exc:
        raise ValueError(str(exc)) from exc
    _emit(result)
    return 0


def cmd_eval(args, cfg: PipelineConfig) -> int:
    cfg = cfg.override("evaluation", n_values=args.n)
    atlas = load_atlas(args.atlas)
    test = read_embeddings(args.test)
    report = evaluate(atlas, test, cfg.evaluation.n_values)
    out = Path(args.out)
    report.write(out)
    _echo_config(cfg, out, True, args.argv, args.started)
    for n in report.n_values:
        _err(f"n={n}: top-n accuracy {report.accuracy_topn[n]:.4f}  majority-n accuracy {report.accuracy_majority[n]:.4f}")
    _emit({
        "report": str(out / "eval_report.json"),
        "total": report.total,
        "accuracy_topn": {str(n): round(a, 6) for n, a in report.accuracy_topn.items()},
        "accuracy_majority": {str(n): round(a, 6) for n, a in report.accuracy_majority.items()},
    })
    return 0


def _load_vectors(args) -> tuple[EmbeddingSet, dict[int, str] | None]:
    if args.atlas:
        atlas = load_atlas(args.atlas)
        return atlas.embedding_set, dict(atlas.label_table.entries)
    if args.embeddings:
        return read_embeddings(args.embeddings), None
    raise ValueError("give --atlas or --embeddings")


def cmd_analyze(args, cfg: PipelineConfig) -> int:
    cfg = cfg.override("analytics", pca_k=args.pca)
    emb, names = _load_vectors(args)
    report = analyze(emb, cfg.analytics.pca_k or None)
    out = Path(args.out)
    report.write(out, label_names=names)
    _echo_config(cfg, out, True, args.argv, args.started)
    for variant, idx in report.validity.items():
        _err(f"{variant}: silhouette {idx['silhouette']:.4f}  davies-bouldin {idx['davies_bouldin']:.4f}  "
             f"calinski-harabasz {idx['calinski_harabasz']:.2f}")
    _emit({"report": str(out / "cluster_report.json"), "validity": report.validity})
    return 0


def _write_map(out: Path, name: str, coords, ids, labels, flags, kl) -> None:
    write_projection_csv(out / f"{name}.csv", coords, ids, labels, flags)
    np.savetxt(out / f"{name}_kl.csv", kl, fmt="%.10g", header="kl", comments="")
    plots.scatter(coords, labels, out / f"{name}.svg", is_test=flags, title=name)
    _err(f"{name}: final KL {kl[-1]:.4f}")


def cmd_project(args, cfg: PipelineConfig) -> int:
    cfg = cfg.override(
        "projection",
        perplexity=args.perplexity, iterations=args.iterations, seed=args.seed,
        init=args.init, variant=args.variant, pca_k=args.pca,
    )
    emb, _ = _load_vectors(args)
    test = read_embeddings(args.test) if args.test else None
    tcfg = cfg.projection.tsne_config()
    variants = ["full", "pca"] if cfg.projection.variant == "both" else [cfg.projection.variant]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    outputs = {}
    for variant in variants:
        atlas_x = emb.vectors.astype(np.float64)
        test_x = None if test is None else test.vectors.astype(np.float64)
        if variant == "pca":
            model = pca_fit(emb, cfg.projection.pca_k)
            atlas_x = model.transform(atlas_x)
            test_x = None if test_x is None else model.transform(test_x)
        name = "tsne_full" if variant == "full" else f"tsne_pca{cfg.projection.pca_k}"
        res = tsne(atlas_x, tcfg)
        labels = emb.labels.tolist()
        _write_map(out, name, res.coords, emb.patch_ids, labels, [False] * emb.count, res.kl_trace)
        outputs[variant] = str(out / f"{name}.csv")
        if test_x is not None and len(test_x):
            ov = overlay(res, test_x)
            _write_map(out, f"{name}_overlay", ov.coords, emb.patch_ids + test.patch_ids,
                       labels + test.labels.tolist(), ov.is_test.tolist(), ov.kl_trace)
            outputs[f"{variant}_overlay"] = str(out / f"{name}_overlay.csv")
    _echo_config(cfg, out, True, args.argv, args.started)
    _emit({"projections": outputs, "config": cfg.to_dict()["projection"]})
    return 0


def cmd_serve(args, cfg: PipelineConfig) -> int:
    server = make_server(args.atlas, args.host, args.port)
    _err(f"serving {args.atlas} on http://{args.host}:{server.server_address[1]}")
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
    return 0


def cmd_synth(args, cfg: PipelineConfig) -> int:
    from .synthetic import write_demo_fixture

    paths = write_demo_fixture(args.out, seed=args.seed)
    _emit({k: str(v) for k, v in paths.items()})
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="histoatlas", description=__doc__.splitlines()[0])
    p.add_argument("--config", help="TOML config with [patching], [embedding], [index], ... sections")
    p.add_argument("-v", "--verbose", action="store_true")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("patch", help="extract and score patches inside annotated regions")
    s.add_argument("--xml", required=True, help="ASAP annotation XML")
    s.add_argument("--image", required=True, help="RGB raster (PNG/TIFF) or a directory of tiles")
    s.add_argument("--labels", help="label table JSON (default: reference taxonomy)")
    s.add_argument("--slide-id")
    s.add_argument("--out", required=True)
    s.add_argument("--patch-size", type=int)
    s.add_argument("--cellularity-threshold", type=float)
    s.add_argument("--hematoxylin-threshold", type=float)
    s.add_argument("--min-patches", type=int)
    s.add_argument("--inside-fraction", type=float)
    s.set_defaults(func=cmd_patch)

    s = sub.add_parser("embed", help="fetch embeddings for retained patches from the extractor service")
    s.add_argument("--manifest", required=True)
    s.add_argument("--patch-dir", required=True)
    s.add_argument("--url")
    s.add_argument("--batch-size", type=int)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_embed)

    s = sub.add_parser("import-csv", help="convert a CSV of embeddings to EMB1")
    s.add_argument("--csv", required=True)
    s.add_argument("--dim", type=int, required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_import_csv)

    s = sub.add_parser("build", help="build the atlas file")
    s.add_argument("--embeddings", required=True)
    s.add_argument("--labels")
    s.add_argument("--normalize", action=argparse.BooleanOptionalAction, default=None)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_build)

    s = sub.add_parser("query", help="k-NN search for one vector")
    s.add_argument("--atlas", required=True)
    s.add_argument("--vector", help="JSON array")
    s.add_argument("--embeddings", help="EMB1 file to take the query row from")
    s.add_argument("--row", type=int, default=0)
    s.add_argument("--k", type=int, default=7)
    s.add_argument("--n", type=_parse_n, help="majority n values, e.g. 1,3,5,7")
    s.set_defaults(func=cmd_query)

    s = sub.add_parser("eval", help="top-n / majority-n evaluation of a test set")
    s.add_argument("--atlas", required=True)
    s.add_argument("--test", required=True)
    s.add_argument("--n", type=_parse_n, help="n values (default 1,3,5,7)")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("analyze", help="centroid, linkage and validity-index analysis")
    s.add_argument("--atlas")
    s.add_argument("--embeddings")
    s.add_argument("--pca", type=int, help="principal components for the reduced variant (default 50, 0 = off)")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_analyze)

    s = sub.add_parser("project", help="t-SNE maps of the atlas, optionally with test overlay")
    s.add_argument("--atlas")
    s.add_argument("--embeddings")
    s.add_argument("--test")
    s.add_argument("--variant", choices=["full", "pca", "both"])
    s.add_argument("--pca", type=int)
    s.add_argument("--perplexity", type=float)
    s.add_argument("--iterations", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--init", choices=["pca", "random"])
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_project)

    s = sub.add_parser("serve", help="read-only HTTP search service")
    s.add_argument("--atlas", required=True)
    s.add_argument("--host", default="127.0.0.1")
    s.add_argument("--port", type=int, default=8080)
    s.set_defaults(func=cmd_serve)

    s = sub.add_parser("synth", help="write the synthetic demo fixture")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_synth)
    return p


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    args.argv, args.started = argv, time.time()
    try:
        cfg = load_config(args.config)
        return args.func(args, cfg)
    except (OSError, ExtractorError, ExtractionError) as exc:
        _err(f"error: {exc}")
        return 2
    except (ValueError, TsneError) as exc:
        _err(f"error: {exc}")
        return 1


if __name__ == "__main__":
    sys.exit(main())
