"""Command-line interface for the toolkit.

Subcommands mirror the pipeline stages: ``align`` picks expressions,
``gen-pseudo`` harvests labels once, ``iterate`` runs the full self-training
loop, ``eval`` scores a results file, ``report`` renders tables and figures,
and ``mock-detector`` serves the scripted adapter for tests and demos.

Exit codes: 0 success, 2 configuration problems, 3 adapter or transport
problems, 4 data problems, 1 anything else.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from . import __version__
from .config import (
    ENV_ADAPTER,
    RunConfig,
    load_config_file,
    resolve_config,
    write_manifest,
)
from .dataset import (
    build_few_shot_sets,
    load_coco,
    merge_annotations,
    write_coco,
)
from .errors import (
    AdapterError,
    ConfigError,
    DataError,
    GrounderError,
    ProtocolError,
    TransportError,
)
from .evaluation import coco_iou_thresholds, evaluate, load_results
from .expressions import (
    load_term_sets,
    run_selection,
    selection_from_json_obj,
    selection_to_json_obj,
)
from .protocol.client import DetectorClient
from .protocol.mock import mock_detector
from .protocol.server import serve_http, serve_stdio
from .pseudolabel import generate_pseudo_labels, run_iteration_loop
from .reporting import (
    MethodEntry,
    render_alignment_report,
    render_comparison_report,
    render_iteration_report,
    save_report,
)

log = logging.getLogger(__name__)


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True), encoding="utf-8")


def _resolve(args: argparse.Namespace, flag_keys: tuple[str, ...]) -> RunConfig:
    file_values = load_config_file(args.config) if getattr(args, "config", None) else None
    flags = {key: getattr(args, key, None) for key in flag_keys}
    return resolve_config(file_values, os.environ, flags)


def _make_client(config: RunConfig) -> DetectorClient:
    if not config.adapter:
        raise ConfigError(
            f"no detector adapter configured; pass --adapter, set {ENV_ADAPTER}, "
            "or put 'adapter:' in the config file"
        )
    return DetectorClient.from_spec(
        config.adapter,
        initial_model_id=config.model_id,
        batch_size=config.batch_size,
    )


def _load_dataset(dataset_path: str, federated_path: str | None):
    categories, images, annotations = load_coco(dataset_path, federated_path)
    return categories, images, annotations


def _selection_doc(path: str) -> tuple[dict, dict[int, str], dict[int, str]]:
    """Read a selection document: (raw doc, expression map, class-name map)."""
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"selection file not found: {path}")
    except json.JSONDecodeError as exc:
        raise DataError(f"selection file is not valid JSON: {path}: {exc}")
    results = selection_from_json_obj(doc)
    expressions = {r.category_id: r.best.text for r in results}
    names = {
        rec["category_id"]: rec.get("class_name") or str(rec["category_id"])
        for rec in doc.get("results", [])
    }
    return doc, expressions, names


def _expressions_for(args: argparse.Namespace, categories) -> dict[int, str]:
    """Expression per category: the selection document's picks, or raw names."""
    if getattr(args, "expressions", "selection") == "classnames":
        return {c.id: c.name for c in categories}
    if not args.selection:
        raise ConfigError("pass --selection, or --expressions classnames to use raw names")
    _, expressions, _ = _selection_doc(args.selection)
    return expressions


def cmd_align(args: argparse.Namespace) -> int:
    config = _resolve(
        args, ("adapter", "model_id", "seed", "shots", "candidate_count", "iou_threshold", "batch_size")
    )
    categories, images, annotations = _load_dataset(args.dataset, args.federated)
    term_sets = load_term_sets(args.terms) if args.terms else None
    class_names = {c.id: c.name for c in categories}
    shots = build_few_shot_sets(
        annotations, images, k=config.shots, seed=config.seed, categories=categories
    )
    with _make_client(config) as client:
        results = run_selection(
            client,
            config.model_id,
            shots,
            term_sets,
            class_names,
            n=config.candidate_count,
            seed=config.seed,
            iou_threshold=config.iou_threshold,
        )
    out = Path(args.out)
    _write_json(
        out,
        selection_to_json_obj(
            results,
            model_id=config.model_id,
            seed=config.seed,
            iou_threshold=config.iou_threshold,
            class_names=class_names,
        ),
    )
    write_manifest(
        out.with_name(out.stem + ".manifest.json"),
        config,
        inputs={"dataset": args.dataset, "federated": args.federated, "terms": args.terms},
        outputs=[str(out)],
    )
    for r in sorted(results, key=lambda r: r.category_id):
        marker = "+" if r.acc_after > r.acc_before else "="
        print(
            f"{marker} {class_names.get(r.category_id, r.category_id)}: "
            f"{r.acc_before:.2f} -> {r.acc_after:.2f} via {r.best.text!r}"
        )
    print(f"wrote {out}")
    return 0


def cmd_gen_pseudo(args: argparse.Namespace) -> int:
    config = _resolve(
        args, ("adapter", "model_id", "score_threshold", "include_labeled", "batch_size")
    )
    categories, images, annotations = _load_dataset(args.dataset, args.federated)
    expressions = _expressions_for(args, categories)
    with _make_client(config) as client:
        batch = generate_pseudo_labels(
            client,
            config.model_id,
            images,
            annotations,
            expressions,
            threshold=config.score_threshold,
            per_category_thresholds=config.per_category_thresholds,
            include_labeled=config.include_labeled,
        )
    out = Path(args.out)
    _write_json(out, batch.to_json_obj())
    outputs = [str(out)]
    if args.merged_out:
        merged = merge_annotations(
            [a for a in annotations if a.source == "human"], list(batch.labels)
        )
        write_coco(categories, images, merged, args.merged_out)
        outputs.append(args.merged_out)
    write_manifest(
        out.with_name(out.stem + ".manifest.json"),
        config,
        inputs={
            "dataset": args.dataset,
            "federated": args.federated,
            "selection": args.selection,
            "expressions": args.expressions,
        },
        outputs=outputs,
    )
    print(
        f"kept {len(batch.labels)} pseudo labels from {batch.queried_pairs} pairs "
        f"(threshold {batch.threshold})"
    )
    print(f"wrote {out}")
    return 0


def cmd_iterate(args: argparse.Namespace) -> int:
    config = _resolve(
        args,
        (
            "adapter", "model_id", "score_threshold", "include_labeled", "batch_size",
            "max_iterations", "epsilon", "patience",
        ),
    )
    categories, train_images, train_annotations = _load_dataset(
        args.train, args.federated_train
    )
    _, val_images, val_annotations = _load_dataset(args.val, args.federated_val)
    expressions = _expressions_for(args, categories)
    workdir = Path(args.workdir)
    with _make_client(config) as client:
        state = run_iteration_loop(
            client,
            categories=categories,
            train_images=train_images,
            train_annotations=train_annotations,
            val_images=val_images,
            val_annotations=val_annotations,
            expressions=expressions,
            workdir=workdir,
            stopping=config.stopping_rule(),
            finetune_config=config.finetune_config(),
            threshold=config.score_threshold,
            per_category_thresholds=config.per_category_thresholds,
            include_labeled=config.include_labeled,
            initial_model_id=config.model_id,
        )
    write_manifest(
        workdir / "manifest.json",
        config,
        inputs={
            "train": args.train,
            "val": args.val,
            "federated_train": args.federated_train,
            "federated_val": args.federated_val,
            "selection": args.selection,
            "expressions": args.expressions,
        },
        outputs=[str(p) for p in state.iteration_dirs],
    )
    for i, score in enumerate(state.history):
        print(f"iteration {i}: val mAP@0.5 = {score:.4f}")
    if state.error:
        print(f"stopped on error: {state.error}", file=sys.stderr)
        return 3
    print(f"stopped: {state.stop_reason}; final model {state.model_id}")
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    config = _resolve(args, ("eval_thresholds",))
    _, images, annotations = _load_dataset(args.dataset, args.federated)
    detections = load_results(args.results)
    thresholds = coco_iou_thresholds() if config.eval_thresholds == "coco" else (0.5,)
    report = evaluate(
        detections,
        annotations,
        {img.id: img for img in images},
        iou_thresholds=thresholds,
    )
    if args.out:
        out = Path(args.out)
        _write_json(out, report.to_json_obj())
        write_manifest(
            out.with_name(out.stem + ".manifest.json"),
            config,
            inputs={
                "dataset": args.dataset,
                "federated": args.federated,
                "results": args.results,
            },
            outputs=[str(out)],
        )
        print(f"wrote {out}")
    label = "mAP@[0.50:0.95]" if config.eval_thresholds == "coco" else "mAP@0.5"
    mean = report.mean_ap
    print(f"{label} = {mean:.4f}" if mean is not None else f"{label} = n/a (no ground truth)")
    if report.ignored_detections:
        print(f"ignored {report.ignored_detections} detections on unverified pairs")
    return 0


def cmd_report(args: argparse.Namespace) -> int:
    # Imported here so table-only workflows never pay the matplotlib cost.
    from .plotting import (
        alignment_figure,
        comparison_figure,
        iteration_figure,
        save_figure,
    )

    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    wrote: list[str] = []
    if not (args.selection or args.comparison or args.iterations):
        raise ConfigError("nothing to report; pass --selection, --comparison, or --iterations")

    if args.selection:
        doc, _, names = _selection_doc(args.selection)
        results = selection_from_json_obj(doc)
        table = render_alignment_report(results, names)
        for fmt in ("md", "csv", "json"):
            wrote.append(str(save_report(table, out_dir / f"alignment.{fmt}")))
        wrote.append(str(save_figure(alignment_figure(results, names), out_dir / "alignment.png")))

    if args.comparison:
        try:
            raw = json.loads(Path(args.comparison).read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise ConfigError(f"comparison file not found: {args.comparison}")
        except json.JSONDecodeError as exc:
            raise DataError(f"comparison file is not valid JSON: {exc}")
        if not isinstance(raw, list):
            raise DataError("comparison file must hold a JSON array of entries")
        try:
            entries = [
                MethodEntry(
                    name=rec["method"],
                    map_value=float(rec["map"]),
                    variant_of=rec.get("variant_of"),
                )
                for rec in raw
            ]
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"comparison entry is malformed: {exc}")
        table = render_comparison_report(entries)
        for fmt in ("md", "csv", "json"):
            wrote.append(str(save_report(table, out_dir / f"comparison.{fmt}")))
        wrote.append(str(save_figure(comparison_figure(entries), out_dir / "comparison.png")))

    if args.iterations:
        run_dir = Path(args.iterations)
        metric_files = sorted(
            run_dir.glob("iter_*/metrics.json"),
            key=lambda p: int(p.parent.name.split("_")[1]),
        )
        if not metric_files:
            raise DataError(f"no iter_*/metrics.json under {run_dir}")
        records = [json.loads(p.read_text(encoding="utf-8")) for p in metric_files]
        table = render_iteration_report(records)
        for fmt in ("md", "csv", "json"):
            wrote.append(str(save_report(table, out_dir / f"iterations.{fmt}")))
        history = [rec.get("val_map_50", 0.0) for rec in records]
        wrote.append(str(save_figure(iteration_figure(history), out_dir / "iterations.png")))

    write_manifest(
        out_dir / "manifest.json",
        _resolve(args, ()),
        inputs={
            "selection": args.selection,
            "comparison": args.comparison,
            "iterations": args.iterations,
        },
        outputs=wrote,
    )
    for path in wrote:
        print(f"wrote {path}")
    return 0


def cmd_mock_detector(args: argparse.Namespace) -> int:
    adapter = mock_detector(args.script)
    if args.http:
        host, _, port = args.http.rpartition(":")
        serve_http(adapter, host or "127.0.0.1", int(port))
    else:
        serve_stdio(adapter)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="grounder",
        description="Expression selection and pseudo-label self-training "
        "for text-conditioned detectors.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    parser.add_argument("-q", "--quiet", action="store_true", help="warnings only")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    def add_common(p: argparse.ArgumentParser, *, adapter: bool = True) -> None:
        p.add_argument("--config", help="YAML config file")
        if adapter:
            p.add_argument("--adapter", help=f"adapter spec (default ${ENV_ADAPTER})")
            p.add_argument("--model-id", dest="model_id", help="starting model id")
            p.add_argument("--batch-size", dest="batch_size", type=int)

    p = sub.add_parser("align", help="select the best expression per category")
    add_common(p)
    p.add_argument("--dataset", required=True, help="COCO annotations with human boxes")
    p.add_argument("--federated", help="sidecar of verified category ids per image")
    p.add_argument("--terms", help="JSON map of category id to descriptive terms")
    p.add_argument("--out", required=True, help="selection document to write")
    p.add_argument("--seed", type=int)
    p.add_argument("--shots", type=int)
    p.add_argument("--candidate-count", dest="candidate_count", type=int)
    p.add_argument("--iou-threshold", dest="iou_threshold", type=float)
    p.set_defaults(func=cmd_align)

    p = sub.add_parser("gen-pseudo", help="harvest pseudo labels with one model")
    add_common(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--federated")
    p.add_argument("--selection", help="document written by align")
    p.add_argument(
        "--expressions",
        choices=("selection", "classnames"),
        default="selection",
        help="query with the selected expressions (default) or raw class names",
    )
    p.add_argument("--out", required=True, help="pseudo-label batch to write")
    p.add_argument("--merged-out", help="also write human+pseudo COCO here")
    p.add_argument("--score-threshold", dest="score_threshold", type=float)
    p.add_argument(
        "--include-labeled",
        dest="include_labeled",
        action="store_const",
        const=True,
        help="also query pairs that already have human boxes",
    )
    p.set_defaults(func=cmd_gen_pseudo)

    p = sub.add_parser("iterate", help="run the self-training loop")
    add_common(p)
    p.add_argument("--train", required=True, help="training COCO annotations")
    p.add_argument("--val", required=True, help="holdout COCO annotations")
    p.add_argument("--federated-train", dest="federated_train")
    p.add_argument("--federated-val", dest="federated_val")
    p.add_argument("--selection")
    p.add_argument(
        "--expressions",
        choices=("selection", "classnames"),
        default="selection",
        help="query with the selected expressions (default) or raw class names",
    )
    p.add_argument("--workdir", required=True, help="artifact directory for iter_<k>/")
    p.add_argument("--score-threshold", dest="score_threshold", type=float)
    p.add_argument("--max-iterations", dest="max_iterations", type=int)
    p.add_argument("--epsilon", type=float)
    p.add_argument("--patience", type=int)
    p.add_argument(
        "--include-labeled", dest="include_labeled", action="store_const", const=True
    )
    p.set_defaults(func=cmd_iterate)

    p = sub.add_parser("eval", help="score a COCO results file")
    add_common(p, adapter=False)
    p.add_argument("--dataset", required=True, help="ground-truth COCO annotations")
    p.add_argument("--federated")
    p.add_argument("--results", required=True, help="COCO results array")
    p.add_argument(
        "--thresholds",
        dest="eval_thresholds",
        choices=("coco", "0.5"),
        help="IoU sweep (default coco: 0.50:0.05:0.95)",
    )
    p.add_argument("--out", help="write the full report as JSON")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="render tables and figures")
    p.add_argument("--selection", help="selection document to tabulate")
    p.add_argument("--comparison", help="JSON array of {method, map, variant_of}")
    p.add_argument("--iterations", help="workdir of a previous iterate run")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("mock-detector", help="serve the scripted mock adapter")
    p.add_argument("--script", required=True, help="mock script JSON")
    p.add_argument("--http", help="serve over HTTP at HOST:PORT instead of stdio")
    p.set_defaults(func=cmd_mock_detector)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.INFO
    if args.verbose:
        level = logging.DEBUG
    elif args.quiet:
        level = logging.WARNING
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (AdapterError, TransportError, ProtocolError) as exc:
        print(f"adapter error: {exc}", file=sys.stderr)
        return 3
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 4
    except GrounderError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except KeyboardInterrupt:
        return 130


if __name__ == "__main__":
    raise SystemExit(main())
