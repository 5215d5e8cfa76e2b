"""Command-line surface: prune, refill, regroup, bench, flops, demo, report.

Exit codes: 0 success, 1 consistency/validation failure, 2 I/O or format
failure.  Randomized subcommands default to seed 42.  SLTK_THREADS caps the
numerical thread pools (default: machine parallelism).
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from .archive import Archive, ArchiveLayer, load_archive, save_archive
from .core import (
    SparseMask,
    WeightTensor,
    global_magnitude_prune,
    one_shot_magnitude_prune,
    random_prune,
)
from .errors import ArchiveFormatError, ParameterError, ValidationError, WiringError
from .executors import BenchCase, FeatureMap, bench
from .flops import bundled_shape_file, flops, load_shapes
from .refill import refill, refill_plus
from .regroup import RegroupParams, regroup_mask
from . import trainer

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_IO = 2
DEFAULT_SEED = 42


def _parse_hw(text: str) -> tuple[int, int]:
    try:
        h, w = text.lower().split("x")
        return int(h), int(w)
    except ValueError as exc:
        raise ParameterError(f"--input-hw expects HxW, got {text!r}") from exc


def _check_writable(path_str: str) -> Path:
    """Fail before any work starts if the output location cannot exist."""
    path = Path(path_str)
    if not path.parent.exists():
        raise FileNotFoundError(f"output directory {path.parent} does not exist")
    return path


def _print_report(archive: Archive, input_hw: tuple[int, int]) -> None:
    shapes = [layer.shape for layer in archive.layers]
    names = [layer.name for layer in archive.layers]
    prunable = [layer.prunable for layer in archive.layers]
    structures = [layer.mask for layer in archive.layers]
    try:
        report = flops(shapes, input_hw, structures, names=names, prunable=prunable)
        sys.stdout.write(report.to_text())
    except WiringError:
        # layers do not form a conv chain; fall back to sparsity-only lines
        total = sum(layer.mask.size for layer in archive.layers if layer.prunable)
        kept = sum(layer.mask.set_count for layer in archive.layers if layer.prunable)
        sys.stdout.write(f"global_sparsity={1.0 - kept / total:.6f}\n")
        for layer in archive.layers:
            s = 1.0 - layer.mask.set_count / layer.mask.size
            sys.stdout.write(f"layer.{layer.name}.sparsity={s:.6f}\n")


def cmd_prune(args) -> int:
    out_path = _check_writable(args.archive_out)
    archive = load_archive(args.archive_in)
    cand = [layer for layer in archive.layers if layer.prunable]
    weights = [layer.weights for layer in cand]
    masks = [layer.mask for layer in cand]
    if args.method == "imp-step":
        if args.fraction is None:
            raise ParameterError("--fraction is required for --method imp-step")
        new_masks = global_magnitude_prune(weights, masks, args.fraction)
    elif args.method == "omp":
        if args.target is None:
            raise ParameterError("--target is required for --method omp")
        new_masks = one_shot_magnitude_prune(weights, masks, args.target)
    else:  # random
        if args.target is None:
            raise ParameterError("--target is required for --method random")
        new_masks = random_prune(masks, args.target, args.seed)
    by_name = {m.layer_name: m for m in new_masks}
    out_layers = [
        ArchiveLayer(
            layer.name,
            layer.shape,
            layer.prunable,
            by_name.get(layer.name, layer.mask),
            layer.weights,
        )
        for layer in archive.layers
    ]
    # masks changed: any stored layouts would be stale, so they are dropped
    out = Archive(out_layers, archive.metadata, None)
    save_archive(out_path, out)
    _print_report(out, args.input_hw)
    return EXIT_OK


def cmd_refill(args) -> int:
    out_path = _check_writable(args.archive_out)
    archive = load_archive(args.archive_in)
    out_layers = []
    for layer in archive.layers:
        mask = layer.mask
        if layer.prunable:
            if args.plus_fraction > 0:
                mask = refill_plus(mask, layer.weights, args.criterion, args.plus_fraction)
            else:
                mask = refill(mask, layer.weights, args.criterion)
        out_layers.append(
            ArchiveLayer(layer.name, layer.shape, layer.prunable, mask, layer.weights)
        )
    out = Archive(out_layers, archive.metadata, None)
    save_archive(out_path, out)
    _print_report(out, args.input_hw)
    return EXIT_OK


def cmd_regroup(args) -> int:
    out_path = _check_writable(args.archive_out)
    archive = load_archive(args.archive_in)
    params = RegroupParams(
        t1=args.t1, t2=args.t2, b1=args.b1, b2=args.b2, seed=args.seed
    )
    out_layers = []
    layouts = {}
    for layer in archive.layers:
        mask = layer.mask
        if layer.prunable:
            mask, layout = regroup_mask(layer.mask, layer.weights, params)
            layouts[layer.name] = layout
        out_layers.append(
            ArchiveLayer(layer.name, layer.shape, layer.prunable, mask, layer.weights)
        )
    out = Archive(out_layers, archive.metadata, layouts)
    save_archive(out_path, out)
    _print_report(out, args.input_hw)
    return EXIT_OK


def cmd_bench(args) -> int:
    archive = load_archive(args.archive_in)
    rng = np.random.default_rng(args.seed)
    cases = []
    h, w = args.input_hw
    for layer in archive.layers:
        fm = FeatureMap(
            rng.standard_normal((layer.shape.c_in, h, w)).astype(np.float32)
        )
        layout = archive.layouts.get(layer.name) if archive.layouts else None
        cases.append(
            BenchCase(layer.name, layer.shape, layer.weights, layer.mask, fm, layout)
        )
    report = bench(cases, repeats=args.repeats)
    csv_text = report.to_csv()
    if args.csv:
        Path(args.csv).write_text(csv_text)
    else:
        sys.stdout.write(csv_text)
    sys.stderr.write(f"# {report.notes}\n")
    return EXIT_OK


def cmd_flops(args) -> int:
    source = Path(args.archive_in)
    if source.exists() and source.read_bytes()[:4] == b"SLTK":
        archive = load_archive(source)
        _print_report(archive, args.input_hw)
        return EXIT_OK
    if not source.exists():
        source = bundled_shape_file(args.archive_in)
    names, shapes, prunable = load_shapes(source)
    report = flops(shapes, args.input_hw, names=names, prunable=prunable)
    sys.stdout.write(report.to_text())
    return EXIT_OK


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


def _ticket_archive(masks: dict, weights: dict, layouts: dict | None) -> Archive:
    layers = []
    for name, shape in trainer.CONV_LAYERS:
        layers.append(
            ArchiveLayer(
                name,
                shape,
                True,
                SparseMask(name, shape, masks[name]),
                WeightTensor(name, shape, weights[name]),
            )
        )
    layers.append(
        ArchiveLayer(
            trainer.HEAD_NAME,
            trainer.HEAD_SHAPE,
            False,
            SparseMask.ones(trainer.HEAD_NAME, trainer.HEAD_SHAPE),
            WeightTensor(trainer.HEAD_NAME, trainer.HEAD_SHAPE, weights[trainer.HEAD_NAME]),
        )
    )
    return Archive(layers, metadata="", layouts=layouts)


def cmd_demo(args) -> int:
    out_dir = Path(args.out or "demo_out")
    task = trainer.SyntheticTask.generate(args.seed)
    config = trainer.TrainConfig(seed=args.seed)
    model = trainer.TinyModel.init(args.seed)

    run = trainer.imp(model, task, config, rounds=args.rounds)
    imp_rows = [(e.round, e.sparsity, e.accuracy) for e in run.rounds]
    _write(out_dir / "imp.manifest", trainer.manifest_text("imp", config, imp_rows))

    final = run.rounds[-1]
    params = trainer.toy_regroup_params(args.seed)

    refill_masks = {}
    for name, shape in trainer.CONV_LAYERS:
        mask = SparseMask(name, shape, final.masks[name])
        weights = WeightTensor(name, shape, run.theta_i.weights[name])
        refill_masks[name] = np.asarray(refill(mask, weights, "l1_weight").bits)
    refill_acc = trainer.run_ticket(refill_masks, task, config, "rewound", run)
    _write(
        out_dir / "refill.manifest",
        trainer.manifest_text(
            "imp-refill",
            config,
            [(final.round, trainer.conv_sparsity(refill_masks), refill_acc)],
        ),
    )

    regroup_masks, layouts = {}, {}
    for name, shape in trainer.CONV_LAYERS:
        mask = SparseMask(name, shape, final.masks[name])
        weights = WeightTensor(name, shape, run.theta_i.weights[name])
        regrouped, layout = regroup_mask(mask, weights, params[name])
        regroup_masks[name] = np.asarray(regrouped.bits)
        layouts[name] = layout
    regroup_acc = trainer.run_ticket(regroup_masks, task, config, "rewound", run)
    random_acc = trainer.run_ticket(regroup_masks, task, config, "random_reinit", run)
    sparsity = trainer.conv_sparsity(regroup_masks)
    _write(
        out_dir / "regroup.manifest",
        trainer.manifest_text("imp-regroup", config, [(final.round, sparsity, regroup_acc)]),
    )
    _write(
        out_dir / "regroup_random.manifest",
        trainer.manifest_text(
            "imp-regroup-random", config, [(final.round, sparsity, random_acc)]
        ),
    )
    ticket_weights = dict(run.theta_i.weights)
    save_archive(
        out_dir / "regroup_ticket.sltk",
        _ticket_archive(regroup_masks, ticket_weights, layouts),
    )

    _, ga_rounds = trainer.group_aware_imp(
        model, task, config, params, target_sparsity=0.5,
        max_rounds=max(2, args.rounds // 2),
    )
    _write(
        out_dir / "groupaware.manifest",
        trainer.manifest_text(
            "group-aware-imp",
            config,
            [(e.round, e.sparsity, e.accuracy) for e in ga_rounds],
        ),
    )
    sys.stdout.write(
        f"dense={run.rounds[0].accuracy:.6f} "
        f"regroup_sparsity={sparsity:.6f} regroup={regroup_acc:.6f} "
        f"refill={refill_acc:.6f} random_reinit={random_acc:.6f} "
        f"groupaware={ga_rounds[-1].accuracy:.6f}\n"
    )
    return EXIT_OK


def cmd_report(args) -> int:
    rows = []
    for path in args.manifests:
        method = None
        per_round: dict[int, dict[str, float]] = {}
        for line in Path(path).read_text().splitlines():
            if "=" not in line:
                continue
            key, value = line.split("=", 1)
            if key == "method":
                method = value
            elif key.startswith("round."):
                _, num, field = key.split(".")
                per_round.setdefault(int(num), {})[field] = float(value)
        for num in sorted(per_round):
            entry = per_round[num]
            rows.append((method, num, entry["sparsity"], entry["accuracy"]))
    rows.sort(key=lambda r: (r[2], r[0], r[1]))
    sys.stdout.write("method,round,sparsity,accuracy\n")
    for method, num, sparsity, accuracy in rows:
        sys.stdout.write(f"{method},{num},{sparsity:.6f},{accuracy:.6f}\n")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sltk",
        description="Structured lottery-ticket toolkit: prune, refill, regroup, "
        "execute, and account sparse convolution masks.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_io(p, out_required=True):
        p.add_argument("--in", dest="archive_in", required=True, help="input archive")
        p.add_argument(
            "--out", dest="archive_out", required=out_required, help="output archive"
        )

    def add_hw(p):
        p.add_argument(
            "--input-hw",
            type=_parse_hw,
            default=(32, 32),
            metavar="HxW",
            help="input spatial dims for MAC accounting (default 32x32)",
        )

    p = sub.add_parser("prune", help="magnitude or random pruning of an archive")
    add_io(p)
    p.add_argument("--method", choices=("imp-step", "omp", "random"), required=True)
    p.add_argument("--fraction", type=float, help="fraction of remaining (imp-step)")
    p.add_argument("--target", type=float, help="target sparsity (omp, random)")
    p.add_argument("--seed", type=int, default=DEFAULT_SEED)
    add_hw(p)
    p.set_defaults(func=cmd_prune)

    p = sub.add_parser("refill", help="channel-wise refilling of an archive")
    add_io(p)
    p.add_argument(
        "--criterion", choices=("l1_weight", "remaining_count"), default="l1_weight"
    )
    p.add_argument("--plus-fraction", type=float, default=0.0, dest="plus_fraction")
    add_hw(p)
    p.set_defaults(func=cmd_refill)

    p = sub.add_parser("regroup", help="group-wise restructuring of an archive")
    add_io(p)
    p.add_argument("--t1", type=int, default=None, help="partition count")
    p.add_argument("--t2", type=int, default=None, help="min set bits per column")
    p.add_argument("--b1", type=int, default=16, help="min rows per block")
    p.add_argument("--b2", type=int, default=32, help="min columns per block")
    p.add_argument("--seed", type=int, default=DEFAULT_SEED)
    add_hw(p)
    p.set_defaults(func=cmd_regroup)

    p = sub.add_parser("bench", help="time dense/CSR/block executors on an archive")
    p.add_argument("--in", dest="archive_in", required=True)
    add_hw(p)
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--csv", help="write the report CSV here instead of stdout")
    p.add_argument("--seed", type=int, default=DEFAULT_SEED)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("flops", help="MAC/sparsity report for an archive or shape file")
    p.add_argument(
        "--in",
        dest="archive_in",
        required=True,
        help="archive, shape file, or bundled preset (e.g. vgg16-cifar)",
    )
    add_hw(p)
    p.set_defaults(func=cmd_flops)

    p = sub.add_parser("demo", help="toy IMP + refill/regroup ticket pipeline")
    p.add_argument("--seed", type=int, default=DEFAULT_SEED)
    p.add_argument("--rounds", type=int, default=4)
    p.add_argument("--out", help="output directory (default demo_out)")
    p.set_defaults(func=cmd_demo)

    p = sub.add_parser("report", help="aggregate manifests into a sparsity table")
    p.add_argument("manifests", nargs="+")
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    threads = os.environ.get("SLTK_THREADS")
    try:
        limit = int(threads) if threads else None
        if limit is not None and limit < 1:
            raise ParameterError(f"SLTK_THREADS must be >= 1, got {threads}")
        with threadpool_limits(limits=limit):
            return args.func(args)
    except ArchiveFormatError as exc:
        sys.stderr.write(f"error: {exc}\n")
        return EXIT_IO
    except OSError as exc:
        sys.stderr.write(f"error: {exc}\n")
        return EXIT_IO
    except ValidationError as exc:
        sys.stderr.write(f"error: {exc}\n")
        return EXIT_VALIDATION
    except ValueError as exc:
        sys.stderr.write(f"error: {exc}\n")
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
