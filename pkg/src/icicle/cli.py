"""Command-line entry point.

    icicle gen-data  --spec data.ini --out stream.icds
    icicle train     run.ini [--set section.key=value ...]
    icicle eval      --checkpoint model.ickp --config run.ini
    icicle drift     a.ickp b.ickp --probes probes.icds
    icicle gradcheck [--tolerance 1e-4]
    icicle report    runs/default

Exit codes: 0 success, 2 bad config or arguments, 3 I/O failure,
4 training aborted, 5 gradient check failed.  ``ICICLE_SEED`` supplies the
seed when neither the command line nor the config file sets one.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import os
import sys
import tempfile
import time
from pathlib import Path

import numpy as np

from . import checkpoint as ck
from . import config as cf
from . import continual as C
from . import data as D
from . import losses as L
from . import metrics as M
from . import numerics as nx
from . import protonet as pn

SCHEMA_VERSION = 1

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_TRAINING = 4
EXIT_GRADCHECK = 5

log = logging.getLogger("icicle")


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


# ---------------------------------------------------------------- helpers

def write_atomic(path, payload: bytes | str) -> None:
    """Write through a temporary file so a failure never leaves a partial file."""
    path = Path(path)
    raw = payload.encode("utf-8") if isinstance(payload, str) else payload
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
        try:
            with os.fdopen(fd, "wb") as fh:
                fh.write(raw)
            os.replace(tmp, path)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise
    except OSError as exc:
        raise CliError(f"cannot write {path}: {exc.strerror or exc}", EXIT_IO) from None


def _seed_default() -> int | None:
    raw = os.environ.get(cf.SEED_ENV)
    if raw is None:
        return None
    try:
        return int(raw)
    except ValueError:
        raise CliError(f"{cf.SEED_ENV}={raw!r} is not an integer", EXIT_CONFIG) from None


def _finite(x):
    """JSON-safe number: NaN becomes null."""
    if x is None:
        return None
    x = float(x)
    return x if math.isfinite(x) else None


def _rows(matrix) -> list[list[float | None]]:
    return [[_finite(v) for v in row] for row in np.asarray(matrix, dtype=float)]


def _load_config(path, overrides, seed=None, method=None, output=None) -> cf.RunConfig:
    try:
        if path is None:
            cfg = cf.parse_config("", os.environ.get(cf.SEED_ENV))
            cf.apply_overrides(cfg, overrides)
        else:
            cfg = cf.load_config(path, overrides)
        if seed is not None:
            cf.set_value(cfg, "run.seed", str(seed))
        if method is not None:
            cf.set_value(cfg, "method.method", method)
        if output is not None:
            cf.set_value(cfg, "run.output", output)
        cfg.validate()
    except cf.ConfigError as exc:
        raise CliError(str(exc), EXIT_CONFIG) from None
    return cfg


def load_stream(cfg: cf.RunConfig) -> D.TaskStream:
    try:
        if cfg.data.dataset:
            dataset = D.load_dataset(cfg.data.dataset)
        else:
            dataset = D.generate_synthetic(cfg.synthetic_spec(), cfg.data_seed)
    except OSError as exc:
        raise CliError(f"cannot read dataset {cfg.data.dataset}: {exc.strerror}", EXIT_IO) from None
    except D.DataError as exc:
        raise CliError(f"bad dataset: {exc}", EXIT_CONFIG) from None
    try:
        return D.split_tasks(dataset, cfg.data.tasks, cfg.split_seed)
    except D.DataError as exc:
        raise CliError(str(exc), EXIT_CONFIG) from None


# ---------------------------------------------------------------- metrics document

def _episode_doc(ep: C.Episode) -> dict:
    ev = ep.evaluation
    comp = ep.compensation
    return {
        "episode": ep.task_id,
        "task_aware": [float(v) for v in ev.task_aware],
        "task_agnostic": [float(v) for v in ev.task_agnostic],
        "task_agnostic_comp": [float(v) for v in ev.task_agnostic_comp],
        "averages": {k: float(v) for k, v in ev.averages.items()},
        "compensation": None if comp is None else {
            "u": comp.u,
            "bias": [float(b) for b in comp.bias],
            "target_flips": comp.target_flips,
            "flips": comp.flips,
            "calibration_size": comp.calibration_size,
        },
        "drift": {str(t): v for t, v in ep.drift.per_task().items()},
        "best_epoch": ep.best_epoch,
        "stopped_early": ep.stopped_early,
        "epochs": [
            {"phase": e.phase, "epoch": e.epoch, "train_loss": _finite(e.train_loss), "val_loss": _finite(e.val_loss)}
            for e in ep.log
        ],
    }


def _accuracy_matrix(episodes, mode: str) -> np.ndarray:
    n = len(episodes)
    out = np.full((n, n), np.nan)
    for e, ep in enumerate(episodes):
        row = getattr(ep.evaluation, mode)
        out[e, : len(row)] = row
    return out


def metrics_document(cfg: cf.RunConfig, stream: D.TaskStream, episodes, table: M.DriftTable | None,
                     status: str = "complete", error: str | None = None) -> dict:
    """Everything a run reports, in a fixed key order.  No wall-clock values."""
    method = cfg.method_config()
    doc = {
        "schema_version": SCHEMA_VERSION,
        "status": status,
        "error": error,
        "seed": cfg.run.seed,
        "method": method.method,
        "config": cf.config_dict(cfg),
        "tasks": [{"task_id": t.task_id, "classes": t.classes} for t in stream],
        "episodes": [_episode_doc(ep) for ep in episodes],
        "accuracy": {
            mode: _rows(_accuracy_matrix(episodes, mode))
            for mode in ("task_aware", "task_agnostic", "task_agnostic_comp")
        },
        "final": None,
        "drift_table": None,
    }
    if episodes:
        final = episodes[-1].evaluation.averages
        headline = final["task_agnostic_comp"] if method.uses_compensation else final["task_agnostic"]
        doc["final"] = {**final, "headline": headline}
    if table is not None:
        doc["drift_table"] = {
            "percentile": table.percentile,
            "prototype_counts": table.prototype_counts,
            "iou": _rows(table.iou),
            "icd": _rows(table.icd),
            "summary": table.summary() if len(episodes) > 1 else None,
        }
    return doc


def document_text(doc: dict) -> str:
    return json.dumps(doc, indent=2) + "\n"


def drift_rows_csv(report: M.DriftReport) -> str:
    """One row per old prototype: mean ICD and IoU over the probe images."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["prototype", "task", "icd", "iou"])
    if report.icd.size:
        icd, iou = report.icd.mean(axis=0), report.iou.mean(axis=0)
        for j, (t, a, b) in enumerate(zip(report.prototype_task, icd, iou)):
            writer.writerow([j, int(t), f"{a:.6f}", f"{b:.6f}"])
    return buf.getvalue()


def _write_tables(out: Path, doc: dict) -> None:
    for mode, rows in doc["accuracy"].items():
        write_atomic(out / f"accuracy_{mode}.csv", M.matrix_csv(np.array(rows, dtype=float)))
    table = doc.get("drift_table")
    if table is not None:
        for name in ("iou", "icd"):
            write_atomic(out / f"drift_{name}.csv", M.matrix_csv(np.array(table[name], dtype=float)))


def _write_heatmaps(out: Path, model: pn.IcicleModel, probes: dict[int, np.ndarray], per_task: int) -> None:
    eta = model.config.eta
    comment = pn.similarity_pgm_comment(eta)
    slices = model.head_slices()
    for t, images in probes.items():
        if t > len(model.heads) or per_task <= 0:
            continue
        chosen = images[:per_task]
        maps = M.similarity_maps(model, chosen)
        ps = slices[t - 1][0]
        for i, img in enumerate(chosen):
            write_atomic(out / "heatmaps" / f"task{t}_probe{i}.ppm", D.ppm_bytes(img))
            for j in range(ps.start, ps.stop):
                raw = D.pgm_bytes(pn.similarity_map_to_bytes(maps[i, :, :, j], eta), comment)
                write_atomic(out / "heatmaps" / f"task{t}_probe{i}_proto{j}.pgm", raw)


# ---------------------------------------------------------------- commands

def cmd_gen_data(args) -> int:
    cfg = _load_config(args.spec, args.set or [], seed=args.seed)
    try:
        dataset = D.generate_synthetic(cfg.synthetic_spec(), cfg.data_seed)
        stream = D.split_tasks(dataset, cfg.data.tasks, cfg.split_seed)
    except D.DataError as exc:
        raise CliError(f"invalid spec: {exc}", EXIT_CONFIG) from None
    out = Path(args.out)
    lines = [
        f"# synthetic dataset, data seed {cfg.data_seed}, split seed {cfg.split_seed}",
        f"classes {dataset.num_classes} images {len(dataset)} shape {'x'.join(map(str, dataset.images.shape[1:]))}",
        "common glyphs " + " ".join(map(str, dataset.common_glyphs)),
    ]
    lines += [f"class {c} glyphs " + " ".join(map(str, g)) for c, g in dataset.class_glyphs.items()]
    manifest = "\n".join(lines) + "\n" + stream.manifest()
    write_atomic(out, D.dataset_bytes(dataset))
    write_atomic(out.with_name(out.name + ".manifest"), manifest)
    print(f"wrote {out}: {dataset.num_classes} classes, {len(dataset)} images, {len(stream)} tasks")
    for t in stream:
        print(f"  task {t.task_id}: classes {t.classes} train {len(t.train)} val {len(t.val)} test {len(t.test)}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _load_config(args.config, args.set or [], seed=args.seed, method=args.method, output=args.output)
    out = Path(cfg.run.output)
    stream = load_stream(cfg)
    image_shape = stream[0].train.images.shape[1:]
    engine = cfg.engine(image_shape)
    write_atomic(out / "config.ini", cf.format_config(cfg))
    write_atomic(out / "manifest.txt", stream.manifest())
    episodes: list[C.Episode] = []
    start = time.perf_counter()

    def flush(status, table=None, error=None):
        doc = metrics_document(cfg, stream, episodes, table, status, error)
        write_atomic(out / "metrics.json", document_text(doc))
        _write_tables(out, doc)
        return doc

    def on_episode(ep: C.Episode):
        episodes.append(ep)
        comp = engine.compensation
        ck.save_checkpoint(out / f"episode_{ep.task_id}.ickp", engine.model, None if comp is None else comp.bias)
        if ep.task_id > 1:
            write_atomic(out / f"episode_{ep.task_id}_drift.csv", drift_rows_csv(ep.drift))
        flush("running")
        log.info("task %d: %s", ep.task_id, {k: round(v, 4) for k, v in ep.evaluation.averages.items()})

    try:
        result = C.run_experiment(
            stream, engine, cfg.eval.probes_per_task, cfg.eval.percentile, cfg.eval.probe_seed, on_episode
        )
    except (C.TrainingError, nx.NumericsError) as exc:
        flush("aborted", error=str(exc))
        print(f"training aborted: {exc}", file=sys.stderr)
        return EXIT_TRAINING
    doc = flush("complete", result.drift)
    comp = engine.compensation
    ck.save_checkpoint(out / "model.ickp", engine.model, None if comp is None else comp.bias)
    _write_heatmaps(out, engine.model, result.probes, cfg.eval.heatmap_probes)
    write_atomic(out / "timing.json", json.dumps({"wall_clock_seconds": time.perf_counter() - start}) + "\n")
    final = doc["final"]
    print(
        f"{cfg.method.method} seed {cfg.run.seed}: task-aware {final['task_aware']:.4f} "
        f"task-agnostic {final['task_agnostic']:.4f} compensated {final['task_agnostic_comp']:.4f}"
    )
    return EXIT_OK


def _load_ckpt(path):
    try:
        return ck.load_checkpoint(path)
    except OSError as exc:
        raise CliError(f"cannot read checkpoint {path}: {exc.strerror}", EXIT_IO) from None
    except (ck.CheckpointError, pn.ModelError, KeyError, TypeError) as exc:
        raise CliError(f"bad checkpoint {path}: {exc}", EXIT_CONFIG) from None


def cmd_eval(args) -> int:
    cfg = _load_config(args.config, args.set or [], seed=args.seed)
    model, bias, _ = _load_ckpt(args.checkpoint)
    stream = load_stream(cfg)
    if len(model.heads) > len(stream):
        raise CliError("checkpoint has more heads than the stream has tasks", EXIT_CONFIG)
    tasks = list(stream)[: len(model.heads)]
    for head, task in zip(model.heads, tasks):
        if list(head.classes) != list(task.classes):
            raise CliError(f"head {head.task_id} classes do not match task {task.task_id}", EXIT_CONFIG)
    comp = None
    if bias is not None and len(model.heads) > 1:
        comp = C.CompensationResult(list(bias), cfg.eval.u, 0, [], 0)
    report = {
        "heads": len(model.heads),
        "task_aware": M.task_accuracies(model, tasks, "task_aware"),
        "task_agnostic": M.task_accuracies(model, tasks, "task_agnostic"),
    }
    report["task_agnostic_comp"] = (
        report["task_agnostic"] if comp is None else M.task_accuracies(model, tasks, "task_agnostic", comp)
    )
    report["averages"] = {k: M.average_incremental_accuracy(report[k]) for k in
                          ("task_aware", "task_agnostic", "task_agnostic_comp")}
    text = json.dumps(report, indent=2) + "\n"
    if args.out:
        write_atomic(args.out, text)
    sys.stdout.write(text)
    return EXIT_OK


def _load_probes(paths) -> np.ndarray:
    images = []
    for p in paths:
        try:
            raw = Path(p).read_bytes()
        except OSError as exc:
            raise CliError(f"cannot read probes {p}: {exc.strerror}", EXIT_IO) from None
        try:
            if raw[:4] == D.DATASET_MAGIC:
                images.extend(D.parse_dataset(raw).images)
            else:
                arr, _ = D.parse_pnm(raw)
                if arr.ndim != 3:
                    raise D.DataError(f"{p} is not a colour image")
                images.append(arr.astype(np.float32) / 255.0)
        except D.DataError as exc:
            raise CliError(f"bad probe file {p}: {exc}", EXIT_CONFIG) from None
    if not images:
        raise CliError("probe set is empty", EXIT_CONFIG)
    return np.stack(images)


def _check_compatible(a: pn.IcicleModel, b: pn.IcicleModel) -> None:
    ca, cb = a.config, b.config
    if (ca.depth, ca.image_shape, ca.backbone) != (cb.depth, cb.image_shape, cb.backbone):
        raise CliError("checkpoints differ in architecture", EXIT_CONFIG)
    if len(a.heads) > len(b.heads):
        raise CliError("first checkpoint has more heads than the second", EXIT_CONFIG)
    for ha, hb in zip(a.heads, b.heads):
        if list(ha.classes) != list(hb.classes) or ha.num_prototypes != hb.num_prototypes:
            raise CliError(f"head {ha.task_id} differs between checkpoints", EXIT_CONFIG)


def cmd_drift(args) -> int:
    a, _, _ = _load_ckpt(args.a)
    b, _, _ = _load_ckpt(args.b)
    _check_compatible(a, b)
    probes = _load_probes(args.probes)
    if probes.shape[1:] != tuple(a.config.image_shape):
        raise CliError(f"probe images are {probes.shape[1:]}, model expects {a.config.image_shape}", EXIT_CONFIG)
    if not 0.0 < args.percentile < 100.0:
        raise CliError("percentile must lie in (0, 100)", EXIT_CONFIG)
    report = M.drift_report(pn.snapshot(a), b, probes, len(b.heads), args.percentile)
    text = drift_rows_csv(report)
    if args.out:
        write_atomic(args.out, text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def _gradcheck_case(rng: np.random.Generator, index: int):
    """Small random two-head model, snapshot, batch and loss settings."""
    placements = [p.value for p in L.RegPlacement]
    placement = placements[index % 3]
    ir = (0.0, 0.01, 1.0)[(index // 3) % 3]
    size = int(rng.integers(6, 9))
    ch = int(rng.integers(2, 4))
    backbone = (pn.ConvSpec(3, 1, 0, ch),)
    depth = int(rng.integers(2, 5))
    k = int(rng.integers(1, 3))
    cfg = pn.ModelConfig(image_shape=(size, size, 3), backbone=backbone, depth=depth, protos_per_class=k)
    model = pn.IcicleModel(cfg, seed=int(rng.integers(2**31)))
    c1, c2 = int(rng.integers(2, 4)), int(rng.integers(2, 4))
    model.add_head(range(c1), rng.uniform(size=(k * c1, depth)))
    snap = pn.snapshot(model)
    model.add_head(range(c1, c1 + c2), rng.uniform(size=(k * c2, depth)))
    for p in model.parameters():
        p.data += rng.normal(0.0, 0.05, p.shape)
    n = int(rng.integers(2, 4))
    images = rng.uniform(size=(n, size, size, 3))
    labels = rng.integers(0, c1 + c2, size=n)
    gamma = float(rng.choice([1 / 49, 0.1, 0.25]))
    weights = L.LossWeights(1.0, 0.8, -0.08, ir)
    desc = (f"{size}x{size} D={depth} K={k} heads={c1}+{c2} batch={n} "
            f"placement={placement} ir={ir:g} gamma={gamma:.4f}")
    return model, snap, images, labels, weights, gamma, placement, desc


def run_gradcheck(seed: int, tolerance: float, cases: int, max_coords: int | None, stream=None) -> bool:
    stream = stream or sys.stdout
    rng = nx.make_rng(seed)
    ok = True
    for i in range(cases):
        model, snap, images, labels, weights, gamma, placement, desc = _gradcheck_case(rng, i)
        report = nx.grad_check(
            lambda: L.total_loss(model, snap, images, labels, weights, gamma, placement).total,
            model.parameters(), tol=tolerance, max_coords=max_coords, rng=rng,
        )
        worst = max(report.max_rel_error, key=report.max_rel_error.get)
        status = "ok" if report.passed else "FAIL"
        stream.write(f"case {i:2d} {status} max_rel_error={report.overall:.3e} worst={worst} {desc}\n")
        if not report.passed:
            ok = False
            for name, err in report.max_rel_error.items():
                if err > tolerance:
                    stream.write(f"    {name}: {err:.3e} at {report.worst_index[name]}\n")
    stream.write(f"{'passed' if ok else 'failed'}: {cases} cases, tolerance {tolerance:g}\n")
    return ok


def cmd_gradcheck(args) -> int:
    seed = args.seed if args.seed is not None else (_seed_default() or 0)
    if args.cases < 1:
        raise CliError("need at least one case", EXIT_CONFIG)
    ok = run_gradcheck(seed, args.tolerance, args.cases, args.max_coords)
    return EXIT_OK if ok else EXIT_GRADCHECK


def cmd_report(args) -> int:
    run = Path(args.run)
    try:
        doc = json.loads((run / "metrics.json").read_text(encoding="utf-8"))
    except OSError as exc:
        raise CliError(f"cannot read {run / 'metrics.json'}: {exc.strerror}", EXIT_IO) from None
    except json.JSONDecodeError as exc:
        raise CliError(f"metrics document is not valid JSON: {exc}", EXIT_CONFIG) from None
    if doc.get("schema_version") != SCHEMA_VERSION:
        raise CliError(f"unsupported schema_version {doc.get('schema_version')!r}", EXIT_CONFIG)
    out = Path(args.out) if args.out else run
    _write_tables(out, doc)
    lines = [f"method {doc['method']} seed {doc['seed']} status {doc['status']}"]
    for mode, rows in doc["accuracy"].items():
        lines.append(f"{mode} accuracy (rows: after episode, columns: task)")
        lines += ["  " + " ".join("  NA  " if v is None else f"{v:.4f}" for v in row) for row in rows]
    if doc["final"]:
        lines.append("final averages " + " ".join(f"{k}={v:.4f}" for k, v in doc["final"].items()))
    table = doc.get("drift_table")
    if table and table.get("summary"):
        lines.append("drift " + " ".join(f"{k}={v:.4f}" for k, v in table["summary"].items()))
    text = "\n".join(lines) + "\n"
    write_atomic(out / "report.txt", text)
    sys.stdout.write(text)
    return EXIT_OK


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="icicle", description=__doc__.split("\n\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate the synthetic dataset as an ICDS file")
    p.add_argument("--spec", help="config file; only [data] and [run] are used")
    p.add_argument("--seed", type=int)
    p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="run a class-incremental experiment from a config file")
    p.add_argument("config")
    p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override a config value")
    p.add_argument("--seed", type=int)
    p.add_argument("--method", choices=C.METHODS)
    p.add_argument("--output")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="accuracy of a checkpoint on the test splits of its tasks")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE")
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("drift", help="per-prototype ICD and IoU between two checkpoints")
    p.add_argument("a")
    p.add_argument("b")
    p.add_argument("--probes", nargs="+", required=True, help="ICDS files or PPM images")
    p.add_argument("--percentile", type=float, default=95.0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_drift)

    p = sub.add_parser("gradcheck", help="finite-difference check of the full objective")
    p.add_argument("--seed", type=int)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--cases", type=int, default=24)
    p.add_argument("--max-coords", type=int, default=None, help="probe at most this many entries per parameter")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("report", help="rebuild CSV tables and a text summary from a run directory")
    p.add_argument("run")
    p.add_argument("--out")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.ERROR, format="%(name)s: %(message)s")
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
