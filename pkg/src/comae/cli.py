"""Command-line operator surface: train / encode / eval / split / synth / report.

Every run writes its artifacts plus a ``manifest.json`` into one output
directory; the manifest snapshots the resolved configuration and arguments,
so a run can be reproduced from the manifest alone. Exit codes: 0 success,
2 usage error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import datetime
import json
import sys
from pathlib import Path

import click
import numpy as np

from .data import (
    DatasetFormatError,
    load_dataset,
    make_split,
    make_synthetic,
    save_dataset,
)
from .estimator import (
    ComaeHasher,
    NonFiniteLossError,
    TrainConfig,
    write_loss_trace,
)
from .evaluation import (
    curves,
    mean_average_precision,
    rank,
    separability,
    zero_shot_protocol,
)

EXIT_DATA_ERROR = 3
EXIT_NUMERIC_ERROR = 4

CHECKPOINT_FILE = "checkpoint.cmck"
LOSSES_FILE = "losses.csv"
MANIFEST_FILE = "manifest.json"


def _now():
    return datetime.datetime.now(datetime.timezone.utc).isoformat(timespec="seconds")


def _write_manifest(out_dir, payload):
    (out_dir / MANIFEST_FILE).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _run(command, out_dir, arguments, body):
    """Execute a subcommand body under a manifest that records the outcome."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": command,
        "arguments": arguments,
        "output_dir": str(out_dir),
        "started_at": _now(),
        "status": "running",
    }
    _write_manifest(out_dir, manifest)
    try:
        artifacts = body(out_dir)
    except (DatasetFormatError, OSError, ValueError) as exc:
        manifest.update(status="failed", error=str(exc), finished_at=_now())
        _write_manifest(out_dir, manifest)
        click.echo(f"error: {exc}", err=True)
        sys.exit(EXIT_DATA_ERROR)
    except NonFiniteLossError as exc:
        manifest.update(status="failed", error=str(exc), finished_at=_now())
        _write_manifest(out_dir, manifest)
        click.echo(f"error: {exc}", err=True)
        sys.exit(EXIT_NUMERIC_ERROR)
    manifest.update(status="success", artifacts=sorted(artifacts), finished_at=_now())
    _write_manifest(out_dir, manifest)


def _load_config(config_path, overrides, ablate):
    mapping = {}
    if config_path:
        for lineno, line in enumerate(Path(config_path).read_text().splitlines(), start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise click.UsageError(f"{config_path}:{lineno}: expected key=value, got {line!r}")
            key, _, value = line.partition("=")
            mapping[key.strip()] = value.strip()
    for item in overrides:
        if "=" not in item:
            raise click.UsageError(f"--set expects key=value, got {item!r}")
        key, _, value = item.partition("=")
        mapping[key.strip()] = value.strip()
    for component in ablate:
        mapping[f"disable_{component}"] = "true"
    try:
        return TrainConfig.from_mapping(mapping)
    except (ValueError, TypeError) as exc:
        raise click.UsageError(str(exc)) from exc


def _parse_cutoffs(text):
    cutoffs = []
    for token in text.split(","):
        token = token.strip().lower()
        if not token:
            continue
        if token == "all":
            cutoffs.append(None)
        else:
            try:
                cutoffs.append(int(token))
            except ValueError:
                raise click.UsageError(f"cutoffs must be integers or 'all', got {token!r}")
    if not cutoffs:
        raise click.UsageError("at least one cutoff is required")
    return cutoffs


def _select_indices(dataset, subset):
    if subset == "all":
        return np.arange(dataset.num_samples)
    classes = dataset.split.seen if subset == "seen" else dataset.split.unseen
    return dataset.indices_of(classes)


def _write_csv(path, header, rows):
    lines = [header] + [",".join(repr(v) if isinstance(v, float) else str(v) for v in row) for row in rows]
    Path(path).write_text("\n".join(lines) + "\n")


@click.group()
def main():
    """Attribute-driven zero-shot hashing toolkit."""


@main.command()
@click.option("--data", "data_path", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False))
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--set", "overrides", multiple=True, help="Override a config key, e.g. --set epochs=5.")
@click.option("--ablate", "ablate", multiple=True,
              type=click.Choice(["pointwise", "pairwise", "classwise"]),
              help="Disable a loss component (repeatable).")
def train(data_path, out_dir, config_path, overrides, ablate):
    """Train on the seen classes and write checkpoint + loss trace."""
    cfg = _load_config(config_path, overrides, ablate)

    def body(out):
        dataset = load_dataset(data_path)
        est = ComaeHasher.from_config(cfg).fit(dataset)
        est.save(out / CHECKPOINT_FILE)
        write_loss_trace(est.loss_trace_, out / LOSSES_FILE)
        return [CHECKPOINT_FILE, LOSSES_FILE]

    _run("train", out_dir, {"data": str(data_path), "config": cfg.to_mapping()}, body)


@main.command()
@click.option("--checkpoint", "checkpoint_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--data", "data_path", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False))
@click.option("--subset", type=click.Choice(["all", "seen", "unseen"]), default="all",
              show_default=True)
def encode(checkpoint_path, data_path, out_dir, subset):
    """Encode a dataset subset into a packed code database."""

    def body(out):
        dataset = load_dataset(data_path)
        est = ComaeHasher.load(checkpoint_path)
        indices = _select_indices(dataset, subset)
        db = est.encode_database(dataset, indices)
        db.save(out / "codes.cmhc", out / "codes.labels.csv")
        return ["codes.cmhc", "codes.labels.csv"]

    _run(
        "encode",
        out_dir,
        {"checkpoint": str(checkpoint_path), "data": str(data_path), "subset": subset},
        body,
    )


@main.command("eval")
@click.option("--checkpoint", "checkpoint_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--data", "data_path", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False))
@click.option("--cutoffs", default="5000,all", show_default=True,
              help="Comma-separated mAP cutoffs; 'all' means the whole gallery.")
@click.option("--gallery", type=click.Choice(["unseen", "all"]), default="unseen",
              show_default=True, help="Gallery for unseen-class queries.")
def eval_cmd(checkpoint_path, data_path, out_dir, cutoffs, gallery):
    """Retrieval metrics, curves, and the separability report."""
    cutoff_list = _parse_cutoffs(cutoffs)

    def body(out):
        dataset = load_dataset(data_path)
        est = ComaeHasher.load(checkpoint_path)
        db = est.encode_database(dataset)
        if dataset.split.unseen:
            queries, gallery_db, exclude = zero_shot_protocol(db, dataset.split.unseen, gallery)
        else:
            queries, gallery_db, exclude = db, db, np.arange(db.count)

        lines = [f"queries = {queries.count}", f"gallery = {gallery_db.count - 1} (leave-one-out)"]
        for cutoff in cutoff_list:
            value = mean_average_precision(queries, gallery_db, cutoff=cutoff, exclude_index=exclude)
            name = "all" if cutoff is None else str(cutoff)
            lines.append(f"mAP@{name} = {value!r}")
        curve_set = curves(queries, gallery_db, exclude_index=exclude)
        lines.append(f"AUC = {curve_set.auc!r}")
        if not curve_set.has_relevant:
            lines.append("warning: no query has a relevant gallery item; curves are all zero")

        report = separability(queries)
        lines.append(f"mean_intra = {report.mean_intra!r}")
        lines.append(f"mean_inter = {report.mean_inter!r}")
        lines.append(f"separability = {report.separability!r}")
        lines.append(f"separation_ratio = {report.separation_ratio!r}")
        if not report.has_intra:
            lines.append("warning: no class has two samples; intra histogram is empty")
        if not report.has_inter:
            lines.append("warning: single class; inter-class statistics are absent")
        (out / "metrics.txt").write_text("\n".join(lines) + "\n")

        _write_csv(
            out / "pr.csv",
            "radius,recall,precision",
            [
                (int(r), float(rc), float(pr))
                for r, rc, pr in zip(curve_set.radii, curve_set.recall, curve_set.precision)
            ],
        )
        _write_csv(
            out / "pan.csv",
            "n,precision",
            [(int(n), float(p)) for n, p in zip(curve_set.topn, curve_set.precision_at_n)],
        )
        _write_csv(
            out / "ran.csv",
            "n,recall",
            [(int(n), float(r)) for n, r in zip(curve_set.topn, curve_set.recall_at_n)],
        )
        centers = (report.bin_edges[:-1] + report.bin_edges[1:]) / 2.0
        _write_csv(
            out / "separability.csv",
            "distance,intra,inter",
            [
                (float(c), float(i), float(e))
                for c, i, e in zip(centers, report.intra_hist, report.inter_hist)
            ],
        )
        return ["metrics.txt", "pr.csv", "pan.csv", "ran.csv", "separability.csv"]

    _run(
        "eval",
        out_dir,
        {
            "checkpoint": str(checkpoint_path),
            "data": str(data_path),
            "cutoffs": cutoffs,
            "gallery": gallery,
        },
        body,
    )


@main.command()
@click.option("--data", "data_path", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--ratio", required=True, type=float, help="Fraction of classes marked unseen.")
@click.option("--seed", default=0, show_default=True, type=int)
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False))
def split(data_path, ratio, seed, out_dir):
    """Draw a seeded seen/unseen split and write split.txt."""

    def body(out):
        dataset = load_dataset(data_path)
        split_spec = make_split(dataset, ratio, seed)
        seen = ",".join(str(c) for c in sorted(split_spec.seen))
        unseen = ",".join(str(c) for c in sorted(split_spec.unseen))
        (out / "split.txt").write_text(seen + "\n" + unseen + "\n")
        return ["split.txt"]

    _run("split", out_dir, {"data": str(data_path), "ratio": ratio, "seed": seed}, body)


@main.command()
@click.option("--classes", required=True, type=int)
@click.option("--attributes", "num_attributes", default=8, show_default=True, type=int)
@click.option("--per-class", "per_class", required=True, type=int)
@click.option("--noise", default=0.05, show_default=True, type=float)
@click.option("--seed", default=0, show_default=True, type=int)
@click.option("--height", default=4, show_default=True, type=int)
@click.option("--width", default=4, show_default=True, type=int)
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False))
def synth(classes, num_attributes, per_class, noise, seed, height, width, out_dir):
    """Generate a synthetic attribute-recoverable dataset directory."""

    def body(out):
        dataset = make_synthetic(classes, num_attributes, per_class, noise, seed,
                                 height=height, width=width)
        save_dataset(dataset, out)
        return ["features.bin", "labels.csv", "attributes.csv", "split.txt"]

    _run(
        "synth",
        out_dir,
        {
            "classes": classes,
            "attributes": num_attributes,
            "per_class": per_class,
            "noise": noise,
            "seed": seed,
            "height": height,
            "width": width,
        },
        body,
    )


@main.command()
@click.option("--checkpoint", "checkpoint_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--data", "data_path", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False))
@click.option("--top", default=10, show_default=True, type=int, help="List length per query.")
@click.option("--gallery", type=click.Choice(["unseen", "all"]), default="unseen",
              show_default=True)
def report(checkpoint_path, data_path, out_dir, top, gallery):
    """Export the ranked retrieval list of every query as CSV."""

    def body(out):
        dataset = load_dataset(data_path)
        est = ComaeHasher.load(checkpoint_path)
        db = est.encode_database(dataset)
        if dataset.split.unseen:
            queries, gallery_db, exclude = zero_shot_protocol(db, dataset.split.unseen, gallery)
        else:
            queries, gallery_db, exclude = db, db, np.arange(db.count)
        codes = queries.codes()
        rows = []
        for qi in range(queries.count):
            order = rank(codes[qi], gallery_db)
            order = order[order != exclude[qi]][:top]
            query_code = queries.packed[qi]
            for position, gi in enumerate(order, start=1):
                distance = int(
                    np.bitwise_count(gallery_db.packed[gi] ^ query_code).sum()
                )
                rows.append(
                    (
                        qi,
                        position,
                        int(gi),
                        distance,
                        int(gallery_db.labels[gi] == queries.labels[qi]),
                    )
                )
        _write_csv(out / "ranked.csv", "query,rank,gallery_index,distance,relevant", rows)
        return ["ranked.csv"]

    _run(
        "report",
        out_dir,
        {
            "checkpoint": str(checkpoint_path),
            "data": str(data_path),
            "top": top,
            "gallery": gallery,
        },
        body,
    )


if __name__ == "__main__":
    main()
