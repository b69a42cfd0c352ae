"""Command-line entry point.

Subcommands orchestrate the library modules: simulate/ingest/fetch produce
panel CSVs, detect/evaluate run the calibrated alarm pipeline, smooth and
groundtruth expose the retrospective smoother, and network/cluster build
epidemic-distance graphs. Every command writes its primary outputs plus a
run manifest (config snapshot, input digests, timings) into --out.

Exit codes: 0 success, 2 usage, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import hashlib
import json
import os
import sys
import time
from datetime import datetime, timezone

import click
import numpy as np
import yaml

from . import __version__
from .errors import DataError, NumericError
from .panel import (
    StreamPanel,
    format_date,
    load_panel_csv,
    load_region_metadata,
    parse_date,
    write_panel_csv,
    write_region_metadata,
)

EXIT_DATA = 3
EXIT_NUMERIC = 4


def _jobs_default() -> int:
    return int(os.environ.get("TRENDWATCH_JOBS", "1"))


def _sha256(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()


class Run:
    """Collects manifest fields while a command executes."""

    def __init__(self, command: str, out_dir: str, params: dict):
        self.command = command
        self.out = out_dir
        self.params = {k: v for k, v in params.items() if not callable(v)}
        self.inputs: dict[str, str] = {}
        self.timings: dict[str, float] = {}
        self._t0 = time.time()
        os.makedirs(out_dir, exist_ok=True)

    def input(self, path: str) -> str:
        self.inputs[path] = _sha256(path)
        return path

    def stage(self, name: str):
        run = self

        class _Stage:
            def __enter__(self):
                self.t = time.time()

            def __exit__(self, *exc):
                run.timings[name] = round(time.time() - self.t, 3)

        return _Stage()

    def path(self, name: str) -> str:
        return os.path.join(self.out, name)

    def finish(self) -> None:
        manifest = {
            "command": self.command,
            "version": __version__,
            "params": self.params,
            "inputs": self.inputs,
            "timings": self.timings,
            "wall_clock": round(time.time() - self._t0, 3),
            "finished_at": datetime.now(timezone.utc).isoformat(),
        }
        with open(self.path("manifest.json"), "w") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True, default=str)
            fh.write("\n")


def _load_panel(run: Run, path: str) -> StreamPanel:
    panel, issues = load_panel_csv(run.input(path))
    if issues:
        click.echo(f"{len(issues)} malformed rows skipped", err=True)
    return panel


def _config_map(path: str | None) -> dict:
    if path is None:
        return {}
    with open(path) as fh:
        cfg = yaml.safe_load(fh) or {}
    if not isinstance(cfg, dict):
        raise DataError(f"{path}: config must be a mapping of command -> options")
    return cfg


@click.group(context_settings={"help_option_names": ["-h", "--help"]})
@click.option("--config", type=click.Path(exists=True), default=None, help="YAML defaults per command.")
@click.option("--jobs", type=int, default=None, help="Worker processes (env: TRENDWATCH_JOBS).")
@click.version_option(__version__)
@click.pass_context
def main(ctx, config, jobs):
    """Real-time trend detection for epidemiological count panels."""
    ctx.default_map = _config_map(config)
    ctx.obj = {"jobs": jobs if jobs is not None else _jobs_default()}


@main.command()
@click.option("--panel", "panel_path", required=True, type=click.Path(exists=True))
@click.option("--out", required=True, type=click.Path())
@click.pass_obj
def ingest(obj, panel_path, out):
    """Validate a raw panel CSV and write the normalized panel."""
    run = Run("ingest", out, {"panel": panel_path})
    with run.stage("load"):
        panel, issues = load_panel_csv(run.input(panel_path))
    with run.stage("write"):
        write_panel_csv(panel, run.path("panel.csv"))
        with open(run.path("issues.csv"), "w") as fh:
            fh.write("line,reason\n")
            for issue in issues:
                fh.write(f"{issue.line},{issue.reason}\n")
    run.finish()
    click.echo(f"{len(panel.observations)} observations, {len(issues)} rows skipped")


@main.command()
@click.option("--base-url", default="https://api.delphi.cmu.edu/epidata/covidcast/")
@click.option("--signal", required=True, help="SOURCE:SIGNAL, e.g. hhs:confirmed_admissions_covid_1d")
@click.option("--geo-type", default="hrr")
@click.option("--geo-values", required=True, help="Comma-separated region ids.")
@click.option("--start", required=True, help="ISO start date.")
@click.option("--end", required=True, help="ISO end date.")
@click.option("--stream-id", default=None, help="Stream id in the output panel (default: signal).")
@click.option("--out", required=True, type=click.Path())
def fetch(base_url, signal, geo_type, geo_values, start, end, stream_id, out):
    """Download a signal from an epidata API into a panel CSV."""
    from .panel import fetch_epidata

    run = Run("fetch", out, {"signal": signal, "geo_type": geo_type, "geo_values": geo_values, "start": start, "end": end})
    with run.stage("fetch"):
        panel = fetch_epidata(
            base_url,
            signal,
            geo_type,
            geo_values.split(","),
            (parse_date(start), parse_date(end)),
        )
    if stream_id is not None and stream_id != signal:
        panel = StreamPanel(
            {(r, stream_id, d): v for (r, _, d), v in panel.observations.items()},
            {stream_id: panel.stream_kind(signal)},
        )
    with run.stage("write"):
        write_panel_csv(panel, run.path("panel.csv"))
    run.finish()
    click.echo(f"fetched {len(panel.observations)} observations")


@main.command()
@click.option("--scenario", default="desk540", show_default=True)
@click.option("--seed", type=int, default=20240101, show_default=True)
@click.option("--regions", type=int, default=100, show_default=True)
@click.option("--days", type=int, default=540, show_default=True)
@click.option("--out", required=True, type=click.Path())
def simulate(scenario, seed, regions, days, out):
    """Generate a synthetic benchmark panel with planted waves."""
    from .groundtruth import complement_intervals, write_intervals_csv
    from .synthetic import desk540, generate_panel, region_metadata

    if scenario != "desk540":
        raise DataError(f"unknown scenario: {scenario}")
    run = Run("simulate", out, {"scenario": scenario, "seed": seed, "regions": regions, "days": days})
    with run.stage("generate"):
        spec = desk540(seed=seed, n_regions=regions, n_days=days)
        panel, truth = generate_panel(spec)
    with run.stage("write"):
        write_panel_csv(panel, run.path("panel.csv"))
        write_intervals_csv(run.path("truth.csv"), truth)
        write_intervals_csv(run.path("null.csv"), complement_intervals(truth, panel.date_range))
        write_region_metadata({m.region_id: m for m in region_metadata(spec)}, run.path("regions.csv"))
    run.finish()
    click.echo(f"wrote {len(panel.observations)} observations, {truth.total()} planted waves")


@main.command()
@click.option("--panel", "panel_path", required=True, type=click.Path(exists=True))
@click.option("--streams", required=True, help="Comma-separated stream ids (first is primary).")
@click.option("--truth", "truth_path", required=True, type=click.Path(exists=True))
@click.option("--null", "null_path", required=True, type=click.Path(exists=True))
@click.option("--window", type=int, default=21, show_default=True)
@click.option("--model", default="linear_log", show_default=True)
@click.option("--fpr", type=float, default=0.05, show_default=True)
@click.option("--fuse/--no-fuse", default=False)
@click.option("--graph", "graph_path", type=click.Path(exists=True), default=None, help="Neighbor graph CSV for aggregation.")
@click.option("--include-self/--neighbors-only", default=False)
@click.option("--scope", type=click.Choice(["pooled", "per_region"]), default="pooled", show_default=True)
@click.option("--out", required=True, type=click.Path())
@click.pass_obj
def detect(obj, panel_path, streams, truth_path, null_path, window, model, fpr, fuse, graph_path, include_self, scope, out):
    """Calibrated alarms and a power/delay report for one detector."""
    from .evaluation import (
        DetectionConfig,
        alarms_by_region,
        calibrate,
        detector_stats,
        score_power_delay,
        write_alarms_csv,
        write_report_json,
    )
    from .groundtruth import load_intervals_csv

    run = Run("detect", out, {
        "panel": panel_path, "streams": streams, "window": window, "model": model,
        "fpr": fpr, "fuse": fuse, "graph": graph_path, "include_self": include_self, "scope": scope,
    })
    panel = _load_panel(run, panel_path)
    truth = load_intervals_csv(run.input(truth_path))
    null_set = load_intervals_csv(run.input(null_path), label="null")
    graph = None
    if graph_path is not None:
        graph = _load_graph(run.input(graph_path))
    config = DetectionConfig(fpr_target=fpr, window_sizes=(window,), calibration_scope=scope)
    stream_list = streams.split(",")
    with run.stage("fit"):
        stats = detector_stats(
            panel, stream_list, window, model, fuse=fuse, graph=graph,
            include_self=include_self, jobs=obj["jobs"],
        )
    with run.stage("calibrate"):
        threshold = calibrate(stats, null_set, config)
        alarms = alarms_by_region(stats, threshold)
    with run.stage("score"):
        report = score_power_delay(alarms, truth, null_set, config.max_delay, threshold, stats)
    write_alarms_csv(run.path("alarms.csv"), alarms)
    write_report_json(run.path("report.json"), report)
    run.finish()
    click.echo(f"power {report.power:.1f}% mean delay {report.mean_delay:.1f}d realized FPR {report.realized_fpr:.4f}")


@main.command()
@click.option("--panel", "panel_path", required=True, type=click.Path(exists=True))
@click.option("--region", required=True)
@click.option("--streams", required=True)
@click.option("--lam", type=float, default=10000.0, show_default=True)
@click.option("--penalty", type=click.Choice(["l1", "l2"]), default="l1", show_default=True)
@click.option("--out", required=True, type=click.Path())
def smooth(panel_path, region, streams, lam, penalty, out):
    """Retrospective penalized smoothing for one region."""
    from .smoother import SmoothConfig, panel_matrix, smooth_multivariate, write_smooth_csv

    run = Run("smooth", out, {"panel": panel_path, "region": region, "streams": streams, "lam": lam, "penalty": penalty})
    panel = _load_panel(run, panel_path)
    stream_list = streams.split(",")
    models = ["poisson" if panel.stream_kind(s) == "count" else "lognormal" for s in stream_list]
    with run.stage("smooth"):
        dates, Y = panel_matrix(panel, region, stream_list)
        result = smooth_multivariate(dates, Y, SmoothConfig(lam=lam, penalty=penalty), models=models)
    write_smooth_csv(result, stream_list, run.path("smooth.csv"))
    run.finish()
    click.echo(f"{'converged' if result.converged else 'max iterations'} in {result.n_iter} iterations")


@main.command()
@click.option("--panel", "panel_path", required=True, type=click.Path(exists=True))
@click.option("--streams", required=True, help="Gold-standard streams for the consensus.")
@click.option("--lambda-grid", default="1000,10000,100000", show_default=True)
@click.option("--penalty", type=click.Choice(["l1", "l2"]), default="l1", show_default=True)
@click.option("--min-duration", type=int, default=7, show_default=True)
@click.option("--out", required=True, type=click.Path())
@click.pass_obj
def groundtruth(obj, panel_path, streams, lambda_grid, penalty, min_duration, out):
    """Consensus increasing/null intervals across the penalty grid."""
    from .groundtruth import build_ground_truth, write_intervals_csv

    run = Run("groundtruth", out, {"panel": panel_path, "streams": streams, "lambda_grid": lambda_grid, "penalty": penalty, "min_duration": min_duration})
    panel = _load_panel(run, panel_path)
    grid = tuple(float(v) for v in lambda_grid.split(","))
    with run.stage("smooth"):
        gt = build_ground_truth(panel, streams.split(","), grid, penalty, min_duration, jobs=obj["jobs"])
    write_intervals_csv(run.path("truth.csv"), gt.increasing)
    write_intervals_csv(run.path("null.csv"), gt.null)
    with open(run.path("excluded.csv"), "w") as fh:
        fh.write("region_id,reason\n")
        for region in sorted(gt.excluded):
            fh.write(f"{region},{gt.excluded[region]}\n")
    run.finish()
    click.echo(f"{gt.increasing.total()} intervals in {len(gt.increasing.regions)} regions; {len(gt.excluded)} excluded")


@main.command()
@click.option("--panel", "panel_path", required=True, type=click.Path(exists=True))
@click.option("--streams", required=True)
@click.option("--window", type=int, default=21, show_default=True)
@click.option("--model", default="linear_log", show_default=True)
@click.option("--out", required=True, type=click.Path())
@click.pass_obj
def fuse(obj, panel_path, streams, window, model, out):
    """Stouffer-combined p-values across streams, per region and date."""
    from .fusion import fuse_region, write_fused_csv
    from .localreg import rolling_fit

    run = Run("fuse", out, {"panel": panel_path, "streams": streams, "window": window, "model": model})
    panel = _load_panel(run, panel_path)
    stream_list = streams.split(",")
    fused = []
    with run.stage("fit"):
        for region in panel.regions:
            series = [rolling_fit(panel, region, s, window, model) for s in stream_list]
            fused.append(fuse_region(series))
    write_fused_csv(fused, run.path("fused.csv"))
    run.finish()
    click.echo(f"fused {len(fused)} regions")


@main.command()
@click.option("--panel", "panel_path", required=True, type=click.Path(exists=True))
@click.option("--stream", required=True, help="Stream whose growth history defines distances.")
@click.option("--window", type=int, default=21, show_default=True)
@click.option("--gamma", type=float, default=1.0, show_default=True)
@click.option("--k", type=int, default=3, show_default=True)
@click.option("--scope", type=click.Choice(["all", "in_state"]), default="all", show_default=True)
@click.option("--metadata", "metadata_path", type=click.Path(exists=True), default=None)
@click.option("--out", required=True, type=click.Path())
@click.pass_obj
def network(obj, panel_path, stream, window, gamma, k, scope, metadata_path, out):
    """Learn soft-DTW distances and the k-nearest-neighbor graph."""
    from .localreg import rolling_fit
    from .network import distance_matrix, knn_graph, write_distance_csv, write_graph_csv

    run = Run("network", out, {"panel": panel_path, "stream": stream, "window": window, "gamma": gamma, "k": k, "scope": scope})
    panel = _load_panel(run, panel_path)
    metadata = None
    if metadata_path is not None:
        metadata = load_region_metadata(run.input(metadata_path))
    with run.stage("fit"):
        fits = {r: rolling_fit(panel, r, stream, window) for r in panel.regions}
    with run.stage("distances"):
        dm, excluded = distance_matrix(fits, gamma, jobs=obj["jobs"])
    with run.stage("graph"):
        graph = knn_graph(dm, k, scope, metadata)
    write_distance_csv(run.path("distances.csv"), dm)
    write_graph_csv(run.path("graph.csv"), graph)
    run.finish()
    click.echo(f"{len(dm.region_order)} regions, {len(excluded)} excluded, k={k}")


@main.command()
@click.option("--distances", "distances_path", required=True, type=click.Path(exists=True))
@click.option("--k", type=int, default=10, show_default=True)
@click.option("--embed-dim", type=int, default=10, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", required=True, type=click.Path())
def cluster(distances_path, k, embed_dim, seed, out):
    """K-means clusters on the MDS embedding of a distance matrix."""
    from .network import cluster_regions, load_distance_csv, write_cluster_csv

    run = Run("cluster", out, {"distances": distances_path, "k": k, "embed_dim": embed_dim, "seed": seed})
    dm = load_distance_csv(run.input(distances_path))
    with run.stage("cluster"):
        labels = cluster_regions(dm, k, embed_dim, seed)
    write_cluster_csv(run.path("clusters.csv"), labels)
    run.finish()
    click.echo(f"{len(labels)} regions in {k} clusters")


@main.command()
@click.option("--panel", "panel_path", required=True, type=click.Path(exists=True))
@click.option("--streams", required=True)
@click.option("--truth", "truth_path", required=True, type=click.Path(exists=True))
@click.option("--null", "null_path", required=True, type=click.Path(exists=True))
@click.option("--windows", default="7,14,21,28,35", show_default=True)
@click.option("--model", default="linear_log", show_default=True)
@click.option("--fpr", type=float, default=0.05, show_default=True)
@click.option("--fuse/--no-fuse", default=False)
@click.option("--ma-baseline/--no-ma-baseline", default=False)
@click.option("--out", required=True, type=click.Path())
@click.pass_obj
def evaluate(obj, panel_path, streams, truth_path, null_path, windows, model, fpr, fuse, ma_baseline, out):
    """Window-size sweep of power, delay, and realized FPR."""
    from .evaluation import DetectionConfig, window_sweep, write_sweep_csv
    from .groundtruth import load_intervals_csv

    run = Run("evaluate", out, {"panel": panel_path, "streams": streams, "windows": windows, "model": model, "fpr": fpr, "fuse": fuse, "ma_baseline": ma_baseline})
    panel = _load_panel(run, panel_path)
    truth = load_intervals_csv(run.input(truth_path))
    null_set = load_intervals_csv(run.input(null_path), label="null")
    config = DetectionConfig(fpr_target=fpr, window_sizes=tuple(int(w) for w in windows.split(",")))
    with run.stage("sweep"):
        rows = window_sweep(
            panel, streams.split(","), truth, null_set, config,
            model=model, fuse=fuse, ma_baseline=ma_baseline, jobs=obj["jobs"],
        )
    write_sweep_csv(run.path("sweep.csv"), rows)
    run.finish()
    for row in rows:
        click.echo(f"window {row.window}: power {row.power:.1f}% delay {row.mean_delay:.1f}d fpr {row.realized_fpr:.4f}")


def _load_graph(path: str):
    import csv as _csv

    from .network import NeighborGraph

    neighbors: dict[str, list[tuple[int, str, float]]] = {}
    with open(path, newline="") as fh:
        reader = _csv.DictReader(fh)
        if reader.fieldnames is None or set(reader.fieldnames) < {"region_id", "neighbor_id", "rank", "distance"}:
            raise DataError(f"{path}: expected columns region_id,neighbor_id,rank,distance")
        for row in reader:
            neighbors.setdefault(row["region_id"], []).append(
                (int(row["rank"]), row["neighbor_id"], float(row["distance"]))
            )
    k = max((len(v) for v in neighbors.values()), default=0)
    return NeighborGraph(
        {r: tuple((n, d) for _, n, d in sorted(v)) for r, v in neighbors.items()}, k
    )


def entry() -> None:
    """Console-script wrapper mapping library errors to exit codes."""
    try:
        main(standalone_mode=False)
    except click.UsageError as exc:
        exc.show()
        sys.exit(2)
    except click.ClickException as exc:
        exc.show()
        sys.exit(1)
    except click.exceptions.Abort:
        sys.exit(130)
    except DataError as exc:
        click.echo(f"data error: {exc}", err=True)
        sys.exit(EXIT_DATA)
    except NumericError as exc:
        click.echo(f"numeric error: {exc}", err=True)
        sys.exit(EXIT_NUMERIC)


if __name__ == "__main__":
    entry()
