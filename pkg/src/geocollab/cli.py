"""Operator entry points: serve, run scenarios, seed and export review data."""

from __future__ import annotations

import asyncio
import json
import logging
import random
import sys
from pathlib import Path

import click

from .config import ConfigError, load_config


@click.group()
def main():
    """Collaborative 3D GIS server and tooling."""


@main.command()
@click.option("--config", "config_path", type=click.Path(), default=None, help="JSON config file.")
@click.option("--host", default=None, help="Bind address.")
@click.option("--port", type=int, default=None, help="Bind port (0 = OS-assigned, printed at startup).")
@click.option("--assets", "asset_dir", type=click.Path(), default=None, help="Static asset directory served at /assets/.")
@click.option("--review-dir", default=None, help="Review store directory.")
@click.option("--max-sessions", type=int, default=None)
@click.option("--max-participants", type=int, default=None)
@click.option("--replay-capacity", type=int, default=None)
@click.option("--view-rate-hz", type=float, default=None, help="Max view_update broadcasts per second.")
@click.option("--write-timeout-s", type=float, default=None)
@click.option("--service-timeout-s", type=float, default=None)
@click.option("--endpoint", "endpoints", multiple=True, metavar="OP=URL", help="External service mapping; repeatable.")
@click.option("--log-level", default="INFO", show_default=True)
def serve(config_path, endpoints, log_level, **flags):
    """Run the collaboration server (sync sessions + review API + assets).

    Configuration precedence: flags > GEOCOLLAB_* environment > config file.
    """
    logging.basicConfig(level=getattr(logging, log_level.upper(), logging.INFO),
                        format="%(asctime)s %(levelname)s %(name)s %(message)s")
    overrides = {k: v for k, v in flags.items() if v is not None}
    if endpoints:
        mapping = {}
        for item in endpoints:
            if "=" not in item:
                click.echo(f"error: --endpoint must be OP=URL, got {item!r}", err=True)
                sys.exit(2)
            op, url = item.split("=", 1)
            mapping[op] = url
        overrides["service_endpoints"] = mapping
    try:
        config = load_config(config_path, overrides=overrides)
    except ConfigError as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(2)

    from .server import serve_async

    try:
        asyncio.run(serve_async(config))
    except KeyboardInterrupt:
        pass
    except OSError as exc:
        click.echo(f"error: cannot start server: {exc}", err=True)
        sys.exit(1)


@main.group()
def scenario():
    """Run simulation scenarios against an in-process server."""


def _print_report(report: dict, out: Path | None) -> None:
    for assertion in report["assertions"]:
        status = "PASS" if assertion["passed"] else "FAIL"
        click.echo(f"  [{status}] {assertion['check']}: {assertion.get('detail', '')}")
    if out is not None:
        out.write_text(json.dumps(report, indent=2, default=str), encoding="utf-8")
        click.echo(f"  report written to {out}")


@scenario.command()
@click.argument("path", type=click.Path())
@click.option("--report", "report_path", type=click.Path(), default=None, help="Write the JSON report here.")
def run(path, report_path):
    """Run one scenario file; exit 0 iff all assertions pass."""
    from .harness import Scenario, ScenarioError, ScenarioInvalid, run_scenario

    try:
        scenario_obj = Scenario.from_file(path)
        click.echo(f"scenario {scenario_obj.name} (seed {scenario_obj.seed})")
        report = run_scenario(scenario_obj)
    except ScenarioInvalid as exc:
        click.echo(f"error: invalid scenario: {exc}", err=True)
        sys.exit(2)
    except ScenarioError as exc:
        click.echo(f"error: scenario run failed: {exc}", err=True)
        sys.exit(2)
    _print_report(report, Path(report_path) if report_path else None)
    sys.exit(0 if report["passed"] else 1)


@scenario.command("run-all")
@click.argument("directory", type=click.Path())
@click.option("--report-dir", type=click.Path(), default=None, help="Write one JSON report per scenario here.")
def run_all(directory, report_dir):
    """Run every *.json scenario in a directory."""
    from .harness import Scenario, ScenarioError, ScenarioInvalid, run_scenario

    paths = sorted(Path(directory).glob("*.json"))
    if not paths:
        click.echo(f"error: no scenario files in {directory}", err=True)
        sys.exit(2)
    if report_dir:
        Path(report_dir).mkdir(parents=True, exist_ok=True)
    failures = 0
    for path in paths:
        try:
            scenario_obj = Scenario.from_file(path)
            click.echo(f"scenario {scenario_obj.name} (seed {scenario_obj.seed})")
            report = run_scenario(scenario_obj)
        except (ScenarioInvalid, ScenarioError) as exc:
            click.echo(f"error: {path.name}: {exc}", err=True)
            sys.exit(2)
        out = Path(report_dir) / f"{path.stem}.report.json" if report_dir else None
        _print_report(report, out)
        if not report["passed"]:
            failures += 1
    click.echo(f"{len(paths) - failures}/{len(paths)} scenarios passed")
    sys.exit(0 if failures == 0 else 1)


@main.command("review-export")
@click.option("--store", "store_dir", required=True, type=click.Path(), help="Review store directory.")
@click.option("--solution", "solution_id", required=True)
@click.option("--version", type=int, default=None, help="Restrict to one version (default: all).")
@click.option("--out", "out_path", type=click.Path(), default=None, help="Output file (default: stdout).")
def review_export(store_dir, solution_id, version, out_path):
    """Export a solution's comments (anchors + threading) as a JSON document."""
    from .review import ReviewStore, UnknownSolution

    store = ReviewStore(store_dir)
    try:
        document = store.export_comments(solution_id, version=version)
    except UnknownSolution as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(1)
    finally:
        store.close()
    text = json.dumps(document, indent=2)
    if out_path:
        Path(out_path).write_text(text, encoding="utf-8")
        click.echo(f"exported {document['count']} comments to {out_path}")
    else:
        click.echo(text)


@main.command("review-seed")
@click.option("--store", "store_dir", required=True, type=click.Path())
@click.option("--comments", "comment_count", type=int, default=8, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
def review_seed(store_dir, comment_count, seed):
    """Seed the review store with demo solutions and anchored comments."""
    from .geo_model import empty_scene, scene_apply
    from .protocol import GeoAnchor
    from .review import ReviewStore

    rng = random.Random(seed)
    store = ReviewStore(store_dir)
    try:
        scene = empty_scene("solution_evaluation")
        scene = scene_apply(
            scene,
            "model_place",
            {"placement": {"id": "bldg-1", "model_ref": "building_a", "position": {"lat": 31.2285, "lon": 121.4055}}},
        )
        sid, v1 = store.publish_solution("demo-session", "Department building plan", scene)
        scene = scene_apply(scene, "model_move", {"placement_id": "bldg-1", "position": {"lat": 31.2288, "lon": 121.406}})
        _, v2 = store.publish_solution("demo-session", "Department building plan", scene)
        for i in range(comment_count):
            anchor = GeoAnchor(lat=31.2285 + rng.uniform(-0.001, 0.001), lon=121.4055 + rng.uniform(-0.001, 0.001))
            store.post_comment(sid, rng.choice([v1, v2]), f"reviewer{i}", f"comment {i}: consider the entrance here", anchor)
        click.echo(f"seeded solution {sid} versions {v1},{v2} with {comment_count} comments in {store_dir}")
    finally:
        store.close()


@main.command("protocol-dump")
@click.option("--out", "out_path", type=click.Path(), default=None, help="Output file (default: stdout).")
def protocol_dump(out_path):
    """Print the protocol reference (golden example per message kind)."""
    from .protocol_doc import protocol_reference_text

    text = protocol_reference_text()
    if out_path:
        Path(out_path).write_text(text, encoding="utf-8")
        click.echo(f"protocol reference written to {out_path}")
    else:
        click.echo(text)


if __name__ == "__main__":
    main()
