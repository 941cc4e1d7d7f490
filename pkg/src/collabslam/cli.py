"""Command-line entry point."""

from __future__ import annotations

import sys

import click

from .collab import MODES
from .runner import run_scenario


@click.group()
@click.version_option(package_name="collabslam")
def main():
    """Collaborative SLAM co-simulation on synthetic structured worlds."""


@main.command()
@click.argument("scenario")
@click.option("--mode", type=click.Choice(sorted(MODES)), default="full",
              show_default=True, help="Ablation mode for inter-robot factors.")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--accounting", type=click.Choice(["broadcast", "per-receiver"]),
              default="broadcast", show_default=True,
              help="Whether broadcast bytes are billed once or per receiver.")
@click.option("--out", "out_dir", type=click.Path(file_okay=False),
              default=None, help="Directory for report.json, stats.csv, "
              "per-robot trajectories/maps/graph dumps and figures.")
@click.option("--figures/--no-figures", default=True, show_default=True,
              help="Render PNG figures alongside the delimited output.")
def run(scenario, mode, seed, accounting, out_dir, figures):
    """Run SCENARIO (a YAML file path or a builtin name such as 'sim-a')."""
    try:
        report = run_scenario(scenario, mode, seed, accounting=accounting,
                              out_dir=out_dir, figures=figures)
    except FileNotFoundError as exc:
        raise click.ClickException(str(exc))
    click.echo(f"scenario={report.scenario} mode={report.mode} seed={report.seed}")
    click.echo(f"aggregate ATE:      {report.aggregate_ate_cm:8.2f} cm "
               f"(odometry only {report.odometry_ate_cm:.2f} cm)")
    click.echo(f"map RMSE:           {report.map_rmse_cm:8.2f} cm")
    for entry in report.origin_errors:
        if entry.get("established"):
            click.echo(f"origin {entry['observer']}->{entry['peer']}:   "
                       f"{entry['trans_m']*100:8.2f} cm / {entry['rot_deg']:.3f} deg")
        else:
            click.echo(f"origin {entry['observer']}->{entry['peer']}:   not established")
    click.echo(f"matches:            {report.matches['accepted']} accepted / "
               f"{report.matches['rejected']} rejected")
    click.echo(f"data exchanged:     {report.bytes['total_mb']:.3f} MB "
               f"({report.accounting})")
    if out_dir:
        click.echo(f"artifacts written to {out_dir}")


if __name__ == "__main__":
    sys.exit(main())
