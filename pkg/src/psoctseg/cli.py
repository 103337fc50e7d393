"""Command-line interface.

Every subcommand builds the same request model the HTTP service accepts and
either executes it in-process or, with --server, submits it to a running
service and polls the job until it finishes.
"""

from __future__ import annotations

import json
import time
from pathlib import Path

import click

from .service import runners
from .service.schemas import (
    AblateRequest,
    EvaluateRequest,
    GenerateRequest,
    GridSearchRequest,
    LossSettings,
    SegmentRequest,
    TrainCriticRequest,
    TrainRequest,
)

_JOB_POLL_S = 1.0


def _emit(data) -> None:
    if hasattr(data, "model_dump"):
        data = data.model_dump()
    click.echo(json.dumps(data, indent=2, default=str))


def _remote(server: str, endpoint: str, payload: dict, wait: bool = True) -> dict:
    import httpx

    with httpx.Client(base_url=server, timeout=60.0) as client:
        resp = client.post(endpoint, json=payload)
        resp.raise_for_status()
        data = resp.json()
        if wait and "job_id" in data:
            while True:
                info = client.get(f"/jobs/{data['job_id']}").json()
                if info["status"] in ("succeeded", "failed"):
                    return info
                time.sleep(_JOB_POLL_S)
        return data


def _dispatch(server: str | None, endpoint: str, req, runner) -> None:
    if server:
        _emit(_remote(server, endpoint, json.loads(req.model_dump_json())))
    else:
        _emit(runner(req))


server_option = click.option("--server", default=None, metavar="URL",
                             help="submit to a running psoctseg service instead of "
                                  "executing locally")


@click.group()
def main():
    """PS-OCT anatomical layer segmentation toolkit."""


@main.command()
@click.option("--count", type=int, default=200, show_default=True)
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--r", "r_samples", type=int, default=64, show_default=True)
@click.option("--a", "a_lines", type=int, default=128, show_default=True)
@click.option("--noise", type=float, default=1.0, show_default=True)
@click.option("--frames-per-patient", type=int, default=4, show_default=True)
@server_option
def generate(count, out_dir, seed, r_samples, a_lines, noise, frames_per_patient, server):
    """Generate a phantom dataset of labeled records."""
    req = GenerateRequest(out_dir=out_dir, count=count, seed=seed, r=r_samples,
                          a=a_lines, noise=noise, frames_per_patient=frames_per_patient)
    _dispatch(server, "/datasets/generate", req, runners.run_generate)


@main.command("train-critic")
@click.option("--data", "data_dir", required=True, type=click.Path(exists=True))
@click.option("--severity", type=float, default=0.5, show_default=True)
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--steps", type=int, default=300, show_default=True)
@click.option("--batch-size", type=int, default=8, show_default=True)
@click.option("--lr", type=float, default=1e-4, show_default=True)
@click.option("--gp-weight", type=float, default=10.0, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@server_option
def train_critic(data_dir, severity, out_path, steps, batch_size, lr, gp_weight,
                 seed, server):
    """Train the label-quality critic on clean vs perturbed phantom labels."""
    req = TrainCriticRequest(data_dir=data_dir, out_path=out_path, severity=severity,
                             steps=steps, batch_size=batch_size, lr=lr,
                             gp_weight=gp_weight, seed=seed)
    _dispatch(server, "/critic/train", req, runners.run_train_critic)


def _load_config_file(path: str | None) -> dict:
    """Flat key=value lines or a JSON object."""
    if not path:
        return {}
    text = Path(path).read_text()
    if text.lstrip().startswith("{"):
        return json.loads(text)
    values: dict = {}
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, _, value = line.partition("=")
        try:
            values[key.strip()] = json.loads(value.strip())
        except json.JSONDecodeError:
            values[key.strip()] = value.strip()
    return values


_LOSS_KEYS = ("lambda_wce", "lambda_dice", "lambda_bp", "lambda_ap", "lambda_bc",
              "epsilon", "b", "m", "sigma", "gp_weight")
_TRAIN_KEYS = ("data_dir", "out_dir", "critic_checkpoint", "lr", "batch_size",
               "epochs", "seed", "augment", "patience", "split_fractions")


def _build_train_request(ctx, config_file, **flags) -> TrainRequest:
    from click.core import ParameterSource

    base = _load_config_file(config_file)
    merged = dict(base)
    for key, value in flags.items():
        source = ctx.get_parameter_source(key)
        if source == ParameterSource.COMMANDLINE or key not in merged:
            merged[key] = value
    loss = LossSettings(**{k: merged[k] for k in _LOSS_KEYS if merged.get(k) is not None})
    train_kwargs = {k: merged[k] for k in _TRAIN_KEYS if merged.get(k) is not None}
    return TrainRequest(loss=loss, **train_kwargs)


def train_options(fn):
    opts = [
        click.option("--data", "data_dir", required=True, type=click.Path(exists=True)),
        click.option("--out", "out_dir", required=True, type=click.Path()),
        click.option("--config", "config_file", type=click.Path(exists=True),
                     help="JSON or key=value config file; flags override"),
        click.option("--critic", "critic_checkpoint", type=click.Path(), default=None),
        click.option("--epochs", type=int, default=30, show_default=True),
        click.option("--batch-size", type=int, default=20, show_default=True),
        click.option("--lr", type=float, default=1e-4, show_default=True),
        click.option("--seed", type=int, default=0, show_default=True),
        click.option("--patience", type=int, default=10, show_default=True),
        click.option("--no-augment", "augment", flag_value=False, default=True),
        click.option("--lambda-wce", "lambda_wce", type=float, default=1.0),
        click.option("--lambda-dice", "lambda_dice", type=float, default=1.0),
        click.option("--lambda-bp", "lambda_bp", type=float, default=1.0),
        click.option("--lambda-ap", "lambda_ap", type=float, default=1.0),
        click.option("--lambda-bc", "lambda_bc", type=float, default=1.0),
        click.option("--epsilon", type=float, default=1e-7),
        click.option("--b", type=int, default=10),
        click.option("--m", type=float, default=None),
        click.option("--sigma", type=click.Choice(["norm1", "norm2", "max"]),
                     default="norm1"),
        click.option("--gp-weight", "gp_weight", type=float, default=10.0),
    ]
    for opt in reversed(opts):
        fn = opt(fn)
    return fn


@main.command()
@train_options
@server_option
@click.pass_context
def train(ctx, config_file, server, **flags):
    """Train the segmentation model with the combined loss."""
    req = _build_train_request(ctx, config_file, **flags)
    _dispatch(server, "/models/train", req, runners.run_train)


@main.command("grid-search")
@train_options
@click.option("--coords", default="dice,bp,ap,bc", show_default=True,
              help="comma-separated greedy coordinate order")
@click.option("--candidates", default=None,
              help="comma-separated lambda candidates shared by all coordinates")
@server_option
@click.pass_context
def grid_search(ctx, config_file, coords, candidates, server, **flags):
    """Greedy coordinate-wise search over loss-term weights."""
    req_train = _build_train_request(ctx, config_file, **flags)
    coord_list = tuple(c.strip() for c in coords.split(",") if c.strip())
    cand = None
    if candidates:
        values = tuple(float(v) for v in candidates.split(","))
        cand = {c: values for c in coord_list}
    req = GridSearchRequest(train=req_train, coords=coord_list, candidates=cand)
    _dispatch(server, "/models/grid-search", req, runners.run_grid_search)


@main.command()
@train_options
@click.option("--seeds", default="0,1,2", show_default=True)
@click.option("--postprocess", type=click.Choice(["on", "off"]), default="off",
              show_default=True)
@server_option
@click.pass_context
def ablate(ctx, config_file, seeds, postprocess, server, **flags):
    """Train every nested loss subset and tabulate test metrics."""
    req_train = _build_train_request(ctx, config_file, **flags)
    req = AblateRequest(train=req_train,
                        seeds=tuple(int(s) for s in seeds.split(",")),
                        postprocess=postprocess == "on")
    _dispatch(server, "/models/ablate", req, runners.run_ablate)


@main.command()
@click.option("--data", "data_dir", required=True, type=click.Path(exists=True))
@click.option("--checkpoint", required=True, type=click.Path(exists=True))
@click.option("--split-file", type=click.Path(exists=True), default=None)
@click.option("--split", type=click.Choice(["train", "val", "test"]), default="test",
              show_default=True)
@click.option("--postprocess", type=click.Choice(["on", "off"]), default="on",
              show_default=True)
@click.option("--out", "out_dir", type=click.Path(), default=None)
@click.option("--exclude-thickened-px", type=float, default=None,
              help="exclude A-lines whose wall is thicker than this many pixels")
@server_option
def evaluate(data_dir, checkpoint, split_file, split, postprocess, out_dir,
             exclude_thickened_px, server):
    """Evaluate a checkpoint; writes report.json and report.csv with --out."""
    req = EvaluateRequest(data_dir=data_dir, checkpoint=checkpoint,
                          split_file=split_file, split=split,
                          postprocess=postprocess == "on", out_dir=out_dir,
                          exclude_thickened_px=exclude_thickened_px)
    _dispatch(server, "/evaluate", req, runners.run_evaluate)


@main.command()
@click.option("--record", "record_path", required=True, type=click.Path(exists=True))
@click.option("--checkpoint", required=True, type=click.Path(exists=True))
@click.option("--postprocess", type=click.Choice(["on", "off"]), default="on")
@click.option("--out", "out_path", type=click.Path(), default=None)
@server_option
def segment(record_path, checkpoint, postprocess, out_path, server):
    """Segment one record and print class counts and the topology report."""
    req = SegmentRequest(record_path=record_path, checkpoint=checkpoint,
                         postprocess=postprocess == "on", out_path=out_path)
    _dispatch(server, "/segment", req, runners.run_segment)


@main.command()
@click.option("--input", "input_path", required=True, type=click.Path(exists=True))
def report(input_path):
    """Pretty-print an evaluation report or ablation table."""
    data = json.loads(Path(input_path).read_text())
    if "table" in data:
        rows = data["table"]
        click.echo(f"{'terms':<28} {'accuracy':>9} {'dice':>9} {'mhd_px':>9}")
        for row in rows:
            terms = "+".join(row["terms"])
            click.echo(f"{terms:<28} {row['accuracy']:>9.4f} "
                       f"{row['dice']:>9.4f} {row['mhd_px']:>9.3f}")
        return
    agg = data.get("aggregate", data)
    for key in sorted(agg):
        value = agg[key]
        if isinstance(value, float):
            click.echo(f"{key:<32} {value:.5f}")
        else:
            click.echo(f"{key:<32} {value}")


@main.command()
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", type=int, default=8080, show_default=True)
def serve(host, port):
    """Run the HTTP service."""
    import uvicorn

    from .service import create_app

    uvicorn.run(create_app(), host=host, port=port)


if __name__ == "__main__":
    main()
