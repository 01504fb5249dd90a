"""Batch command line: gen, train, eval, optimize, simulate, serve.

Settings resolve from defaults, then a --run-config JSON file, then SUBSIDY_*
environment variables, then explicit flags.
"""

from __future__ import annotations

import functools
import json
import logging
import os
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import click
import numpy as np

from domain_app import ConfigError, DataError, SubsidyError, check_schema, read_dataset, write_dataset

log = logging.getLogger(__name__)

ENV_VARS = {
    "world_config": "SUBSIDY_WORLD_CONFIG",
    "dataset": "SUBSIDY_DATASET",
    "checkpoint": "SUBSIDY_CHECKPOINT",
    "dictionary": "SUBSIDY_DICTIONARY",
    "report_dir": "SUBSIDY_REPORT_DIR",
    "seed": "SUBSIDY_SEED",
}
STREAMS = ("world", "train", "sim")
SOURCES = ("model", "oracle", "uniform-model", "uniform-oracle")


@dataclass(frozen=True)
class RunConfig:
    world_config: str | None = None
    dataset: str | None = None
    checkpoint: str | None = None
    dictionary: str | None = None
    report_dir: str | None = None
    seed: int | None = None
    train: dict = field(default_factory=dict)
    horizon: dict = field(default_factory=dict)
    clustering: dict = field(default_factory=dict)
    allocator: dict = field(default_factory=dict)
    percentiles: int = 100

    def to_dict(self) -> dict:
        return asdict(self)


RUN_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "world_config": {"type": ["string", "null"]},
        "dataset": {"type": ["string", "null"]},
        "checkpoint": {"type": ["string", "null"]},
        "dictionary": {"type": ["string", "null"]},
        "report_dir": {"type": ["string", "null"]},
        "seed": {"type": ["integer", "null"], "minimum": 0},
        "train": {"type": "object"},
        "horizon": {"type": "object"},
        "clustering": {"type": "object"},
        "allocator": {"type": "object"},
        "percentiles": {"type": "integer", "minimum": 1},
    },
}


def read_json(path, what: str) -> dict:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"{what} not found: {path}")
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ConfigError(f"{what} {path}: {e}") from None


def load_run_config(path=None, environ=None) -> RunConfig:
    environ = os.environ if environ is None else environ
    doc = {}
    if path:
        doc = read_json(path, "run config")
        check_schema(doc, RUN_SCHEMA, "run config")
    for name, var in ENV_VARS.items():
        value = environ.get(var)
        if value:
            if name == "seed":
                try:
                    value = int(value)
                except ValueError:
                    raise ConfigError(f"{var} must be an integer, got {value!r}") from None
            doc[name] = value
    return RunConfig(**doc)


def seed_streams(seed: int) -> dict[str, int]:
    """Independent named seeds derived from one global seed."""
    children = np.random.SeedSequence(seed).spawn(len(STREAMS))
    return {name: int(child.generate_state(1)[0]) for name, child in zip(STREAMS, children)}


class CommandError(click.ClickException):
    exit_code = 1

    def show(self, file=None):
        click.echo(f"error: {self.message}", err=True)


def reports_errors(fn):
    """Turn domain failures into one machine-parsable line and exit code 1."""

    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except SubsidyError as e:
            raise CommandError(f"{e.kind}: {e}") from None
        except OSError as e:
            raise CommandError(f"IOError: {e}") from None
        except (click.ClickException, click.exceptions.Abort, click.exceptions.Exit):
            raise
        except Exception as e:
            log.debug("unexpected failure", exc_info=True)
            raise CommandError(f"{type(e).__name__}: {e}") from None

    return wrapper


def _resolve(value, cfg: RunConfig, name: str, required: bool = True):
    value = value if value is not None else getattr(cfg, name)
    if value is None and required:
        raise ConfigError(f"{name} not given (flag, run config or {ENV_VARS.get(name, 'config')})")
    return value


def _log_start(command: str, **resolved):
    log.info("%s: %s", command, json.dumps(resolved, sort_keys=True, default=str))


def _world_params(cfg: RunConfig, config_path, seed):
    from synthworld_app import WorldParams, load_world_params

    path = _resolve(config_path, cfg, "world_config", required=False)
    params = load_world_params(path) if path else WorldParams()
    seed = seed if seed is not None else cfg.seed
    if seed is not None:
        params = params.with_seed(seed_streams(seed)["world"] % 2**31)
    return params


@click.group()
@click.option("--run-config", type=click.Path(dir_okay=False), default=None, help="JSON run configuration.")
@click.option(
    "--log-level",
    type=click.Choice(["DEBUG", "INFO", "WARNING", "ERROR"], case_sensitive=False),
    default="INFO",
    show_default=True,
)
@click.pass_context
@reports_errors
def cli(ctx, run_config, log_level):
    """Subsidy allocation toolkit."""
    logging.basicConfig(level=log_level.upper(), format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    ctx.obj = load_run_config(run_config)


@cli.command()
@click.option("--config", "config_path", type=click.Path(dir_okay=False), help="World config JSON.")
@click.option("--out", type=click.Path(dir_okay=False), help="Dataset file (NDJSON).")
@click.option("--n", "n", type=click.IntRange(min=1), default=100_000, show_default=True)
@click.option("--policy", type=click.Choice(["observational", "rct"]), default="observational", show_default=True)
@click.option("--day", type=click.IntRange(min=0), default=None, help="Sampling day; observational 0, rct 7 by default.")
@click.option("--seed", type=click.IntRange(min=0), default=None)
@click.pass_obj
@reports_errors
def gen(cfg: RunConfig, config_path, out, n, policy, day, seed):
    """Generate a synthetic dataset."""
    from synthworld_app import default_day, gen_world, generate_dataset

    params = _world_params(cfg, config_path, seed)
    out = _resolve(out, cfg, "dataset")
    day = default_day(policy) if day is None else day
    _log_start("gen", out=out, n=n, policy=policy, day=day, world_seed=params.seed)
    dataset = generate_dataset(gen_world(params), n, policy, day)
    write_dataset(out, dataset)
    click.echo(json.dumps({"out": str(out), "n": len(dataset), "arm_counts": dataset.arm_counts().tolist()}))


@cli.command()
@click.option("--data", type=click.Path(dir_okay=False), help="Training dataset.")
@click.option("--checkpoint", type=click.Path(dir_okay=False), help="Output checkpoint.")
@click.option("--train-config", type=click.Path(dir_okay=False), help="TrainConfig JSON.")
@click.option("--log-csv", type=click.Path(dir_okay=False), default=None, help="Write the per-epoch log here.")
@click.option("--alpha", type=float, default=None)
@click.option("--beta", type=float, default=None)
@click.option("--epochs", type=click.IntRange(min=1), default=None)
@click.option("--seed", type=click.IntRange(min=0), default=None)
@click.pass_obj
@reports_errors
def train(cfg: RunConfig, data, checkpoint, train_config, log_csv, alpha, beta, epochs, seed):
    """Train the multi-treatment uplift network."""
    from multenet_app import TrainConfig, save_checkpoint
    from multenet_app import train as fit

    doc = dict(cfg.train)
    if train_config:
        doc.update(read_json(train_config, "train config"))
    tc = TrainConfig.from_dict(doc)
    overrides = {k: v for k, v in (("alpha", alpha), ("beta", beta), ("epochs", epochs)) if v is not None}
    seed = seed if seed is not None else cfg.seed
    if seed is not None:
        overrides["seed"] = seed_streams(seed)["train"] % 2**31
    tc = replace(tc, **overrides)
    data = _resolve(data, cfg, "dataset")
    checkpoint = _resolve(checkpoint, cfg, "checkpoint")
    _log_start("train", data=data, checkpoint=checkpoint, config=tc.to_dict())
    params, training_log = fit(read_dataset(data), tc)
    save_checkpoint(params, checkpoint)
    if log_csv:
        training_log.to_csv(log_csv)
    click.echo(
        json.dumps(
            {
                "checkpoint": str(checkpoint),
                "best_epoch": training_log.best_epoch,
                "initial_val_bce": training_log.initial_val_bce,
                "final_val_bce": training_log.final_val_bce,
            }
        )
    )


@cli.command(name="eval")
@click.option("--checkpoint", type=click.Path(dir_okay=False))
@click.option("--data", type=click.Path(dir_okay=False), help="Evaluation dataset, ideally RCT.")
@click.option("--out", type=click.Path(dir_okay=False), default=None, help="Metrics JSON; stdout when omitted.")
@click.option("--curves", type=click.Path(dir_okay=False), default=None, help="Curve points CSV.")
@click.option("--percentiles", type=click.IntRange(min=1), default=None)
@click.pass_obj
@reports_errors
def evaluate_cmd(cfg: RunConfig, checkpoint, data, out, curves, percentiles):
    """Evaluate a checkpoint: AUC, AUUC and Qini."""
    from metrics_app import evaluate
    from multenet_app import load_checkpoint

    checkpoint = _resolve(checkpoint, cfg, "checkpoint")
    data = _resolve(data, cfg, "dataset")
    percentiles = percentiles or cfg.percentiles
    _log_start("eval", checkpoint=checkpoint, data=data, percentiles=percentiles)
    metrics = evaluate(load_checkpoint(checkpoint), read_dataset(data), percentiles)
    if curves:
        metrics.curves_frame().to_csv(curves, index=False)
    if out:
        Path(out).write_text(metrics.to_json() + "\n", encoding="utf-8")
    else:
        click.echo(metrics.to_json())


@cli.command()
@click.option("--checkpoint", type=click.Path(dir_okay=False))
@click.option("--data", type=click.Path(dir_okay=False), help="Queries to cluster (dataset file).")
@click.option("--config", "config_path", type=click.Path(dir_okay=False), help="World config, for the zone grid.")
@click.option("--budget", type=click.FloatRange(min=0), default=None)
@click.option("--rate", type=click.FloatRange(min=0, max=1, max_open=True), default=None, help="Target subsidy rate.")
@click.option("--clustering", type=click.Path(dir_okay=False), default=None, help="ClusteringConfig JSON.")
@click.option("--allocator", "allocator_path", type=click.Path(dir_okay=False), default=None, help="AllocatorConfig JSON.")
@click.option("--out", type=click.Path(dir_okay=False), help="Dictionary file.")
@click.option("--bundle", type=click.Path(dir_okay=False), default=None, help="Also write the per-service zip.")
@click.option("--exact", is_flag=True, help="Use the exact solver.")
@click.option("--timestamp", default=None, help="solved_at value recorded in the dictionary.")
@click.pass_obj
@reports_errors
def optimize(cfg: RunConfig, checkpoint, data, config_path, budget, rate, clustering, allocator_path, out, bundle, exact, timestamp):
    """Cluster, solve the budget allocation and emit the dictionary."""
    from allocator_app import (
        AllocationProblem,
        AllocatorConfig,
        ClusteringConfig,
        build_clusters,
        dictionary_bundle,
        emit_dictionary,
        solve,
        solve_exact,
        write_dictionary,
    )
    from mpc_app import plan_budget
    from multenet_app import elasticity_matrix, load_checkpoint
    from synthworld_app import gen_world

    if (budget is None) == (rate is None):
        raise click.UsageError("give exactly one of --budget or --rate")
    ccfg = ClusteringConfig.from_dict({**cfg.clustering, **(read_json(clustering, "clustering config") if clustering else {})})
    acfg = AllocatorConfig.from_dict(
        {**cfg.allocator, **(read_json(allocator_path, "allocator config") if allocator_path else {})}
    )
    checkpoint = _resolve(checkpoint, cfg, "checkpoint")
    data = _resolve(data, cfg, "dataset")
    out = _resolve(out, cfg, "dictionary")
    side = None
    if ccfg.zone_coarsen > 1:
        side = gen_world(_world_params(cfg, config_path, None)).side
    _log_start("optimize", checkpoint=checkpoint, data=data, budget=budget, rate=rate, clustering=ccfg.to_dict(), allocator=acfg.to_dict())

    dataset = read_dataset(data)
    params = load_checkpoint(checkpoint)
    if params.J != dataset.grid.J:
        raise DataError(f"checkpoint has {params.J} levels, dataset grid has {dataset.grid.J}")
    P = elasticity_matrix(params, dataset.features())
    revenues = [r.revenue_if_converted for r in dataset.records]
    clusters = build_clusters(
        dataset.queries, P, revenues, dataset.services, dataset.grid, ccfg, side, acfg.cost_overrides
    )
    if budget is None:
        base = float(sum(c.values()[0] for c in clusters))
        budget = plan_budget(clusters, base, rate, 2, acfg)
    problem = AllocationProblem(clusters, budget, acfg.u_lo, acfg.u_hi)
    solution = solve_exact(problem) if exact else solve(problem, acfg)
    dictionary = emit_dictionary(solution, clusters, dataset.grid, ccfg, side, budget=budget, solved_at=timestamp)
    write_dictionary(dictionary, out)
    if bundle:
        Path(bundle).write_bytes(dictionary_bundle(dictionary).getvalue())
    click.echo(
        json.dumps(
            {
                "dictionary": str(out),
                "clusters": len(clusters),
                "budget": budget,
                "objective": solution.objective_value,
                "total_cost": solution.total_cost,
                "dual_lambda": solution.dual_lambda,
                "gap_bound": solution.optimality_gap_bound,
            },
            sort_keys=True,
        )
    )


@cli.command()
@click.option("--config", "config_path", type=click.Path(dir_okay=False), help="World config JSON.")
@click.option("--checkpoint", type=click.Path(dir_okay=False), default=None)
@click.option("--source", type=click.Choice(SOURCES), default="model", show_default=True)
@click.option("--horizon-config", type=click.Path(dir_okay=False), default=None, help="HorizonConfig JSON.")
@click.option("--target-rate", type=click.FloatRange(min=0, max=1, max_open=True), default=None)
@click.option("--report-dir", type=click.Path(file_okay=False), default=None)
@click.option("--seed", type=click.IntRange(min=0), default=None)
@click.pass_obj
@reports_errors
def simulate(cfg: RunConfig, config_path, checkpoint, source, horizon_config, target_rate, report_dir, seed):
    """Run the rolling-horizon simulation and archive the report."""
    from mpc_app import HorizonConfig, model_source, mpc_loop, oracle_source, uniform_source, write_archive
    from multenet_app import load_checkpoint
    from synthworld_app import gen_world

    doc = dict(cfg.horizon)
    if horizon_config:
        doc.update(read_json(horizon_config, "horizon config"))
    hc = HorizonConfig.from_dict(doc)
    if target_rate is not None:
        hc = replace(hc, target_subsidy_rate=target_rate)
    seed = seed if seed is not None else cfg.seed
    if seed is not None:
        hc = replace(hc, seed=seed_streams(seed)["sim"] % 1000)
    world = gen_world(_world_params(cfg, config_path, seed))
    report_dir = _resolve(report_dir, cfg, "report_dir")

    if source.endswith("model"):
        inner = model_source(load_checkpoint(_resolve(checkpoint, cfg, "checkpoint")))
    else:
        inner = oracle_source(world)
    es = uniform_source(inner) if source.startswith("uniform") else inner
    _log_start("simulate", source=es.name, report_dir=report_dir, world_seed=world.params.seed, horizon=hc.to_dict())
    rep = mpc_loop(world, es, hc)
    write_archive(rep, report_dir)
    click.echo(rep.to_json())


@cli.command()
@click.option("--dictionary", type=click.Path(dir_okay=False), default=None)
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", type=click.IntRange(min=0, max=65535), default=7070, show_default=True)
@click.option("--stdio", is_flag=True, help="Serve stdin/stdout instead of a socket.")
@click.pass_obj
@reports_errors
def serve(cfg: RunConfig, dictionary, host, port, stdio):
    """Serve dictionary lookups over a line-delimited JSON protocol."""
    from lookup_app import DictionaryHolder, serve_lookup, serve_stdio

    path = _resolve(dictionary, cfg, "dictionary")
    _log_start("serve", dictionary=path, host=host, port=port, stdio=stdio)
    if stdio:
        serve_stdio(DictionaryHolder.from_path(path), click.get_text_stream("stdin"), click.get_text_stream("stdout"))
        return
    server = serve_lookup(path, host, port)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        log.info("shutting down")
    finally:
        server.server_close()


def main(argv=None) -> int:
    try:
        cli.main(args=argv, prog_name="subsidy", standalone_mode=False)
    except click.ClickException as e:
        e.show()
        return e.exit_code
    except click.exceptions.Abort:
        return 1
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
