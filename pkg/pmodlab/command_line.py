import os
import json
import logging
import functools
import click
from . import logger, harness
from .config import RunConfig, get_all_presets
from .costmodel import model_cost
from .models import Model
from .pmod import PModModel
from .reports import write_table, write_tables
from .samples import gen_task
from .train import train, results_frame, DivergenceError


def show_banner():
    logger.info(r"""
                                   .o8  oooo            .o8
oo.ooooo.  ooo. .oo.  .oo.    .ooooo.   .oooo888   888   .oooo.    888oooo.
 888' `88b `888P"Y88bP"Y88b  d88' `88b d88' `888   888  `P  )88b   d88' `88b
 888   888  888   888   888  888   888 888   888   888   .oP"888   888   888
 888   888  888   888   888  888   888 888   888   888  d8(  888   888   888
 888bod8P' o888o o888o o888o `Y8bod8P' `Y8bod88P" o888o `Y888""8o  `Y8bod8P'
 888
o888o""")


def show_config(config: dict):
    logger.info(f"⚙️ Configuration:")
    for key, value in config.items():
        logger.info(f"\t🛠️ {key}: {value}")


def show_help_and_exit(message: str):
    ctx = click.get_current_context()
    click.echo(click.style(message, fg="red"))
    click.echo()
    ctx.fail(ctx.get_help())


def common_options(func):
    """Options shared by every subcommand."""
    @click.option("-c", "--config", "config_source", default="toy", show_default=True, help=f"Path to a JSON configuration file, or a preset name ({', '.join(get_all_presets())}).", type=str)
    @click.option("-o", "--out", default=None, help="Directory to store the output files. Default to `output_dir` of the configuration.", type=click.Path(file_okay=False))
    @click.option("-s", "--seed", default=None, help="Override the top-level seed of the configuration.", type=int)
    @click.option("--set", "overrides", multiple=True, help="Override one configuration value, as `section.key=value` (value parsed as JSON). Repeatable.")
    @click.option("-p", "--prefix", default="", help="Prefix for the output files. Default to no prefix used.", type=str)
    @click.option("--quiet", is_flag=True, default=False, help="Hide the banner and configuration information, and log warnings and errors only.")
    @functools.wraps(func)
    def wrapper(config_source, out, seed, overrides, prefix, quiet, **kwargs):
        logger.set_level(logging.WARNING if quiet else logging.INFO)
        try:
            config = RunConfig.load(config_source, overrides)
        except (ValueError, KeyError, FileNotFoundError) as e:
            show_help_and_exit(str(e).strip("'\""))
        if seed is not None:
            config = config.with_seed(seed)
        outdir = out if out is not None else config.output_dir
        os.makedirs(outdir, exist_ok=True)
        if not quiet:
            show_banner()
            show_config({"command": func.__name__.replace('cmd_', ''), "config": config_source, "seed": config.seed, "outdir": outdir, "prefix": prefix, **kwargs})
        with open(os.path.join(outdir, f"{prefix}config.json"), 'w', encoding='utf-8') as fh:
            json.dump(config.to_dict(), fh, indent=4, sort_keys=True)
            fh.write('\n')
        try:
            return func(config=config, outdir=outdir, prefix=prefix, **kwargs)
        except (ValueError, KeyError, FileNotFoundError, DivergenceError) as e:
            show_help_and_exit(str(e).strip("'\""))
    return wrapper


def _load_or_train(config: RunConfig, checkpoint: str, outdir: str, prefix: str) -> PModModel:
    """For internal use. Load a routed checkpoint, or train one according to the configuration."""
    if checkpoint is not None:
        model = Model.load(checkpoint)
        if not isinstance(model, PModModel):
            raise ValueError(f"🛑 Checkpoint {checkpoint} holds a model without routers")
        return model
    model = PModModel.init(config.model, config.seed, config.pmod, config.build_schedule().ratios)
    run = train(model, config.task, config.train, label = 'train', seed = config.seed)
    run.model.write(os.path.join(outdir, f"{prefix}model.ckpt"))
    return run.model


@click.group()
def main():
    """pmodlab: progressive mixture-of-depths layers for a desk-scale decoder"""


@main.command("schedule")
@common_options
def cmd_schedule(config: RunConfig, outdir: str, prefix: str):
    """Build the retention schedule and print its mean retention."""
    schedule = config.build_schedule()
    write_table(schedule.to_frame(), outdir, 'schedule', 'schedule', prefix)
    click.echo(schedule.to_frame().to_string(index=False))
    click.echo(f"mean_retention: {schedule.mean_retention:.6g}")


@main.command("cost")
@click.option("--xlsx", is_flag=True, default=False, help="Merge output tables into a single Excel (.xlsx).")
@common_options
def cmd_cost(config: RunConfig, outdir: str, prefix: str, xlsx: bool):
    """Account FLOPs and KV cache of the schedule against the dense model."""
    report = model_cost(config.model, config.build_schedule(), config.workload, config.pmod)
    report.to_table(outdir, prefix, xlsx)
    click.echo(report.to_frame().to_string(index=False))
    click.echo(report.summary().to_string(index=False))


@main.command("train")
@click.option("--dense", is_flag=True, default=False, help="Train the vanilla model without routers.")
@common_options
def cmd_train(config: RunConfig, outdir: str, prefix: str, dense: bool):
    """Train a model on the synthetic task and write its checkpoint."""
    if dense:
        model = Model.init(config.model, config.seed)
        label = 'dense'
    else:
        model = PModModel.init(config.model, config.seed, config.pmod, config.build_schedule().ratios)
        label = config.pmod.mode.value
    run = train(model, config.task, config.train, label = label, seed = config.seed)
    run.model.write(os.path.join(outdir, f"{prefix}model.ckpt"))
    write_tables({'loss_curve': (run.loss_curve, 'loss_curve'), 'train': (results_frame([run.result]), 'ablation')}, outdir, prefix)
    click.echo(results_frame([run.result]).to_string(index=False))


@main.command("ablate")
@click.option("-e", "--experiment", default="all", type=click.Choice(['reweight', 'normalization', 'schedule', 'all']), show_default=True, help="Which ablation to run.")
@click.option("--parallel", "n_jobs", default=1, show_default=True, type=int, help="Number of independent runs executed in parallel. `-1` means all CPUs are used.")
@common_options
def cmd_ablate(config: RunConfig, outdir: str, prefix: str, experiment: str, n_jobs: int):
    """Reweighting, normalization and schedule ablations at matched mean retention."""
    seeds = [config.seed + i for i in range(config.ablation.repeats)]
    results = []
    if experiment in ('reweight', 'all'):
        results += harness.run_reweight_ablation(config.model, config.task, config.train, config.schedule, config.pmod.alpha,
                                                 seeds, n_jobs, outdir, prefix)
    if experiment in ('normalization', 'all'):
        results += harness.run_normalization_ablation(config.model, config.task, config.train, config.schedule, config.pmod.alpha,
                                                      seeds, n_jobs, outdir, prefix)
    if experiment in ('schedule', 'all'):
        results += harness.run_schedule_ablation(config.model, config.task, config.train, config.ablation.target_mean,
                                                 config.schedule.beta, config.pmod.alpha, seeds, n_jobs, outdir, prefix)
    click.echo(results_frame(results).to_string(index=False))


@main.command("probe")
@click.option("--checkpoint", default=None, type=click.Path(exists=True, dir_okay=False), help="Probe this routed checkpoint instead of training the reference model.")
@common_options
def cmd_probe(config: RunConfig, outdir: str, prefix: str, checkpoint: str):
    """Lower the retention of shallow, middle or deep layers at inference time and measure the drift."""
    if checkpoint is not None:
        model = _load_or_train(config, checkpoint, outdir, prefix)
    else:
        run = harness.train_probe_model(config.model, config.task, config.train, config.probe.trained_ratio, config.pmod.alpha, config.seed)
        model = run.model
        model.write(os.path.join(outdir, f"{prefix}probe_model.ckpt"))
    samples = gen_task(config.task, config.model.d_model, config.probe.n_samples, stream = 0)
    table = harness.probe_layer_groups(model, samples, config.probe.ratios)
    write_table(table, outdir, 'probe', 'probe', prefix)
    click.echo(table.to_string(index=False))


@main.command("trace")
@click.option("--checkpoint", default=None, type=click.Path(exists=True, dir_okay=False), help="Trace this routed checkpoint instead of training one.")
@click.option("-n", "--n-samples", default=4, show_default=True, type=int, help="Number of traced samples.")
@common_options
def cmd_trace(config: RunConfig, outdir: str, prefix: str, checkpoint: str, n_samples: int):
    """Export per-layer token selections for external heatmaps."""
    model = _load_or_train(config, checkpoint, outdir, prefix)
    samples = gen_task(config.task, model.config.d_model, n_samples, stream = 0)
    table = harness.trace_frame(harness.emit_trace(model, samples))
    write_table(table, outdir, 'trace', 'trace', prefix)
    click.echo(f"{len(table)} trace rows over {len(model.routed_layers)} routed layers and {n_samples} samples")


@main.command("overflow-demo")
@click.option("-L", "--n-layers", default=32, show_default=True, type=int, help="Number of layers of repeated scaling.")
@common_options
def cmd_overflow_demo(config: RunConfig, outdir: str, prefix: str, n_layers: int):
    """Simulate repeated token reweighting in half precision."""
    table = harness.overflow_demo(n_layers, config.pmod.alpha)
    write_table(table, outdir, 'overflow', 'overflow', prefix)
    click.echo(table.to_string(index=False))
    bounded = table.iloc[2]
    #2 ** 16 exceeds the half-precision maximum; (1 + alpha) ** L must not for the shipped alpha
    if n_layers >= 16 and table.iloc[0]['first_overflow_layer_fp16'] != '16':
        raise ValueError("🛑 Unnormalized scaling did not overflow at layer 16")
    if bounded['first_overflow_layer_fp64'] != 'stable':
        raise ValueError("🛑 Double-precision scaling overflowed")
    if config.pmod.alpha == 0.2 and bounded['first_overflow_layer_fp16'] != 'stable':
        raise ValueError("🛑 TanhNorm scaling overflowed in half precision")


if __name__ == "__main__":
    main()
