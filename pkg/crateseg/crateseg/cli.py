import functools
import logging
from pathlib import Path
from typing import Callable, List, Optional, Tuple

import click
import numpy as np
import torch
from click.core import ParameterSource

from .analysis import (
    attention_maps,
    maskcut_analysis,
    pca_analysis,
    rate_reports,
    resolve_layers,
    run_traces,
    segmentation_miou,
)
from .attention import attention_to_mask
from .checkpoint import load_checkpoint, save_checkpoint
from .config import ARCHITECTURES, ModelConfig, RunConfig
from .data import (
    SynthDataConfig,
    add_pixel_noise,
    export_dataset,
    generate_dataset,
    generate_sample,
    load_dataset,
)
from .exceptions import CheckpointError, ConfigurationError, ImageFormatError, NumericalError
from .images import overlay_mask, render_heatmap, upsample_nearest, write_image
from .maskcut import MaskCutConfig
from .model import build_model
from .objective import CodingRateParams, diagnostic_trials
from .reports import MetricsReport, write_json
from .training import (
    SCHEDULES,
    OptimizerConfig,
    TrainState,
    evaluate_accuracy,
    finite_difference_check,
    stack_samples,
    train,
)

logger = logging.getLogger(__name__)

OPTIMIZER_DEFAULTS = OptimizerConfig()


class NumericalFailure(click.ClickException):
    exit_code = 3


def handle_errors(command: Callable) -> Callable:
    """ Map library errors onto exit codes: 2 for bad input, 3 for numerical failures """
    @functools.wraps(command)
    def wrapper(*args, **kwargs):
        try:
            return command(*args, **kwargs)
        except (ConfigurationError, CheckpointError, ImageFormatError) as error:
            raise click.UsageError(str(error)) from error
        except NumericalError as error:
            raise NumericalFailure(str(error)) from error
    return wrapper


def resolve_run(ctx: click.Context) -> RunConfig:
    """ defaults < --config file < flags given on the command line """
    explicit = {
        name: value for name, value in ctx.params.items()
        if ctx.get_parameter_source(name) not in (ParameterSource.DEFAULT, ParameterSource.DEFAULT_MAP)
    }
    run = RunConfig.resolve(ctx.command.name, dict(ctx.params), explicit, ctx.params.get("config"))
    for param in ctx.command.params:
        value = run.values.get(param.name)
        if value is not None:
            run.values[param.name] = param.type_cast_value(ctx, value)
    run.write(run["out"])
    return run


def common_options(out_default: str):
    def decorator(command):
        command = click.option("--out", type=click.Path(path_type=Path), default=out_default, show_default=True,
                               help="Output directory")(command)
        command = click.option("--seed", type=int, default=0, show_default=True, help="Random seed")(command)
        command = click.option("--config", type=click.Path(exists=True, dir_okay=False, path_type=Path),
                               default=None, help="TOML or JSON file with flag values")(command)
        return command
    return decorator


def analysis_options(command):
    command = click.option("--limit", type=int, default=None, help="Use at most this many images")(command)
    command = click.option("--split", type=click.Choice(["train", "test"]), default="test", show_default=True)(command)
    command = click.option("--data", type=click.Path(path_type=Path), required=True, help="Dataset directory")(command)
    command = click.option("--checkpoint", type=click.Path(path_type=Path), required=True,
                           help="Model checkpoint (.cr8w)")(command)
    return command


def load_inputs(run: RunConfig):
    model = load_checkpoint(run["checkpoint"])
    samples, _ = load_dataset(run["data"], run["split"])
    if run.get("limit") is not None:
        samples = samples[: run["limit"]]
    if not samples:
        raise ConfigurationError(f"No samples in the {run['split']} split of {run['data']}")
    return model, samples


@click.group()
@click.option("--verbose", is_flag=True, help="Log at DEBUG level")
@click.option("--threads", type=int, default=None, help="Number of torch threads")
def main(verbose: bool, threads: Optional[int]):
    """ White-box transformer training and emergent segmentation analysis """
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(asctime)s %(name)s %(levelname)s: %(message)s",
    )
    if threads is not None:
        torch.set_num_threads(threads)


@main.command("generate-data")
@common_options("data")
@click.option("--classes", type=int, default=3, show_default=True, help="Number of shape families")
@click.option("--count", type=int, default=2500, show_default=True, help="Number of images")
@click.option("--size", type=int, default=32, show_default=True, help="Image side in pixels")
@click.option("--patch", type=int, default=8, show_default=True, help="Patch side for patch ground truth")
@click.option("--channels", type=click.Choice(["1", "3"]), default="3", show_default=True)
@click.option("--test-fraction", type=float, default=0.2, show_default=True)
@click.pass_context
@handle_errors
def generate_data(ctx, **_):
    """ Generate the synthetic shapes dataset """
    run = resolve_run(ctx)
    cfg = SynthDataConfig(
        num_classes=run["classes"],
        image_size=run["size"],
        channels=int(run["channels"]),
        patch_size=run["patch"],
        test_fraction=run["test_fraction"],
        seed=run["seed"],
    )
    samples = generate_dataset(cfg, run["count"], progress=True)
    manifest = export_dataset(samples, run["out"], cfg)
    click.echo(f"Wrote {len(samples)} samples to {manifest.parent}")


@main.command("train")
@common_options("runs")
@click.option("--data", type=click.Path(path_type=Path), required=True, help="Dataset directory")
@click.option("--arch", type=click.Choice(sorted(ARCHITECTURES)), default="crate", show_default=True)
@click.option("--depth", type=int, default=4, show_default=True, help="Number of layers L")
@click.option("--dim", type=int, default=64, show_default=True, help="Token dimension d")
@click.option("--heads", type=int, default=4, show_default=True, help="Number of heads K")
@click.option("--patch", type=int, default=8, show_default=True, help="Patch side")
@click.option("--mlp-hidden", type=int, default=256, show_default=True, help="Hidden width of MLP blocks")
@click.option("--subspace-init", type=click.Choice(["kaiming", "orthonormal"]), default="kaiming", show_default=True)
@click.option("--epochs", type=int, default=OPTIMIZER_DEFAULTS.epochs, show_default=True)
@click.option("--opt", type=click.Choice(["lion", "sgd"]), default=OPTIMIZER_DEFAULTS.kind, show_default=True)
@click.option("--lr", type=float, default=OPTIMIZER_DEFAULTS.lr, show_default=True, help="Peak learning rate")
@click.option("--weight-decay", type=float, default=OPTIMIZER_DEFAULTS.weight_decay, show_default=True)
@click.option("--batch-size", type=int, default=OPTIMIZER_DEFAULTS.batch_size, show_default=True)
@click.option("--warmup-epochs", type=int, default=OPTIMIZER_DEFAULTS.warmup_epochs, show_default=True)
@click.option("--schedule", type=click.Choice(SCHEDULES), default=OPTIMIZER_DEFAULTS.schedule, show_default=True)
@click.option("--save-every", type=int, default=0, show_default=True,
              help="Also save checkpoints/epoch_{k}.cr8w every this many epochs; 0 disables")
@click.option("--progress/--no-progress", default=True, help="Show a progress bar")
@click.pass_context
@handle_errors
def train_command(ctx, **_):
    """ Train a model variant on a generated dataset """
    run = resolve_run(ctx)
    if run["depth"] < 1:
        raise ConfigurationError(f"--depth must be at least 1, got {run['depth']}")
    if run["heads"] < 1 or run["dim"] % run["heads"]:
        raise ConfigurationError(f"--heads {run['heads']} must divide --dim {run['dim']}")
    if run["save_every"] < 0:
        raise ConfigurationError(f"--save-every must be nonnegative, got {run['save_every']}")
    train_samples, data_cfg = load_dataset(run["data"], "train")
    test_samples, _ = load_dataset(run["data"], "test")
    if not train_samples:
        raise ConfigurationError(f"Dataset {run['data']} has no training samples")
    config = ModelConfig.for_architecture(
        run["arch"],
        num_layers=run["depth"],
        model_dim=run["dim"],
        num_heads=run["heads"],
        head_dim=run["dim"] // run["heads"],
        image_shape=(data_cfg.channels, data_cfg.image_size, data_cfg.image_size),
        patch_shape=(run["patch"], run["patch"]),
        num_classes=data_cfg.num_classes,
        mlp_hidden=run["mlp_hidden"],
        subspace_init=run["subspace_init"],
    )
    opt = OptimizerConfig(
        kind=run["opt"],
        lr=run["lr"],
        weight_decay=run["weight_decay"],
        batch_size=run["batch_size"],
        epochs=run["epochs"],
        warmup_epochs=run["warmup_epochs"],
        schedule=run["schedule"],
        seed=run["seed"],
    )
    out = Path(run["out"])
    model = build_model(config, seed=run["seed"])
    save_checkpoint(model, out / "checkpoints" / "init.cr8w")

    def echo_epoch(record):
        test = "" if record.test_accuracy is None else f", test accuracy {record.test_accuracy:.3f}"
        click.echo(f"epoch {record.epoch:3d}: loss {record.loss:.4f}, accuracy {record.accuracy:.3f}{test}")
        if run["save_every"] and record.epoch % run["save_every"] == 0:
            save_checkpoint(model, out / "checkpoints" / f"epoch_{record.epoch}.cr8w")

    state = train(TrainState(model), train_samples, opt, test_samples, progress=run["progress"], on_epoch=echo_epoch)
    save_checkpoint(model, out / "checkpoints" / "model.cr8w")
    state.history_frame().to_csv(out / "reports" / "history.csv", index=False)

    report = MetricsReport(run=f"{run['arch']}-seed{run['seed']}", config=run.to_dict()["values"])
    report.config["model"] = config.to_dict()
    report.add_epochs(state.history)
    report.analysis["test_accuracy"] = evaluate_accuracy(model, test_samples) if test_samples else None
    report.save(out / "reports" / "metrics.json")


@main.command("attn")
@common_options("runs/attn")
@analysis_options
@click.option("--layer", type=int, default=None, help="Layer (1-based); defaults to the penultimate layer")
@click.option("--head", type=int, default=None, help="Head (0-based); defaults to every head")
@click.option("--count", type=int, default=4, show_default=True, help="Number of images to render")
@click.option("--P", "--top-fraction", "top_fraction", type=float, default=0.6, show_default=True)
@click.option("--noise-std", type=float, default=0.0, show_default=True, help="Gaussian pixel noise")
@click.option("--noise-fraction", type=float, default=0.5, show_default=True, help="Fraction of noisy pixels")
@click.pass_context
@handle_errors
def attn_command(ctx, **_):
    """ Render class-token attention heatmaps and thresholded mask overlays """
    run = resolve_run(ctx)
    model, samples = load_inputs(run)
    config = model.config
    layer = resolve_layers(run["layer"], config.num_layers)[0]
    heads = list(range(config.num_heads)) if run["head"] is None else [run["head"]]
    if any(not 0 <= head < config.num_heads for head in heads):
        raise ConfigurationError(f"Head {run['head']} is out of range 0..{config.num_heads - 1}")
    if not 1 <= run["count"] <= 128:
        raise ConfigurationError(f"--count must lie in 1..128, got {run['count']}")
    samples = samples[: run["count"]]
    for position, sample in enumerate(samples):
        if run["noise_std"] > 0:
            sample.image = add_pixel_noise(sample.image, run["noise_std"], run["noise_fraction"], run["seed"] + position)
    figures = Path(run["out"]) / "figures"
    trace = run_traces(model, samples, batch_size=len(samples))[0]
    entries = []
    for position, sample in enumerate(samples):
        maps = attention_maps(trace, layer, position)
        for head in heads:
            attention = maps[head]
            mask = attention_to_mask(attention, run["top_fraction"])
            stem = f"attn_img{sample.index:05d}_layer{layer}_head{head}"
            write_image(render_heatmap(attention.values, config.grid_shape, upsample=config.patch_shape),
                        figures / f"{stem}.png")
            pixel_mask = upsample_nearest(mask.bits.reshape(config.grid_shape), config.patch_shape)
            write_image(overlay_mask(sample.image, pixel_mask), figures / f"{stem}_overlay.png")
            entries.append({
                "image": sample.index,
                "layer": layer,
                "head": head,
                "attention": attention.values.tolist(),
                "mask": mask.bits.astype(int).tolist(),
            })
    write_json({"layer": layer, "maps": entries}, Path(run["out"]) / "reports" / "attn.json")
    click.echo(f"Rendered {len(entries)} attention maps at layer {layer}")


@main.command("pca")
@common_options("runs/pca")
@analysis_options
@click.option("--layer", type=int, default=None, help="Layer (1-based); defaults to the penultimate layer")
@click.option("--family", type=str, default=None, help="Shape family to visualise; defaults to the first")
@click.option("--count", type=int, default=8, show_default=True, help="Number of images of the family")
@click.option("--threshold", type=float, default=0.5, show_default=True, help="Foreground threshold on u_0")
@click.pass_context
@handle_errors
def pca_command(ctx, **_):
    """ Color patch features by their leading principal components """
    run = resolve_run(ctx)
    model, samples = load_inputs(run)
    layer = resolve_layers(run["layer"], model.config.num_layers)[0]
    family = run["family"] or samples[0].family
    chosen = [s for s in samples if s.family == family][: run["count"]]
    if not chosen:
        raise ConfigurationError(f"No samples of family '{family}'")
    result = pca_analysis(model, chosen, layer, run["threshold"])
    figures = Path(run["out"]) / "figures"
    for sample, rgb in zip(chosen, result.rgb):
        write_image(upsample_nearest(rgb, model.config.patch_shape), figures / f"pca_img{sample.index:05d}_layer{layer}.png")
    write_json({
        "layer": layer,
        "family": family,
        "images": [s.index for s in chosen],
        "foreground_fraction": float(np.mean([f.mean() for f in result.foreground])),
        "eigenvalues": result.eigenvalues.tolist(),
    }, Path(run["out"]) / "reports" / "pca.json")
    click.echo(f"Wrote {len(chosen)} PCA images for family {family} at layer {layer}")


@main.command("seg-miou")
@common_options("runs/seg-miou")
@analysis_options
@click.option("--layer", type=str, default=None, help="Layer (1-based) or 'all'; defaults to the penultimate layer")
@click.option("--P", "--top-fraction", "top_fraction", type=float, default=0.6, show_default=True)
@click.pass_context
@handle_errors
def seg_miou_command(ctx, **_):
    """ Best-head attention mIoU against the patch ground truth """
    run = resolve_run(ctx)
    model, samples = load_inputs(run)
    layers = resolve_layers(run["layer"], model.config.num_layers)
    reports = [segmentation_miou(model, samples, layer, run["top_fraction"], seed=run["seed"]) for layer in layers]
    write_json({"P": run["top_fraction"], "layers": reports}, Path(run["out"]) / "reports" / "seg_miou.json")
    for report in reports:
        click.echo(
            f"layer {report['layer']}: mIoU {report['miou']:.4f} (random baseline {report['random_baseline']:.4f})"
        )


@main.command("maskcut")
@common_options("runs/maskcut")
@analysis_options
@click.option("--layer", type=str, default=None, help="Layer (1-based) or 'all'; defaults to the penultimate layer")
@click.option("--n", "--num-objects", "num_objects", type=int, default=3, show_default=True)
@click.option("--tau", type=float, default=0.15, show_default=True)
@click.option("--normalize/--no-normalize", default=True, help="Cosine affinities")
@click.pass_context
@handle_errors
def maskcut_command(ctx, **_):
    """ MaskCut object discovery scored by class-agnostic AP """
    run = resolve_run(ctx)
    model, samples = load_inputs(run)
    cfg = MaskCutConfig(num_objects=run["num_objects"], tau=run["tau"], normalize=run["normalize"])
    layers = resolve_layers(run["layer"], model.config.num_layers)
    entries = []
    for layer in layers:
        report = maskcut_analysis(model, samples, layer, cfg)
        results = report.pop("results")
        report["images"] = []
        for sample, result in zip(samples, results):
            data = result.to_dict()
            report["images"].append(
                {"image": sample.index, "masks": data["masks"], "boxes": data["boxes"], "scores": data["scores"]}
            )
        entries.append(report)
        click.echo(f"layer {layer}: AP50 {report['ap50']:.4f}, AP75 {report['ap75']:.4f}, AP {report['ap']:.4f}")
    write_json({"n": cfg.num_objects, "tau": cfg.tau, "layers": entries}, Path(run["out"]) / "reports" / "maskcut.json")


@main.command("rates")
@common_options("runs/rates")
@analysis_options
@click.option("--layer", type=str, default="all", show_default=True, help="Layer (1-based) or 'all'")
@click.option("--trials", type=int, default=100, show_default=True, help="Gradient diagnostic trials")
@click.pass_context
@handle_errors
def rates_command(ctx, **_):
    """ Per-layer coding rates and the MSSA gradient diagnostic """
    run = resolve_run(ctx)
    model, samples = load_inputs(run)
    layers = resolve_layers(run["layer"], model.config.num_layers)
    params = CodingRateParams(epsilon=model.config.epsilon, sparsity=model.config.sparsity)
    reports = rate_reports(model, samples, layers, params)
    diagnostics = diagnostic_trials(run["trials"], epsilon=params.epsilon, seed=run["seed"]) if run["trials"] > 0 else []
    metrics = MetricsReport(run=f"rates-seed{run['seed']}", config=run.to_dict()["values"])
    metrics.set_rates(reports)
    metrics.analysis["mssa_diagnostic"] = {
        "trials": len(diagnostics),
        "positive_cosine": sum(d.cosine > 0 for d in diagnostics),
        "mean_cosine": float(np.mean([d.cosine for d in diagnostics])) if diagnostics else None,
    }
    metrics.save(Path(run["out"]) / "reports" / "rates.json")
    for report in reports:
        click.echo(f"layer {report.layer}: R {report.R:.4f}, Rc {report.Rc:.4f}, l0 {report.l0}, l1 {report.l1:.2f}")


def _grad_check_inputs(run: RunConfig) -> Tuple[object, List]:
    if run["checkpoint"] is not None:
        model = load_checkpoint(run["checkpoint"]).double()
        if run["data"] is None:
            raise ConfigurationError("--data is required together with --checkpoint")
        samples, _ = load_dataset(run["data"], "train")
        return model, samples[: run["batch"]]
    config = ModelConfig.for_architecture(
        run["arch"], num_layers=2, model_dim=8, num_heads=2, head_dim=4,
        image_shape=(3, 8, 8), patch_shape=(4, 4), num_classes=3, mlp_hidden=16,
    )
    data_cfg = SynthDataConfig(num_classes=3, image_size=8, patch_size=4, min_area=0.2, max_area=0.6, seed=run["seed"])
    samples = [generate_sample(data_cfg, i) for i in range(run["batch"])]
    return build_model(config, seed=run["seed"], dtype=torch.float64), samples


@main.command("grad-check")
@common_options("runs/grad-check")
@click.option("--checkpoint", type=click.Path(path_type=Path), default=None,
              help="Check a saved model instead of the tiny configuration")
@click.option("--data", type=click.Path(path_type=Path), default=None, help="Dataset for --checkpoint")
@click.option("--arch", type=click.Choice(sorted(ARCHITECTURES)), default="crate", show_default=True)
@click.option("--batch", type=int, default=4, show_default=True, help="Number of samples in the checked batch")
@click.option("--step", type=float, default=1e-5, show_default=True, help="Finite-difference step")
@click.option("--tolerance", type=float, default=1e-4, show_default=True)
@click.option("--max-entries", type=int, default=None, help="Check at most this many entries per group")
@click.pass_context
@handle_errors
def grad_check_command(ctx, **_):
    """ Compare backpropagated gradients with central finite differences """
    run = resolve_run(ctx)
    if run["batch"] < 1:
        raise ConfigurationError(f"--batch must be positive, got {run['batch']}")
    model, samples = _grad_check_inputs(run)
    images, labels = stack_samples(samples, torch.float64)
    table = finite_difference_check(
        model, images, labels, step=run["step"], tolerance=run["tolerance"],
        max_entries=run["max_entries"], seed=run["seed"],
    )
    table["status"] = np.where(table["passed"], "pass", "fail")
    reports = Path(run["out"]) / "reports"
    table.to_csv(reports / "grad_check.csv", index=False)
    write_json({"groups": table.drop(columns="passed").to_dict(orient="records")}, reports / "grad_check.json")
    click.echo(table[["group", "entries", "rel_error", "status"]].to_string(index=False))
    failed = table.loc[~table["passed"], "group"].tolist()
    if failed:
        raise NumericalError(f"Finite-difference check failed for {', '.join(failed)}")


if __name__ == "__main__":
    main()
