"""
Command-line interface for plm-kit.

Provides: init, show-config, make-synthetic, pretrain, finetune, evaluate,
train-decoder, generate, embed, replay subcommands.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 numeric failure (NaN/Inf loss).
"""

from __future__ import annotations

import dataclasses
import json
import sys
from pathlib import Path
from typing import Iterable, Optional, Sequence, Union

import click
import numpy as np

from plm_kit import synthetic, training
from plm_kit.bench import REFERENCE, BenchmarkReport, run_benchmark
from plm_kit.checkpoint import load_encoder, load_generator, save_checkpoint
from plm_kit.config import SAMPLING_MODES, OptimizerConfig, RunConfig
from plm_kit.data_io import (
    SPLIT_NAMES,
    FastaRecord,
    TaskKind,
    TaskSpec,
    load_task_csv,
    read_fasta,
    save_fasta,
    write_task_csv,
)
from plm_kit.encoder import embed_sequences, init_encoder, init_head
from plm_kit.errors import (
    ConfigError,
    EmptyDataError,
    NumericError,
    PLMError,
    ReplayMismatchError,
    TaskMismatchError,
)
from plm_kit.generative import (
    GenerationReport,
    init_generator,
    seed_generation_campaign,
    train_vae,
)
from plm_kit.manifest import RunManifest, digests, manifest_path
from plm_kit.optim import AdamHyper
from plm_kit.training import TrainRunReport

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3

TASK_KINDS = tuple(k.value for k in TaskKind)

PathLike = Union[str, Path]


# ── Rich console helpers ──────────────────────────────────


def _get_console(stderr: bool = False):
    try:
        from rich.console import Console
        return Console(stderr=stderr)
    except ImportError:
        return None


def _print(msg: str, style: str = ""):
    console = _get_console()
    if console:
        console.print(msg, style=style)
    else:
        click.echo(msg)


def _escape(text: str) -> str:
    try:
        from rich.markup import escape
        return escape(text)
    except ImportError:
        return text


def _error(msg: str):
    console = _get_console(stderr=True)
    if console:
        console.print(f"[bold red]✗ Error:[/] {_escape(msg)}")
    else:
        click.echo(f"Error: {msg}", err=True)


def _print_train_report(report: TrainRunReport):
    """Pretty-print a TrainRunReport."""
    final = f"{report.losses[-1]:.4f}" if report.losses else "n/a"
    try:
        from rich.console import Console
        from rich.panel import Panel
        from rich.table import Table

        console = Console()
        console.print(Panel(
            f"[bold green]✓ {report.stage}[/] finished {report.steps} step(s)\n"
            f"   Final loss: {final}\n"
            f"   Time: {report.wall_clock_s:.1f}s",
            title="Result",
            border_style="green",
        ))
        if report.metrics:
            table = Table(title="Metrics")
            table.add_column("Split", width=10)
            table.add_column("Metric", width=24)
            table.add_column("Value", justify="right")
            table.add_column("Support", justify="right", style="dim")
            for split_name, m in report.metrics.items():
                table.add_row(split_name, m.name, f"{m.value:.4f}", str(m.support))
            console.print(table)
    except ImportError:
        click.echo(f"\n{report.stage}: {report.steps} steps, final loss {final}")
        for split_name, m in report.metrics.items():
            click.echo(f"   {split_name} {m.name}: {m.value:.4f} (n={m.support})")


def _print_benchmark(report: BenchmarkReport):
    name = report.task.name
    reduced = REFERENCE["reduced_pretraining"].get(name)
    full = REFERENCE["full_pretraining"].get(name)
    try:
        from rich.console import Console
        from rich.table import Table

        table = Table(title=f"Benchmark: {name} ({report.split})", caption=REFERENCE["note"])
        table.add_column("Metric")
        table.add_column("Value", justify="right", style="bold")
        table.add_column("Support", justify="right", style="dim")
        table.add_column("Ref. reduced", justify="right", style="dim")
        table.add_column("Ref. full", justify="right", style="dim")
        for m in report.metrics:
            table.add_row(
                m.name,
                f"{m.value:.4f}",
                str(m.support),
                "-" if reduced is None else str(reduced),
                "-" if full is None else str(full),
            )
        Console().print(table)
    except ImportError:
        for m in report.metrics:
            click.echo(f"{name} {report.split} {m.name}: {m.value:.4f} (n={m.support})")


def _print_generation(report: GenerationReport):
    summary = report.summary()
    try:
        from rich.console import Console
        from rich.table import Table

        table = Table(title=f"Generation ({len(report.rows)} sequences)")
        table.add_column("σ", justify="right")
        table.add_column("n", justify="right", style="dim")
        table.add_column("Identity to seed", justify="right", style="bold")
        table.add_column("± s.e.", justify="right", style="dim")
        table.add_column("Mean length", justify="right")
        for row in summary:
            table.add_row(
                f"{row['sigma']:g}",
                str(row["n"]),
                f"{row['mean_identity']:.3f}",
                f"{row['std_error']:.3f}",
                f"{row['mean_length']:.1f}",
            )
        Console().print(table)
    except ImportError:
        for row in summary:
            click.echo(
                f"sigma={row['sigma']:g} n={row['n']} identity={row['mean_identity']:.3f}"
                f" ±{row['std_error']:.3f}"
            )


# ── Event handler for real-time feedback ──────────────────


def _cli_event_handler(event: str, **kwargs):
    """Print training and generation events to the terminal."""
    try:
        from rich.console import Console
        console = Console()
        prefix = "  "

        match event:
            case "pretrain_start":
                console.print("\n[bold cyan]🧬 Masked-LM pretraining[/]")
                console.print(
                    f"{prefix}{kwargs.get('steps')} steps on {kwargs.get('corpus_size')} "
                    f"sequences, {kwargs.get('holdout_size')} held out\n"
                )
            case "finetune_start":
                frozen = " (encoder frozen)" if kwargs.get("frozen") else ""
                console.print(f"\n[bold cyan]🎯 Fine-tuning[/] on {kwargs.get('task')}{frozen}")
                console.print(
                    f"{prefix}{kwargs.get('epochs')} epochs, "
                    f"{kwargs.get('train_size')} training examples\n"
                )
            case "vae_start":
                console.print("\n[bold cyan]🧪 Decoder training[/]")
                console.print(
                    f"{prefix}{kwargs.get('steps')} steps on {kwargs.get('corpus_size')} "
                    f"sequences, β warm-up over {kwargs.get('warmup_steps')} steps\n"
                )
            case "step":
                line = (
                    f"{prefix}[dim]{kwargs.get('stage')}[/] step "
                    f"{kwargs.get('step')}/{kwargs.get('total')}  loss {kwargs.get('loss', 0):.4f}"
                )
                if "kl" in kwargs:
                    line += (
                        f"  [dim]recon {kwargs['reconstruction']:.4f}"
                        f"  kl {kwargs['kl']:.4f}  β {kwargs['beta']:.3f}[/]"
                    )
                console.print(line)
            case "epoch_end":
                console.print(
                    f"{prefix}[dim]epoch[/] {kwargs.get('epoch')}/{kwargs.get('total')}"
                    f"  loss {kwargs.get('loss', 0):.4f}"
                )
            case "metric_undefined":
                console.print(
                    f"{prefix}[yellow]⚠[/] no {kwargs.get('split')} score: "
                    f"{_escape(str(kwargs.get('reason', '')))}"
                )
            case "pretrain_done" | "finetune_done" | "vae_done":
                console.print(f"{prefix}[green]✓[/] {event.removesuffix('_done')} complete")
            case "campaign_seed":
                console.print(
                    f"{prefix}[dim]─── Seed {kwargs.get('index')}/{kwargs.get('total')}:[/] "
                    f"{_escape(str(kwargs.get('seed_id', '')))}"
                )
            case "campaign_sigma":
                console.print(
                    f"{prefix}σ={kwargs.get('sigma', 0):g}  "
                    f"identity {kwargs.get('mean_identity', 0):.3f}"
                )
    except ImportError:
        pass  # Silent without rich


# ── Shared plumbing ───────────────────────────────────────


def _run_options(f):
    f = click.option("--seed", type=int, default=None, help="Global seed (overrides config)")(f)
    f = click.option("--config", "-c", "config_path", default=None, help="Config file path")(f)
    return f


def _load_config(config_path: Optional[str], seed: Optional[int], **overrides) -> RunConfig:
    return RunConfig.load(config_path, seed=seed, **overrides)


def _hyper(optimizer: OptimizerConfig, lr: float) -> AdamHyper:
    return AdamHyper(lr=lr, beta1=optimizer.beta1, beta2=optimizer.beta2, eps=optimizer.eps)


def _read_corpus(path: PathLike) -> list[FastaRecord]:
    records = read_fasta(path)
    if not records:
        raise EmptyDataError(f"{path}: no FASTA records")
    return records


def _write_json(path: PathLike, data: dict) -> Path:
    path = Path(path)
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def _write_manifest(
    command: str,
    config: RunConfig,
    config_path: Optional[str],
    inputs: Iterable[PathLike],
    outputs: Iterable[PathLike],
    primary: PathLike,
) -> Path:
    ctx = click.get_current_context()
    root = ctx.find_root()
    argv = (root.obj or {}).get("argv", sys.argv[1:])
    inputs = list(inputs)
    config_file = RunConfig.resolve_path(config_path)
    if config_file is not None:
        inputs.append(config_file)
    manifest = RunManifest(
        command=command,
        argv=list(argv),
        config=config.to_dict(),
        seed=config.seed,
        inputs=digests(inputs),
        outputs=digests(outputs),
    )
    path = manifest.write(manifest_path(primary))
    _print(f"  [dim]manifest: {path}[/]")
    return path


# ── CLI Commands ──────────────────────────────────────────


@click.group()
@click.version_option(package_name="plm-kit")
def cli():
    """🧬 plm-kit: desk-scale protein language models (pretrain, fine-tune, generate)."""
    pass


@cli.command()
@click.option("--dir", "-d", default=".", help="Directory to initialize")
def init(dir: str):
    """Initialize a workspace with a documented config.toml."""
    workspace = Path(dir)
    for d in ["data", "runs"]:
        (workspace / d).mkdir(parents=True, exist_ok=True)
        _print(f"  [green]✓[/] Created {d}/")

    config_path = workspace / "config.toml"
    if not config_path.exists():
        config_path.write_text(RunConfig().to_toml_string(), encoding="utf-8")
        _print("  [green]✓[/] Created config.toml")
    else:
        _print("  [dim]  config.toml already exists, skipping[/]")

    _print(
        "\n  [bold green]✓ Workspace ready![/] Try "
        "[cyan]plm-kit make-synthetic --task-kind corpus --out data/corpus.fasta[/]\n"
    )


@cli.command("show-config")
@click.option("--config", "-c", "config_path", default=None, help="Config file path")
def show_config(config_path):
    """Display the resolved configuration."""
    config = RunConfig.load(config_path)
    source = RunConfig.resolve_path(config_path)
    _print("\n[bold]Configuration[/]\n")
    _print(f"[dim]source: {source if source else 'built-in defaults'}[/]\n")
    _print(_escape(config.to_toml_string()))


@cli.command("make-synthetic")
@click.option(
    "--task-kind", "-k", required=True,
    type=click.Choice(("corpus",) + TASK_KINDS, case_sensitive=False),
    help="'corpus' writes FASTA; task kinds write a sequence,label CSV",
)
@click.option("--n", "n", type=click.IntRange(min=1), default=200, help="Number of records")
@click.option("--out", "-o", required=True, help="Output file")
@click.option("--min-len", type=click.IntRange(min=1), default=None, help="Shortest sequence")
@click.option("--max-len", type=click.IntRange(min=1), default=None, help="Longest sequence")
@_run_options
def make_synthetic(task_kind, n, out, min_len, max_len, config_path, seed):
    """Write a deterministic synthetic corpus or task dataset."""
    config = _load_config(config_path, seed)
    lengths = {k: v for k, v in (("min_len", min_len), ("max_len", max_len)) if v is not None}
    try:
        if task_kind.lower() == "corpus":
            data = synthetic.protein_corpus(n, seed=config.seed, **lengths)
        else:
            data = synthetic.task_rows(task_kind, n, seed=config.seed, **lengths)
    except ValueError as e:
        raise click.UsageError(str(e)) from e
    if task_kind.lower() == "corpus":
        save_fasta(data, out)
    else:
        write_task_csv(data, out)
    _print(f"  [green]✓[/] Wrote {n} {task_kind} records to [cyan]{out}[/]")
    _write_manifest("make-synthetic", config, config_path, [], [out], primary=out)


@cli.command()
@click.option("--corpus", required=True, help="FASTA corpus")
@click.option("--out", "-o", required=True, help="Encoder checkpoint to write")
@click.option("--steps", type=int, default=None, help="Override pretrain.steps")
@click.option("--batch-size", type=int, default=None, help="Override pretrain.batch_size")
@click.option("--lr", type=float, default=None, help="Override pretrain.lr")
@_run_options
def pretrain(corpus, out, steps, batch_size, lr, config_path, seed):
    """Pretrain an encoder with masked language modeling."""
    config = _load_config(
        config_path,
        seed,
        **{"pretrain.steps": steps, "pretrain.batch_size": batch_size, "pretrain.lr": lr},
    )
    records = _read_corpus(corpus)
    model = init_encoder(config.encoder)
    p = config.pretrain
    report = training.pretrain(
        model,
        synthetic.sequences_of(records),
        config.masking,
        _hyper(config.optimizer, p.lr),
        steps=p.steps,
        batch_size=p.batch_size,
        holdout_fraction=p.holdout_fraction,
        eval_rounds=p.eval_rounds,
        seed=config.seed,
        on_event=_cli_event_handler,
        log_every=config.paths.log_every,
    )
    save_checkpoint(model, out, config)
    report_path = _write_json(str(out) + ".report.json", report.to_dict(include_timing=False))
    _print_train_report(report)
    _write_manifest("pretrain", config, config_path, [corpus], [out, report_path], primary=out)


@cli.command()
@click.option("--ckpt", required=True, help="Pretrained encoder checkpoint")
@click.option("--task-csv", required=True, help="sequence,label[,split] CSV")
@click.option(
    "--task-kind", "-k", required=True,
    type=click.Choice(TASK_KINDS, case_sensitive=False),
)
@click.option("--task-name", default=None, help="Task name (defaults to the CSV file stem)")
@click.option("--out", "-o", required=True, help="Fine-tuned checkpoint to write")
@click.option("--freeze-encoder", is_flag=True, help="Train the head only")
@click.option("--epochs", type=int, default=None, help="Override finetune.epochs")
@_run_options
def finetune(ckpt, task_csv, task_kind, task_name, out, freeze_encoder, epochs, config_path, seed):
    """Fine-tune a task head (and optionally the encoder) on a labeled CSV."""
    config = _load_config(
        config_path,
        seed,
        **{
            "finetune.epochs": epochs,
            "finetune.freeze_encoder": True if freeze_encoder else None,
        },
    )
    model = load_encoder(ckpt)
    spec = TaskSpec(name=task_name or Path(task_csv).stem, kind=TaskKind.parse(task_kind))
    dataset = load_task_csv(task_csv, spec, seed=config.seed)
    head = init_head(
        dataset.spec.kind,
        model.config.hidden_dim,
        num_classes=dataset.spec.num_classes or 2,
        hidden=config.finetune.head_hidden,
        seed=config.seed,
    )
    report = training.finetune(
        model,
        head,
        dataset,
        config.finetune,
        config.optimizer,
        seed=config.seed,
        on_event=_cli_event_handler,
    )
    save_checkpoint(model, out, config)
    report_path = _write_json(str(out) + ".report.json", report.to_dict(include_timing=False))
    _print_train_report(report)
    _write_manifest(
        "finetune", config, config_path, [ckpt, task_csv], [out, report_path], primary=out
    )


@cli.command()
@click.option("--ckpt", required=True, help="Fine-tuned checkpoint (encoder + task head)")
@click.option("--task-csv", required=True, help="sequence,label[,split] CSV")
@click.option("--report", "report_path", required=True, help="BenchmarkReport JSON to write")
@click.option("--split", type=click.Choice(SPLIT_NAMES), default="test", help="Split to score")
@_run_options
def evaluate(ckpt, task_csv, report_path, split, config_path, seed):
    """Score a fine-tuned checkpoint and write a benchmark report."""
    config = _load_config(config_path, seed)
    model = load_encoder(ckpt)
    if model.head is None or model.task is None:
        raise TaskMismatchError(f"{ckpt}: checkpoint has no task head; run finetune first")
    dataset = load_task_csv(task_csv, model.task, seed=config.seed)
    report = run_benchmark(
        model, model.head, dataset, split=split, config=config.to_dict(), seed=config.seed
    )
    json_path, csv_path = report.write(report_path)
    _print_benchmark(report)
    _print(f"  [green]✓[/] Report: [cyan]{json_path}[/]")
    _write_manifest(
        "evaluate", config, config_path, [ckpt, task_csv], [json_path, csv_path],
        primary=json_path,
    )


@cli.command("train-decoder")
@click.option("--ckpt", required=True, help="Pretrained encoder checkpoint (kept frozen)")
@click.option("--corpus", required=True, help="FASTA corpus")
@click.option("--out", "-o", required=True, help="Decoder checkpoint to write")
@click.option("--epochs", type=int, default=None, help="Override vae.epochs")
@_run_options
def train_decoder(ckpt, corpus, out, epochs, config_path, seed):
    """Train the variational head and decoder on a frozen encoder."""
    config = _load_config(config_path, seed, **{"vae.epochs": epochs})
    encoder = load_encoder(ckpt)
    records = _read_corpus(corpus)
    generator = init_generator(encoder.config.hidden_dim, config.decoder)
    report = train_vae(
        encoder,
        generator,
        synthetic.sequences_of(records),
        config.vae,
        config.optimizer,
        seed=config.seed,
        on_event=_cli_event_handler,
        log_every=config.paths.log_every,
    )
    save_checkpoint(generator, out, config)
    report_path = _write_json(str(out) + ".report.json", report.to_dict(include_timing=False))
    _print_train_report(report)
    _write_manifest(
        "train-decoder", config, config_path, [ckpt, corpus], [out, report_path], primary=out
    )


@cli.command()
@click.option("--ckpt", required=True, help="Encoder checkpoint")
@click.option("--decoder-ckpt", required=True, help="Decoder checkpoint from train-decoder")
@click.option("--seed-fasta", required=True, help="Seed proteins (FASTA)")
@click.option("--sigma-grid", default=None, help="Comma-separated noise levels, e.g. 0,0.5,1,2")
@click.option("--n", "n_per_sigma", type=int, default=None, help="Samples per seed and sigma")
@click.option("--out-prefix", required=True, help="Writes <prefix>.fasta/.csv/.summary.json")
@click.option("--sampling", type=click.Choice(SAMPLING_MODES), default=None)
@click.option("--temperature", type=float, default=None)
@click.option("--finetune-seeds", is_flag=True, help="Adapt the decoder to the seeds first")
@_run_options
def generate(
    ckpt,
    decoder_ckpt,
    seed_fasta,
    sigma_grid,
    n_per_sigma,
    out_prefix,
    sampling,
    temperature,
    finetune_seeds,
    config_path,
    seed,
):
    """Generate variants around seed proteins across noise levels."""
    config = _load_config(
        config_path,
        seed,
        **{
            "campaign.sigma_grid": sigma_grid,
            "campaign.n_per_sigma": n_per_sigma,
            "campaign.sampling": sampling,
            "campaign.temperature": temperature,
        },
    )
    camp = config.campaign
    encoder = load_encoder(ckpt)
    generator = load_generator(decoder_ckpt)
    seeds = _read_corpus(seed_fasta)

    if finetune_seeds:
        train_vae(
            encoder,
            generator,
            synthetic.sequences_of(seeds),
            dataclasses.replace(config.vae, epochs=camp.finetune_seed_epochs),
            config.optimizer,
            seed=config.seed,
            on_event=_cli_event_handler,
            log_every=config.paths.log_every,
        )

    gen = dataclasses.replace(
        config.generation,
        sampling=camp.sampling,
        temperature=camp.temperature,
        seed=config.seed,
    ).validate()
    report = seed_generation_campaign(
        encoder,
        generator,
        seeds,
        camp.sigma_grid,
        camp.n_per_sigma,
        gen,
        seed=config.seed,
        on_event=_cli_event_handler,
    )
    paths = report.write(out_prefix)
    _print_generation(report)
    _print(f"  [green]✓[/] Wrote {len(report.rows)} sequences to [cyan]{paths['fasta']}[/]")
    _write_manifest(
        "generate",
        config,
        config_path,
        [ckpt, decoder_ckpt, seed_fasta],
        paths.values(),
        primary=out_prefix,
    )


@cli.command()
@click.option("--ckpt", required=True, help="Encoder checkpoint")
@click.option("--fasta", required=True, help="Sequences to embed")
@click.option("--out", "-o", required=True, help="Output .npy file (N x hidden_dim)")
@_run_options
def embed(ckpt, fasta, out, config_path, seed):
    """Write pooled sequence embeddings as a NumPy array."""
    config = _load_config(config_path, seed)
    model = load_encoder(ckpt)
    records = _read_corpus(fasta)
    embeddings = embed_sequences(model, synthetic.sequences_of(records))
    with open(out, "wb") as f:
        np.save(f, embeddings)
    _print(f"  [green]✓[/] {embeddings.shape[0]} x {embeddings.shape[1]} embeddings → {out}")
    _write_manifest("embed", config, config_path, [ckpt, fasta], [out], primary=out)


@cli.command()
@click.option("--manifest", "manifest_file", required=True, help="A *.manifest.json file")
def replay(manifest_file):
    """Re-run a recorded command and check its outputs are bit-identical."""
    manifest = RunManifest.load(manifest_file)
    manifest.check_inputs()
    _print(f"[bold cyan]↻ Replaying[/] plm-kit {_escape(' '.join(manifest.argv))}")
    code = run_cli(manifest.argv)
    if code != EXIT_OK:
        raise ReplayMismatchError(f"replayed command exited with code {code}")
    manifest.check_outputs()
    _print(f"  [bold green]✓ Reproduced {len(manifest.outputs)} output(s) bit-identically[/]")


# ── Entry points ──────────────────────────────────────────


def _fail(error: BaseException, code: int) -> int:
    _error(str(error))
    return code


def run_cli(argv: Optional[Sequence[str]] = None) -> int:
    """Run one command and map failures to exit codes."""
    args = list(sys.argv[1:] if argv is None else argv)
    if not args:
        with click.Context(cli, info_name="plm-kit") as ctx:
            click.echo(cli.get_help(ctx))
        return EXIT_USAGE
    try:
        rv = cli.main(args=args, prog_name="plm-kit", standalone_mode=False, obj={"argv": args})
    except click.ClickException as e:
        e.show()
        return EXIT_USAGE
    except click.Abort:
        return _fail(RuntimeError("aborted"), EXIT_USAGE)
    except ConfigError as e:
        return _fail(e, EXIT_USAGE)
    except NumericError as e:
        return _fail(e, EXIT_NUMERIC)
    except (PLMError, OSError, ValueError) as e:
        return _fail(e, EXIT_DATA)
    return rv if isinstance(rv, int) else EXIT_OK


def main() -> None:
    sys.exit(run_cli())


if __name__ == "__main__":
    main()
