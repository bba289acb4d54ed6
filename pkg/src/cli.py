"""
Command Line Interface for affect-align.

This module provides the click command group for every pipeline stage:
generating synthetic data, adversarial alignment, Procrustes refinement,
training, evaluation and the finite-difference gradient check.

Exit codes: 0 on success, 1 on usage errors, 2 on runtime errors.
"""

import logging
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional

import click
from rich.console import Console
from rich.logging import RichHandler
from rich.panel import Panel
from rich.progress import Progress, SpinnerColumn, TextColumn
from rich.table import Table

from . import __version__
from .alignment import LinearMap, adversarial_train, refine_with_dictionary
from .config import Settings, load_settings, merge_overrides
from .embeddings_io import normalize
from .errors import AffectAlignError, NumericError
from .harness import (
    alignment_dictionaries, alignment_report, evaluate, gen_synthetic, gradient_suite,
    load_dataset, train,
)
from .fusion_recurrence import DIMENSIONS
from .utils import Timer, load_json_config, save_json_config

console = Console()
err_console = Console(stderr=True)


class CLIContext:
    def __init__(self):
        self.settings: Settings = Settings()
        self.file_overrides: Dict[str, Dict[str, Any]] = {}

    def section(self, name: str, **flags):
        """Settings section with JSON-file values, then flags, layered on top."""
        return merge_overrides(getattr(self.settings, name), self.file_overrides.get(name, {}), flags)


def setup_logging(verbose: bool):
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(message)s",
        datefmt="[%X]",
        handlers=[RichHandler(console=err_console, show_path=False)],
        force=True,
    )


def _report_table(title: str, report: Dict[str, float]) -> Table:
    table = Table(title=title)
    table.add_column("Metric", style="cyan", no_wrap=True)
    table.add_column("Value", style="green", justify="right")
    for key, value in report.items():
        table.add_row(key, f"{value:.4f}")
    return table


@click.group()
@click.option('--settings', '-s', type=click.Path(dir_okay=False), help='YAML settings file')
@click.option('--config', '-c', type=click.Path(exists=True, dir_okay=False),
              help='JSON config file (overrides settings, overridden by flags)')
@click.option('--verbose', '-v', is_flag=True, help='Debug logging')
@click.version_option(version=__version__, prog_name='affect-align')
@click.pass_context
def cli(ctx, settings, config, verbose):
    """affect-align - Cross-modal speech emotion recognition pipeline."""
    setup_logging(verbose)
    ctx.ensure_object(dict)
    cli_ctx = CLIContext()
    cli_ctx.settings = load_settings(settings)
    if config:
        cli_ctx.file_overrides = load_json_config(Path(config))
    ctx.obj['cli_context'] = cli_ctx


@cli.command('gen-data')
@click.option('--out', '-o', 'out_dir', required=True, type=click.Path(file_okay=False), help='Output directory')
@click.option('--vocab-size', type=int, help='Vocabulary size')
@click.option('--speech-dim', type=int, help='Speech embedding dimension d_s')
@click.option('--text-dim', type=int, help='Text embedding dimension d_t')
@click.option('--noise', type=float, help='Gaussian noise added to the rotated speech rows')
@click.option('--train-segments', type=int, help='Number of training segments')
@click.option('--dev-segments', type=int, help='Number of development segments')
@click.option('--snr-db', type=float, help='Carrier to background noise ratio (dB)')
@click.option('--sample-rate', type=int, help='Waveform sample rate (Hz)')
@click.option('--segment-seconds', type=float, help='Segment duration (s)')
@click.option('--label-rate', type=float, help='Label rate (Hz)')
@click.option('--seed', type=int, help='Random seed')
@click.pass_context
def gen_data(ctx, out_dir, vocab_size, speech_dim, text_dim, noise, train_segments, dev_segments,
             snr_db, sample_rate, segment_seconds, label_rate, seed):
    """Generate a synthetic corpus with a known speech-to-text rotation."""
    cli_ctx = ctx.obj['cli_context']
    spec = cli_ctx.section('synthetic', vocab_size=vocab_size, speech_dim=speech_dim, text_dim=text_dim,
                           noise=noise, train_segments=train_segments, dev_segments=dev_segments,
                           snr_db=snr_db, seed=seed)
    features = cli_ctx.section('features', sample_rate=sample_rate, segment_seconds=segment_seconds,
                               label_rate=label_rate)

    with Progress(SpinnerColumn(), TextColumn("[progress.description]{task.description}"),
                  console=console) as progress:
        progress.add_task("Generating synthetic corpus...", total=None)
        manifest = gen_synthetic(spec, out_dir, features)

    splits = manifest['splits']
    console.print(Panel(
        f"Vocabulary: {spec.vocab_size} words (d_s={spec.speech_dim}, d_t={spec.text_dim})\n"
        f"Segments: {len(splits['train'])} train, {len(splits['dev'])} dev "
        f"({features.segment_seconds:g} s at {features.sample_rate} Hz)\n"
        f"Labels: {features.label_frames} frames per segment at {features.label_rate:g} Hz",
        title=f"Synthetic corpus written to {out_dir}",
        border_style="green"
    ))


def _alignment_flags(steps, discriminator_steps, batch_size, discriminator_lr, map_lr, warmup,
                     label_smoothing, beta, dictionary_size, seed) -> Dict[str, Any]:
    return dict(steps=steps, discriminator_steps=discriminator_steps, batch_size=batch_size,
                discriminator_lr=discriminator_lr, map_lr=map_lr, discriminator_warmup=warmup,
                label_smoothing=label_smoothing, orthogonality_beta=beta,
                dictionary_size=dictionary_size, seed=seed)


def _alignment_options(f):
    options = [
        click.option('--steps', type=int, help='Adversarial generator steps'),
        click.option('--discriminator-steps', type=int, help='Discriminator steps per generator step'),
        click.option('--batch-size', type=int, help='Embeddings per adversarial batch'),
        click.option('--discriminator-lr', type=float, help='Discriminator learning rate'),
        click.option('--map-lr', type=float, help='Map learning rate'),
        click.option('--warmup', type=int, help='Discriminator-only steps before the game starts'),
        click.option('--label-smoothing', type=float, help='Discriminator label smoothing'),
        click.option('--beta', type=float, help='Orthogonality pullback strength'),
        click.option('--dictionary-size', type=int, help='Refinement dictionary size'),
        click.option('--seed', type=int, help='Random seed'),
    ]
    for option in reversed(options):
        f = option(f)
    return f


def _print_alignment(title: str, linear_map: LinearMap, report: Dict[str, float]):
    if linear_map.history:
        last = linear_map.history[-1]
        report = dict(report, discriminator_accuracy=last.get('disc_accuracy', float('nan')))
    console.print(_report_table(title, report))


@cli.command()
@click.option('--data-dir', '-d', required=True, type=click.Path(exists=True, file_okay=False),
              help='Corpus directory')
@click.option('--out', '-o', required=True, type=click.Path(dir_okay=False), help='Map checkpoint to write')
@_alignment_options
@click.pass_context
def align(ctx, data_dir, out, steps, discriminator_steps, batch_size, discriminator_lr, map_lr, warmup,
          label_smoothing, beta, dictionary_size, seed):
    """Learn the speech-to-text map adversarially."""
    cli_ctx = ctx.obj['cli_context']
    config = cli_ctx.section('alignment', **_alignment_flags(
        steps, discriminator_steps, batch_size, discriminator_lr, map_lr, warmup, label_smoothing, beta,
        dictionary_size, seed))
    dataset = load_dataset(data_dir)
    speech, text = normalize(dataset.speech), normalize(dataset.text)

    with Timer() as timer:
        linear_map = adversarial_train(speech, text, config)
    linear_map.save(out)

    _, heldout = alignment_dictionaries(speech, text, config, dataset.heldout_pairs)
    report = alignment_report(linear_map, speech, text, heldout, dataset.rotation)
    _print_alignment("Adversarial alignment", linear_map, report)
    console.print(f"[green]+ Map ({linear_map.d_t}x{linear_map.d_s}) written to {out} "
                  f"in {timer.elapsed():.1f}s[/green]")


@cli.command()
@click.option('--data-dir', '-d', required=True, type=click.Path(exists=True, file_okay=False),
              help='Corpus directory')
@click.option('--map', 'map_path', required=True, type=click.Path(exists=True, dir_okay=False),
              help='Map checkpoint to refine')
@click.option('--out', '-o', required=True, type=click.Path(dir_okay=False), help='Refined map checkpoint')
@click.option('--dictionary-size', type=int, help='Refinement dictionary size')
@click.pass_context
def refine(ctx, data_dir, map_path, out, dictionary_size):
    """Refine a map with orthogonal Procrustes on frequent shared words."""
    cli_ctx = ctx.obj['cli_context']
    config = cli_ctx.section('alignment', dictionary_size=dictionary_size)
    dataset = load_dataset(data_dir)
    speech, text = normalize(dataset.speech), normalize(dataset.text)

    initial = LinearMap.load(map_path)
    pairs, heldout = alignment_dictionaries(speech, text, config, dataset.heldout_pairs)
    refined = refine_with_dictionary(speech, text, pairs, initial)
    refined.save(out)

    report = alignment_report(refined, speech, text, heldout, dataset.rotation)
    report['dictionary_pairs'] = float(pairs.k)
    console.print(_report_table("Procrustes refinement", report))
    console.print(f"[green]+ Refined map written to {out}[/green]")


@cli.command('train')
@click.option('--data-dir', '-d', required=True, type=click.Path(exists=True, file_okay=False),
              help='Corpus directory')
@click.option('--checkpoint-dir', type=click.Path(file_okay=False), help='Where checkpoints and metrics go')
@click.option('--map', 'map_path', type=click.Path(exists=True, dir_okay=False),
              help='Alignment map (fitted on the fly when omitted)')
@click.option('--resume', type=click.Path(exists=True, dir_okay=False), help='Checkpoint to resume from')
@click.option('--epochs', type=int, help='Training epochs')
@click.option('--learning-rate', '--lr', type=float, help='Adam learning rate')
@click.option('--batch-size', type=int, help='Sequences per mini-batch')
@click.option('--sequence-length', type=int, help='Label frames per sequence')
@click.option('--dropout', type=float, help='Dropout on the fused features')
@click.option('--recurrent-dropout', type=float, help='Dropout on the recurrent state')
@click.option('--clip-norm', type=float, help='Gradient norm clipping threshold')
@click.option('--clip-scope', type=click.Choice(['lstm', 'global']), help='Which gradients are clipped')
@click.option('--fusion', type=click.Choice(['concat', 'disentangled']), help='Fusion strategy')
@click.option('--features', type=click.Choice(['fused', 'semantic', 'paralinguistic']),
              help='Feature streams fed to the model')
@click.option('--semantic-source', type=click.Choice(['aligned', 'speech', 'text']),
              help='Where semantic frames come from')
@click.option('--shared-query/--no-shared-query', default=None, help='One attention query per layer')
@click.option('--seed', type=int, help='Random seed')
@click.pass_context
def train_command(ctx, data_dir, checkpoint_dir, map_path, resume, epochs, learning_rate, batch_size,
                  sequence_length, dropout, recurrent_dropout, clip_norm, clip_scope, fusion, features,
                  semantic_source, shared_query, seed):
    """Train the emotion model and keep the best development checkpoint."""
    cli_ctx = ctx.obj['cli_context']
    config = cli_ctx.section(
        'training', data_dir=data_dir, checkpoint_dir=checkpoint_dir, map_path=map_path, epochs=epochs,
        learning_rate=learning_rate, batch_size=batch_size, sequence_length=sequence_length,
        dropout=dropout, recurrent_dropout=recurrent_dropout, clip_norm=clip_norm, clip_scope=clip_scope,
        fusion=fusion, features=features, semantic_source=semantic_source, shared_query=shared_query,
        seed=seed)
    alignment = cli_ctx.section('alignment')
    dataset = load_dataset(data_dir)

    console.print(f"[bold blue]Training {config.fusion} model on {data_dir}[/bold blue]")
    result = train(config, dataset, alignment=alignment, resume=resume)

    table = Table(title="Training history")
    table.add_column("Epoch", style="cyan", justify="right")
    table.add_column("Loss", justify="right")
    table.add_column("Train CCC", style="green", justify="right")
    table.add_column("Dev CCC", style="magenta", justify="right")
    table.add_column("Best", style="yellow")
    for record in result.history:
        loss = record['train_loss']
        dev = record['dev_ccc']
        table.add_row(str(record['epoch']), "-" if loss is None else f"{loss:.4f}",
                      f"{record['train_ccc']['mean']:.4f}", "-" if dev is None else f"{dev['mean']:.4f}",
                      "*" if record['best'] else "")
    console.print(table)
    console.print(f"[green]+ Checkpoints in {config.checkpoint_dir}[/green]")


@cli.command('eval')
@click.option('--checkpoint', required=True, type=click.Path(exists=True, dir_okay=False),
              help='Model checkpoint')
@click.option('--data-dir', '-d', required=True, type=click.Path(exists=True, file_okay=False),
              help='Corpus directory')
@click.option('--split', default='dev', show_default=True, help='Split to score')
@click.option('--json-out', type=click.Path(dir_okay=False), help='Also write the scores as JSON')
@click.pass_context
def eval_command(ctx, checkpoint, data_dir, split, json_out):
    """Score a checkpoint per affect dimension (CCC)."""
    dataset = load_dataset(data_dir)
    scores = evaluate(checkpoint, dataset, split=split)

    table = Table(title=f"CCC on '{split}'")
    table.add_column("Dimension", style="cyan")
    table.add_column("CCC", style="green", justify="right")
    table.add_column("Note", style="yellow")
    for name in DIMENSIONS:
        note = "degenerate (constant series)" if name in scores['degenerate'] else ""
        table.add_row(name, f"{scores[name]:.4f}", note)
    table.add_row("mean", f"{scores['mean']:.4f}", "")
    console.print(table)
    if json_out:
        save_json_config(scores, Path(json_out))


@cli.command('grad-check')
@click.option('--cases', default=20, show_default=True, type=click.IntRange(min=1),
              help='Random cases per operation')
@click.option('--tolerance', default=1e-4, show_default=True, type=float, help='Largest relative error')
@click.option('--seed', default=0, show_default=True, type=int, help='Random seed')
def grad_check(cases, tolerance, seed):
    """Compare tape gradients with central differences for every differentiable op."""
    with Timer() as timer:
        worst = gradient_suite(cases=cases, seed=seed)

    table = Table(title=f"Gradient check ({cases} cases per op)")
    table.add_column("Operation", style="cyan")
    table.add_column("Worst relative error", justify="right")
    table.add_column("Status")
    failed: List[str] = []
    for name, error in worst.items():
        ok = error < tolerance
        if not ok:
            failed.append(name)
        table.add_row(name, f"{error:.2e}", "[green]pass[/green]" if ok else "[red]FAIL[/red]")
    console.print(table)
    console.print(f"Finished in {timer.elapsed():.1f}s")
    if failed:
        raise NumericError(f"gradient check failed for: {', '.join(failed)}")


def main(argv: Optional[List[str]] = None) -> int:
    """Run the CLI and return its exit code."""
    try:
        rv = cli.main(args=argv, prog_name='affect-align', standalone_mode=False)
    except click.exceptions.Abort:
        err_console.print("Aborted.")
        return 1
    except click.ClickException as e:
        e.show(file=sys.stderr)
        return 1
    except (AffectAlignError, OSError) as e:
        err_console.print(f"[red]Error: {e}[/red]")
        return 2
    return rv if isinstance(rv, int) else 0


def run():
    sys.exit(main())


if __name__ == '__main__':
    run()
