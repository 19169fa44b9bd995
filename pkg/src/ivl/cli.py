"""Command-line entry point: dataset generation, training, evaluation,
inference with memory dumps, and the gradient self-test.

Exit codes: 0 success, 1 usage error, 2 runtime failure, 3 selftest failure.
Heavy imports happen inside commands so ``--threads`` can pin the BLAS thread
count before numpy loads.
"""

from __future__ import annotations

import json
import os
import sys
from pathlib import Path

import click

EXIT_USAGE = 1
EXIT_RUNTIME = 2
EXIT_SELFTEST = 3


def _set_threads(ctx, param, value):
    if value is not None:
        for var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ[var] = str(value)
    return value


def _data_root():
    return Path(os.environ.get("IVL_DATA_DIR", "."))


class _Group(click.Group):
    def invoke(self, ctx):
        try:
            return super().invoke(ctx)
        except click.exceptions.Exit:
            raise
        except click.UsageError:
            raise
        except Exception as e:
            click.echo(f"error: {e}", err=True)
            sys.exit(EXIT_RUNTIME)


@click.group(cls=_Group)
@click.option("--threads", type=int, default=None, callback=_set_threads,
              expose_value=False, is_eager=True,
              help="Pin the BLAS/OpenMP thread count (set before numpy loads).")
def main():
    """Inductive visual localisation toolkit."""


@main.command()
@click.argument("preset")
@click.argument("out_dir", type=click.Path(path_type=Path))
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--force", is_flag=True, help="Overwrite a non-empty output directory.")
@click.option("--image-size", type=int, default=None,
              help="Scene size for counting datasets (default 128).")
def gen(preset, out_dir, seed, force, image_size):
    """Generate a dataset PRESET (toy-blocks | shapes-count) into OUT_DIR."""
    from .data import PRESETS, build_dataset

    if preset not in PRESETS:
        raise click.UsageError(f"unknown preset {preset!r}; valid: {', '.join(sorted(PRESETS))}")
    kwargs = {} if image_size is None else {"image_size": image_size}
    manifest = build_dataset(preset, out_dir, seed=seed, force=force, **kwargs)
    for name, split in sorted(manifest["splits"].items()):
        click.echo(f"{name}: {split['count']} images")
    click.echo(f"wrote {out_dir}")


@main.command()
@click.argument("config_path", type=click.Path(exists=True, path_type=Path))
@click.option("--resume", is_flag=True, help="Continue from the run's latest checkpoint.")
@click.option("--seed", type=int, default=None, help="Override the config seed.")
@click.option("--max-steps", type=int, default=None, help="Override the config step budget.")
def train(config_path, resume, seed, max_steps):
    """Train the model described by a config file; writes checkpoints."""
    import numpy as np

    from .config import load_config, save_config
    from .models import build_model, load_checkpoint, model_summary
    from .data import load_split
    from .train import TrainingDiverged, train_model

    cfg = load_config(config_path)
    if seed is not None:
        cfg.train.seed = seed
    if max_steps is not None:
        cfg.train.max_steps = max_steps
    out_dir = Path(cfg.out_dir)
    dataset = Path(cfg.dataset)
    if not dataset.is_absolute():
        dataset = _data_root() / dataset
    split = load_split(dataset)

    resume_state = None
    ckpt = out_dir / "checkpoint"
    if resume and (ckpt / "manifest.json").exists():
        model, resume_state = load_checkpoint(ckpt, train_state=True)
        click.echo(f"resumed from {ckpt} at step {resume_state.get('step', 0)}")
    else:
        hyper = dict(cfg.model)
        if cfg.kind in ("block-parser", "e2e-blocks"):
            from .data import VOCAB
            hyper.setdefault("vocab_size", len(VOCAB))
        model = build_model(cfg.kind, hyper, np.random.default_rng(cfg.train.seed))
    out_dir.mkdir(parents=True, exist_ok=True)
    save_config(cfg, out_dir / "config.yaml")
    click.echo(model_summary(model))
    try:
        result = train_model(model, split, cfg.train, out_dir, resume_state=resume_state)
    except TrainingDiverged as e:
        click.echo(f"training diverged: {e}", err=True)
        sys.exit(EXIT_RUNTIME)
    click.echo(f"finished at step {result.steps}; final loss {result.final_loss:.4f}; "
               f"checkpoint at {result.checkpoint_dir}")


@main.command("eval")
@click.argument("checkpoint", type=click.Path(exists=True, path_type=Path))
@click.argument("dataset", type=click.Path(path_type=Path))
@click.option("--splits", default=None, help="Comma-separated split names (default: all test splits).")
@click.option("--json-out", type=click.Path(path_type=Path), default=None,
              help="Also write the report as JSON.")
@click.option("--max-steps", type=int, default=None, help="Inference step cap override.")
def eval_cmd(checkpoint, dataset, splits, json_out, max_steps):
    """Evaluate a CHECKPOINT on the test splits of DATASET."""
    from .data import load_dataset
    from .evaluate import evaluate_model
    from .models import load_checkpoint

    model, _ = load_checkpoint(checkpoint)
    dataset = dataset if dataset.is_absolute() else _data_root() / dataset
    _, all_splits = load_dataset(dataset)
    if splits:
        names = splits.split(",")
        missing = [n for n in names if n not in all_splits]
        if missing:
            raise click.UsageError(f"unknown split(s): {', '.join(missing)}")
        chosen = {n: all_splits[n] for n in names}
    else:
        chosen = {n: s for n, s in all_splits.items() if n.startswith("test")}
    report = evaluate_model(model, chosen)
    click.echo(report.table())
    if json_out:
        json_out.write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
        click.echo(f"wrote {json_out}")


@main.command()
@click.argument("checkpoint", type=click.Path(exists=True, path_type=Path))
@click.argument("image", type=click.Path(exists=True, path_type=Path))
@click.option("--dump-memory", "dump_dir", type=click.Path(path_type=Path), default=None,
              help="Write per-step memory / update / attention maps as PGMs.")
@click.option("--max-steps", type=int, default=32, show_default=True)
def infer(checkpoint, image, dump_dir, max_steps):
    """Run a CHECKPOINT on one IMAGE and print the prediction."""
    import numpy as np

    from .data import read_pgm, read_ppm, VOCAB
    from .evaluate import e2e_decode, infer_block, infer_count
    from .memory import write_pgm_map
    from .models import load_checkpoint

    model, _ = load_checkpoint(checkpoint)
    if image.suffix == ".pgm":
        arr = read_pgm(image).astype(np.float32)[None] / 255.0
    else:
        arr = np.moveaxis(read_ppm(image).astype(np.float32), 2, 0) / 255.0

    def dump(step, name, plane):
        if dump_dir is None:
            return
        Path(dump_dir).mkdir(parents=True, exist_ok=True)
        write_pgm_map(Path(dump_dir) / f"step{step:02d}_{name}.pgm", plane)

    if model.kind == "block-parser":
        res = infer_block(model, arr, max_steps=max_steps)
        for k, line in enumerate(res.lines[0]):
            click.echo(f"line {k + 1}: " + " ".join(VOCAB[t] for t in line))
        if not res.lines[0]:
            click.echo("(no lines)")
        for step in range(len(res.memory_trace)):
            dump(step, "memory", res.memory_trace[step][0, 0])
            dump(step, "update", np.clip(res.delta_trace[step][0, 0], 0, 1))
            s = res.s_alpha_trace[step][0, 0]
            dump(step, "attention", s / max(s.max(), 1e-6))
        if res.memory_trace:
            dump(len(res.memory_trace), "final", res.memory_trace[-1][0, 0])
    elif model.kind == "counter":
        res = infer_count(model, arr, max_steps=max_steps)
        click.echo(f"count: {int(res.counts[0])}")
        for step, p in enumerate(res.p_stop_trace):
            click.echo(f"step {step + 1}: p_stop {float(p[0]):.3f}")
            dump(step, "memory", res.memory_trace[step][0, 0])
            dump(step, "update", np.clip(res.delta_trace[step][0, 0], 0, 1))
        if res.memory_trace:
            dump(len(res.memory_trace), "final", res.memory_trace[-1][0, 0])
    elif model.kind == "e2e-blocks":
        seqs, _ = e2e_decode(model, arr, max_steps=max_steps)
        line, lines = [], []
        for tok in seqs[0]:
            if tok == model.eol:
                lines.append(line)
                line = []
            elif tok < model.vocab_size:
                line.append(tok)
        if line:
            lines.append(line)
        for k, ln in enumerate(lines):
            click.echo(f"line {k + 1}: " + " ".join(VOCAB[t] for t in ln))
    else:
        seqs, _ = e2e_decode(model, arr, max_steps=max_steps)
        click.echo(f"count: {sum(1 for t in seqs[0] if t == 0)}")


@main.command()
@click.option("--seeds", default="0,1,2,3,4", show_default=True,
              help="Comma-separated seeds for the gradient checks.")
@click.option("--corrupt-op", default=None,
              help="Deliberately break the named op's backward pass (negative control).")
@click.option("--quick", is_flag=True, help="Single seed, ops only.")
def selftest(seeds, corrupt_op, quick):
    """Finite-difference gradient checks for all ops and encoder presets."""
    from .selftest import run_selftest

    seed_list = tuple(int(s) for s in seeds.split(","))
    if quick:
        result = run_selftest(seeds=seed_list[:1], corrupt_op=corrupt_op, encoder_presets=[])
    else:
        result = run_selftest(seeds=seed_list, corrupt_op=corrupt_op)
    for line in result.lines():
        click.echo(line)
    if not result.passed:
        sys.exit(EXIT_SELFTEST)


if __name__ == "__main__":
    main()
