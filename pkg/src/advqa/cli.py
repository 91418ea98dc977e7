"""Command-line front end: attack a dataset, replay stored pairs, inspect traces.

Run layout written by ``attack``::

    out/
      run.json          resolved config, hashes, counts
      inputs.jsonl      per-sample question/answers plus attack metrics
      adv/<id>.png      quantized adversarial image (for inspection)
      adv/<id>.npy      float64 sidecar tensor (authoritative)
      adv/<id>.txt      adversarial question
      trace/<id>.json   candidate set, trigger schedule, per-iteration trace
      report.jsonl      EvalRecord lines + summary

``eval`` replays sidecars against a (possibly different) victim without ever
mutating the stored artifacts.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import click

from . import adapters
from .core.config import (
    apply_ablation,
    build_attack_config,
    build_llm_settings,
    config_hash,
    env_overrides,
    merge_values,
    parse_config_file,
)
from .core.constraints import linf_distance
from .core.errors import AdvqaError, ConfigError, DatasetError
from .core.types import AnswerSet, AttackConfig
from .evalkit import (
    Sample,
    emit_report,
    load_dataset,
    load_image_png,
    load_sidecar,
    make_record,
    save_image_png,
    save_sidecar,
)
from .llm_bridge import client_from_settings, load_prompt_template
from .orchestrator import run_attack, should_trigger_joint
from .semantics import default_encoder
from .text_attack import build_candidates


def derive_seed(seed: int, index: int) -> int:
    """Per-sample seed: base seed XOR a stable hash of the sample index."""
    digest = hashlib.blake2s(str(index).encode("ascii"), digest_size=8).digest()
    return (seed ^ int.from_bytes(digest, "little")) & (2**63 - 1)


def trigger_schedule(max_iters: int, w_count: int) -> list[int]:
    return [m for m in range(1, max_iters + 1) if should_trigger_joint(m, max_iters, w_count)]


def _fail(message: str) -> None:
    click.echo(json.dumps({"error": message}), err=True)
    sys.exit(1)


def _resolve_config(config_path, overrides: dict[str, str]):
    file_values = parse_config_file(config_path) if config_path else {}
    merged = merge_values(file_values, env_overrides(), overrides)
    return build_attack_config(merged), build_llm_settings(merged)


@click.group()
def main() -> None:
    """Transferable image-text adversarial attacks for VQA models."""
    import torch

    # tiny models: single-threaded kernels are faster and bitwise reproducible
    torch.set_num_threads(1)


@main.command("attack")
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--data", "data_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--model", default="toy", show_default=True)
@click.option("--victim", default="toy", show_default=True)
@click.option("--out", "out_dir", type=click.Path(file_okay=False), required=True)
@click.option("--seed", type=int, default=None, help="Overrides the config-file seed.")
@click.option("--jobs", type=int, default=1, show_default=True)
@click.option("--ablation", type=click.Choice(["IE", "LRP", "LLM-E", "full"]), default=None)
@click.option("--llm", "llm_mode", type=click.Choice(["offline", "endpoint"]), default="offline", show_default=True)
@click.option("--dry-run", is_flag=True, help="Validate config and dataset, then exit.")
def cmd_attack(config_path, data_path, model, victim, out_dir, seed, jobs, ablation, llm_mode, dry_run):
    """Attack every sample in a dataset and write artifacts plus a report."""
    try:
        overrides: dict[str, str] = {}
        if seed is not None:
            overrides["seed"] = str(seed)
        config, llm_settings = _resolve_config(config_path, overrides)
        if ablation:
            config = apply_ablation(config, ablation)
        if llm_mode == "offline":
            llm_settings = dataclasses.replace(llm_settings, mode="offline")
        elif not llm_settings.endpoint:
            raise ConfigError("--llm endpoint requires llm_endpoint in the config file or environment")
        if jobs < 1:
            raise ConfigError(f"--jobs must be >= 1, got {jobs}")
    except ConfigError as exc:
        raise click.UsageError(str(exc)) from exc

    warnings: list[str] = []
    try:
        samples = load_dataset(data_path, warnings=warnings)
    except (DatasetError, OSError) as exc:
        _fail(str(exc))
    for note in warnings:
        click.echo(f"warning: {note}", err=True)
    if not samples:
        _fail(f"{data_path}: no usable samples")

    run_hash = config_hash(config, extra={"model": model, "victim": victim})
    if dry_run:
        click.echo(
            json.dumps(
                {"samples": len(samples), "skipped": len(warnings), "config_hash": run_hash},
                sort_keys=True,
            )
        )
        return

    try:
        adapter = adapters.create_adapter(model, seed=config.seed)
        victim_model = adapters.create_victim(victim, seed=config.seed)
    except ConfigError as exc:
        raise click.UsageError(str(exc)) from exc

    try:
        client = client_from_settings(llm_settings)
        prompt_template = load_prompt_template(llm_settings.prompt_template_path)
        encoder = default_encoder()
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)

        def attack_one(item):
            index, sample = item
            image = load_image_png(sample.image_path)
            text = adapter.tokenize(sample.question)
            cfg = dataclasses.replace(config, seed=derive_seed(config.seed, index))
            result = run_attack(
                image,
                text,
                sample.answers,
                adapter,
                cfg,
                client=client,
                encoder=encoder,
                prompt_template=prompt_template,
            )
            adv_question = adapter.detokenize(result.adv_text)
            record = make_record(
                sample_id=sample.id,
                clean_prediction=victim_model.predict(image, sample.question),
                adv_prediction=victim_model.predict(result.adv_image, adv_question),
                answers=sample.answers,
                linf=result.linf,
                semantic_sim=result.semantic_sim,
                n_substitutions=result.n_substitutions,
                iterations=cfg.max_iters,
            )
            return sample, text, result, adv_question, record

        items = list(enumerate(samples))
        if jobs > 1:
            with ThreadPoolExecutor(max_workers=jobs) as pool:
                outcomes = list(pool.map(attack_one, items))
        else:
            outcomes = [attack_one(item) for item in items]

        records = []
        input_rows = []
        for sample, text, result, adv_question, record in outcomes:
            records.append(record)
            save_image_png(out / "adv" / f"{sample.id}.png", result.adv_image)
            save_sidecar(out / "adv" / f"{sample.id}.npy", result.adv_image)
            (out / "adv" / f"{sample.id}.txt").write_text(adv_question + "\n", encoding="utf-8")
            _write_trace(out, sample, text, result, config, adapter)
            input_rows.append(
                {
                    "id": sample.id,
                    "image": sample.image_path,
                    "question": sample.question,
                    "answers": list(sample.answers),
                    "adv_question": adv_question,
                    "linf": record.linf,
                    "semantic_sim": record.semantic_sim,
                    "n_substitutions": record.n_substitutions,
                    "iterations": record.iterations,
                }
            )

        (out / "inputs.jsonl").write_text(
            "\n".join(json.dumps(row, sort_keys=True) for row in input_rows) + "\n",
            encoding="utf-8",
        )
        asr = emit_report(records, out / "report.jsonl", run_hash, n_skipped=len(warnings))
        run_meta = {
            "model": model,
            "victim": victim,
            "dataset": str(Path(data_path).resolve()),
            "config_hash": run_hash,
            "llm_mode": llm_settings.mode,
            "n_samples": len(records),
            "n_skipped": len(warnings),
            "config": _config_dict(config),
        }
        (out / "run.json").write_text(json.dumps(run_meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        click.echo(json.dumps({"asr": round(asr, 6), "n": len(records), "out": str(out)}, sort_keys=True))
    except AdvqaError as exc:
        _fail(str(exc))


def _config_dict(config: AttackConfig) -> dict:
    data = dataclasses.asdict(config)
    data["loss_flags"] = sorted(config.loss_flags)
    return data


def _write_trace(out: Path, sample: Sample, text, result, config: AttackConfig, adapter) -> None:
    w_count = len(text.informative_indices)
    candidates = {}
    if config.joint_attack_enabled and w_count:
        cand_set = build_candidates(text, config.top_k, adapter)
        candidates = {
            str(pos): [c.word for c in cand_set[pos]] for pos in cand_set.positions()
        }
    payload = {
        "id": sample.id,
        "question": sample.question,
        "answers": list(sample.answers),
        "w_count": w_count,
        "informative_positions": sorted(text.informative_indices),
        "max_iters": config.max_iters,
        "schedule": trigger_schedule(config.max_iters, w_count),
        "candidates": candidates,
        "warnings": result.trace.warnings,
        "records": [
            {
                "iteration": r.iteration,
                "loss_feature": None if r.loss_feature is None else round(r.loss_feature, 6),
                "loss_anti_recovery": None
                if r.loss_anti_recovery is None
                else round(r.loss_anti_recovery, 6),
                "loss_cross": None if r.loss_cross is None else round(r.loss_cross, 6),
                "joint_triggered": r.joint_triggered,
                "substitutions": [list(s) for s in r.substitutions],
            }
            for r in result.trace.records
        ],
    }
    trace_dir = out / "trace"
    trace_dir.mkdir(parents=True, exist_ok=True)
    (trace_dir / f"{sample.id}.json").write_text(
        json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )


@main.command("eval")
@click.option("--run", "run_dir", type=click.Path(exists=True, file_okay=False), required=True)
@click.option("--victim", default="toy", show_default=True)
@click.option("--out", "out_path", type=click.Path(dir_okay=False), default=None)
def cmd_eval(run_dir, victim, out_path):
    """Replay stored adversarial pairs against a victim and recompute the ASR."""
    run = Path(run_dir)
    inputs_path = run / "inputs.jsonl"
    meta_path = run / "run.json"
    if not inputs_path.is_file() or not meta_path.is_file():
        _fail(f"{run}: not an attack run directory (missing inputs.jsonl/run.json)")
    meta = json.loads(meta_path.read_text(encoding="utf-8"))
    rows = [json.loads(l) for l in inputs_path.read_text(encoding="utf-8").splitlines() if l.strip()]
    if not rows:
        _fail(f"{inputs_path}: no samples to evaluate")

    try:
        victim_model = adapters.create_victim(victim, seed=int(meta["config"]["seed"]))
    except ConfigError as exc:
        raise click.UsageError(str(exc)) from exc

    try:
        records = []
        for row in rows:
            sidecar = run / "adv" / f"{row['id']}.npy"
            if not sidecar.is_file():
                raise DatasetError(f"missing sidecar tensor {sidecar}")
            adv_image = load_sidecar(sidecar)
            clean_image = load_image_png(row["image"])
            records.append(
                make_record(
                    sample_id=row["id"],
                    clean_prediction=victim_model.predict(clean_image, row["question"]),
                    adv_prediction=victim_model.predict(adv_image, row["adv_question"]),
                    answers=AnswerSet.of(row["answers"]),
                    linf=linf_distance(adv_image, clean_image),
                    semantic_sim=row["semantic_sim"],
                    n_substitutions=row["n_substitutions"],
                    iterations=row["iterations"],
                )
            )
        out_file = Path(out_path) if out_path else run / f"eval_{victim}.jsonl"
        asr = emit_report(records, out_file, meta["config_hash"], n_skipped=meta.get("n_skipped", 0))
        click.echo(json.dumps({"asr": round(asr, 6), "n": len(records), "out": str(out_file)}, sort_keys=True))
    except (AdvqaError, OSError, KeyError) as exc:
        _fail(str(exc))


@main.command("inspect")
@click.option("--run", "run_dir", type=click.Path(exists=True, file_okay=False), required=True)
@click.option("--id", "sample_id", required=True)
def cmd_inspect(run_dir, sample_id):
    """Print a sample's candidate set, trigger schedule, and iteration trace."""
    trace_path = Path(run_dir) / "trace" / f"{sample_id}.json"
    if not trace_path.is_file():
        _fail(f"no trace for sample {sample_id!r} under {run_dir}")
    payload = json.loads(trace_path.read_text(encoding="utf-8"))
    click.echo(f"sample {payload['id']}: {payload['question']!r}")
    click.echo(f"answers: {', '.join(payload['answers'])}")
    click.echo(
        f"informative words: {payload['w_count']} at positions {payload['informative_positions']}"
    )
    click.echo(f"joint-attack schedule (M={payload['max_iters']}): {set(payload['schedule']) or '{}'}")
    if payload["candidates"]:
        click.echo("candidates:")
        for pos in sorted(payload["candidates"], key=int):
            click.echo(f"  position {pos}: {', '.join(payload['candidates'][pos])}")
    else:
        click.echo("candidates: none")
    for note in payload["warnings"]:
        click.echo(f"warning: {note}")
    click.echo(f"{'iter':>4}  {'feature':>12}  {'anti-rec':>12}  {'cross':>12}  joint  substitutions")
    for r in payload["records"]:
        fmt = lambda v: "-" if v is None else f"{v:.6f}"
        subs = "; ".join(f"{old}->{new}@{pos}" for pos, old, new in r["substitutions"]) or "-"
        click.echo(
            f"{r['iteration']:>4}  {fmt(r['loss_feature']):>12}  {fmt(r['loss_anti_recovery']):>12}  "
            f"{fmt(r['loss_cross']):>12}  {str(r['joint_triggered']).lower():5}  {subs}"
        )


if __name__ == "__main__":
    main()
