"""Subcommand implementations behind the ``agriradar`` CLI.

Every command writes a JSON manifest, including when it fails; the error
is then stored in the manifest's ``error`` field.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import time
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .config import Config, config_hash
from .dataset import (
    SAMPLE_MARKER,
    PreparedSample,
    find_dirs,
    load_samples,
    prepare_sample,
    read_sequence,
    simulate_sequence,
    stage2_training_sample,
    subseed,
    training_condition,
    write_sample,
    write_sequence,
)
from .diffusion import ConsistencyModel, EvaluationCounter, consistency_distill
from .errors import ConfigError
from .formats import FormatError, read_model, read_point_cloud, write_model, write_point_cloud
from .metrics import (
    MetricRecord,
    brute_force_nearest,
    chamfer,
    evaluate_clouds,
    format_table,
    match_counts,
)
from .models import ReferencePredictor, ResidualDenoiser, train_denoiser, train_stage1
from .pipeline import (
    CheatOracleDenoiser,
    PipelineError,
    apply_modality,
    build_condition,
    cheat_oracle_consistency,
    raw_condition,
    stage2_generate,
    trainable_stage2_denoiser,
)
from .preprocess import accumulate_frames, sequential_accumulate
from .run_log import RunLogger, RunManifest, manifest_scope
from .supervision import inverse_frequency_weights

log = logging.getLogger(__name__)

MANIFEST_FILE = "manifest.json"
SEQUENCE_MARKER = "cube_*.scub"
TRAIN_STAGES = ("1", "2", "distill")
BENCH_COMPONENTS = ("accumulate", "metrics")


def _manifest(command: str, config: Config, seed: int, **fields) -> RunManifest:
    return RunManifest(command=command, config_hash=config_hash(config), seeds={"seed": seed}, **fields)


def _sidecar(path: Path, suffix: str) -> Path:
    path = Path(path)
    return path.with_name(path.stem + suffix)


def _ms(start: float) -> float:
    return (time.perf_counter() - start) * 1e3


# ---------------------------------------------------------------------------
# simulate
# ---------------------------------------------------------------------------

def cmd_simulate(config: Config, seed: int, out_dir: Path, threads: int = 1,
                 scenes: int = 1) -> RunManifest:
    """
    Simulate ``scenes`` sequences of ``trajectory.frame_count`` frames.

    One scene is written directly into ``out_dir``; several go to
    ``out_dir/seq_000`` and so on.
    """
    if scenes < 1:
        raise ConfigError(f"--scenes must be at least 1, got {scenes}")
    out_dir = Path(out_dir)
    manifest = _manifest("simulate", config, seed)
    with manifest_scope(out_dir / MANIFEST_FILE, manifest):
        with manifest.timed("simulate"):
            for i in range(scenes):
                seq_seed = seed if scenes == 1 else subseed(seed, 100, i)
                target = out_dir if scenes == 1 else out_dir / f"seq_{i:03d}"
                sequence = simulate_sequence(config, seq_seed, threads)
                manifest.outputs += [str(p) for p in write_sequence(target, sequence)]
        manifest.counters["sequences"] = scenes
        manifest.counters["frames"] = scenes * config.trajectory.frame_count
    log.info("Wrote %d sequence(s) to %s", scenes, out_dir)
    return manifest


# ---------------------------------------------------------------------------
# preprocess
# ---------------------------------------------------------------------------

def cmd_preprocess(in_dir: Path, config: Config, threads: int, out_dir: Path) -> RunManifest:
    """Accumulate, detect and build supervision for every sequence under ``in_dir``."""
    out_dir = Path(out_dir)
    manifest = _manifest("preprocess", config, config.seed, inputs=[str(in_dir)])
    with manifest_scope(out_dir / MANIFEST_FILE, manifest):
        seq_dirs = find_dirs(in_dir, SEQUENCE_MARKER)
        accumulation_ms = 0.0
        total = time.perf_counter()
        for seq_dir in seq_dirs:
            cubes, poses, gt = read_sequence(seq_dir)
            start = time.perf_counter()
            rcc = accumulate_frames(cubes, poses, config.preprocess, threads)
            accumulation_ms += _ms(start)
            sample = prepare_sample(cubes, poses, gt, config, threads, rcc=rcc)
            target = out_dir if len(seq_dirs) == 1 else out_dir / seq_dir.name
            manifest.outputs += [str(p) for p in write_sample(target, sample)]
        manifest.add_timing("accumulation", accumulation_ms)
        manifest.add_timing("total", _ms(total))
        manifest.counters["samples"] = len(seq_dirs)
        manifest.counters["threads"] = threads
    return manifest


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

def _stage2_rows(samples: Sequence[PreparedSample], config: Config):
    rows = []
    for sample in samples:
        condition = training_condition(sample, config)
        rows.append((stage2_training_sample(sample, condition).x, condition.features))
    return rows


def cmd_train(stage: str, data_dir: Path, config: Config, seed: int, out: Path,
              teacher: Optional[Path] = None, log_path: Optional[Path] = None,
              progress: bool = False) -> RunManifest:
    """
    Train one model and write it to ``out``.

    Args:
        stage: ``1`` (Stage-I predictor), ``2`` (Stage-II denoiser) or
            ``distill`` (consistency model from a Stage-II denoiser).
        data_dir: Preprocessed sample directory or a parent of several.
        config: Full configuration.
        seed: Training seed.
        out: Model file path.
        teacher: Stage-II model file; required for ``distill``.
        log_path: JSON-lines training log; defaults next to ``out``.
        progress: Show a progress bar.

    Raises:
        ConfigError: On an unknown stage or a missing teacher.
        DivergenceError: If the loss diverges.
    """
    if stage not in TRAIN_STAGES:
        raise ConfigError(f"Unknown training stage {stage!r}; choose from {TRAIN_STAGES}")
    if stage == "distill" and teacher is None:
        raise ConfigError("Distillation needs a trained Stage-II model (--teacher)")
    out = Path(out)
    manifest = _manifest(f"train-{stage}", config, seed, inputs=[str(data_dir)])
    with manifest_scope(_sidecar(out, ".manifest.json"), manifest):
        samples = [s for _, s in load_samples(data_dir)]
        rng = np.random.default_rng(subseed(seed, 200))
        logger = RunLogger(path=str(log_path or _sidecar(out, ".log.jsonl")))
        logger.start(stage=stage, seed=seed, config_hash=manifest.config_hash)
        try:
            with manifest.timed("train"):
                if stage == "1":
                    pairs = [(apply_modality(s.stage1_input, config.pipeline.input_modality), s.target)
                             for s in samples]
                    model, history = train_stage1(pairs, config.stage1, seed, run_log=logger,
                                                  progress=progress)
                elif stage == "2":
                    rows = _stage2_rows(samples, config)
                    model = trainable_stage2_denoiser(config.stage2_model, config.schedule.sigma_data,
                                                      subseed(seed, 201))
                    weights = None
                    if config.stage2.class_weighting:
                        weights = inverse_frequency_weights(sum(x.sum(axis=0) for x, _ in rows))
                    history = train_denoiser(model, rows, config.schedule, config.stage2, rng,
                                             class_weights=weights, run_log=logger, progress=progress)
                else:
                    manifest.inputs.append(str(teacher))
                    network = read_model(teacher)
                    if not isinstance(network, ResidualDenoiser):
                        raise FormatError(f"{teacher} is not a Stage-II model")
                    rows = [(x, c) for x, c in _stage2_rows(samples, config) if len(x)]
                    if not rows:
                        raise PipelineError("No non-empty Stage-II samples to distill on")
                    pool_x = np.concatenate([x for x, _ in rows])
                    pool_c = np.concatenate([c for _, c in rows])
                    batch = config.distill.batch_size

                    def data_stream(g: np.random.Generator):
                        picks = g.integers(0, len(pool_x), size=batch)
                        return pool_x[picks], pool_c[picks]

                    model = ConsistencyModel(network.copy(), config.schedule.sigma_min)
                    history = consistency_distill(model, network, data_stream, config.schedule,
                                                  config.distill, rng, run_log=logger,
                                                  progress=progress)
        finally:
            logger.stop()
        manifest.outputs += [str(write_model(out, model)), str(logger.filepath)]
        manifest.counters.update(initial_loss=history[0], final_loss=history[-1], steps=len(history))
    log.info("Trained stage %s: loss %.4g -> %.4g, model written to %s",
             stage, history[0], history[-1], out)
    return manifest


# ---------------------------------------------------------------------------
# infer
# ---------------------------------------------------------------------------

def _load_stage2(mode: str, stage2: Optional[Path], consistency: Optional[Path]):
    if mode == "heun":
        if stage2 is None:
            raise ConfigError("Heun sampling needs a Stage-II model (--stage2)")
        model = read_model(stage2)
        if not isinstance(model, ResidualDenoiser):
            raise FormatError(f"{stage2} is not a Stage-II model")
        return model
    if consistency is None:
        raise ConfigError("Consistency sampling needs a consistency model (--consistency)")
    model = read_model(consistency)
    if not isinstance(model, ConsistencyModel):
        raise FormatError(f"{consistency} is not a consistency model")
    return model


def _counting(model):
    if isinstance(model, ConsistencyModel):
        counter = EvaluationCounter(model.network)
        return ConsistencyModel(counter, model.sigma_min, model.sigma_data), counter
    counter = EvaluationCounter(model)
    return counter, counter


def _infer_inputs(data_dir: Path, config: Config, threads: int):
    """Prepared samples, running preprocessing inline for raw sequences."""
    try:
        return load_samples(data_dir), 0.0
    except FormatError:
        seq_dirs = find_dirs(data_dir, SEQUENCE_MARKER)
    samples, accumulation_ms = [], 0.0
    for seq_dir in seq_dirs:
        cubes, poses, gt = read_sequence(seq_dir)
        start = time.perf_counter()
        rcc = accumulate_frames(cubes, poses, config.preprocess, threads)
        accumulation_ms += _ms(start)
        samples.append((seq_dir, prepare_sample(cubes, poses, gt, config, threads, rcc=rcc)))
    return samples, accumulation_ms


def cmd_infer(data_dir: Path, config: Config, seed: int, out: Path, mode: Optional[str] = None,
              stage1: Optional[Path] = None, stage2: Optional[Path] = None,
              consistency: Optional[Path] = None, cheat_oracle: bool = False,
              threads: int = 1) -> RunManifest:
    """
    Run Stage I, the condition filter and Stage II on every sample.

    With a single sample ``out`` is the predicted cloud file; with several it
    is a directory receiving ``<sample>.txt`` files. ``cheat_oracle`` replaces
    both stages with ground truth to check the plumbing.
    """
    pcfg = config.pipeline
    mode = mode or pcfg.sampler
    if mode not in ("heun", "consistency"):
        raise ConfigError(f"Unknown sampler {mode!r}")
    out = Path(out)
    manifest = _manifest("infer", config, seed, inputs=[str(data_dir)])
    manifest_path = _sidecar(out, ".manifest.json") if out.suffix else out / MANIFEST_FILE
    with manifest_scope(manifest_path, manifest):
        samples, accumulation_ms = _infer_inputs(data_dir, config, threads)
        predictor = None
        if not (cheat_oracle or pcfg.bypass_stage1):
            if stage1 is None:
                raise ConfigError("Stage I needs a trained predictor (--stage1)")
            predictor = read_model(stage1)
            if not isinstance(predictor, ReferencePredictor):
                raise FormatError(f"{stage1} is not a Stage-I model")
            manifest.inputs.append(str(stage1))
        denoiser = None if cheat_oracle else _load_stage2(mode, stage2, consistency)

        stage1_ms = stage2_ms = 0.0
        evaluations = rows = points = 0
        for i, (sample_dir, sample) in enumerate(samples):
            start = time.perf_counter()
            if cheat_oracle:
                condition = training_condition(sample, config)
            else:
                x_in = apply_modality(sample.stage1_input, pcfg.input_modality)
                if pcfg.bypass_stage1:
                    condition = raw_condition(x_in)
                else:
                    y_st, y_se = predictor.evaluate(x_in)
                    condition = build_condition(y_st, y_se, x_in)
            stage1_ms += _ms(start)

            start = time.perf_counter()
            model = denoiser
            if cheat_oracle:
                truth = stage2_training_sample(sample, condition)
                sd = config.schedule.sigma_data
                model = (CheatOracleDenoiser(truth.x, sd) if mode == "heun"
                         else cheat_oracle_consistency(truth, config.schedule.sigma_min, sd))
            model, counter = _counting(model)
            rng = np.random.default_rng(subseed(seed, 300, i))
            cloud = stage2_generate(model, condition, config.schedule, mode, rng,
                                    steps=pcfg.consistency_steps)
            stage2_ms += _ms(start)

            target = out if len(samples) == 1 else out / f"{Path(sample_dir).name}.txt"
            manifest.outputs.append(str(write_point_cloud(target, cloud)))
            evaluations += counter.count
            rows += len(condition)
            points += len(cloud)

        total_ms = accumulation_ms + stage1_ms + stage2_ms
        if accumulation_ms:
            manifest.add_timing("accumulation", accumulation_ms)
        manifest.add_timing("stage1", stage1_ms)
        manifest.add_timing("stage2", stage2_ms)
        manifest.add_timing("total", total_ms)
        manifest.counters.update(
            sampler=mode,
            samples=len(samples),
            fps=1e3 * len(samples) / total_ms if total_ms > 0 else None,
            denoiser_evaluations=evaluations,
            condition_rows=rows,
            output_points=points,
            cheat_oracle=cheat_oracle,
        )
        if mode == "heun":
            manifest.counters["n_steps"] = config.schedule.n_steps
        else:
            manifest.counters["consistency_steps"] = pcfg.consistency_steps
    log.info("Inference: %d samples, %d points, %.1f ms", len(samples), points, total_ms)
    return manifest


# ---------------------------------------------------------------------------
# evaluate
# ---------------------------------------------------------------------------

def cmd_evaluate(pred: Path, gt: Path, taus: Sequence[float],
                 out: Optional[Path] = None) -> list[MetricRecord]:
    """
    Compare a predicted and a ground-truth cloud file.

    Records go to ``out`` as JSON lines when given.
    """
    if not taus or min(taus) <= 0:
        raise ConfigError("Thresholds must be positive")
    records = evaluate_clouds(read_point_cloud(pred), read_point_cloud(gt), taus)
    if out is not None:
        out = Path(out)
        try:
            out.parent.mkdir(parents=True, exist_ok=True)
            out.write_text("".join(json.dumps(dataclasses.asdict(r)) + "\n" for r in records),
                           encoding="utf-8")
        except OSError as e:
            raise FormatError(f"Failed to write report {out}: {e}") from e
    return records


# ---------------------------------------------------------------------------
# bench
# ---------------------------------------------------------------------------

def _median_ms(fn, repetitions: int) -> float:
    times = []
    for _ in range(max(1, repetitions)):
        start = time.perf_counter()
        fn()
        times.append(_ms(start))
    return float(np.median(times))


def _bench_accumulate(config: Config, sizes, threads_list, repetitions, seed) -> list[dict]:
    """``identical`` compares each threaded result byte for byte with the dense reference."""
    frames = max(sizes)
    sim_config = dataclasses.replace(
        config, trajectory=dataclasses.replace(config.trajectory, frame_count=frames))
    sequence = simulate_sequence(sim_config, seed, max(threads_list))
    rows = []
    for size in sizes:
        pre = dataclasses.replace(config.preprocess, frames=size)
        cubes, poses = sequence.cubes[-size:], sequence.poses[-size:]
        reference = sequential_accumulate(cubes, poses, pre)
        sequential = _median_ms(lambda: sequential_accumulate(cubes, poses, pre), repetitions)
        baseline = None
        for threads in threads_list:
            result = accumulate_frames(cubes, poses, pre, threads)
            identical = (result == reference
                         and result.features.tobytes() == reference.features.tobytes())
            median = _median_ms(lambda: accumulate_frames(cubes, poses, pre, threads), repetitions)
            baseline = baseline or median
            rows.append({"component": "accumulate", "size": size, "threads": threads,
                         "median_ms": median, "speedup": baseline / median,
                         "sequential_ms": sequential, "identical": bool(identical)})
            if not identical:
                log.warning("Accumulation with %d threads differs from the reference", threads)
    return rows


def _bench_metrics(sizes, repetitions, seed, brute_force_queries: int = 2000) -> list[dict]:
    """Brute force runs on a query subset and is scaled to the full size (it is linear in queries)."""
    rng = np.random.default_rng(seed)
    rows = []
    for size in sizes:
        pred = rng.uniform(0.0, 30.0, size=(size, 3))
        gt = pred + rng.normal(0.0, 0.1, size=pred.shape)

        def indexed():
            match_counts(pred, gt, 0.25)
            chamfer(pred, gt, 0.25)

        median = _median_ms(indexed, repetitions)
        sub = min(size, brute_force_queries)
        brute = _median_ms(lambda: (brute_force_nearest(pred[:sub], gt),
                                    brute_force_nearest(gt[:sub], pred)), repetitions)
        brute *= size / sub
        # the indexed path queries both directions twice (counts and chamfer)
        rows.append({"component": "metrics", "size": size, "threads": 1,
                     "median_ms": median, "brute_force_ms": brute,
                     "speedup": 2.0 * brute / median if median > 0 else None})
    return rows


def cmd_bench(component: str, config: Config, sizes: Optional[Sequence[int]] = None,
              threads_list: Sequence[int] = (1, 8), repetitions: int = 5,
              seed: int = 0) -> list[dict]:
    """
    Time a component.

    ``accumulate`` sizes are frame counts (default: ``preprocess.frames``) and
    every row also reports the dense sequential reference. ``metrics`` sizes
    are point counts (default 200000).
    """
    if component not in BENCH_COMPONENTS:
        raise ConfigError(f"Unknown bench component {component!r}; choose from {BENCH_COMPONENTS}")
    if repetitions < 1 or not threads_list or min(threads_list) < 1:
        raise ConfigError("Repetitions and thread counts must be positive")
    if component == "accumulate":
        sizes = list(sizes or [config.preprocess.frames])
        return _bench_accumulate(config, sizes, list(threads_list), repetitions, seed)
    return _bench_metrics(list(sizes or [200_000]), repetitions, seed)


def format_bench(rows: Sequence[dict]) -> str:
    if not rows:
        return ""
    keys = list(dict.fromkeys(k for row in rows for k in row))
    cells = [keys] + [[_cell(row.get(k)) for k in keys] for row in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(keys))]
    return "\n".join("  ".join(c.ljust(w) for c, w in zip(r, widths)) for r in cells)


def _cell(value) -> str:
    if value is None:
        return "-"
    if isinstance(value, float):
        return f"{value:.2f}"
    return str(value)


__all__ = [
    "SAMPLE_MARKER",
    "cmd_bench",
    "cmd_evaluate",
    "cmd_infer",
    "cmd_preprocess",
    "cmd_simulate",
    "cmd_train",
    "format_bench",
    "format_table",
]
