"""
Runtime / Memory Benchmark
Times the forward pass of an RPE model against its URPE twin (same weights,
all-ones C) and records the peak tensor allocation of each
"""

import logging
import os
import time
from dataclasses import asdict, dataclass

import numpy as np
import pandas as pd
from threadpoolctl import threadpool_limits

import config
from exceptions import ContractError
from tensor_engine import no_grad, track_allocations
from transformer_stack import ModelConfig, TransformerModel, build_twin, model_forward

logger = logging.getLogger(__name__)

BENCH_COLUMNS = ["variant", "n", "forward_ms", "peak_bytes"]


@dataclass
class BenchResult:
    """Median forward time over the timed repetitions and peak live tensor bytes"""
    variant: str
    n: int
    forward_ms: float
    peak_bytes: int

    def __post_init__(self):
        if not self.forward_ms > 0:
            raise ContractError(f"non-positive forward time for {self.variant} n={self.n}")


def bench_model_config(n_max, seed=config.RANDOM_STATE):
    return ModelConfig.for_variant(
        "rpe", L=config.BENCH_LAYERS, H=config.BENCH_HEADS, d=config.BENCH_MODEL_DIM,
        d_H=config.BENCH_HEAD_DIM, r=config.BENCH_FFN_DIM, vocab_in=config.VOCAB_SIZE,
        vocab_out=n_max, n_max=n_max, use_norm=True, scale_qk=True,
        dtype=config.TRAIN_DTYPE, seed=seed,
    )


def _timed_forward(tokens, model):
    start = time.perf_counter()
    out = model_forward(tokens, model)
    return (time.perf_counter() - start) * 1000.0, out


def _peak_bytes(tokens, model):
    with track_allocations() as counter:
        model_forward(tokens, model)
    return counter.peak_bytes


def bench_length(rpe_model, urpe_model, n, repetitions, warmup, rng):
    """
    Interleaved timing of both models at one length

    The correctness guard compares every URPE output against the RPE output
    of the same repetition; any difference aborts the bench.
    """
    tokens = rng.integers(0, rpe_model.config.vocab_in, size=n)
    times = {"rpe": [], "urpe": []}
    with no_grad():
        for rep in range(warmup + repetitions):
            rpe_ms, rpe_out = _timed_forward(tokens, rpe_model)
            urpe_ms, urpe_out = _timed_forward(tokens, urpe_model)
            if not np.array_equal(rpe_out.data, urpe_out.data):
                raise ContractError(f"URPE twin with all-ones C diverged from RPE at n={n}")
            if rep >= warmup:
                times["rpe"].append(rpe_ms)
                times["urpe"].append(urpe_ms)
        peaks = {"rpe": _peak_bytes(tokens, rpe_model), "urpe": _peak_bytes(tokens, urpe_model)}
    return [
        BenchResult(variant, n, float(np.median(times[variant])), int(peaks[variant]))
        for variant in ("rpe", "urpe")
    ]


def run_bench(seq_lens=config.BENCH_SEQ_LENS, repetitions=config.BENCH_REPETITIONS,
              warmup=config.BENCH_WARMUP, model_cfg=None, seed=config.RANDOM_STATE, out_path=None):
    """
    Benchmark RPE vs URPE at every length, single-threaded

    Args:
        seq_lens (list[int]): sequence lengths
        repetitions (int): timed runs per model and length (median reported)
        warmup (int): discarded runs before timing
        model_cfg (ModelConfig): RPE backbone; the bench-size model by default
        out_path (str): optional CSV destination
    Returns:
        tuple: (pd.DataFrame with variant,n,forward_ms,peak_bytes; dict n -> URPE/RPE time ratio)
    """
    if repetitions < 1 or warmup < 0:
        raise ContractError("repetitions must be >= 1 and warmup >= 0")
    cfg = model_cfg or bench_model_config(max(seq_lens), seed=seed)
    rpe_model = TransformerModel(cfg)
    urpe_model = build_twin(rpe_model, urpe=True)
    rng = np.random.default_rng(seed)

    results = []
    with threadpool_limits(limits=1):
        for n in seq_lens:
            logger.info(f"🔄 Benchmarking n={n} ({repetitions} reps, {warmup} warm-up)...")
            results.extend(bench_length(rpe_model, urpe_model, n, repetitions, warmup, rng))

    table = pd.DataFrame([asdict(r) for r in results], columns=BENCH_COLUMNS)
    medians = table.pivot(index="n", columns="variant", values="forward_ms")
    ratios = {int(n): float(row["urpe"] / row["rpe"]) for n, row in medians.iterrows()}
    if out_path:
        directory = os.path.dirname(out_path)
        if directory:
            os.makedirs(directory, exist_ok=True)
        table.to_csv(out_path, index=False)
    for n, ratio in ratios.items():
        status = "✅" if ratio <= config.BENCH_OVERHEAD_LIMIT else "⚠️"
        logger.info(f"{status} n={n}: URPE/RPE forward time ratio {ratio:.3f}")
    return table, ratios
