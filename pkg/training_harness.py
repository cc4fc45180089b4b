"""
Training Harness
Adam with decoupled weight decay, linear warm-up / linear decay schedule,
batch prefetching, evaluation and the training loop for the synthetic tasks
"""

import logging
import math
import os
import threading
import time
from dataclasses import dataclass, field
from queue import Empty, Full, Queue

import numpy as np
import pandas as pd

import config
from exceptions import ConfigError, ContractError, DomainError, NumericError, TrainingDivergence
from synthetic_tasks import generate, num_labels, token_accuracy
from tensor_engine import backward, cross_entropy, no_grad
from transformer_stack import model_forward, no_decay, save_checkpoint

logger = logging.getLogger(__name__)

METRIC_COLUMNS = ["step", "loss", "accuracy", "lr", "wall_ms", "eval_size"]


@dataclass
class TrainConfig:
    """Optimizer, schedule and loop settings"""
    steps: int = config.TRAIN_STEPS
    warmup_steps: int = config.WARMUP_STEPS
    peak_lr: float = config.PEAK_LR
    betas: tuple = config.ADAM_BETAS
    epsilon: float = config.ADAM_EPSILON
    weight_decay: float = config.WEIGHT_DECAY
    grad_clip: float = config.GRAD_CLIP
    batch: int = config.BATCH_SIZE
    eval_every: int = config.EVAL_EVERY
    progress_eval_size: int = config.PROGRESS_EVAL_SIZE
    seed: int = config.RANDOM_STATE

    def __post_init__(self):
        self.betas = tuple(self.betas)
        if self.steps < 0 or self.warmup_steps < 0:
            raise ConfigError("train.steps and train.warmup_steps must be >= 0")
        if self.warmup_steps > self.steps:
            raise ConfigError(f"train.warmup_steps ({self.warmup_steps}) exceeds train.steps ({self.steps})")
        if not self.peak_lr > 0:
            raise ConfigError(f"train.peak_lr must be > 0, got {self.peak_lr}")
        if len(self.betas) != 2 or not all(0 <= b < 1 for b in self.betas):
            raise ConfigError(f"train.betas must be two values in [0, 1), got {self.betas}")
        if self.batch < 1 or self.eval_every < 1:
            raise ConfigError("train.batch and train.eval_every must be positive")
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise ConfigError("train.grad_clip must be positive or null")
        if self.progress_eval_size is not None and self.progress_eval_size < 1:
            raise ConfigError("train.progress_eval_size must be positive or null")


@dataclass
class AdamState:
    """First/second moment estimates per parameter name and the step count"""
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params, grads, state, lr, cfg):
    """
    One Adam update with bias correction and decoupled weight decay

    Args:
        params (dict): name -> Tensor, updated in place
        grads (dict): name -> gradient array (None counts as zero)
        state (AdamState): moments, advanced by one step
        lr (float): learning rate for this step
        cfg (TrainConfig): betas, epsilon, weight decay
    """
    if lr < 0:
        raise DomainError(f"learning rate must be >= 0, got {lr}")
    for name, g in grads.items():
        if g is not None and not np.all(np.isfinite(g)):
            raise TrainingDivergence(f"non-finite gradient in parameter {name}", step=state.t + 1, parameter=name)

    beta1, beta2 = cfg.betas
    state.t += 1
    correction1 = 1.0 - beta1 ** state.t
    correction2 = 1.0 - beta2 ** state.t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        if cfg.weight_decay > 0 and not no_decay(name):
            p.data -= (lr * cfg.weight_decay) * p.data
        p.data -= (lr * (m / correction1) / (np.sqrt(v / correction2) + cfg.epsilon)).astype(p.dtype, copy=False)


def lr_at(step, cfg):
    """Linear ramp 0 -> peak_lr over the warm-up, then linear decay to 0 at cfg.steps"""
    if not 0 <= step <= cfg.steps:
        raise DomainError(f"step {step} outside [0, {cfg.steps}]")
    if cfg.warmup_steps > 0 and step <= cfg.warmup_steps:
        return cfg.peak_lr * step / cfg.warmup_steps
    decay_span = cfg.steps - cfg.warmup_steps
    if decay_span == 0:
        return cfg.peak_lr if step > 0 else 0.0
    return cfg.peak_lr * (cfg.steps - step) / decay_span


def clip_gradients(grads, max_norm):
    """Scale all gradients together so their global L2 norm is at most max_norm"""
    total = math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values() if g is not None))
    if total > max_norm:
        factor = max_norm / (total + 1e-12)
        grads = {k: (None if g is None else g * factor) for k, g in grads.items()}
    return grads, total


def step_seed(seed, step):
    """Independent, reproducible generator seed for one training step"""
    return int(np.random.SeedSequence((seed, step)).generate_state(1)[0])


class BatchPrefetcher:
    """
    Worker thread that generates training batches into a bounded queue

    Batch k is always generated from step_seed(seed, k), so the consumer sees
    the same sequence of batches whatever the thread timing.
    """

    def __init__(self, task, n, vocab, batch, seed, steps, queue_size=config.PREFETCH_BATCHES):
        self.task = task
        self.n = n
        self.vocab = vocab
        self.batch = batch
        self.seed = seed
        self.steps = steps
        self.data_queue = Queue(maxsize=queue_size)
        self.is_running = False
        self._thread = None

    def _put(self, item):
        while self.is_running:
            try:
                self.data_queue.put(item, timeout=0.1)
                return True
            except Full:
                continue
        return False

    def _produce(self):
        for step in range(1, self.steps + 1):
            try:
                item = generate(self.task, self.n, self.vocab, self.batch, step_seed(self.seed, step))
            except Exception as e:
                logger.error(f"❌ Batch worker failed at step {step}: {e}")
                self._put(e)
                return
            if not self._put(item):
                return

    def start(self):
        self.is_running = True
        self._thread = threading.Thread(target=self._produce, name="batch-prefetch", daemon=True)
        self._thread.start()
        return self

    def get(self, timeout=60.0):
        """Next batch; an error raised in the worker is re-raised here"""
        try:
            item = self.data_queue.get(timeout=timeout)
        except Empty as e:
            raise RuntimeError("batch worker stopped producing") from e
        if isinstance(item, Exception):
            raise item
        return item

    def stop(self):
        self.is_running = False
        if self._thread is not None:
            self._thread.join(timeout=5.0)


def evaluate(model, eval_set, chunk=config.EVAL_CHUNK):
    """Mean cross-entropy and token accuracy over a held-out TaskBatch"""
    total_loss, correct, count = 0.0, 0.0, 0
    with no_grad():
        for part in eval_set.chunks(chunk):
            logits = model_forward(part.inputs, model)
            size = part.targets.size
            total_loss += float(cross_entropy(logits, part.targets).item()) * size
            correct += token_accuracy(logits, part.targets) * size
            count += size
    return total_loss / count, correct / count


def make_eval_set(task, n, vocab, seed, size=config.EVAL_SIZE):
    return generate(task, n, vocab, size, seed + config.EVAL_SEED_OFFSET)


def train(model, task, train_cfg, eval_set, out_dir=None):
    """
    Train on fresh batches every step, evaluating every eval_every steps

    Intermediate evaluations score the first progress_eval_size held-out
    sequences; the final evaluation scores the whole set.

    Args:
        model (TransformerModel): model whose output head matches the task labels
        task (str): 'pi' or 'etp'
        train_cfg (TrainConfig): optimizer / schedule / loop settings
        eval_set (TaskBatch): held-out sequences
        out_dir (str): where the metrics CSV and checkpoint go (None: no files)
    Returns:
        pd.DataFrame: one row per evaluation (step, loss, accuracy, lr, wall_ms, eval_size);
        the per-step training losses are in ``attrs['train_loss']``
    """
    cfg = model.config
    labels = num_labels(task, cfg.n_max, eval_set.vocab)
    if cfg.vocab_out != labels:
        raise ContractError(f"model has {cfg.vocab_out} outputs but task {task} needs {labels}")
    if eval_set.task != task:
        raise ContractError(f"eval set is for task {eval_set.task}, not {task}")

    ckpt_path = os.path.join(out_dir, config.CHECKPOINT_FILE) if out_dir else None
    params = model.parameters()
    state = AdamState()
    rows, train_loss = [], []
    started = time.perf_counter()

    progress_set = eval_set
    if train_cfg.progress_eval_size is not None and train_cfg.progress_eval_size < eval_set.batch_size:
        progress_set = next(eval_set.chunks(train_cfg.progress_eval_size))

    def record(step, lr, final=False):
        scored = eval_set if final else progress_set
        loss, acc = evaluate(model, scored)
        wall_ms = (time.perf_counter() - started) * 1000.0
        rows.append({"step": step, "loss": loss, "accuracy": acc, "lr": lr, "wall_ms": wall_ms,
                     "eval_size": scored.batch_size})
        logger.info(f"   step {step:>6}  loss {loss:.4f}  acc {acc:.4f}  lr {lr:.2e}")
        if not math.isfinite(loss):
            raise TrainingDivergence(f"evaluation loss is {loss} at step {step}", step=step)
        if ckpt_path:
            save_checkpoint(model, ckpt_path, meta={"task": task, "step": step})

    logger.info(f"🔄 Training {cfg.variant} on {task.upper()} for {train_cfg.steps} steps...")
    if train_cfg.steps == 0:
        record(0, lr_at(0, train_cfg), final=True)

    prefetcher = BatchPrefetcher(task, eval_set.length, eval_set.vocab, train_cfg.batch, train_cfg.seed, train_cfg.steps)
    prefetcher.start()
    try:
        for step in range(1, train_cfg.steps + 1):
            batch = prefetcher.get()
            model.zero_grad()
            try:
                loss = cross_entropy(model_forward(batch.inputs, model), batch.targets)
                backward(loss)
            except NumericError as e:
                raise TrainingDivergence(f"non-finite values at step {step}: {e}", step=step) from e
            train_loss.append(float(loss.item()))

            grads = {name: t.grad for name, t in params.items()}
            if train_cfg.grad_clip is not None:
                grads, _ = clip_gradients(grads, train_cfg.grad_clip)
            lr = lr_at(step, train_cfg)
            adam_step(params, grads, state, lr, train_cfg)

            if step == train_cfg.steps:
                record(step, lr, final=True)
            elif step % train_cfg.eval_every == 0:
                record(step, lr)
    except TrainingDivergence:
        logger.error(f"❌ Training diverged; last good checkpoint kept at {ckpt_path}")
        raise
    finally:
        prefetcher.stop()

    history = pd.DataFrame(rows, columns=METRIC_COLUMNS)
    history.attrs["train_loss"] = train_loss
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        history.to_csv(os.path.join(out_dir, config.METRICS_FILE), index=False)
    final = history["accuracy"].iloc[-1] if len(history) else float("nan")
    logger.info(f"✅ Finished {cfg.variant} on {task.upper()}: final accuracy {final:.4f}")
    return history


def train_steps(model, task, steps, batch, seed, lr=1e-3):
    """
    Plain Adam steps on random task batches, no evaluation or files

    Returns:
        list[float]: training loss per step
    """
    params = model.parameters()
    state = AdamState()
    opt_cfg = TrainConfig(steps=max(steps, 1), warmup_steps=0, peak_lr=lr, batch=batch, seed=seed)
    cfg = model.config
    losses = []
    for step in range(1, steps + 1):
        data = generate(task, cfg.n_max, cfg.vocab_in, batch, step_seed(seed, step))
        model.zero_grad()
        loss = cross_entropy(model_forward(data.inputs, model), data.targets)
        backward(loss)
        adam_step(params, {name: t.grad for name, t in params.items()}, state, lr, opt_cfg)
        losses.append(float(loss.item()))
    return losses
