"""
Synthetic Sequence-to-Sequence Tasks
Includes: Position Identification (PI), Even Token Prediction (ETP) and
token-level accuracy
"""

import logging
import os
from dataclasses import dataclass

import numpy as np

from exceptions import DimensionError, InputError
from tensor_engine import Tensor

logger = logging.getLogger(__name__)

TASKS = ("pi", "etp")


@dataclass
class TaskBatch:
    """
    Token ids and per-position labels

    PI labels are 0-based positions (rendered 1-based in reports); ETP labels
    are token ids plus eos_id == vocab.
    """
    inputs: np.ndarray
    targets: np.ndarray
    task: str
    vocab: int
    eos_id: int

    @property
    def batch_size(self):
        return self.inputs.shape[0]

    @property
    def length(self):
        return self.inputs.shape[1]

    def chunks(self, size):
        """Split into consecutive sub-batches of at most size rows"""
        for start in range(0, self.batch_size, size):
            yield TaskBatch(
                self.inputs[start:start + size], self.targets[start:start + size],
                self.task, self.vocab, self.eos_id,
            )


def num_labels(task, n_max, vocab):
    """Output vocabulary: n_max positions for PI, tokens + EOS for ETP"""
    if task == "pi":
        return n_max
    if task == "etp":
        return vocab + 1
    raise InputError(f"unknown task {task!r}; choose from {TASKS}")


def _check_sizes(n, vocab, batch):
    if n < 1 or vocab < 1 or batch < 1:
        raise InputError(f"n, vocab and batch must be positive (got n={n}, vocab={vocab}, batch={batch})")


def _sample_tokens(n, vocab, batch, seed):
    rng = np.random.default_rng(seed)
    return rng.integers(0, vocab, size=(batch, n), dtype=np.int64)


def gen_pi(n, vocab, batch, seed):
    """
    Position Identification: any sequence maps to (1, 2, ..., n)

    Args:
        n (int): sequence length
        vocab (int): token vocabulary size
        batch (int): number of sequences
        seed (int): generator seed
    """
    _check_sizes(n, vocab, batch)
    inputs = _sample_tokens(n, vocab, batch, seed)
    targets = np.tile(np.arange(n, dtype=np.int64), (batch, 1))
    return TaskBatch(inputs, targets, "pi", vocab, vocab)


def gen_etp(n, vocab, batch, seed):
    """
    Even Token Prediction: (w_2, w_4, ..., w_n, EOS, ..., EOS)

    Args:
        n (int): even sequence length
        vocab (int): token vocabulary size; EOS gets id vocab
        batch (int): number of sequences
        seed (int): generator seed
    """
    _check_sizes(n, vocab, batch)
    if n % 2 != 0 or n < 2:
        raise InputError(f"ETP needs an even length >= 2, got {n}")
    inputs = _sample_tokens(n, vocab, batch, seed)
    targets = np.full((batch, n), vocab, dtype=np.int64)
    targets[:, : n // 2] = inputs[:, 1::2]
    return TaskBatch(inputs, targets, "etp", vocab, vocab)


def generate(task, n, vocab, batch, seed):
    if task == "pi":
        return gen_pi(n, vocab, batch, seed)
    if task == "etp":
        return gen_etp(n, vocab, batch, seed)
    raise InputError(f"unknown task {task!r}; choose from {TASKS}")


def token_accuracy(logits, targets):
    """
    Fraction of positions whose argmax equals the target

    np.argmax returns the first maximum, so ties go to the lowest label id.

    Args:
        logits: Tensor or array [..., labels]
        targets: integer array matching the leading shape
    """
    data = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    targets = np.asarray(targets)
    if data.shape[:-1] != targets.shape:
        raise DimensionError("targets must match the logits' leading shape", data.shape, targets.shape)
    if targets.size == 0:
        return 0.0
    return float(np.mean(np.argmax(data, axis=-1) == targets))


def dump_dataset(batch, path):
    """One line per sample: input ids, a tab, target ids"""
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for inputs, targets in zip(batch.inputs, batch.targets):
            fh.write(" ".join(map(str, inputs)) + "\t" + " ".join(map(str, targets)) + "\n")
    return path


def load_dataset(path, task, vocab):
    """Read a file written by dump_dataset back into a TaskBatch"""
    inputs, targets = [], []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            left, _, right = line.rstrip("\n").partition("\t")
            inputs.append([int(x) for x in left.split()])
            targets.append([int(x) for x in right.split()])
    return TaskBatch(np.array(inputs, dtype=np.int64), np.array(targets, dtype=np.int64), task, vocab, vocab)
