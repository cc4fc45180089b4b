"""
Matrix Export
Dumps materialized B / C matrices as CSV (row-major, full precision), binary
8-bit PGM heatmaps with per-matrix min-max scaling, and optional PNG heatmaps
"""

import logging
import os

import numpy as np
import pandas as pd

import config
from exceptions import DimensionError
from positional_encodings import materialize_toeplitz, materialize_urpe_c
from tensor_engine import Tensor, no_grad
from transformer_stack import load_checkpoint

logger = logging.getLogger(__name__)


def _as_matrix(M):
    data = M.data if isinstance(M, Tensor) else np.asarray(M)
    if data.ndim != 2:
        raise DimensionError("export needs a 2-D matrix", data.shape)
    return np.asarray(data, dtype=np.float64)


def _ensure_parent(path):
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)


def save_matrix_csv(M, path):
    """Row-major values, one matrix row per line, no header"""
    _ensure_parent(path)
    pd.DataFrame(_as_matrix(M)).to_csv(path, header=False, index=False, float_format="%.17g")
    return path


def load_matrix_csv(path):
    return pd.read_csv(path, header=None, float_precision="round_trip").to_numpy(dtype=np.float64)


def to_gray(M):
    """
    Linear min-max scaling to 0..255

    A constant matrix has no range and renders as PGM_CONSTANT_GRAY.
    """
    data = _as_matrix(M)
    lo, hi = float(data.min()), float(data.max())
    if hi == lo:
        return np.full(data.shape, config.PGM_CONSTANT_GRAY, dtype=np.uint8)
    scaled = (data - lo) / (hi - lo) * config.PGM_MAX_VALUE
    return np.clip(np.rint(scaled), 0, config.PGM_MAX_VALUE).astype(np.uint8)


def save_pgm(M, path):
    """Binary PGM (P5, max value 255)"""
    gray = to_gray(M)
    height, width = gray.shape
    _ensure_parent(path)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{width} {height}\n{config.PGM_MAX_VALUE}\n".encode("ascii"))
        fh.write(gray.tobytes())
    return path


def read_pgm(path):
    """Parse a file written by save_pgm back into a uint8 array"""
    with open(path, "rb") as fh:
        blob = fh.read()
    header = blob.split(b"\n", 3)
    if len(header) < 4 or header[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    width, height = (int(v) for v in header[1].split())
    max_value = int(header[2])
    pixels = np.frombuffer(header[3], dtype=np.uint8)
    if pixels.size != width * height:
        raise ValueError(f"{path}: expected {width * height} pixels, found {pixels.size}")
    return pixels.reshape(height, width), max_value


def save_png(M, path, title=None):
    """Heatmap via matplotlib (Agg backend)"""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    data = _as_matrix(M)
    _ensure_parent(path)
    fig, ax = plt.subplots(figsize=(5, 4), dpi=config.HEATMAP_DPI)
    image = ax.imshow(data, cmap="viridis", interpolation="nearest")
    fig.colorbar(image, ax=ax)
    ax.set_xlabel("key j")
    ax.set_ylabel("query i")
    if title:
        ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def export_matrix(M, out_dir, stem, png=False):
    """Write <stem>.csv and <stem>.pgm (and <stem>.png when png) into out_dir"""
    paths = [
        save_matrix_csv(M, os.path.join(out_dir, f"{stem}.csv")),
        save_pgm(M, os.path.join(out_dir, f"{stem}.pgm")),
    ]
    if png:
        paths.append(save_png(M, os.path.join(out_dir, f"{stem}.png"), title=stem))
    return paths


def export_model_matrices(model, out_dir, png=False, n=None):
    """
    Materialize every head's B (T5 bias) and C (URPE) at length n

    Shaw biases depend on the input and are not exported.

    Returns:
        list[str]: written file paths
    """
    cfg = model.config
    n = cfg.n_max if n is None else n
    written = []
    with no_grad():
        for h, p in enumerate(model.toeplitz):
            written += export_matrix(materialize_toeplitz(p, n), out_dir, f"B_h{h}", png=png)
        if model.urpe is not None:
            for h in range(model.urpe.num_heads):
                written += export_matrix(materialize_urpe_c(model.urpe, h, n), out_dir, f"C_h{h}", png=png)
    if not written:
        logger.warning(f"⚠️ {cfg.variant} model has no Toeplitz B or C to export")
    return written


def export_checkpoint(checkpoint_path, out_dir, png=False):
    """Load a checkpoint and export its positional matrices"""
    model = load_checkpoint(checkpoint_path)
    logger.info(f"📊 Exporting {model.config.variant} matrices from {checkpoint_path} to {out_dir}")
    written = export_model_matrices(model, out_dir, png=png)
    if model.config.pe_kind == "rpe_shaw":
        logger.info("   Shaw relative vectors depend on the input; B skipped")
    return written
