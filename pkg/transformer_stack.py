"""
Transformer Stack
Composes attention and feed-forward sublayers into blocks and full
token-to-logits models, and reads/writes model checkpoints
"""

import copy
import dataclasses
import json
import logging
import math
import os
from dataclasses import dataclass

import numpy as np

import config
from attention_zoo import PE_KINDS, AttentionParams, PEDescriptor, attn_delta, attn_layer
from exceptions import CapacityError, CheckpointError, ConfigError, ContractError, DimensionError, InputError
from positional_encodings import APETable, ShawRPEParam, ToeplitzParam, URPEMultiplier
from tensor_engine import Tensor, add, gather, matmul, relu, resolve_dtype, rms_norm

logger = logging.getLogger(__name__)

# variant name -> (pe_kind, urpe)
VARIANTS = {
    "none": ("none", False),
    "ape": ("ape", False),
    "rpe": ("rpe_toeplitz", False),
    "shaw": ("rpe_shaw", False),
    "urpe": ("rpe_toeplitz", True),
    "urpe-shaw": ("rpe_shaw", True),
}

CHECKPOINT_MAGIC = "URPE-LAB-CHECKPOINT 1"


@dataclass
class ModelConfig:
    """Shape and positional-encoding choice of a model"""
    L: int = config.NUM_LAYERS
    H: int = config.NUM_HEADS
    d: int = config.MODEL_DIM
    d_H: int = config.HEAD_DIM
    r: int = config.FFN_DIM
    pe_kind: str = "rpe_toeplitz"
    urpe: bool = False
    causal: bool = False
    use_norm: bool = False
    vocab_in: int = config.VOCAB_SIZE
    vocab_out: int = config.SEQ_LEN
    n_max: int = config.SEQ_LEN
    scale_qk: bool = config.SCALE_QK
    attn_bias: bool = False
    dtype: str = config.TRAIN_DTYPE
    seed: int = config.RANDOM_STATE

    def __post_init__(self):
        for name in ("L", "H", "d", "d_H", "r", "vocab_in", "vocab_out", "n_max"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or isinstance(value, bool) or value < 1:
                raise ConfigError(f"model.{name} must be a positive integer, got {value!r}")
        if self.pe_kind not in PE_KINDS:
            raise ConfigError(f"model.pe_kind must be one of {PE_KINDS}, got {self.pe_kind!r}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"model.dtype must be float32 or float64, got {self.dtype!r}")

    @property
    def variant(self):
        for name, kind in VARIANTS.items():
            if kind == (self.pe_kind, self.urpe):
                return name
        return f"{self.pe_kind}{'+urpe' if self.urpe else ''}"

    @classmethod
    def for_variant(cls, variant, **kwargs):
        """ModelConfig for one of the named variants (none, ape, rpe, shaw, urpe, urpe-shaw)"""
        if variant not in VARIANTS:
            raise ConfigError(f"unknown variant {variant!r}; choose from {sorted(VARIANTS)}")
        pe_kind, urpe = VARIANTS[variant]
        return cls(pe_kind=pe_kind, urpe=urpe, **kwargs)

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data):
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown model config key(s): {', '.join(unknown)}")
        return cls(**data)


@dataclass
class FFNParams:
    """W_1 [d x r] and W_2 [r x d]"""
    W_1: Tensor
    W_2: Tensor

    def __post_init__(self):
        d, r = self.W_1.shape
        if self.W_2.shape != (r, d):
            raise DimensionError("FFN W_2 must be the transpose shape of W_1", self.W_1.shape, self.W_2.shape)

    @classmethod
    def initialize(cls, d, r, rng, dtype=None):
        dtype = resolve_dtype(dtype)
        b1, b2 = 1.0 / math.sqrt(d), 1.0 / math.sqrt(r)
        return cls(
            W_1=Tensor(rng.uniform(-b1, b1, size=(d, r)).astype(dtype), requires_grad=True),
            W_2=Tensor(rng.uniform(-b2, b2, size=(r, d)).astype(dtype), requires_grad=True),
        )

    @classmethod
    def zeros(cls, d, r, dtype=None):
        dtype = resolve_dtype(dtype)
        return cls(
            W_1=Tensor(np.zeros((d, r), dtype=dtype), requires_grad=True),
            W_2=Tensor(np.zeros((r, d), dtype=dtype), requires_grad=True),
        )


def ffn_delta(X, p):
    """ReLU(X W_1) W_2"""
    if X.shape[-1] != p.W_1.shape[0]:
        raise DimensionError("FFN input width", X.shape, p.W_1.shape)
    return matmul(relu(matmul(X, p.W_1)), p.W_2)


def ffn(X, p):
    """FFN(X) = X + ReLU(X W_1) W_2, the same map on every row"""
    return add(X, ffn_delta(X, p))


@dataclass
class Block:
    attn: AttentionParams
    ffn: FFNParams
    pe: PEDescriptor
    norm_attn: Tensor = None
    norm_ffn: Tensor = None


class TransformerModel:
    """
    Token embedding, L attention + FFN blocks and a linear output head

    T5-style B and the URPE multiplier C are built once and shared by every
    block (unique per head); Shaw relative vectors belong to each block.

    Args:
        cfg (ModelConfig): model description
    """

    def __init__(self, cfg):
        self.config = cfg
        rng = np.random.default_rng(cfg.seed)
        dtype = resolve_dtype(cfg.dtype)
        self.dtype = dtype

        self.embedding = Tensor(
            rng.normal(0.0, config.EMBEDDING_STD, size=(cfg.vocab_in, cfg.d)).astype(dtype), requires_grad=True
        )
        self.ape = APETable(cfg.n_max, cfg.d, rng, dtype=dtype) if cfg.pe_kind == "ape" else None
        self.toeplitz = (
            [ToeplitzParam(cfg.n_max, fill=0.0, dtype=dtype) for _ in range(cfg.H)]
            if cfg.pe_kind == "rpe_toeplitz" else []
        )
        self.urpe = URPEMultiplier(cfg.H, cfg.n_max, causal=cfg.causal, dtype=dtype) if cfg.urpe else None

        self.blocks = []
        for _ in range(cfg.L):
            shaw = (
                [ShawRPEParam(cfg.n_max, cfg.d_H, dtype=dtype) for _ in range(cfg.H)]
                if cfg.pe_kind == "rpe_shaw" else []
            )
            self.blocks.append(Block(
                attn=AttentionParams.initialize(
                    cfg.d, cfg.H, cfg.d_H, rng, dtype=dtype, use_bias=cfg.attn_bias, scale_qk=cfg.scale_qk
                ),
                ffn=FFNParams.initialize(cfg.d, cfg.r, rng, dtype=dtype),
                pe=PEDescriptor(kind=cfg.pe_kind, urpe=self.urpe, toeplitz=self.toeplitz, shaw=shaw),
                norm_attn=Tensor(np.ones(cfg.d, dtype=dtype), requires_grad=True) if cfg.use_norm else None,
                norm_ffn=Tensor(np.ones(cfg.d, dtype=dtype), requires_grad=True) if cfg.use_norm else None,
            ))

        bound = 1.0 / math.sqrt(cfg.d)
        self.head_W = Tensor(rng.uniform(-bound, bound, size=(cfg.d, cfg.vocab_out)).astype(dtype), requires_grad=True)
        self.head_b = Tensor(np.zeros(cfg.vocab_out, dtype=dtype), requires_grad=True)

    def parameters(self):
        """Ordered name -> Tensor map of every learnable tensor"""
        params = {"embedding": self.embedding}
        if self.ape is not None:
            params["ape"] = self.ape.embeddings
        for h, p in enumerate(self.toeplitz):
            params[f"B.h{h}"] = p.values
        if self.urpe is not None:
            params.update(self.urpe.parameters())
        for i, block in enumerate(self.blocks):
            params.update(block.attn.parameters(prefix=f"blocks.{i}.attn"))
            for h, p in enumerate(block.pe.shaw):
                params[f"blocks.{i}.shaw.h{h}"] = p.rel_vectors
            params[f"blocks.{i}.ffn.W_1"] = block.ffn.W_1
            params[f"blocks.{i}.ffn.W_2"] = block.ffn.W_2
            if block.norm_attn is not None:
                params[f"blocks.{i}.norm_attn"] = block.norm_attn
                params[f"blocks.{i}.norm_ffn"] = block.norm_ffn
        params["head.W"] = self.head_W
        params["head.b"] = self.head_b
        return params

    def param_count(self):
        return int(sum(t.size for t in self.parameters().values()))

    def zero_grad(self):
        for t in self.parameters().values():
            t.zero_grad()


def no_decay(name):
    """Parameters left out of weight decay: C, B carriers, norms and embeddings"""
    return (
        name.startswith(("urpe.", "B.", "embedding", "ape"))
        or ".shaw." in name
        or ".norm_" in name
    )


def block_forward(X, layer, model, cache=None):
    """
    One block: [pre-norm] attention, then [pre-norm] FFN

    Args:
        X (Tensor): [n x d] or [batch x n x d]
        layer (int): block index
        model (TransformerModel): owning model
        cache (dict): per-forward store for the layer-shared B / C matrices
    """
    if not 0 <= layer < len(model.blocks):
        raise ContractError(f"layer {layer} outside 0..{len(model.blocks) - 1}")
    block = model.blocks[layer]
    if block.norm_attn is not None:
        h = add(X, attn_delta(rms_norm(X, block.norm_attn), block.attn, block.pe, cache=cache))
        return add(h, ffn_delta(rms_norm(h, block.norm_ffn), block.ffn))
    return ffn(attn_layer(X, block.attn, block.pe, cache=cache), block.ffn)


def validate_tokens(tokens, model):
    ids = np.asarray(tokens)
    if ids.ndim not in (1, 2) or ids.shape[-1] < 1:
        raise InputError(f"tokens must be a non-empty sequence or batch of sequences, got shape {ids.shape}")
    if not np.issubdtype(ids.dtype, np.integer):
        raise InputError(f"token ids must be integers, got {ids.dtype}")
    cfg = model.config
    if ids.shape[-1] > cfg.n_max:
        raise CapacityError(f"sequence length {ids.shape[-1]} exceeds n_max={cfg.n_max}")
    if ids.size == 0:
        return ids
    if ids.min() < 0 or ids.max() >= cfg.vocab_in:
        raise InputError(f"token id outside [0, {cfg.vocab_in})")
    return ids


def embed(tokens, model):
    """Token embeddings, plus APE rows when the model uses them"""
    ids = validate_tokens(tokens, model)
    X = gather(model.embedding, ids)
    if model.ape is not None:
        X = add(X, model.ape.rows(ids.shape[-1]))
    return X


def output_head(X, model):
    return add(matmul(X, model.head_W), model.head_b)


def model_forward(tokens, model):
    """
    Token ids -> per-position logits

    Args:
        tokens: int array [n] or [batch x n]
        model (TransformerModel): model
    Returns:
        Tensor: [n x vocab_out] (or [batch x n x vocab_out])
    """
    X = embed(tokens, model)
    cache = {}
    for layer in range(len(model.blocks)):
        X = block_forward(X, layer, model, cache=cache)
    return output_head(X, model)


def build_twin(model, urpe):
    """
    Copy of model sharing every weight array, with C added (all-ones) or removed

    The twin differs from the source only in the URPE multiplier, which is
    what the benchmark guard, the census and the ablations compare.
    """
    cfg = dataclasses.replace(model.config, urpe=bool(urpe))
    twin = copy.copy(model)
    twin.config = cfg
    twin.urpe = URPEMultiplier(cfg.H, cfg.n_max, causal=cfg.causal, dtype=model.dtype) if urpe else None
    twin.blocks = [
        dataclasses.replace(block, pe=dataclasses.replace(block.pe, urpe=twin.urpe)) for block in model.blocks
    ]
    return twin


# Checkpoints: a plain-text header (magic, config echo, name -> shape manifest,
# "end"), then per tensor a little-endian uint64 element count followed by
# that many little-endian float64 values, in manifest order.

def save_checkpoint(model, path, meta=None):
    """Write model weights; the file is replaced atomically"""
    params = model.parameters()
    lines = [CHECKPOINT_MAGIC, "config " + json.dumps(model.config.to_dict(), sort_keys=True)]
    if meta:
        lines.append("meta " + json.dumps(meta, sort_keys=True))
    for name, t in params.items():
        lines.append(f"param {name} {','.join(str(s) for s in t.shape)}")
    lines.append("end")

    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    tmp_path = f"{path}.tmp"
    with open(tmp_path, "wb") as fh:
        fh.write(("\n".join(lines) + "\n").encode("ascii"))
        for t in params.values():
            fh.write(np.array([t.size], dtype="<u8").tobytes())
            fh.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
    os.replace(tmp_path, path)
    logger.debug(f"checkpoint written: {path}")
    return path


def read_checkpoint(path):
    """
    Parse a checkpoint file

    Returns:
        tuple: (config dict, meta dict, {name: float64 array})
    """
    if not os.path.exists(path):
        raise CheckpointError(f"checkpoint not found: {path}")
    with open(path, "rb") as fh:
        blob = fh.read()
    marker = b"\nend\n"
    cut = blob.find(marker)
    if cut < 0 or not blob.startswith(CHECKPOINT_MAGIC.encode("ascii")):
        raise CheckpointError(f"{path}: not a checkpoint (missing header)")
    try:
        header = blob[:cut].decode("ascii").split("\n")
    except UnicodeDecodeError as e:
        raise CheckpointError(f"{path}: corrupt header") from e

    cfg, meta, manifest = None, {}, []
    try:
        for line in header[1:]:
            kind, _, rest = line.partition(" ")
            if kind == "config":
                cfg = json.loads(rest)
            elif kind == "meta":
                meta = json.loads(rest)
            elif kind == "param":
                name, _, shape = rest.rpartition(" ")
                manifest.append((name, tuple(int(s) for s in shape.split(",")) if shape else ()))
            else:
                raise CheckpointError(f"{path}: unexpected header line {line!r}")
    except (ValueError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: corrupt header ({e})") from e
    if cfg is None:
        raise CheckpointError(f"{path}: header has no config line")

    arrays = {}
    offset = cut + len(marker)
    for name, shape in manifest:
        if offset + 8 > len(blob):
            raise CheckpointError(f"{path}: truncated before {name}")
        count = int(np.frombuffer(blob, dtype="<u8", count=1, offset=offset)[0])
        offset += 8
        if count != int(np.prod(shape, dtype=np.int64)) or offset + 8 * count > len(blob):
            raise CheckpointError(f"{path}: {name} length does not match shape {shape}")
        arrays[name] = np.frombuffer(blob, dtype="<f8", count=count, offset=offset).reshape(shape).copy()
        offset += 8 * count
    if offset != len(blob):
        raise CheckpointError(f"{path}: {len(blob) - offset} trailing bytes")
    return cfg, meta, arrays


def load_checkpoint(path):
    """Rebuild a TransformerModel from a checkpoint file"""
    cfg_dict, meta, arrays = read_checkpoint(path)
    try:
        model = TransformerModel(ModelConfig.from_dict(cfg_dict))
    except (ConfigError, TypeError) as e:
        raise CheckpointError(f"{path}: bad config echo ({e})") from e
    params = model.parameters()
    if set(params) != set(arrays):
        missing = sorted(set(params) - set(arrays))
        extra = sorted(set(arrays) - set(params))
        raise CheckpointError(f"{path}: parameter mismatch (missing={missing}, unexpected={extra})")
    for name, t in params.items():
        if arrays[name].shape != t.shape:
            raise CheckpointError(f"{path}: {name} has shape {arrays[name].shape}, model expects {t.shape}")
        t.data[...] = arrays[name].astype(t.dtype)
    model.meta = meta
    return model
