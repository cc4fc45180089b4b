"""
Theory Probes
Numerical witnesses for the expressiveness results about RPE and URPE
attention. Includes:
- collapse of RPE models on constant-token inputs (and its lower bound)
- the attentive and position-aware conditions, built by hand
- position injection with value/output biases
- the URPE vs RPE separation, all-ones equivalence, causal independence,
  gradient correctness and the parameter census
"""

import json
import logging
import os
import shlex
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize_scalar
from scipy.special import softmax as scipy_softmax

import config
from attention_zoo import AttentionParams, PEDescriptor, attn_layer, attn_matrix
from exceptions import ContractError, DomainError, InputError
from positional_encodings import ToeplitzParam, URPEMultiplier, urpe_param_count
from src.utils import min_pairwise_gap, row_spread
from tensor_engine import Tensor, cross_entropy, gradient_check, no_grad
from training_harness import train_steps
from transformer_stack import (
    FFNParams,
    ModelConfig,
    TransformerModel,
    block_forward,
    build_twin,
    ffn,
    model_forward,
)

logger = logging.getLogger(__name__)

F64 = config.PROBE_DTYPE


@dataclass
class ProbeReport:
    """
    Pass/fail record of one probe

    ``residuals`` are measured errors that must all stay within
    ``tolerance``; ``stats`` carry separation statistics compared against
    ``threshold`` (when the probe has one) and other measured values.
    """
    name: str
    passed: bool
    residuals: dict
    tolerance: float
    construction: str
    stats: dict = field(default_factory=dict)
    threshold: float = None

    def to_line(self):
        parts = [f"probe={self.name}", f"pass={str(bool(self.passed)).lower()}"]
        parts += [f"{k}={_fmt(v)}" for k, v in self.residuals.items()]
        parts += [f"{k}={_fmt(v)}" for k, v in self.stats.items()]
        parts.append(f"tol={_fmt(self.tolerance)}")
        if self.threshold is not None:
            parts.append(f"threshold={_fmt(self.threshold)}")
        parts.append(f"construction={json.dumps(self.construction)}")
        return " ".join(parts)


def _fmt(value):
    if isinstance(value, str):
        return json.dumps(value)
    if isinstance(value, (bool, np.bool_)):
        return str(bool(value)).lower()
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return f"{float(value):.6g}"


def parse_report_line(line):
    """Split a report line back into a dict of strings"""
    fields = {}
    for token in shlex.split(line):
        key, _, value = token.partition("=")
        fields[key] = value
    return fields


def write_report(reports, path):
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for report in reports:
            fh.write(report.to_line() + "\n")
    return path


def _within(residuals, tol):
    return all(v <= tol for v in residuals.values())


def probe_config(**kwargs):
    """ModelConfig with the settings every hand-built construction assumes"""
    settings = dict(scale_qk=False, use_norm=False, dtype=F64)
    settings.update(kwargs)
    return ModelConfig(**settings)


def zero_bias(n_max, num_heads=1):
    """T5 bias carriers with every offset at exactly 0"""
    return [ToeplitzParam(n_max, fill=0.0, dtype=F64) for _ in range(num_heads)]


def position_aware_multiplier(n, num_heads=1):
    """C = upper-triangular all-ones Toeplitz: offsets k = i - j > 0 are 0"""
    urpe = URPEMultiplier(num_heads, n, causal=False, dtype=F64)
    for p in urpe.per_head:
        for k in range(1, n):
            p.set_offset(k, 0.0)
    return urpe


def position_aware_rowsums(n):
    """(1, (n-1)/n, ..., 1/n)"""
    return (n - np.arange(n, dtype=np.float64)) / n


# Collapse

def collapse_probe(model, token, n):
    """
    Run n copies of one token through an RPE model and measure row spread

    Args:
        model (TransformerModel): RPE (Toeplitz or Shaw) or no-PE model
        token (int): the repeated token id
        n (int): sequence length
    """
    cfg = model.config
    if cfg.urpe:
        raise ContractError("collapse does not hold for URPE models")
    if cfg.pe_kind == "ape":
        raise ContractError("collapse does not hold with absolute position embeddings")
    with no_grad():
        logits = model_forward(np.full(n, token, dtype=np.int64), model)
    spread = row_spread(logits.data)
    residuals = {"max_row_diff": spread}
    return ProbeReport(
        "collapse", _within(residuals, config.COLLAPSE_TOL), residuals, config.COLLAPSE_TOL,
        f"{cfg.variant} L={cfg.L} d={cfg.d} H={cfg.H} token={token} n={n} dtype={cfg.dtype}",
    )


def collapse_sweep(seed=config.RANDOM_STATE, steps=config.COLLAPSE_TRAIN_STEPS,
                   depths=config.COLLAPSE_DEPTHS, widths=config.COLLAPSE_WIDTHS):
    """
    Collapse over {Toeplitz, Shaw, no PE} x depths x widths, before and after
    random training
    """
    n = config.COLLAPSE_SEQ_LEN
    reports = []
    for variant in ("rpe", "shaw", "none"):
        for L in depths:
            for width in widths:
                cfg = ModelConfig.for_variant(
                    variant, L=L, H=2, d=width, d_H=width // 2, r=2 * width,
                    vocab_in=config.VOCAB_SIZE, vocab_out=n, n_max=n,
                    scale_qk=False, use_norm=False, dtype=config.TRAIN_DTYPE, seed=seed,
                )
                model = TransformerModel(cfg)
                token = seed % cfg.vocab_in
                before = collapse_probe(model, token, n)
                if steps:
                    train_steps(model, "pi", steps, config.COLLAPSE_TRAIN_BATCH, seed)
                after = collapse_probe(model, token, n)
                after.residuals = {"before": before.residuals["max_row_diff"],
                                   "after": after.residuals["max_row_diff"]}
                after.passed = _within(after.residuals, config.COLLAPSE_TOL)
                after.construction += f" train_steps={steps}"
                reports.append(after)
    return reports


def lower_bound(M, n, c):
    """(2M - c)^2 + (n - 1) c^2"""
    _check_bound_args(M, n)
    return (2.0 * M - c) ** 2 + (n - 1) * c ** 2


def lower_bound_floor(M, n):
    """4M^2 / (1 + 1/(n - 1)), the minimum of lower_bound over c"""
    _check_bound_args(M, n)
    return 4.0 * M * M / (1.0 + 1.0 / (n - 1))


def _check_bound_args(M, n):
    if int(n) != n or n <= 2:
        raise DomainError(f"the bound needs an integer n > 2, got {n}")
    if not M > 0:
        raise DomainError(f"M must be positive, got {M}")


def lower_bound_probe(trials=config.PROBE_SEEDS, seed=config.RANDOM_STATE, grid_points=20001):
    """
    Grid and bounded scalar minimization over c against the closed form

    Residuals are one-sided violations (floor minus found minimum) plus the
    equality gap at c = 2M/n.
    """
    rng = np.random.default_rng(seed)
    grid_violation = minimize_violation = equality_gap = 0.0
    for _ in range(trials):
        M = float(rng.uniform(0.1, 5.0))
        n = int(rng.integers(3, 65))
        floor = lower_bound_floor(M, n)
        grid = np.linspace(-M, 3.0 * M, grid_points)
        grid_min = float(np.min(lower_bound(M, n, grid)))
        found = minimize_scalar(lambda c: lower_bound(M, n, c), bounds=(-M, 3.0 * M), method="bounded")
        grid_violation = max(grid_violation, floor - grid_min)
        minimize_violation = max(minimize_violation, floor - float(found.fun))
        equality_gap = max(equality_gap, abs(lower_bound(M, n, 2.0 * M / n) - floor))
    residuals = {
        "grid_violation": max(grid_violation, 0.0),
        "minimize_violation": max(minimize_violation, 0.0),
        "equality_gap": equality_gap,
    }
    return ProbeReport(
        "lower-bound", _within(residuals, config.IDENTITY_TOL), residuals, config.IDENTITY_TOL,
        f"{trials} random (M, n>2), grid of {grid_points} c values plus bounded Brent search",
    )


# Attentive / position-aware conditions

def attentive_condition_probe(u, c, X):
    """
    W_Q = W_K = u, key bias -c, C all-ones and B = 0 reproduce
    softmax(Xu (Xu - c1)^T)

    Args:
        u: vector [d]
        c (float): key offset
        X: matrix [n x d]
    """
    X = np.asarray(X, dtype=np.float64)
    u = np.asarray(u, dtype=np.float64).reshape(-1)
    n, d = X.shape
    if u.shape != (d,):
        raise InputError(f"u must have {d} entries, got {u.shape}")

    params = AttentionParams.zeros(d, 1, 1, dtype=F64, use_bias=True, scale_qk=False)
    head = params.heads[0]
    head.W_Q.data[:, 0] = u
    head.W_K.data[:, 0] = u
    head.c_K.data[0] = -c
    pe = PEDescriptor(kind="rpe_toeplitz", urpe=URPEMultiplier(1, n, dtype=F64), toeplitz=zero_bias(n))
    with no_grad():
        A = attn_matrix(Tensor(X), params, pe, 0).data

    z = X @ u
    expected = scipy_softmax(np.outer(z, z - c), axis=1)
    residuals = {"max_abs_diff": float(np.max(np.abs(A - expected)))}
    return ProbeReport(
        "attentive", _within(residuals, config.IDENTITY_TOL), residuals, config.IDENTITY_TOL,
        f"W_Q=W_K=u c_K=-c C=ones B=0 n={n} d={d}",
    )


def attentive_suite(seed=config.RANDOM_STATE, trials=config.PROBE_SEEDS):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        n, d = int(rng.integers(2, 9)), int(rng.integers(1, 5))
        report = attentive_condition_probe(rng.uniform(-1, 1, d), float(rng.uniform(-1, 1)), rng.uniform(-1, 1, (n, d)))
        worst = max(worst, report.residuals["max_abs_diff"])
    residuals = {"max_abs_diff": worst}
    return ProbeReport(
        "attentive", _within(residuals, config.IDENTITY_TOL), residuals, config.IDENTITY_TOL,
        f"{trials} random (u, c, X); W_Q=W_K=u c_K=-c C=ones B=0",
    )


def position_aware_probe(n, X=None, trials=config.POSITION_AWARE_TRIALS, seed=config.RANDOM_STATE, d=3):
    """
    W_Q = W_K = c_K = 0, B = 0, C upper-triangular ones: A(X) 1 must equal
    (1, (n-1)/n, ..., 1/n) whatever X is

    Args:
        n (int): sequence length, at least 2
        X: optional single input; otherwise ``trials`` random inputs
    """
    if n < 2:
        raise DomainError(f"position-aware probe needs n >= 2, got {n}")
    if X is not None:
        inputs = [np.asarray(X, dtype=np.float64)]
        d = inputs[0].shape[1]
    else:
        rng = np.random.default_rng(seed)
        inputs = [rng.uniform(-1, 1, (n, d)) for _ in range(trials)]

    params = AttentionParams.zeros(d, 1, 1, dtype=F64, use_bias=True, scale_qk=False)
    pe = PEDescriptor(kind="rpe_toeplitz", urpe=position_aware_multiplier(n), toeplitz=zero_bias(n))
    v = position_aware_rowsums(n)

    sums = []
    with no_grad():
        for x in inputs:
            sums.append(attn_matrix(Tensor(x), params, pe, 0).data.sum(axis=1))
    sums = np.array(sums)
    residuals = {
        "max_rowsum_diff": float(np.max(np.abs(sums - v))),
        "input_dependence": float(np.max(np.abs(sums - sums[0]))),
    }
    gap = min_pairwise_gap(sums[0])
    return ProbeReport(
        "position-aware", _within(residuals, config.IDENTITY_TOL) and gap > 0, residuals, config.IDENTITY_TOL,
        f"W_Q=W_K=c_K=0 B=0 C=upper-triangular ones n={n} inputs={len(inputs)}",
        stats={"min_gap": gap, "rowsums": np.array2string(sums[0], precision=6, separator=",")},
    )


def position_aware_suite(seed=config.RANDOM_STATE):
    reports = [position_aware_probe(n, seed=seed) for n in config.POSITION_AWARE_LENGTHS]
    for report, n in zip(reports, config.POSITION_AWARE_LENGTHS):
        report.stats = {"n": n, "min_gap": report.stats["min_gap"]}
    return reports


# Position injection / separation

def position_injection_block(n, d):
    """
    Two heads with W_Q = W_K = W_V = 0, value bias 1/min gap of v, W_O a
    row of ones and position-aware C; the FFN is zero

    Returns:
        tuple: (AttentionParams, PEDescriptor, FFNParams, u)
    """
    v = position_aware_rowsums(n)
    c_v = 1.0 / min_pairwise_gap(v)
    params = AttentionParams.zeros(d, 2, 1, dtype=F64, use_bias=True, scale_qk=False)
    for head in params.heads:
        head.c_V.data[0] = c_v
        head.W_O.data[:] = 1.0
    pe = PEDescriptor(kind="rpe_toeplitz", urpe=position_aware_multiplier(n, 2), toeplitz=zero_bias(n, 2))
    u = params.num_heads * c_v * v
    return params, pe, FFNParams.zeros(d, 1, dtype=F64), u


def position_injection_probe(n, d, X=None, seed=config.RANDOM_STATE):
    """
    The block must return X + u 1_d^T with |u_i - u_j| > 1 for all i != j

    Args:
        n (int): sequence length, at least 2
        d (int): model width
        X: optional input [n x d]; random when omitted
    """
    if n < 2:
        raise DomainError(f"position injection needs n >= 2, got {n}")
    if X is None:
        X = np.random.default_rng(seed).uniform(-1, 1, (n, d))
    X = np.asarray(X, dtype=np.float64)
    params, pe, ffn_params, u = position_injection_block(n, d)
    with no_grad():
        out = ffn(attn_layer(Tensor(X), params, pe), ffn_params).data
    injected = out - X
    residuals = {"max_abs_diff": float(np.max(np.abs(injected - u[:, None])))}
    gap = min_pairwise_gap(injected[:, 0])
    return ProbeReport(
        "position-injection", _within(residuals, config.INJECTION_TOL) and gap > 1.0,
        residuals, config.INJECTION_TOL,
        f"H=2 d_H=1 W_Q=W_K=W_V=0 c_V={1.0 / min_pairwise_gap(position_aware_rowsums(n)):g} W_O=ones "
        f"C=upper-triangular ones FFN=0 n={n} d={d}",
        stats={"min_gap": gap}, threshold=1.0,
    )


def position_injection_suite(seed=config.RANDOM_STATE):
    return [position_injection_probe(n, d, seed=seed) for n in config.INJECTION_LENGTHS for d in config.INJECTION_DIMS]


def separation_model(n, vocab):
    """
    One-layer URPE model whose constant-input logits depend on position

    The block is the position injection construction on a zero embedding;
    every logit reads channel 0, so position i scores u_i.
    """
    cfg = probe_config(L=1, H=2, d=2, d_H=1, r=1, pe_kind="rpe_toeplitz", urpe=True,
                       vocab_in=vocab, vocab_out=n, n_max=n, attn_bias=True)
    model = TransformerModel(cfg)
    params, pe, ffn_params, _ = position_injection_block(n, cfg.d)
    model.embedding.data[:] = 0.0
    for p, q in zip(model.toeplitz, pe.toeplitz):
        p.values.data[:] = q.values.data
    for p, q in zip(model.urpe.per_head, pe.urpe.per_head):
        p.values.data[:] = q.values.data
    block = model.blocks[0]
    for ours, built in zip(block.attn.heads, params.heads):
        for name in ("W_Q", "W_K", "W_V", "W_O", "c_K", "c_V"):
            getattr(ours, name).data[:] = getattr(built, name).data
    block.attn.c_O.data[:] = 0.0
    block.ffn.W_1.data[:] = 0.0
    block.ffn.W_2.data[:] = 0.0
    model.head_W.data[:] = 0.0
    model.head_W.data[0, :] = 1.0
    model.head_b.data[:] = 0.0
    return model


def separation_probe(n, vocab):
    """
    Hand-built URPE model separates positions on a constant input; its RPE
    twin (same weights, C removed) collapses
    """
    model = separation_model(n, vocab)
    twin = build_twin(model, urpe=False)
    tokens = np.zeros(n, dtype=np.int64)
    with no_grad():
        urpe_logits = model_forward(tokens, model).data
        rpe_logits = model_forward(tokens, twin).data
    gap = min_pairwise_gap(urpe_logits[:, 0])
    residuals = {"rpe_twin_spread": row_spread(rpe_logits)}
    return ProbeReport(
        "separation", gap > config.SEPARATION_GAP and _within(residuals, config.COLLAPSE_TOL),
        residuals, config.COLLAPSE_TOL,
        f"L=1 H=2 position injection block, head reads channel 0, n={n} vocab={vocab}",
        stats={"urpe_min_gap": gap}, threshold=config.SEPARATION_GAP,
    )


# Equivalence / causality / gradients / census

def _small_model(variant, seed, **kwargs):
    settings = dict(L=2, H=2, d=8, d_H=4, r=16, vocab_in=5, vocab_out=8, n_max=8,
                    use_norm=True, scale_qk=True, dtype=F64, seed=seed)
    settings.update(kwargs)
    return TransformerModel(ModelConfig.for_variant(variant, **settings))


def all_ones_probe(trials=20, seed=config.RANDOM_STATE):
    """A fresh (all-ones) C must leave every RPE logit bit-identical"""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for backbone in ("rpe", "shaw"):
        model = _small_model(backbone, seed)
        twin = build_twin(model, urpe=True)
        for _ in range(trials):
            tokens = rng.integers(0, model.config.vocab_in, size=int(rng.integers(1, model.config.n_max + 1)))
            with no_grad():
                diff = np.max(np.abs(model_forward(tokens, model).data - model_forward(tokens, twin).data))
            worst = max(worst, float(diff))
    residuals = {"max_abs_diff": worst}
    return ProbeReport(
        "all-ones", _within(residuals, 0.0), residuals, 0.0,
        f"RPE and Shaw backbones vs URPE twins with fresh C, {trials} inputs each, 64-bit",
    )


def causal_probe(trials=20, seed=config.RANDOM_STATE, n=8):
    """
    Causal C with B = 0: query i only reads keys j >= i, so perturbing row j
    must leave every later row untouched
    """
    model = TransformerModel(ModelConfig(
        L=2, H=2, d=8, d_H=4, r=16, pe_kind="none", urpe=True, causal=True,
        vocab_in=5, vocab_out=n, n_max=n, use_norm=True, dtype=F64, seed=seed,
    ))
    rng = np.random.default_rng(seed)
    leak, reach = 0.0, np.inf
    for _ in range(trials):
        X = rng.uniform(-1, 1, (n, model.config.d))
        j = int(rng.integers(0, n))
        Y = X.copy()
        Y[j] += rng.normal(0.0, 1.0, model.config.d)
        with no_grad():
            a, b = Tensor(X), Tensor(Y)
            for layer in range(model.config.L):
                a, b = block_forward(a, layer, model), block_forward(b, layer, model)
        change = np.max(np.abs(a.data - b.data), axis=1)
        if j + 1 < n:
            leak = max(leak, float(change[j + 1:].max()))
        reach = min(reach, float(change[j]))
    residuals = {"max_leak": leak}
    return ProbeReport(
        "causal", _within(residuals, config.IDENTITY_TOL), residuals, config.IDENTITY_TOL,
        f"causal URPE, B=0, L=2, n={n}, {trials} random row perturbations",
        stats={"min_change_at_perturbed_row": reach},
    )


def gradient_probe(seed=config.RANDOM_STATE, variants=("ape", "rpe", "shaw", "urpe", "urpe-shaw")):
    """Full-model backward against central differences for every variant"""
    worst = {}
    for variant in variants:
        model = _small_model(variant, seed, L=1, d=4, d_H=2, r=4, n_max=4, vocab_out=4, use_norm=True)
        rng = np.random.default_rng(seed)
        for t in model.parameters().values():
            t.data[:] = t.data + rng.uniform(-0.5, 0.5, t.shape)
        tokens = rng.integers(0, model.config.vocab_in, size=(2, 4))
        targets = rng.integers(0, model.config.vocab_out, size=(2, 4))
        tensors = list(model.parameters().values())
        errors = gradient_check(lambda _: cross_entropy(model_forward(tokens, model), targets), tensors)
        worst[variant] = max(errors.values())
    return ProbeReport(
        "gradients", _within(worst, config.GRADCHECK_TOL), worst, config.GRADCHECK_TOL,
        f"relative error vs central differences h={config.GRADCHECK_STEP:g}, 64-bit, per variant",
    )


def census(cfg):
    """
    Learnable parameter totals of an RPE model and its URPE twin

    c_K counts when attention biases are on, although its gradient is always
    zero: Q c_K adds the same value to every logit of a row and softmax
    ignores row-constant shifts.

    Returns:
        dict: rpe_total, urpe_total, delta, formula (H * (2 n_max - 1))
    """
    base = ModelConfig.from_dict({**cfg.to_dict(), "urpe": False})
    model = TransformerModel(base)
    twin = build_twin(model, urpe=True)
    rpe_total, urpe_total = model.param_count(), twin.param_count()
    return {
        "rpe_total": rpe_total,
        "urpe_total": urpe_total,
        "delta": urpe_total - rpe_total,
        "formula": urpe_param_count(cfg.H, cfg.n_max),
    }


def census_probe(cases=((10, 200), (12, 128), (1, 1))):
    mismatch, deltas = 0, {}
    for H, n_max in cases:
        counts = census(ModelConfig(L=1, H=H, d=4, d_H=2, r=4, vocab_in=3, vocab_out=3, n_max=n_max))
        mismatch = max(mismatch, abs(counts["delta"] - counts["formula"]))
        deltas[f"delta_H{H}_n{n_max}"] = counts["delta"]
    residuals = {"max_mismatch": mismatch}
    return ProbeReport(
        "census", _within(residuals, 0), residuals, 0,
        "parameter count of URPE twin minus RPE model vs H*(2*n_max-1)", stats=deltas,
    )


# Registry

def _separation_suite(seed):
    return [separation_probe(n, config.VOCAB_SIZE) for n in (2, 4, 8)]


PROBES = {
    "collapse": lambda seed: collapse_sweep(seed),
    "lower-bound": lambda seed: [lower_bound_probe(seed=seed)],
    "attentive": lambda seed: [attentive_suite(seed)],
    "position-aware": position_aware_suite,
    "position-injection": position_injection_suite,
    "separation": _separation_suite,
    "all-ones": lambda seed: [all_ones_probe(seed=seed)],
    "causal": lambda seed: [causal_probe(seed=seed)],
    "gradients": lambda seed: [gradient_probe(seed)],
    "census": lambda seed: [census_probe()],
}


def resolve_probe_names(selection):
    """Expand 'all' and reject unknown names"""
    names = list(PROBES) if not selection or list(selection) == ["all"] else list(selection)
    unknown = [name for name in names if name not in PROBES]
    if unknown:
        raise InputError(f"unknown probe(s): {', '.join(unknown)}; valid names: all, {', '.join(PROBES)}")
    return names


def run_probe_suite(selection=("all",), seed=config.RANDOM_STATE, report_path=None,
                    collapse_steps=config.COLLAPSE_TRAIN_STEPS):
    """
    Run the selected probes in registry order

    collapse_steps sets the random training between the two collapse checks.

    Returns:
        list[ProbeReport]: one or more reports per probe name
    """
    reports = []
    for name in resolve_probe_names(selection):
        logger.info(f"🔄 Probe {name}...")
        if name == "collapse":
            batch = collapse_sweep(seed, steps=collapse_steps)
        else:
            batch = PROBES[name](seed)
        for report in batch:
            status = "✅" if report.passed else "❌"
            logger.info(f"{status} {report.to_line()}")
        reports.extend(batch)
    if report_path:
        write_report(reports, report_path)
    return reports
