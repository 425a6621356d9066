"""Interpretation stage: per-event credit for a trained model's prediction.

Events of one journey are treated as players of a cooperative game whose
value is the model's masked-prediction accuracy. Credit comes either from a
least-squares fit of accuracy on mask indicator rows or from exact/sampled
Shapley values, and always ends in clip-and-normalize.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, DimensionError, NumericError, ValidationError
from .journey import DEFAULT_MAX_SEQ_LEN, CustomerJourney, EncodedJourney, Vocabulary, encode_journey
from .model import ModelParams, forward_batch
from .trainer import softmax

EXACT_LIMIT = 12
OLS_SAMPLE_ROWS = 2048
RIDGE = 1e-8
KERNEL_ENDPOINT_WEIGHT = 1e6
_ACC_CHUNK = 1024

METHODS = ("ols", "kernel_ols", "shapley_exact", "shapley_sampled", "auto")


@dataclass
class AttributionResult:
    """Per-event weights for one journey plus solver diagnostics."""

    raw_weights: np.ndarray
    intercept: float
    weights: np.ndarray
    method: str
    unattributed: bool


def mask_powerset(n: int) -> np.ndarray:
    """All 2^n binary rows in counting order (event 0 is the most
    significant bit), so 1-indexed row 8 for n=5 is [0,0,1,1,1]."""
    if n < 1:
        raise ValidationError("mask_powerset needs n >= 1")
    if n > EXACT_LIMIT:
        raise ValidationError(f"n={n} exceeds exact_limit={EXACT_LIMIT}; use sampling mode")
    rows = np.arange(2 ** n, dtype=np.int64)
    bits = (rows[:, None] >> np.arange(n - 1, -1, -1)) & 1
    return bits.astype(np.int64)


def _hard_labels(params: ModelParams, features: np.ndarray, times: np.ndarray) -> np.ndarray:
    logits, _ = forward_batch(features, times, params, training=False)
    return (softmax(logits)[..., 1] >= 0.5).astype(np.int64)


def masked_accuracy(params: ModelParams, enc: EncodedJourney, mask: np.ndarray) -> float:
    """Agreement rate between hard predictions and labels over unmasked
    positions.

    Feature rows with mask 0 are zeroed but keep their slot (the time gate
    still sees the original offsets); scoring only counts positions with
    mask 1. The all-zero mask is defined as accuracy 0.
    """
    mask = np.asarray(mask)
    if mask.shape != (len(enc.times),):
        raise DimensionError(f"mask length {mask.shape} does not match journey length {len(enc.times)}")
    return float(masked_accuracy_batch(params, enc, mask[None, :])[0])


def masked_accuracy_batch(params: ModelParams, enc: EncodedJourney, masks: np.ndarray) -> np.ndarray:
    """Vectorized masked accuracy for many mask rows of one journey."""
    masks = np.asarray(masks, dtype=np.float64)
    if masks.ndim != 2 or masks.shape[1] != len(enc.times):
        raise DimensionError(f"masks must be (m, {len(enc.times)}), got {masks.shape}")
    m, n = masks.shape
    out = np.empty(m)
    for start in range(0, m, _ACC_CHUNK):
        chunk = masks[start:start + _ACC_CHUNK]
        feats = enc.features[None, :, :] * chunk[:, :, None]
        times = np.broadcast_to(enc.times, (len(chunk), n))
        preds = _hard_labels(params, feats, times)
        scored = chunk > 0
        matches = ((preds == enc.labels[None, :]) & scored).sum(axis=1)
        counts = scored.sum(axis=1)
        with np.errstate(invalid="ignore"):
            acc = np.where(counts > 0, matches / np.maximum(counts, 1), 0.0)
        out[start:start + len(chunk)] = acc
    return out


# ---------------------------------------------------------------------------
# least-squares weight solve
# ---------------------------------------------------------------------------


def _shapley_kernel_row_weights(masks: np.ndarray) -> np.ndarray:
    m, n = masks.shape
    sizes = masks.sum(axis=1).astype(int)
    w = np.empty(m)
    for idx, size in enumerate(sizes):
        if size == 0 or size == n:
            w[idx] = KERNEL_ENDPOINT_WEIGHT
        else:
            w[idx] = (n - 1) / (math.comb(n, size) * size * (n - size))
    return w


def solve_weights(
    masks: np.ndarray,
    acc: np.ndarray,
    weighting: str = "uniform",
    include_intercept: bool = True,
) -> tuple[float, np.ndarray]:
    """Least squares of accuracy on [1 | mask] rows.

    Solved via the normal equations with ridge 1e-8 for rank safety; two
    iterated-refinement steps remove the ridge bias so residuals stay
    orthogonal to the design columns to machine precision on full-rank
    systems. "shapley_kernel" weights each row by the Shapley kernel of its
    subset size (all-zero/all-one rows get weight 1e6).
    """
    masks = np.asarray(masks, dtype=np.float64)
    acc = np.asarray(acc, dtype=np.float64)
    if masks.ndim != 2:
        raise DimensionError("masks must be a 2-D matrix")
    m, n = masks.shape
    if acc.shape != (m,):
        raise DimensionError(f"acc must have shape ({m},), got {acc.shape}")
    if m < n + 1:
        raise ValidationError(f"need at least n+1={n + 1} mask rows, got {m}")
    if weighting == "uniform":
        w = np.ones(m)
    elif weighting == "shapley_kernel":
        w = _shapley_kernel_row_weights(masks)
    else:
        raise ConfigError(f"unknown weighting {weighting!r}")

    X = np.hstack([np.ones((m, 1)), masks]) if include_intercept else masks
    Xw = X * w[:, None]
    M = Xw.T @ X
    b = Xw.T @ acc
    A = M + RIDGE * np.eye(M.shape[0])
    try:
        beta = np.linalg.solve(A, b)
        for _ in range(2):
            beta = beta + np.linalg.solve(A, b - M @ beta)
    except np.linalg.LinAlgError as exc:
        raise NumericError(f"degenerate least-squares system after ridge: {exc}") from None
    if not np.all(np.isfinite(beta)):
        raise NumericError("least-squares solve produced non-finite coefficients")
    if include_intercept:
        return float(beta[0]), beta[1:]
    return 0.0, beta


# ---------------------------------------------------------------------------
# Shapley values
# ---------------------------------------------------------------------------


def _subset_vector(bitmask: int, n: int) -> np.ndarray:
    return np.array([(bitmask >> j) & 1 for j in range(n)], dtype=np.int64)


def _shapley_from_table(values: np.ndarray, n: int) -> np.ndarray:
    """Exact values from a full table indexed by bitmask (bit j = player j)."""
    fact = [math.factorial(i) for i in range(n + 1)]
    coeff = np.array([fact[size] * fact[n - size - 1] / fact[n] for size in range(n)])
    sizes = np.array([bin(s).count("1") for s in range(2 ** n)])
    phi = np.zeros(n)
    for s in range(2 ** n):
        size = sizes[s]
        for i in range(n):
            if not (s >> i) & 1:
                phi[i] += coeff[size] * (values[s | (1 << i)] - values[s])
    return phi


def shapley_exact(value, n: int) -> np.ndarray:
    """Exact Shapley values by subset enumeration with memoized evaluations.

    `value` maps a 0/1 membership vector of length n to a real game value.
    """
    if n < 1:
        raise ValidationError("shapley_exact needs n >= 1")
    if n > EXACT_LIMIT:
        raise ValidationError(f"n={n} exceeds exact_limit={EXACT_LIMIT}; use shapley_sampled")
    table = np.empty(2 ** n)
    for bitmask in range(2 ** n):
        table[bitmask] = float(value(_subset_vector(bitmask, n)))
    return _shapley_from_table(table, n)


def shapley_sampled(
    value,
    n: int,
    n_samples: int,
    seed: int,
    value_batch=None,
) -> np.ndarray:
    """Monte-Carlo Shapley over uniformly random player permutations.

    Each sampled permutation contributes one marginal per player; estimates
    are the means. Deterministic per seed. When `value_batch` is given it is
    called with the (n+1, n) prefix-mask matrix of each permutation instead
    of n+1 single evaluations (same estimates, fewer calls).
    """
    if n < 1:
        raise ValidationError("shapley_sampled needs n >= 1")
    if n_samples < 1:
        raise ValidationError("n_samples must be >= 1")
    rng = np.random.default_rng(seed)
    marginals = np.zeros(n)
    if value_batch is not None:
        prefix = np.zeros((n + 1, n))
        for _ in range(n_samples):
            perm = rng.permutation(n)
            prefix[:] = 0.0
            for pos, player in enumerate(perm, start=1):
                prefix[pos:, player] = 1.0
            vals = np.asarray(value_batch(prefix), dtype=np.float64)
            marginals[perm] += np.diff(vals)
    else:
        memo: dict[bytes, float] = {}
        empty = np.zeros(n, dtype=np.int64)
        v_prev_base = float(value(empty))
        for _ in range(n_samples):
            perm = rng.permutation(n)
            mask = empty.copy()
            v_prev = v_prev_base
            for player in perm:
                mask[player] = 1
                key = mask.tobytes()
                v_cur = memo.get(key)
                if v_cur is None:
                    v_cur = float(value(mask))
                    memo[key] = v_cur
                marginals[player] += v_cur - v_prev
                v_prev = v_cur
    return marginals / n_samples


def clip_normalize(raw: np.ndarray) -> tuple[np.ndarray, bool]:
    """Zero out negative weights and normalize the positive mass to 1.

    Returns (weights, unattributed); an all-non-positive vector yields zeros
    with unattributed=True.
    """
    raw = np.asarray(raw, dtype=np.float64)
    if not np.all(np.isfinite(raw)):
        raise NumericError("clip_normalize requires a finite vector")
    clipped = np.clip(raw, 0.0, None)
    total = clipped.sum()
    if total > 0:
        return clipped / total, False
    return np.zeros_like(clipped), True


# ---------------------------------------------------------------------------
# journey-level dispatch
# ---------------------------------------------------------------------------


def resolve_method(method: str, n_events: int) -> str:
    if method not in METHODS:
        raise ConfigError(f"unknown attribution method {method!r}")
    if method == "auto":
        return "shapley_exact" if n_events <= EXACT_LIMIT else "shapley_sampled"
    return method


def attribute_journey(
    params: ModelParams,
    journey: CustomerJourney,
    vocab: Vocabulary,
    method: str = "auto",
    n_samples: int = OLS_SAMPLE_ROWS,
    seed: int = 0,
    max_seq_len: int = DEFAULT_MAX_SEQ_LEN,
    include_intercept: bool = True,
) -> AttributionResult:
    """Attribute one journey's events against a frozen model.

    auto picks exact Shapley up to 12 events and permutation sampling above;
    ols/kernel_ols regress masked accuracy on the full powerset (or 2048
    uniform subset rows above the exact limit). Every path ends in
    clip_normalize.
    """
    enc = encode_journey(journey, vocab, max_seq_len)
    n = len(journey.events)
    resolved = resolve_method(method, n)

    if resolved in ("ols", "kernel_ols"):
        if n <= EXACT_LIMIT:
            masks = mask_powerset(n)
        else:
            rng = np.random.default_rng(seed)
            masks = rng.integers(0, 2, size=(OLS_SAMPLE_ROWS, n))
            masks[0] = 0
            masks[1] = 1
        acc = masked_accuracy_batch(params, enc, masks)
        weighting = "uniform" if resolved == "ols" else "shapley_kernel"
        intercept, raw = solve_weights(masks, acc, weighting, include_intercept)
    elif resolved == "shapley_exact":
        if n > EXACT_LIMIT:
            raise ConfigError(f"shapley_exact supports at most {EXACT_LIMIT} events; use shapley_sampled")
        masks = mask_powerset(n)
        acc = masked_accuracy_batch(params, enc, masks)
        table = np.empty(2 ** n)
        bit_index = masks @ (1 << np.arange(n, dtype=np.int64))
        table[bit_index] = acc
        raw = _shapley_from_table(table, n)
        intercept = float(table[0])
    else:
        raw = shapley_sampled(
            value=lambda mask: masked_accuracy(params, enc, mask),
            n=n,
            n_samples=n_samples,
            seed=seed,
            value_batch=lambda masks: masked_accuracy_batch(params, enc, masks),
        )
        intercept = float(masked_accuracy_batch(params, enc, np.zeros((1, n)))[0])

    weights, unattributed = clip_normalize(raw)
    return AttributionResult(
        raw_weights=np.asarray(raw, dtype=np.float64),
        intercept=intercept,
        weights=weights,
        method=resolved,
        unattributed=unattributed,
    )


# ---------------------------------------------------------------------------
# JSONL interface
# ---------------------------------------------------------------------------


def attribution_to_dict(journey: CustomerJourney, result: AttributionResult) -> dict:
    return {
        "user_id": journey.user_id,
        "method": result.method,
        "intercept": result.intercept,
        "raw_weights": [float(x) for x in result.raw_weights],
        "weights": [float(x) for x in result.weights],
        "unattributed": result.unattributed,
        "channels": journey.channels,
    }


def save_attributions(path: str | Path, journeys: list[CustomerJourney], results: list[AttributionResult]) -> None:
    if len(journeys) != len(results):
        raise ValidationError("journeys and results must align one-to-one")
    with open(path, "w", encoding="utf-8") as fh:
        for journey, result in zip(journeys, results):
            fh.write(json.dumps(attribution_to_dict(journey, result)) + "\n")


def load_attributions(path: str | Path) -> list[dict]:
    records = []
    required = ("user_id", "method", "intercept", "raw_weights", "weights", "unattributed", "channels")
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValidationError(f"line {line_no}: malformed JSON ({exc.msg})") from None
            for key in required:
                if key not in obj:
                    raise ValidationError(f"line {line_no}: missing field {key!r}")
            records.append(obj)
    return records
