"""Token-level diagnostics: entropy/probability landscapes, quadrant stats,
subgroup training dynamics, the top-K fidelity/memory study, and lossless
record export/ingest (JSONL and CSV).

Plot rendering is out of scope: CSV/JSONL files are the interface to
external plotting tools.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass

import numpy as np

from . import probstats, toylm
from .errors import (
    DegenerateVarianceError,
    InvalidArgumentError,
    RecordParseError,
    RecordValidationError,
)

RECORD_FIELDS = (
    "source_id",
    "position",
    "token_id",
    "token_text",
    "p_target",
    "entropy_full",
    "entropy_topk",
    "gate",
    "weight",
    "grad_norm",
    "step",
)


@dataclass(frozen=True)
class TokenRecord:
    """One scored token position; optional fields may be None."""

    source_id: str
    position: int
    token_id: int
    p_target: float
    entropy_topk: float
    gate: float
    token_text: str | None = None
    entropy_full: float | None = None
    weight: float | None = None
    grad_norm: float | None = None
    step: int | None = None

    def __post_init__(self):
        if not 0.0 <= self.p_target <= 1.0:
            raise RecordValidationError(f"p_target {self.p_target} outside [0, 1]")
        if self.entropy_topk < 0.0:
            raise RecordValidationError("entropy_topk must be >= 0")
        if self.entropy_full is not None and self.entropy_full < 0.0:
            raise RecordValidationError("entropy_full must be >= 0")
        if not 0.0 <= self.gate <= 1.0:
            raise RecordValidationError(f"gate {self.gate} outside [0, 1]")
        if self.weight is not None and not 0.0 <= self.weight <= 1.0:
            raise RecordValidationError(f"weight {self.weight} outside [0, 1]")


@dataclass(frozen=True)
class DynamicsConfig:
    high_entropy_min: float = 2.0
    low_entropy_max: float = 0.5

    def __post_init__(self):
        if not self.low_entropy_max < self.high_entropy_min:
            raise InvalidArgumentError("low_entropy_max must be < high_entropy_min")


@dataclass
class Histogram2D:
    x_axis: str
    y_axis: str
    x_edges: np.ndarray
    y_edges: np.ndarray
    counts: np.ndarray
    weights_sum: np.ndarray | None = None


def score_corpus(
    params: toylm.ToyModelParams,
    corpus: toylm.Corpus,
    k: int = 20,
    source_id: str = "corpus",
) -> list[TokenRecord]:
    """One record per corpus position, in corpus (sequence-major) order."""
    if len(corpus) == 0:
        return []
    logits, _ = toylm.forward_batch(params, corpus.contexts)
    probs = probstats.softmax_rows(logits)
    idx = np.arange(len(corpus))
    p_t = probs[idx, corpus.targets]
    ent_full = probstats.entropy_rows(probs)
    ent_topk = probstats.topk_entropy_rows(probs, k)
    gates = probstats.gate_rows(probs, k)
    return [
        TokenRecord(
            source_id=source_id,
            position=int(i),
            token_id=int(corpus.targets[i]),
            p_target=float(p_t[i]),
            entropy_full=float(ent_full[i]),
            entropy_topk=float(ent_topk[i]),
            gate=float(gates[i]),
        )
        for i in idx
    ]


# ---------------------------------------------------------------------------
# Export / ingest
# ---------------------------------------------------------------------------

_FLOAT_FIELDS = {"p_target", "entropy_full", "entropy_topk", "gate", "weight", "grad_norm"}
_INT_FIELDS = {"position", "token_id", "step"}


def _fmt(value) -> str:
    # 17 significant digits round-trips any float64 exactly
    if value is None:
        return ""
    if isinstance(value, float):
        return format(value, ".17g")
    return str(value)


def export_records(records, path, fmt: str = "jsonl") -> None:
    if fmt == "jsonl":
        with open(path, "w") as fh:
            for rec in records:
                doc = {k: v for k, v in asdict(rec).items() if v is not None}
                fh.write(json.dumps(doc, sort_keys=True) + "\n")
    elif fmt == "csv":
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(RECORD_FIELDS)
            for rec in records:
                d = asdict(rec)
                writer.writerow([_fmt(d[f]) for f in RECORD_FIELDS])
    else:
        raise InvalidArgumentError(f"unknown format {fmt!r}")


def export_rows(rows, fieldnames, path, fmt: str = "csv") -> None:
    """Write dict rows as CSV (17-significant-digit reals) or JSONL."""
    rows = list(rows)
    if fmt == "csv":
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(fieldnames)
            for row in rows:
                writer.writerow([_fmt(row.get(f)) for f in fieldnames])
    elif fmt == "jsonl":
        with open(path, "w") as fh:
            for row in rows:
                fh.write(json.dumps({f: row.get(f) for f in fieldnames}, sort_keys=True) + "\n")
    else:
        raise InvalidArgumentError(f"unknown format {fmt!r}")


def ingest_records(path) -> list[TokenRecord]:
    """Parse a JSONL record file; unknown fields are ignored, errors carry
    the offending line number."""
    records = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                doc = json.loads(line)
            except json.JSONDecodeError as exc:
                raise RecordParseError(f"invalid JSON: {exc.msg}", lineno) from exc
            if not isinstance(doc, dict):
                raise RecordParseError("record must be a JSON object", lineno)
            kwargs = {}
            for field in RECORD_FIELDS:
                if field not in doc or doc[field] is None:
                    continue
                value = doc[field]
                try:
                    if field in _FLOAT_FIELDS:
                        value = float(value)
                    elif field in _INT_FIELDS:
                        value = int(value)
                    else:
                        value = str(value)
                except (TypeError, ValueError) as exc:
                    raise RecordParseError(f"bad value for {field!r}: {value!r}", lineno) from exc
                kwargs[field] = value
            missing = {"source_id", "position", "token_id", "p_target", "entropy_topk", "gate"} - set(kwargs)
            if missing:
                raise RecordParseError(f"missing required fields {sorted(missing)}", lineno)
            try:
                records.append(TokenRecord(**kwargs))
            except RecordValidationError as exc:
                raise RecordParseError(str(exc), lineno) from exc
    return records


# ---------------------------------------------------------------------------
# Histograms and quadrants
# ---------------------------------------------------------------------------

_AXIS_GETTERS = {
    "p_target": lambda r: r.p_target,
    "entropy": lambda r: r.entropy_full,
    "gate": lambda r: r.gate,
    "grad_norm": lambda r: r.grad_norm,
}


def _axis_values(records, axis: str) -> np.ndarray:
    if axis not in _AXIS_GETTERS:
        raise InvalidArgumentError(f"unknown axis {axis!r}")
    getter = _AXIS_GETTERS[axis]
    values = []
    for i, rec in enumerate(records):
        v = getter(rec)
        if v is None:
            raise RecordValidationError(f"record {i} lacks the {axis!r} field")
        values.append(v)
    return np.asarray(values, dtype=np.float64)


def histogram2d(
    records,
    x_axis: str = "p_target",
    y_axis: str = "entropy",
    x_bins: int = 40,
    y_bins: int = 40,
    weight_axis: str | None = None,
    x_edges=None,
    y_edges=None,
) -> Histogram2D:
    """Linear binning between data min/max (or explicit ascending edges);
    top-edge values land in the last bin. ``weight_axis`` accumulates a
    per-cell sum for mean overlays."""
    records = list(records)
    if not records:
        raise InvalidArgumentError("need at least one record")
    if x_bins < 1 or y_bins < 1:
        raise InvalidArgumentError("bin counts must be >= 1")
    xs = _axis_values(records, x_axis)
    ys = _axis_values(records, y_axis)

    def edges(vals, nbins, explicit):
        if explicit is not None:
            e = np.asarray(explicit, dtype=np.float64)
            if e.ndim != 1 or e.size < 2 or np.any(np.diff(e) <= 0):
                raise InvalidArgumentError("edges must be strictly ascending")
            return e
        lo, hi = float(vals.min()), float(vals.max())
        if hi <= lo:
            hi = lo + 1.0
        return np.linspace(lo, hi, nbins + 1)

    xe = edges(xs, x_bins, x_edges)
    ye = edges(ys, y_bins, y_edges)
    x_bins, y_bins = xe.size - 1, ye.size - 1
    xi = np.clip(np.searchsorted(xe, xs, side="right") - 1, 0, x_bins - 1)
    yi = np.clip(np.searchsorted(ye, ys, side="right") - 1, 0, y_bins - 1)
    counts = np.zeros((x_bins, y_bins), dtype=np.int64)
    np.add.at(counts, (xi, yi), 1)
    weights = None
    if weight_axis is not None:
        wv = _axis_values(records, weight_axis)
        weights = np.zeros((x_bins, y_bins))
        np.add.at(weights, (xi, yi), wv)
    return Histogram2D(
        x_axis=x_axis, y_axis=y_axis, x_edges=xe, y_edges=ye, counts=counts, weights_sum=weights
    )


def histogram_rows(hist: Histogram2D) -> list[dict]:
    rows = []
    for i in range(hist.counts.shape[0]):
        for j in range(hist.counts.shape[1]):
            row = {
                "x_lo": float(hist.x_edges[i]),
                "x_hi": float(hist.x_edges[i + 1]),
                "y_lo": float(hist.y_edges[j]),
                "y_hi": float(hist.y_edges[j + 1]),
                "count": int(hist.counts[i, j]),
            }
            if hist.weights_sum is not None:
                row["weight_sum"] = float(hist.weights_sum[i, j])
            rows.append(row)
    return rows


def quadrant_stats(
    records,
    q: float = 0.15,
    thresholds: tuple[float, float] | None = None,
    entropy_axis: str = "gate",
):
    """Four-way partition by joint thresholds on the entropy axis and p_target.

    Thresholds default to the nearest-rank ``q`` percentiles of this record
    set; pass explicit ``(tau_h, tau_p)`` to compare different corpora on the
    same axes. The entropy axis is the gate by default (matching how masking
    thresholds are computed); "entropy" uses the full-vocabulary entropy.
    """
    records = list(records)
    if not records:
        raise InvalidArgumentError("need at least one record")
    hs = _axis_values(records, entropy_axis)
    ps = _axis_values(records, "p_target")
    if thresholds is None:
        tau_h = probstats.percentile_threshold(hs, q)
        tau_p = probstats.percentile_threshold(ps, q)
    else:
        tau_h, tau_p = float(thresholds[0]), float(thresholds[1])
    low_h = hs <= tau_h
    low_p = ps <= tau_p
    labels = np.full(len(records), "other", dtype=object)
    labels[low_h & low_p] = "confident-conflict"
    labels[low_h & ~low_p] = "confident-correct"
    labels[~low_h & low_p] = "exploratory"
    counts = {name: int((labels == name).sum()) for name in
              ("confident-conflict", "confident-correct", "exploratory", "other")}
    total = len(records)
    shares = {name: counts[name] / total for name in counts}
    return {
        "counts": counts,
        "shares": shares,
        "thresholds": (float(tau_h), float(tau_p)),
        "labels": labels,
    }


def quadrant_token_ranking(records, labels, quadrant: str, top_n: int) -> list[dict]:
    """Rank tokens inside one quadrant by frequency (ties by token id)."""
    if top_n < 0:
        raise InvalidArgumentError("top_n must be >= 0")
    groups: dict = {}
    for rec, label in zip(records, labels):
        if label != quadrant:
            continue
        key = rec.token_text if rec.token_text is not None else rec.token_id
        entry = groups.setdefault(key, {"token": key, "token_id": rec.token_id, "count": 0, "gate_sum": 0.0})
        entry["count"] += 1
        entry["gate_sum"] += rec.gate
    ranked = sorted(groups.values(), key=lambda e: (-e["count"], e["token_id"]))
    return [
        {"token": e["token"], "count": e["count"], "mean_gate": e["gate_sum"] / e["count"]}
        for e in ranked[:top_n]
    ]


def dynamics_track(records, cfg: DynamicsConfig = DynamicsConfig()) -> list[dict]:
    """Per-step mean cross-entropy of the high/low-entropy token subgroups.

    Grouping uses each record's ``entropy_full`` as captured, i.e. the
    entropy of the then-current model; CE is -ln p_target. Steps ascend.
    An empty subgroup reports size 0 and an absent mean.
    """
    by_step: dict[int, list[TokenRecord]] = {}
    for i, rec in enumerate(records):
        if rec.step is None or rec.entropy_full is None:
            raise RecordValidationError(f"record {i} lacks step or entropy_full")
        by_step.setdefault(rec.step, []).append(rec)
    rows = []
    for step in sorted(by_step):
        group = by_step[step]
        ce = np.array([-math.log(max(r.p_target, 1e-300)) for r in group])
        ent = np.array([r.entropy_full for r in group])
        hi = ent >= cfg.high_entropy_min
        lo = ent <= cfg.low_entropy_max
        rows.append(
            {
                "step": step,
                "high_entropy_ce": float(ce[hi].mean()) if hi.any() else None,
                "high_entropy_count": int(hi.sum()),
                "low_entropy_ce": float(ce[lo].mean()) if lo.any() else None,
                "low_entropy_count": int(lo.sum()),
            }
        )
    return rows


# ---------------------------------------------------------------------------
# Top-K fidelity / memory study
# ---------------------------------------------------------------------------


def fidelity_from_probs(
    probs: np.ndarray,
    k_grid,
    float_bytes: int = 8,
    index_bytes: int = 4,
) -> list[dict]:
    """Pearson r between exact and renormalized top-k entropy per k, plus the
    linear per-token memory cost k * (float_bytes + index_bytes)."""
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim != 2 or p.shape[0] < 2:
        raise InvalidArgumentError("need a (N, V) probability matrix with N >= 2")
    ks = [int(k) for k in k_grid]
    if any(k < 1 or k > p.shape[1] for k in ks):
        raise InvalidArgumentError("k grid entries must lie in [1, V]")
    if sorted(ks) != ks:
        raise InvalidArgumentError("k grid must be ascending")
    exact = probstats.entropy_rows(p)
    if float(exact.std()) == 0.0:
        raise DegenerateVarianceError("exact entropies are constant")
    rows = []
    for k in ks:
        approx = probstats.topk_entropy_rows(p, k)
        # k=1 yields identically-zero approximations; correlation is undefined
        # there, so the row carries an absent r rather than a fabricated one
        r = probstats.pearson(exact, approx) if float(approx.std()) > 0.0 else None
        rows.append(
            {
                "k": k,
                "pearson_r": r,
                "extra_bytes_per_token": k * (float_bytes + index_bytes),
            }
        )
    return rows


def synthetic_fidelity_corpus(
    n_tokens: int = 10000,
    vocab_size: int = 4096,
    seed: int = 20260810,
    base_scale: float = 14.0,
    temp_low: float = 0.3,
    temp_high: float = 2.0,
) -> np.ndarray:
    """Distributions spanning peaked and flat regimes: softmax of Gaussian
    logits at ``base_scale``, divided by a per-token temperature drawn
    log-uniformly from [temp_low, temp_high]."""
    rng = np.random.default_rng(seed)
    temps = np.exp(rng.uniform(np.log(temp_low), np.log(temp_high), size=n_tokens))
    logits = rng.standard_normal((n_tokens, vocab_size)) * (base_scale / temps[:, None])
    return probstats.softmax_rows(logits)


def topk_fidelity_study(
    params: toylm.ToyModelParams,
    corpus: toylm.Corpus,
    k_grid,
    float_bytes: int = 8,
    index_bytes: int = 4,
) -> list[dict]:
    """Fidelity study over the distributions a model assigns to a corpus."""
    logits, _ = toylm.forward_batch(params, corpus.contexts)
    return fidelity_from_probs(
        probstats.softmax_rows(logits), k_grid, float_bytes, index_bytes
    )


def default_k_grid(vocab_size: int) -> list[int]:
    grid = [k for k in (1, 2, 5, 10, 20, 50, 100) if k < vocab_size]
    return grid + [vocab_size]
