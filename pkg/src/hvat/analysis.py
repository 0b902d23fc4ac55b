"""Parameter accounting, FLOP estimates and alpha/beta tracing.

Enumerated counts are ground truth. The commonly quoted closed forms (2MD^2 for
multi-head attention, 2D^2 + D and 3D^2 for the two augmentations, all
under D = D_k = D_v) are kept alongside as ``paper_prediction`` and every
mismatch is listed, not reconciled.
"""

from __future__ import annotations

import csv
import io
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np

from .attention import block_forward, init_block_params
from .autodiff import Tensor, count_flops, no_grad
from .config import BlockVariant, ConfigError, ModelConfig
from .model import Seq2SeqModel, model_param_specs

CATEGORIES = (
    "embeddings",
    "qkv_projections",
    "output_projection",
    "horizontal_extra",
    "vertical_extra",
    "ffn",
    "layernorm",
    "vocab_projection",
)

CSV_HEADER = ("kind", "scope", "category", "value", "closed_form", "paper_prediction")


def categorize(name: str) -> str:
    leaf = name.rsplit(".", 1)[-1]
    if name.startswith("embed."):
        return "embeddings"
    if name.startswith("output."):
        return "vocab_projection"
    if ".hor." in name:
        return "horizontal_extra"
    if ".ver." in name:
        return "vertical_extra"
    if leaf in ("w_q", "w_k", "w_v"):
        return "qkv_projections"
    if leaf == "w_o":
        return "output_projection"
    if ".ffn." in name:
        return "ffn"
    if "_norm." in name:
        return "layernorm"
    raise ValueError(f"uncategorized parameter {name}")


def _attention_layer(name: str) -> str | None:
    for key in (".attn.", ".self_attn.", ".cross_attn."):
        if key in name:
            return name[: name.index(key) + len(key)]
    return None


@dataclass
class ParamReport:
    counts: dict[str, int]
    total: int
    attention_layers: int
    per_layer: dict[str, int]
    closed_form: dict[str, int]
    paper_prediction: dict[str, int]
    discrepancies: list[tuple[str, int, int]] = field(default_factory=list)

    def csv_rows(self) -> list[tuple]:
        rows = [("params", "model", c, self.counts[c], self.closed_form.get(c, ""), "") for c in CATEGORIES]
        rows.append(("params", "model", "total", self.total, self.closed_form.get("total", ""), ""))
        for c, v in self.per_layer.items():
            rows.append(("params", "per_attention_layer", c, v, self.closed_form.get("layer." + c, ""), self.paper_prediction.get(c, "")))
        return rows

    def text(self) -> str:
        lines = ["Parameter counts (enumerated)"]
        for c in CATEGORIES:
            lines.append(f"  {c:<20} {self.counts[c]:>14,}")
        lines.append(f"  {'total':<20} {self.total:>14,}")
        lines.append(f"Per attention layer ({self.attention_layers} layers)")
        lines.append(f"  {'category':<20} {'enumerated':>14} {'closed form':>14} {'quoted':>14}")
        for c, v in self.per_layer.items():
            cf = self.closed_form["layer." + c]
            lines.append(f"  {c:<20} {v:>14,} {cf:>14,} {self.paper_prediction[c]:>14,}")
        if self.discrepancies:
            lines.append("Discrepancies vs quoted closed forms (category, enumerated, quoted)")
            for c, e, p in self.discrepancies:
                lines.append(f"  {c}: {e:,} vs {p:,} (diff {e - p:+,d})")
        return "\n".join(lines)


def layer_closed_forms(cfg: ModelConfig) -> dict[str, int]:
    D, M, Dk, Dv, Da = cfg.d_model, cfg.n_heads, cfg.d_k, cfg.d_v, cfg.d_a
    out = {"multi_head": M * D * (2 * Dk + Dv) + M * Dv * D}
    if cfg.variant.horizontal:
        out["horizontal_extra"] = Dv * Dv + D * Dv + Dv + 1
    if cfg.variant.vertical:
        out["vertical_extra"] = 3 * D * Da + D
    return out


def paper_closed_forms(cfg: ModelConfig) -> dict[str, int]:
    """Commonly quoted per-layer counts, which assume D = D_k = D_v."""
    D, M = cfg.d_model, cfg.n_heads
    out = {"multi_head": 2 * M * D * D}
    if cfg.variant.horizontal:
        out["horizontal_extra"] = 2 * D * D + D
    if cfg.variant.vertical:
        out["vertical_extra"] = 3 * D * D
    return out


def model_closed_forms(cfg: ModelConfig) -> dict[str, int]:
    D, V, F, M, Dk, Dv = cfg.d_model, cfg.vocab_size, cfg.ffn_width, cfg.n_heads, cfg.d_k, cfg.d_v
    ne, nd = cfg.num_encoder_blocks, cfg.num_decoder_blocks
    layers = ne + 2 * nd
    layer = layer_closed_forms(cfg)
    out = {
        "embeddings": V * D,
        "qkv_projections": layers * M * D * (2 * Dk + Dv),
        "output_projection": layers * M * Dv * D,
        "horizontal_extra": layers * layer.get("horizontal_extra", 0),
        "vertical_extra": layers * layer.get("vertical_extra", 0),
        "ffn": (ne + nd) * (2 * D * F + F + D),
        "layernorm": (2 * ne + 3 * nd) * 2 * D,
        "vocab_projection": D * V + V,
    }
    out["total"] = sum(out.values())
    out.update({"layer." + k: v for k, v in layer.items()})
    return out


def count_params(source: Seq2SeqModel | ModelConfig) -> ParamReport:
    """Enumerate parameter arrays (of a model, or of a config without allocating)."""
    if isinstance(source, Seq2SeqModel):
        cfg = source.config
        shapes = [(n, t.shape) for n, t in source.named_parameters()]
    else:
        cfg = source
        shapes = [(s.name, s.shape) for s in model_param_specs(cfg)]
    counts = dict.fromkeys(CATEGORIES, 0)
    layers: dict[str, dict[str, int]] = defaultdict(lambda: defaultdict(int))
    total = 0
    for name, shape in shapes:
        n = int(np.prod(shape, dtype=np.int64))
        cat = categorize(name)
        counts[cat] += n
        total += n
        layer = _attention_layer(name)
        if layer is not None:
            key = "multi_head" if cat in ("qkv_projections", "output_projection") else cat
            layers[layer][key] += n
    per_layer: dict[str, int] = {}
    for lay in layers.values():
        for k, v in lay.items():
            if per_layer.setdefault(k, v) != v:
                raise AssertionError(f"attention layers disagree on {k}")
    paper = paper_closed_forms(cfg)
    discrepancies = [(k, per_layer[k], p) for k, p in paper.items() if k in per_layer and per_layer[k] != p]
    return ParamReport(counts, total, len(layers), per_layer, model_closed_forms(cfg), paper, discrepancies)


# FLOPs


@dataclass
class FlopReport:
    """Flops of one self-attention block of ``n`` tokens (2 flops per multiply-accumulate)."""

    n: int
    sdpa_projections: int
    sdpa_scores: int
    sdpa_weighted_sum: int
    sdpa_softmax: int
    sdpa_total: int
    horizontal_extra: int
    vertical_extra: int
    ffn: int
    residual_norm: int

    @property
    def total(self) -> int:
        return self.sdpa_total + self.horizontal_extra + self.vertical_extra + self.ffn + self.residual_norm

    def sections(self) -> dict[str, int]:
        return {
            "sdpa": self.sdpa_total,
            "horizontal": self.horizontal_extra,
            "vertical": self.vertical_extra,
            "ffn": self.ffn,
            "residual_norm": self.residual_norm,
        }

    def csv_rows(self) -> list[tuple]:
        names = (
            "sdpa_projections",
            "sdpa_scores",
            "sdpa_weighted_sum",
            "sdpa_softmax",
            "sdpa_total",
            "horizontal_extra",
            "vertical_extra",
            "ffn",
            "residual_norm",
        )
        rows = [("flops", f"block_n{self.n}", k, getattr(self, k), getattr(self, k), "") for k in names]
        rows.append(("flops", f"block_n{self.n}", "total", self.total, self.total, ""))
        return rows

    def text(self) -> str:
        lines = [f"FLOPs for one self-attention block, N={self.n}"]
        for k, v in self.sections().items():
            lines.append(f"  {k:<20} {v:>14,}")
        lines.append(f"  {'total':<20} {self.total:>14,}")
        return "\n".join(lines)


def estimate_flops(cfg: ModelConfig, n: int) -> FlopReport:
    """Closed-form flop counts under the instrument's conventions.

    sdpa: Q/K/V and output projections, scores (2 N^2 D_k per head), the
    1/sqrt(D_k) scaling, softmax (3 per score), weighted sum (2 N^2 D_v per
    head). The two augmentations cost O(N) each; nothing in them is N^2.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    D, M, Dk, Dv, Da, F = cfg.d_model, cfg.n_heads, cfg.d_k, cfg.d_v, cfg.d_a, cfg.ffn_width
    N = n
    proj = 2 * N * D * (2 * Dk + Dv) * M + 2 * N * M * Dv * D
    scores = 2 * N * N * Dk * M + N * N * M
    weighted = 2 * N * N * Dv * M
    soft = 3 * N * N * M
    hor = ver = 0
    if cfg.variant.horizontal:
        hor = (
            2 * M * N * Dv * Dv  # H_m W^A1
            + 2 * N * D * Dv  # X W^A2, shared by heads
            + 2 * M * N * Dv  # add + ReLU
            + 2 * M * N * Dv  # A_m W^B
            + M * N  # + b^B
            + 2 * M * N  # token pooling
            + 3 * M  # softmax over heads
            + M * N * Dv  # alpha_m H_m
        )
    if cfg.variant.vertical:
        ver = (
            4 * N * D * Da  # X W^U1, Y W^U2
            + 2 * N * Da  # add + ReLU
            + 2 * N * Da  # token pooling
            + 2 * Da * D  # u W^U
            + 2 * D  # + b^U, sigmoid
            + N * D  # beta * Y
        )
    ffn = 4 * N * D * F + 2 * N * F + N * D
    resid = 2 * (N * D + 7 * N * D)
    return FlopReport(N, proj, scores, weighted, soft, proj + scores + weighted + soft, hor, ver, ffn, resid)


def instrumented_flops(cfg: ModelConfig, n: int, seed: int = 0) -> dict[str, int]:
    """Tally flops by running one block forward pass with the op counter active."""
    rng = np.random.default_rng(seed)
    params = init_block_params(cfg.attention, cfg.variant, cfg.ffn_width, rng)
    x = Tensor(rng.normal(size=(n, cfg.d_model)))
    with no_grad(), count_flops() as counter:
        block_forward(x, cfg.variant, params)
    out = dict.fromkeys(("sdpa", "horizontal", "vertical", "ffn", "residual_norm"), 0)
    out.update(counter.by_section)
    return out


def report_csv(params: ParamReport | None, flops: list[FlopReport] = ()) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    if params is not None:
        w.writerows(params.csv_rows())
    for f in flops:
        w.writerows(f.csv_rows())
    return buf.getvalue()


# Tracing


@dataclass
class TraceRecord:
    block: str
    alpha: np.ndarray | None  # [N_q, M]
    beta: np.ndarray | None  # [N_q, D]
    attn: np.ndarray  # [M, N_q, N_k]


def trace_attention(model: Seq2SeqModel, src, tgt, what: tuple[str, ...] | None = None) -> list[TraceRecord]:
    """Forward one (src, decoder-input) pair and capture alpha, beta and attention maps per layer."""
    variant = model.config.variant
    if what is None:
        what = tuple(q for q, on in (("alpha", variant.horizontal), ("beta", variant.vertical)) if on)
    for q in what:
        if q == "alpha" and not variant.horizontal:
            raise ConfigError(f"cannot trace alpha on a {variant.value} model")
        if q == "beta" and not variant.vertical:
            raise ConfigError(f"cannot trace beta on a {variant.value} model")
        if q not in ("alpha", "beta"):
            raise ConfigError(f"unknown trace quantity {q!r}")
    raw: list[dict] = []
    with no_grad():
        model.eval()
        model.forward_batch(np.asarray(src, dtype=np.int64)[None], np.asarray(tgt, dtype=np.int64)[None], trace=raw)
    return [
        TraceRecord(
            r["block"],
            r["alpha"][0] if "alpha" in what else None,
            r["beta"][0] if "beta" in what else None,
            r["attn"][0],
        )
        for r in raw
    ]


def trace_csv(records: list[TraceRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("block", "quantity", "row", "col", "value"))
    for r in records:
        for q in ("alpha", "beta"):
            arr = getattr(r, q)
            if arr is None:
                continue
            for (i, j), v in np.ndenumerate(arr):
                w.writerow((r.block, q, i, j, repr(float(v))))
    return buf.getvalue()


__all__ = [
    "BlockVariant",
    "FlopReport",
    "ParamReport",
    "TraceRecord",
    "count_params",
    "estimate_flops",
    "instrumented_flops",
    "layer_closed_forms",
    "paper_closed_forms",
    "report_csv",
    "trace_attention",
    "trace_csv",
]
