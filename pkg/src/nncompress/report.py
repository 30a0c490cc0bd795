"""Parameter memory accounting across pipeline stages and compression rate."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateError, InvalidInputError

BYTES_PER_PARAM = 4
BITS_PER_PARAM = 32
STAGES = ("initial", "pruned", "quantized")


def compression_rate(n, b, k):
    """Storage ratio of ``n`` ``b``-bit weights against ``log2(k)``-bit indices plus ``k`` centroids."""
    if n < 1 or b < 1:
        raise InvalidInputError("n and b must be >= 1")
    if k < 2:
        raise DegenerateError(f"compression rate undefined for k={k} (needs k >= 2)")
    return (n * b) / (n * math.log2(k) + k * b)


def index_bytes(count, k):
    """Bytes for ``count`` packed ``log2(k)``-bit indices, rounded up to a whole byte."""
    if k & (k - 1) == 0:
        return (count * (k.bit_length() - 1) + 7) // 8
    return math.ceil(count * math.log2(k) / 8)


def quantized_bytes(surviving, k):
    """Index bits plus full-precision centroids; fewer than two clusters costs the pruned size."""
    if k is None or k < 2:
        return BYTES_PER_PARAM * surviving
    return index_bytes(surviving, k) + BYTES_PER_PARAM * k


def quantization_pays(n, k):
    """True when quantizing ``n`` weights into ``k`` clusters does not grow the layer."""
    return k is None or k < 2 or n * math.log2(k) / 8 + BYTES_PER_PARAM * k <= BYTES_PER_PARAM * n


def _cluster_counts(quant_records):
    if not quant_records:
        return {}
    return {cid: (rec if isinstance(rec, int) else rec.c) for cid, rec in quant_records.items()}


def bytes_at_stage(model, stage, quant_records=None):
    """Per-class byte counts at ``stage`` plus a ``"__total__"`` entry."""
    if stage not in STAGES:
        raise InvalidInputError(f"unknown stage {stage!r}; expected one of {STAGES}")
    if stage == "quantized" and quant_records is None:
        raise InvalidInputError("quantized stage needs quantization records")
    if stage != "quantized" and quant_records is not None:
        raise InvalidInputError(f"quantization records do not apply to the {stage} stage")
    ks = _cluster_counts(quant_records)
    out = {}
    for cid, p in model.params.items():
        surviving = int(np.count_nonzero(model.masks[cid]))
        if stage == "initial":
            out[cid] = BYTES_PER_PARAM * int(p.size)
        elif stage == "pruned":
            out[cid] = BYTES_PER_PARAM * surviving
        else:
            out[cid] = quantized_bytes(surviving, ks.get(cid))
    out["__total__"] = sum(out.values())
    return out


def infer_cluster_counts(model):
    """Cluster count per class recovered from a quantized model file.

    A class counts as quantized when its surviving values take fewer distinct
    values than there are surviving weights.
    """
    ks = {}
    for cid in model.prunable:
        vals = model.params[cid][model.masks[cid]]
        d = int(np.unique(vals).size)
        if 2 <= d < vals.size:
            ks[cid] = d
    return ks


@dataclass
class CompressionReport:
    arch: str
    layers: list
    totals: dict
    accuracy_trace: list = field(default_factory=list)
    config: dict = field(default_factory=dict)

    def to_dict(self):
        return {"arch": self.arch, "config": self.config, "layers": self.layers,
                "totals": self.totals, "accuracy_trace": self.accuracy_trace}

    @classmethod
    def from_dict(cls, d):
        return cls(d["arch"], d["layers"], d["totals"], d.get("accuracy_trace", []), d.get("config", {}))


def _rate(initial, quantized):
    return initial / quantized if quantized else None


def build_report(baseline, pruned, quantized, quant_records=None, accuracy_trace=(), config=None):
    """Assemble per-class rows and totals for the initial / pruned / quantized stages.

    ``quant_records`` maps class id to a QuantizedLayer or a bare cluster count;
    classes without a record are charged at their pruned size.
    """
    shapes = [{k: v.shape for k, v in m.params.items()} for m in (baseline, pruned, quantized)]
    if not (shapes[0] == shapes[1] == shapes[2]):
        raise InvalidInputError("models passed to build_report do not share an architecture")
    ks = _cluster_counts(quant_records)
    b_init = bytes_at_stage(baseline, "initial")
    b_pruned = bytes_at_stage(pruned, "pruned")
    b_quant = bytes_at_stage(quantized, "quantized", ks)
    rows = []
    for cid, p in baseline.params.items():
        rows.append({
            "class": cid,
            "n": int(p.size),
            "surviving": int(np.count_nonzero(quantized.masks[cid])),
            "k": ks.get(cid),
            "bytes_initial": b_init[cid],
            "bytes_pruned": b_pruned[cid],
            "bytes_quantized": b_quant[cid],
            "rate": _rate(b_init[cid], b_quant[cid]),
        })
    totals = {key: sum(r[key] for r in rows)
              for key in ("n", "surviving", "bytes_initial", "bytes_pruned", "bytes_quantized")}
    totals["k"] = sum(r["k"] for r in rows if r["k"] is not None)
    totals["rate"] = _rate(totals["bytes_initial"], totals["bytes_quantized"])
    trace = [{"stage": t["stage"], "value": t["value"]} if isinstance(t, dict)
             else {"stage": t[0], "value": t[1]} for t in accuracy_trace]
    return CompressionReport(baseline.arch_name, rows, totals, trace, dict(config or {}))


COLUMNS = ("class", "n", "surviving", "k", "bytes_initial", "bytes_pruned", "bytes_quantized", "rate")


def _fmt(v):
    if v is None:
        return "-"
    if isinstance(v, float):
        return f"{v:.4f}"
    return str(v)


def _cell(v):
    if v is None:
        return ""
    return repr(v) if isinstance(v, float) else v


def to_csv(report):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(COLUMNS)
    for row in report.layers:
        w.writerow([_cell(row[c]) for c in COLUMNS])
    tot = dict(report.totals, **{"class": "TOTAL"})
    w.writerow([_cell(tot[c]) for c in COLUMNS])
    return buf.getvalue()


def to_table(report):
    rows = [list(COLUMNS)]
    rows += [[_fmt(r[c]) for c in COLUMNS] for r in report.layers]
    rows.append([_fmt(dict(report.totals, **{"class": "TOTAL"})[c]) for c in COLUMNS])
    widths = [max(len(r[i]) for r in rows) for i in range(len(COLUMNS))]
    lines = [f"architecture: {report.arch}"]
    for i, r in enumerate(rows):
        lines.append("  ".join(cell.ljust(widths[j]) if j == 0 else cell.rjust(widths[j])
                               for j, cell in enumerate(r)))
        if i == 0 or i == len(rows) - 2:
            lines.append("  ".join("-" * w for w in widths))
    if report.accuracy_trace:
        lines.append("")
        lines.append("accuracy:")
        for t in report.accuracy_trace:
            lines.append(f"  {t['stage']:<12} {_fmt(t['value'])}")
    return "\n".join(lines) + "\n"
