"""Analytical multiply-accumulate and parameter accounting.

A k x k convolution producing a ``C_out x H x W`` map from ``C_in``
channels costs ``C_in * C_out * k^2 * H * W`` MACs. Transposed
convolutions are priced the same way over their *output* size. Shift,
concat, pooling, activations and identities cost nothing.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Sequence

from .models import ModelGraph

ZERO_COST_KINDS = frozenset({"input", "shift", "concat", "split", "pool", "identity", "relu", "tanh"})
CONV_KINDS = frozenset({"conv", "upconv"})


def conv_cost(cin: int, cout: int, k: int, width: int, height: int) -> int:
    for name, v in (("cin", cin), ("cout", cout), ("k", k), ("width", width), ("height", height)):
        if int(v) != v or v < 1:
            raise ValueError(f"conv_cost: {name} must be a positive integer, got {v}")
    return int(cin) * int(cout) * int(k) ** 2 * int(width) * int(height)


@dataclass(frozen=True)
class LayerCost:
    name: str
    kind: str
    cin: int = 0
    cout: int = 0
    k: int = 0
    width: int = 0
    height: int = 0
    macs: int = 0
    params: int = 0
    role: str = ""
    ref: str = ""


@dataclass
class ComplexityReport:
    label: str
    layers: list[LayerCost] = field(default_factory=list)

    @property
    def total_macs(self) -> int:
        return sum(l.macs for l in self.layers)

    @property
    def total_params(self) -> int:
        return sum(l.params for l in self.layers)

    @property
    def interior_macs(self) -> int:
        return sum(l.macs for l in self.layers if l.role == "interior")

    @property
    def boundary_macs(self) -> int:
        return sum(l.macs for l in self.layers if l.role == "boundary")

    def conv_layers(self) -> list[LayerCost]:
        return [l for l in self.layers if l.kind in CONV_KINDS]


def count_model(model: ModelGraph) -> ComplexityReport:
    report = ComplexityReport(model.label)
    for node in model.nodes:
        if node.kind in CONV_KINDS:
            a = dict(node.attrs)
            cin, cout, k = a["cin"], a["cout"], a["k"]
            report.layers.append(LayerCost(
                node.name, node.kind, cin, cout, k, a["w"], a["h"],
                macs=conv_cost(cin, cout, k, a["w"], a["h"]),
                params=cout * (cin * k * k + 1),
                role=a["role"], ref=a["ref"],
            ))
        elif node.kind in ZERO_COST_KINDS:
            report.layers.append(LayerCost(node.name, node.kind))
        else:
            raise ValueError(f"count_model: no cost rule for layer kind {node.kind!r} ({node.name})")
    return report


@dataclass(frozen=True)
class Ratio:
    macs: Fraction
    params: Fraction
    interior_macs: Fraction | None = None

    @staticmethod
    def pct(x: Fraction | None) -> str:
        return "n/a" if x is None else f"{float(x) * 100:.1f}%"


def compare(candidate: ComplexityReport, reference: ComplexityReport) -> Ratio:
    """Candidate totals over reference totals, as exact fractions."""
    if reference.total_macs <= 0 or reference.total_params <= 0:
        raise ValueError("compare: reference report has zero MACs or parameters")
    interior = None
    if reference.interior_macs > 0:
        interior = Fraction(candidate.interior_macs, reference.interior_macs)
    return Ratio(Fraction(candidate.total_macs, reference.total_macs),
                 Fraction(candidate.total_params, reference.total_params), interior)


@dataclass(frozen=True)
class LawCheck:
    ref: str
    unsplit_macs: int
    path_macs: tuple[int, ...]

    @property
    def holds(self) -> bool:
        return all(m * len(self.path_macs) ** 2 == self.unsplit_macs for m in self.path_macs)


def split_law(split: ComplexityReport, unsplit: ComplexityReport) -> list[LawCheck]:
    """Pair every interior split-path conv with the unsplit layer it replaces."""
    by_name = {l.name: l for l in unsplit.conv_layers()}
    groups: dict[str, list[int]] = {}
    for l in split.conv_layers():
        if l.role == "interior" and l.name != l.ref:
            groups.setdefault(l.ref, []).append(l.macs)
    out = []
    for ref, macs in groups.items():
        if ref not in by_name:
            raise ValueError(f"split layer group {ref!r} has no unsplit counterpart")
        out.append(LawCheck(ref, by_name[ref].macs, tuple(macs)))
    return out


def render_table(report: ComplexityReport, flops: bool = False) -> str:
    unit = "FLOPs" if flops else "MACs"
    mult = 2 if flops else 1
    rows = [("layer", "kind", "role", "Cin", "Cout", "K", "HxW", unit, "params")]
    for l in report.conv_layers():
        rows.append((l.name, l.kind, l.role, str(l.cin), str(l.cout), str(l.k), f"{l.height}x{l.width}",
                     f"{l.macs * mult:,}", f"{l.params:,}"))
    rows.append(("TOTAL", "", "", "", "", "", "", f"{report.total_macs * mult:,}", f"{report.total_params:,}"))
    widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
    lines = [f"# {report.label}"]
    for r in rows:
        lines.append("  ".join(c.ljust(w) if i < 3 else c.rjust(w) for i, (c, w) in enumerate(zip(r, widths))))
    return "\n".join(lines) + "\n"


def report_keyvalues(report: ComplexityReport, reference: ComplexityReport | None = None) -> dict[str, str]:
    """Flat key/value view; see README for the schema."""
    kv = {
        "label": report.label,
        "total_macs": str(report.total_macs),
        "total_params": str(report.total_params),
        "interior_macs": str(report.interior_macs),
        "boundary_macs": str(report.boundary_macs),
        "conv_layers": str(len(report.conv_layers())),
    }
    if reference is not None:
        r = compare(report, reference)
        kv["reference"] = reference.label
        kv["macs_ratio"] = f"{r.macs.numerator}/{r.macs.denominator}"
        kv["params_ratio"] = f"{r.params.numerator}/{r.params.denominator}"
        kv["macs_pct"] = Ratio.pct(r.macs)
        kv["params_pct"] = Ratio.pct(r.params)
        if r.interior_macs is not None:
            kv["interior_macs_ratio"] = f"{r.interior_macs.numerator}/{r.interior_macs.denominator}"
            kv["interior_macs_pct"] = Ratio.pct(r.interior_macs)
    for l in report.conv_layers():
        kv[f"layer.{l.name}.macs"] = str(l.macs)
        kv[f"layer.{l.name}.params"] = str(l.params)
    return kv


def write_keyvalues(kv: dict[str, str], path: str | os.PathLike) -> None:
    Path(path).write_text("".join(f"{k}={v}\n" for k, v in kv.items()))


def read_keyvalues(path: str | os.PathLike) -> dict[str, str]:
    out = {}
    for line in Path(path).read_text().splitlines():
        if line and not line.startswith("#"):
            k, _, v = line.partition("=")
            out[k] = v
    return out


def ratio_table(reports: Sequence[ComplexityReport], reference: ComplexityReport, flops: bool = False) -> str:
    mult = 2 if flops else 1
    unit = "GFLOPs" if flops else "GMACs"
    rows = [("model", unit, "MACs %", "MParams", "params %", "interior %")]
    for rep in reports:
        r = compare(rep, reference)
        rows.append((rep.label, f"{rep.total_macs * mult / 1e9:.4f}", Ratio.pct(r.macs),
                     f"{rep.total_params / 1e6:.4f}", Ratio.pct(r.params), Ratio.pct(r.interior_macs)))
    widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
    return "\n".join("  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(r, widths)))
                     for r in rows) + "\n"
