"""Training cost metrics: representational, computational and communication cost.

All arithmetic is on Python integers. The floating-point baseline uses 32 bits
for every tensor and ignores exponent handling.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

from .errors import DomainError, SchemaError

FL_BITS = 32


@dataclass(frozen=True)
class LayerShape:
    n_weights: int
    n_activations: int
    n_out_activations: int
    dot_depth: int


@dataclass
class NetworkDescriptor:
    layers: list[LayerShape]
    num_classes: int
    dense_sizes: list[int] | None = None  # set when the network is trainable here
    batch_size: int | None = None

    def __post_init__(self):
        for idx, ls in enumerate(self.layers, start=1):
            if ls.n_weights < 1:
                raise DomainError(f"layer {idx}: n_weights must be >= 1")
            weight_only = ls.n_activations == 0
            if not weight_only and (ls.n_out_activations < 1 or ls.dot_depth < 1):
                raise DomainError(f"layer {idx}: activation counts and dot depth must be >= 1")
            if min(ls.n_activations, ls.n_out_activations, ls.dot_depth) < 0:
                raise DomainError(f"layer {idx}: negative count")

    @classmethod
    def from_dense(cls, sizes: Sequence[int], batch_size: int = 1) -> NetworkDescriptor:
        """Descriptor of a dense stack ``sizes[0] -> ... -> sizes[-1]`` for one mini-batch."""
        layers = [
            LayerShape(n_in * n_out, n_in * batch_size, n_out * batch_size, n_in)
            for n_in, n_out in zip(sizes[:-1], sizes[1:])
        ]
        return cls(layers, sizes[-1], list(sizes), batch_size)

    def __add__(self, other: NetworkDescriptor) -> NetworkDescriptor:
        return NetworkDescriptor(self.layers + other.layers, other.num_classes)

    def to_dict(self) -> dict:
        out = {"num_classes": self.num_classes, "layers": [asdict(ls) for ls in self.layers]}
        if self.dense_sizes is not None:
            out["dense_sizes"] = self.dense_sizes
            out["batch_size"] = self.batch_size
        return out


def descriptor_from_dict(doc: dict) -> NetworkDescriptor:
    if not isinstance(doc, dict):
        raise SchemaError("descriptor must be a JSON object")
    if "layers" not in doc and "dense_sizes" in doc:
        return NetworkDescriptor.from_dense(doc["dense_sizes"], int(doc.get("batch_size", 1)))
    try:
        layers = []
        for idx, row in enumerate(doc["layers"], start=1):
            try:
                layers.append(
                    LayerShape(
                        int(row["n_weights"]),
                        int(row.get("n_activations", 0)),
                        int(row.get("n_out_activations", 0)),
                        int(row.get("dot_depth", 0)),
                    )
                )
            except KeyError as exc:
                raise SchemaError(f"missing field {exc.args[0]!r}", f"layers[{idx}]") from None
        return NetworkDescriptor(
            layers, int(doc["num_classes"]), doc.get("dense_sizes"), doc.get("batch_size")
        )
    except KeyError as exc:
        raise SchemaError(f"missing field {exc.args[0]!r}") from None
    except DomainError as exc:
        raise SchemaError(str(exc)) from None


def load_descriptor(path) -> NetworkDescriptor:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise SchemaError(f"invalid JSON: {exc.msg}", f"{path}:{exc.lineno}") from None
    return descriptor_from_dict(doc)


@dataclass(frozen=True)
class CostReport:
    c_w: int
    c_a: int
    c_m: int
    c_c: int


def _rows(desc: NetworkDescriptor, config) -> list[tuple]:
    """Precision rows ``(b_w, b_a, b_gw, b_ga, b_acc)``; ``config=None`` means 32-bit floating point."""
    if config is None:
        return [
            (FL_BITS, None, FL_BITS, None, FL_BITS)
            if ls.n_activations == 0
            else (FL_BITS,) * 5
            for ls in desc.layers
        ]
    rows = config.rows() if hasattr(config, "rows") else [tuple(r) for r in config]
    if len(rows) != len(desc.layers):
        raise DomainError(f"descriptor has {len(desc.layers)} layers, config has {len(rows)}")
    return rows


def representational_costs(desc: NetworkDescriptor, config=None) -> tuple[int, int]:
    c_w = 0
    c_a = 0
    for ls, (b_w, b_a, b_gw, b_ga, b_acc) in zip(desc.layers, _rows(desc, config)):
        c_w += ls.n_weights * (b_w + b_gw + b_acc)
        if ls.n_activations:
            c_a += ls.n_activations * (b_a + b_ga)
    return c_w, c_a


def computational_cost(desc: NetworkDescriptor, config=None) -> int:
    """Full-adder count of all multiplications in one training iteration.

    Weight-only rows (shortcut convolutions) have no paired activation
    precision and contribute nothing.
    """
    c_m = 0
    for ls, (b_w, b_a, _, b_ga, _) in zip(desc.layers, _rows(desc, config)):
        if ls.n_activations == 0:
            continue
        c_m += ls.n_out_activations * ls.dot_depth * (b_w * b_a + b_w * b_ga + b_a * b_ga)
    return c_m


def communication_cost(desc: NetworkDescriptor, config=None) -> int:
    return sum(ls.n_weights * row[2] for ls, row in zip(desc.layers, _rows(desc, config)))


def cost_report(desc: NetworkDescriptor, config=None) -> CostReport:
    c_w, c_a = representational_costs(desc, config)
    return CostReport(c_w, c_a, computational_cost(desc, config), communication_cost(desc, config))


def format_cost_table(fx: CostReport, fl: CostReport | None = None) -> str:
    names = [("C_W", "c_w", "bits"), ("C_A", "c_a", "bits"), ("C_M", "c_m", "FAs"), ("C_C", "c_c", "bits")]
    lines = [f"{'metric':<6}{'FX':>18}" + (f"{'FL':>18}{'FX/FL':>10}" if fl else "") + "  unit"]
    for label, attr, unit in names:
        v = getattr(fx, attr)
        line = f"{label:<6}{v:>18,}"
        if fl is not None:
            ref = getattr(fl, attr)
            line += f"{ref:>18,}{(v / ref if ref else float('nan')):>10.3f}"
        lines.append(line + f"  {unit}")
    return "\n".join(lines) + "\n"
