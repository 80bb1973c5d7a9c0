"""Cell-by-cell regression of the assigner against the bundled reference tables.

Each bundle (one JSON file per network) holds the printed statistics, the
printed per-layer precisions and a whitelist of cells known to disagree.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

from .assigner import TENSOR_TYPES, build_config
from .errors import FxError, SchemaError
from .stats import stats_from_dict

NETWORKS = ("cifar10_convnet", "svhn_convnet", "cifar10_resnet", "cifar100_resnet")
_COLUMNS = {"w": "b_w", "a": "b_a", "gw": "b_gw", "ga": "b_ga", "acc": "b_acc"}


def bundled_dir() -> Path:
    return Path(str(resources.files("fxprec") / "golden"))


@dataclass
class Cell:
    network: str
    layer: int
    tensor: str
    printed: int | None
    computed: int | None

    def __str__(self):
        return f"{self.network} layer {self.layer} {self.tensor}: printed {self.printed}, computed {self.computed}"


@dataclass
class NetworkVerdict:
    network: str
    status: str  # "PASS", "FAIL", "ABSENT" or "ERROR"
    cells: int = 0
    mismatches: list[Cell] = field(default_factory=list)
    whitelisted: list[Cell] = field(default_factory=list)
    snaps: list[str] = field(default_factory=list)
    error: str = ""


@dataclass
class PaperVerdict:
    networks: list[NetworkVerdict]

    @property
    def passed(self) -> bool:
        present = [v for v in self.networks if v.status != "ABSENT"]
        return bool(present) and all(v.status == "PASS" for v in present)

    def format(self) -> str:
        lines = [f"{'network':<18}{'status':>8}{'cells':>7}{'mismatch':>10}{'whitelisted':>13}"]
        for v in self.networks:
            lines.append(f"{v.network:<18}{v.status:>8}{v.cells:>7}{len(v.mismatches):>10}{len(v.whitelisted):>13}")
        for v in self.networks:
            if v.error:
                lines.append(f"error  {v.network}: {v.error}")
            for c in v.mismatches:
                lines.append(f"MISMATCH  {c}")
            for c in v.whitelisted:
                lines.append(f"whitelisted  {c}")
        lines.append("overall: " + ("PASS" if self.passed else "FAIL"))
        return "\n".join(lines) + "\n"


def load_bundle(path) -> dict:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise SchemaError(f"invalid JSON: {exc.msg}", f"{path}:{exc.lineno}") from None
    for key in ("stats", "expected"):
        if key not in doc:
            raise SchemaError(f"missing field {key!r}", str(path))
    return doc


def verify_bundle(doc: dict, name: str | None = None) -> NetworkVerdict:
    """Rebuild the configuration from a bundle's statistics and diff it against the printed table."""
    name = name or doc.get("network", "?")
    snaps: list[str] = []
    stats = stats_from_dict(doc["stats"], snaps)
    if stats.b_min is None or stats.gamma_min is None:
        raise SchemaError("golden statistics need 'b_min' and 'gamma_min'", name)
    config = build_config(stats, stats.b_min, stats.gamma_min)
    expected = doc["expected"]
    if len(expected) != len(config.layers):
        raise SchemaError(f"{len(expected)} expected rows for {len(config.layers)} layers", name)
    white = {(w["layer"], w["tensor"]): w for w in doc.get("whitelist", [])}
    verdict = NetworkVerdict(name, "PASS", snaps=snaps)
    for row, computed in zip(expected, config.rows()):
        layer = int(row["layer"])
        for kind, got in zip(TENSOR_TYPES, computed):
            printed = row.get(_COLUMNS[kind])
            if printed is None and got is None:
                continue
            verdict.cells += 1
            if printed == got:
                continue
            cell = Cell(name, layer, kind, printed, got)
            w = white.get((layer, kind))
            if w is not None and w.get("printed") == printed and w.get("computed") == got:
                verdict.whitelisted.append(cell)
            else:
                verdict.mismatches.append(cell)
    if verdict.mismatches:
        verdict.status = "FAIL"
    return verdict


def verify_paper(directory=None, networks=NETWORKS) -> PaperVerdict:
    """Verify every bundle in ``directory``; missing bundles are reported as absent."""
    directory = Path(directory) if directory is not None else bundled_dir()
    out = []
    for name in networks:
        path = directory / f"{name}.json"
        if not path.exists():
            out.append(NetworkVerdict(name, "ABSENT"))
            continue
        try:
            out.append(verify_bundle(load_bundle(path), name))
        except SchemaError:
            raise
        except FxError as exc:
            out.append(NetworkVerdict(name, "ERROR", error=str(exc)))
    return PaperVerdict(out)
