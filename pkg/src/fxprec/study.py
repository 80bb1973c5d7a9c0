"""End-to-end desk study: FL training, precision assignment, perturbed FX runs.

The workflow mirrors how the assigner is meant to be used:

1. train the floating-point network while collecting gradient statistics;
2. measure the noise gains on an estimation set;
3. sweep ``B_min`` against the mismatch target on a validation set;
4. build ``C_o`` and train it (and its perturbations) from the same seed.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .assigner import (
    DEFAULT_PM_TARGET,
    TENSOR_TYPES,
    PrecisionConfig,
    build_config,
    feedforward_offsets,
    perturb_config,
    sweep_bmin,
)
from .errors import DomainError
from .stats import StatsBundle, compute_noise_gains
from .trainkit import Dataset, TrainRunLog, TrainSettings, make_blobs, train

logger = logging.getLogger(__name__)

DEFAULT_SIZES = (16, 64, 4)


def assign_from_run(
    fl_log: TrainRunLog,
    data: Dataset,
    pm_target: float = DEFAULT_PM_TARGET,
    gamma_min: float | None = None,
    estimation_size: int = 1000,
    extended: bool = True,
) -> tuple[StatsBundle, PrecisionConfig]:
    """Derive ``C_o`` from a finished floating-point run."""
    if fl_log.network is None or fl_log.stats is None:
        raise DomainError("assignment needs a completed floating-point run with statistics")
    net = fl_log.network
    gains = compute_noise_gains(net, data.x_train[:estimation_size])
    layers = [replace(s, e_w=ew, e_a=ea) for s, ew, ea in zip(fl_log.stats.layers, gains.e_w, gains.e_a)]
    stats = replace(fl_log.stats, layers=layers, extended_sign=extended)
    off_w, off_a, _ = feedforward_offsets(gains.e_w, gains.e_a)

    fl_pred = net.predict(data.x_val)
    curve = {}

    def pm_eval(b_w, b_a):
        try:
            q = net.quantized_copy(b_w, b_a, extended)
        except DomainError:
            # a signed format below its minimum width cannot exist
            pm = 1.0
        else:
            pm = float(np.mean(q.predict(data.x_val) != fl_pred))
        curve[min(b_w) - min(off_w)] = pm
        return pm

    b_min = sweep_bmin(off_w, off_a, pm_eval, pm_target)
    gm = gamma_min if gamma_min is not None else fl_log.records[-1].lr
    stats = replace(stats, b_min=b_min, gamma_min=gm, pm_curve=dict(curve))
    logger.info("B_min=%d (p_m curve %s)", b_min, curve)
    return stats, build_config(stats, b_min, gm, pm_target, extended)


def perturbations(config: PrecisionConfig) -> dict[str, PrecisionConfig]:
    """``C_+1``, ``C_-1`` and the five per-type ``-1`` variants of ``config``."""
    out = {
        "C+1": perturb_config(config, "uniform", +1),
        "C-1": perturb_config(config, "uniform", -1),
    }
    for kind in TENSOR_TYPES:
        out[f"{kind}-1"] = perturb_config(config, "type", -1, tensor_type=kind)
    return out


@dataclass
class ComparisonResult:
    seeds: list[int]
    test_error: dict[str, list[float]] = field(default_factory=dict)
    aborted: dict[str, list[int]] = field(default_factory=dict)
    b_min: list[int] = field(default_factory=list)

    def mean_error(self, label: str) -> float:
        return float(np.mean(self.test_error[label]))

    def gap(self, label: str) -> float:
        """Mean test-error difference to the FL twin, in percentage points."""
        diffs = [100.0 * (a - b) for a, b in zip(self.test_error[label], self.test_error["FL"])]
        return float(np.mean(diffs))

    def relative_deviation(self, label: str) -> float:
        """Mean relative test-error deviation from the FL twin."""
        devs = [(a - b) / b if b > 0 else math.inf for a, b in zip(self.test_error[label], self.test_error["FL"])]
        return float(np.mean(devs))

    def summary(self) -> dict:
        out = {"seeds": self.seeds, "b_min": self.b_min, "runs": {}}
        for label in self.test_error:
            out["runs"][label] = {
                "test_error": self.mean_error(label),
                "gap_points": self.gap(label),
                "relative_deviation": self.relative_deviation(label),
                "aborted_seeds": self.aborted.get(label, []),
            }
        return out

    def format(self) -> str:
        lines = [f"{'run':<8}{'test err %':>12}{'gap (pts)':>12}{'rel dev':>10}"]
        for label in self.test_error:
            lines.append(
                f"{label:<8}{100 * self.mean_error(label):>12.2f}{self.gap(label):>12.2f}"
                f"{self.relative_deviation(label):>10.3f}"
            )
        return "\n".join(lines) + "\n"


def run_comparison(
    seeds: Sequence[int],
    sizes: Sequence[int] = DEFAULT_SIZES,
    settings: TrainSettings | None = None,
    data_factory: Callable[[int], Dataset] | None = None,
    pm_target: float = DEFAULT_PM_TARGET,
    labels: Sequence[str] | None = None,
    log_sink: Callable[[TrainRunLog], None] | None = None,
) -> ComparisonResult:
    """Train FL, ``C_o`` and the perturbed configurations for every seed.

    ``labels`` restricts which perturbed runs are trained (``C_o`` and
    ``FL`` always are). ``log_sink`` receives every finished run log.
    """
    settings = settings or TrainSettings()
    if data_factory is None:
        def data_factory(seed):
            return make_blobs(seed, num_classes=sizes[-1], dim=sizes[0])
    result = ComparisonResult(list(seeds))
    for seed in seeds:
        data = data_factory(seed)
        fl = train(sizes, data, None, seed, settings, label="FL")
        _record(result, "FL", seed, fl, log_sink)
        _, c_o = assign_from_run(fl, data, pm_target, settings.lr_min)
        result.b_min.append(c_o.b_min)
        configs = {"C_o": c_o}
        for label, cfg in perturbations(c_o).items():
            if labels is None or label in labels:
                configs[label] = cfg
        for label, cfg in configs.items():
            log = train(sizes, data, cfg, seed, settings, reference=fl, label=label)
            _record(result, label, seed, log, log_sink)
    return result


def _record(result, label, seed, log, sink):
    err = log.final_test_error if not log.aborted else 1.0
    result.test_error.setdefault(label, []).append(err)
    if log.aborted:
        result.aborted.setdefault(label, []).append(seed)
    if sink is not None:
        sink(log)
