"""Closed-form per-tensor precision assignment for fixed-point back-propagation.

A configuration holds, for every layer, five formats: the feedforward weight
and activation, the weight gradient, the gradient of the layer's output
activation, and the internal weight accumulator. Shortcut rows carry only the
weight, weight-gradient and accumulator formats.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .errors import AssignmentError, DomainError, SchemaError
from .fxnum import (
    QuantizerSpec,
    ceil_pow2,
    floor_pow2_strict,
    gaussian_clipping_rate,
    log2_exact,
    relative_quantization_bias_gaussian,
    snap_pow2,
)
from .stats import LayerStats, StatsBundle

TENSOR_TYPES = ("w", "a", "gw", "ga", "acc")
BMIN_RANGE = (1, 16)

DEFAULT_PM_TARGET = 0.01
DEFAULT_BETA0 = 0.05
DEFAULT_ETA0 = 0.01


def _rnd(x: float) -> int:
    return math.floor(x + 0.5)


@dataclass(frozen=True)
class LayerPrecision:
    weight: QuantizerSpec
    activation: QuantizerSpec | None
    weight_grad: QuantizerSpec
    act_grad: QuantizerSpec | None
    accumulator: QuantizerSpec

    @property
    def shortcut(self) -> bool:
        return self.activation is None

    def bits(self) -> tuple:
        return (
            self.weight.bits,
            None if self.activation is None else self.activation.bits,
            self.weight_grad.bits,
            None if self.act_grad is None else self.act_grad.bits,
            self.accumulator.bits,
        )

    def spec(self, kind: str) -> QuantizerSpec | None:
        return {
            "w": self.weight,
            "a": self.activation,
            "gw": self.weight_grad,
            "ga": self.act_grad,
            "acc": self.accumulator,
        }[kind]


@dataclass
class PrecisionConfig:
    layers: list[LayerPrecision]
    gamma_min: float
    b_min: int | None = None
    pm_target: float = DEFAULT_PM_TARGET
    extended_sign: bool = True

    def __len__(self):
        return len(self.layers)

    def rows(self) -> list[tuple]:
        return [lp.bits() for lp in self.layers]

    def column(self, kind: str) -> list:
        i = TENSOR_TYPES.index(kind)
        return [row[i] for row in self.rows()]


# -- feedforward ------------------------------------------------------------


def feedforward_offsets(e_w: Sequence[float], e_a: Sequence[float]):
    """Per-tensor precision offsets above the reference minimum.

    Returns ``(offsets_w, offsets_a, e_min)`` where each offset is
    ``rnd(log2(sqrt(E / E_min)))``.
    """
    gains = list(e_w) + list(e_a)
    if not gains:
        raise DomainError("no noise gains given")
    for g in gains:
        if not (math.isfinite(g) and g > 0):
            raise DomainError(f"noise gains must be positive and finite, got {g!r}")
    e_min = min(gains)

    def off(e):
        return _rnd(0.5 * math.log2(e / e_min))

    return [off(e) for e in e_w], [off(e) for e in e_a], e_min


def sweep_bmin(
    offsets_w: Sequence[int],
    offsets_a: Sequence[int],
    pm_eval: Callable[[list[int], list[int]], float],
    pm_target: float = DEFAULT_PM_TARGET,
    lo: int = BMIN_RANGE[0],
    hi: int = BMIN_RANGE[1],
) -> int:
    """Smallest ``B_min`` in ``[lo, hi]`` whose feedforward precisions give ``p_m < pm_target``.

    ``pm_eval(b_w, b_a)`` is called in ascending order of ``B_min`` with the
    candidate weight and activation precisions.
    """
    curve = {}
    for b in range(lo, hi + 1):
        pm = float(pm_eval([o + b for o in offsets_w], [o + b for o in offsets_a]))
        curve[b] = pm
        if pm < pm_target:
            return b
    raise AssignmentError(
        f"no B_min in [{lo}, {hi}] reaches p_m < {pm_target}", diagnostic=curve
    )


# -- gradients and accumulators ----------------------------------------------


def assign_gradient_pdrs(sigma_w_max: float, sigma_a_max: float | None):
    """``(r_gw, r_ga)``: smallest powers of two covering 2 and 4 standard deviations."""
    if not sigma_w_max > 0:
        raise DomainError(f"sigma_w_max must be positive, got {sigma_w_max!r}")
    r_gw = ceil_pow2(2.0 * sigma_w_max)
    if sigma_a_max is None:
        return r_gw, None
    if not sigma_a_max > 0:
        raise DomainError(f"sigma_a_max must be positive, got {sigma_a_max!r}")
    return r_gw, ceil_pow2(4.0 * sigma_a_max)


def assign_weight_grad_step(sigma_w_min: float) -> float:
    if not sigma_w_min > 0:
        raise DomainError(f"sigma_w_min must be positive, got {sigma_w_min!r}")
    return floor_pow2_strict(sigma_w_min / 4.0)


def act_grad_step_bound(delta_gw: float, lam: float, n_w: int, n_a: int) -> float:
    if not lam > 0:
        raise DomainError(f"lambda_max must be positive, got {lam!r} (disconnected layer?)")
    if n_w < 1 or n_a < 1:
        raise DomainError(f"tensor sizes must be positive, got n_w={n_w}, n_a={n_a}")
    return delta_gw / math.sqrt(lam) * (n_w / n_a) ** 0.25


def assign_act_grad_step(delta_gw: float, lam: float, n_w: int, n_a: int) -> float:
    return floor_pow2_strict(act_grad_step_bound(delta_gw, lam, n_w, n_a))


def assign_accumulator(b_w: int, gamma_min: float, delta_gw: float, extended: bool = True):
    """``(r_acc, delta_acc, b_acc)`` for vanilla SGD with smallest learning rate ``gamma_min``."""
    if not gamma_min > 0:
        raise DomainError(f"gamma_min must be positive, got {gamma_min!r}")
    r_acc = math.ldexp(1.0, -b_w)
    delta_acc = floor_pow2_strict(gamma_min * delta_gw)
    if delta_acc >= r_acc:
        raise AssignmentError(
            f"accumulator step {delta_acc!r} does not fit below its range {r_acc!r} "
            f"(gamma_min={gamma_min!r}, delta_gw={delta_gw!r})"
        )
    spec = QuantizerSpec.from_range(r_acc, delta_acc, signed=True, extended=extended)
    return r_acc, delta_acc, spec.bits


def _layer_error(idx: int, exc: Exception) -> Exception:
    cls = type(exc)
    if isinstance(exc, AssignmentError):
        return AssignmentError(f"layer {idx}: {exc}", diagnostic=exc.diagnostic)
    return cls(f"layer {idx}: {exc}")


def build_config(
    stats: StatsBundle,
    b_min: int,
    gamma_min: float,
    pm_target: float = DEFAULT_PM_TARGET,
    extended_sign: bool | None = None,
) -> PrecisionConfig:
    """Compose the feedforward, gradient and accumulator rules into a full configuration."""
    ext = stats.extended_sign if extended_sign is None else extended_sign
    ff = stats.feedforward_layers
    e_w = [s.e_w for s in stats.layers]
    e_a = [s.e_a for s in ff]
    for idx, s in enumerate(stats.layers, start=1):
        if s.e_w is None or (not s.shortcut and s.e_a is None):
            raise DomainError(f"layer {idx}: missing noise gain")
    off_w, off_a, _ = feedforward_offsets(e_w, e_a)
    off_a_iter = iter(off_a)
    layers = []
    for idx, s in enumerate(stats.layers, start=1):
        try:
            b_w = off_w[idx - 1] + b_min
            weight = QuantizerSpec.from_bits(b_w, 1.0, signed=True, extended=ext)
            activation = None
            if not s.shortcut:
                activation = QuantizerSpec.from_bits(next(off_a_iter) + b_min, 1.0, signed=False)
            r_gw, delta_gw = _weight_grad_format(s)
            weight_grad = QuantizerSpec.from_range(r_gw, delta_gw, signed=True, extended=ext)
            act_grad = None
            if not s.shortcut:
                r_ga, delta_ga = _act_grad_format(s, delta_gw)
                act_grad = QuantizerSpec.from_range(r_ga, delta_ga, signed=True, extended=ext)
            r_acc, delta_acc, _ = assign_accumulator(b_w, gamma_min, delta_gw, ext)
            acc = QuantizerSpec.from_range(r_acc, delta_acc, signed=True, extended=ext)
        except (DomainError, AssignmentError, ValueError) as exc:
            raise _layer_error(idx, exc) from exc
        layers.append(LayerPrecision(weight, activation, weight_grad, act_grad, acc))
    return PrecisionConfig(layers, gamma_min, b_min, pm_target, ext)


def _weight_grad_format(s: LayerStats):
    r_gw = s.r_gw
    if r_gw is None:
        if s.sigma_w_max is None:
            raise DomainError("missing sigma_w_max")
        r_gw, _ = assign_gradient_pdrs(s.sigma_w_max, None)
    delta_gw = s.delta_gw
    if delta_gw is None:
        if s.sigma_w_min is None:
            raise DomainError("missing sigma_w_min")
        delta_gw = assign_weight_grad_step(s.sigma_w_min)
    return r_gw, delta_gw


def _act_grad_format(s: LayerStats, delta_gw: float):
    r_ga = s.r_ga
    if r_ga is None:
        if s.sigma_a_max is None:
            raise DomainError("missing sigma_a_max")
        if not s.sigma_a_max > 0:
            raise DomainError(f"sigma_a_max must be positive, got {s.sigma_a_max!r}")
        r_ga = ceil_pow2(4.0 * s.sigma_a_max)
    delta_ga = s.delta_ga
    if delta_ga is None:
        if s.lambda_max is None or s.n_w is None or s.n_a is None:
            raise DomainError("missing lambda_max or tensor sizes")
        delta_ga = assign_act_grad_step(delta_gw, s.lambda_max, s.n_w, s.n_a)
    return r_ga, delta_ga


def uniform_config(
    n_layers: int,
    bits: int,
    gamma_min: float,
    grad_range: float = 1.0,
    extended: bool = True,
) -> PrecisionConfig:
    """Every tensor at ``bits`` bits: weights and activations on ``r=1``,
    gradients on ``grad_range``, accumulators on ``2^-bits``.

    Handy for near-exact baselines (``bits=32``); not derived from statistics.
    """
    if n_layers < 1:
        raise DomainError(f"need at least one layer, got {n_layers}")
    row = LayerPrecision(
        QuantizerSpec.from_bits(bits, 1.0, True, extended),
        QuantizerSpec.from_bits(bits, 1.0, False),
        QuantizerSpec.from_bits(bits, grad_range, True, extended),
        QuantizerSpec.from_bits(bits, grad_range, True, extended),
        QuantizerSpec.from_bits(bits, math.ldexp(1.0, -bits), True, extended),
    )
    return PrecisionConfig([row] * n_layers, gamma_min, None, DEFAULT_PM_TARGET, extended)


# -- perturbation ------------------------------------------------------------


def _rebuild_row(lp: LayerPrecision, bits: Sequence) -> LayerPrecision:
    b_w, b_a, b_gw, b_ga, b_acc = bits
    for b in bits:
        if b is not None and b < 1:
            raise DomainError(f"perturbation drops a precision below 1 bit ({b})")
    weight = lp.weight.with_bits(b_w)
    acc_r = math.ldexp(1.0, -b_w)
    acc = QuantizerSpec.from_bits(b_acc, acc_r, signed=True, extended=lp.accumulator.extended)
    return LayerPrecision(
        weight,
        None if lp.activation is None else lp.activation.with_bits(b_a),
        lp.weight_grad.with_bits(b_gw),
        None if lp.act_grad is None else lp.act_grad.with_bits(b_ga),
        acc,
    )


def perturb_config(
    config: PrecisionConfig,
    mode: str,
    sign: int = 1,
    fraction: float = 1.0,
    tensor_type: str | None = None,
    seed: int = 0,
) -> PrecisionConfig:
    """Shift precisions by ``sign`` (+1 or -1) bit.

    ``mode``:
      * ``"uniform"`` -- every entry;
      * ``"fraction"`` -- a seeded random subset of ``round(fraction * n)`` entries;
      * ``"type"`` -- every entry of one tensor type (``"w"``, ``"a"``, ``"gw"``, ``"ga"``, ``"acc"``).

    PDRs are kept except the accumulator's, which follows the new weight precision.
    """
    if sign not in (1, -1):
        raise DomainError(f"sign must be +1 or -1, got {sign!r}")
    rows = [list(r) for r in config.rows()]
    cells = [(i, j) for i, r in enumerate(rows) for j, b in enumerate(r) if b is not None]
    if mode == "uniform":
        chosen = cells
    elif mode == "fraction":
        if not 0.0 <= fraction <= 1.0:
            raise DomainError(f"fraction must lie in [0, 1], got {fraction!r}")
        k = math.floor(fraction * len(cells) + 0.5)
        rng = np.random.default_rng(seed)
        picked = sorted(rng.choice(len(cells), size=k, replace=False).tolist())
        chosen = [cells[p] for p in picked]
    elif mode == "type":
        if tensor_type not in TENSOR_TYPES:
            raise DomainError(f"unknown tensor type {tensor_type!r}")
        j = TENSOR_TYPES.index(tensor_type)
        chosen = [c for c in cells if c[1] == j]
    else:
        raise DomainError(f"unknown perturbation mode {mode!r}")
    for i, j in chosen:
        rows[i][j] += sign
    try:
        layers = [_rebuild_row(lp, r) for lp, r in zip(config.layers, rows)]
    except ValueError as exc:
        raise DomainError(f"invalid perturbed configuration: {exc}") from exc
    return replace(config, layers=layers)


# -- verification ------------------------------------------------------------


@dataclass
class CriterionResult:
    name: str
    passed: bool | None  # None: unverifiable from the available statistics
    measured: dict = field(default_factory=dict)
    detail: str = ""


@dataclass
class CriteriaReport:
    efqn: CriterionResult
    gc: CriterionResult
    rqb: CriterionResult
    bqn: CriterionResult
    acc: CriterionResult

    @property
    def results(self) -> list[CriterionResult]:
        return [self.efqn, self.gc, self.rqb, self.bqn, self.acc]

    @property
    def all_passed(self) -> bool:
        return all(r.passed is True for r in self.results)

    def to_dict(self) -> dict:
        return {
            r.name: {"passed": r.passed, "measured": r.measured, "detail": r.detail}
            for r in self.results
        }


EFQN_MAX_SPREAD = 4.0


def verify_criteria(
    config: PrecisionConfig,
    stats: StatsBundle,
    pm_target: float = DEFAULT_PM_TARGET,
    beta0: float = DEFAULT_BETA0,
    eta0: float = DEFAULT_ETA0,
) -> CriteriaReport:
    """Check the five quantization criteria for ``config`` against ``stats``.

    EFQN compares ``2^(-2B) E`` across all feedforward tensors; rounding each
    precision to an integer allows at most a factor 4 spread. GC and RQB use
    the Gaussian model of the gradients. BQN bounds the noise reflected from
    the activation gradient onto the weight gradient through the largest
    singular value of the square-Jacobian. AS checks the accumulator format
    against the smallest learning rate.
    """
    if len(config.layers) != len(stats.layers):
        raise DomainError(
            f"config has {len(config.layers)} layers but stats describe {len(stats.layers)}"
        )
    pairs = list(zip(config.layers, stats.layers))

    # EFQN
    noise = []
    missing = False
    for lp, s in pairs:
        if s.e_w is None or (not s.shortcut and s.e_a is None):
            missing = True
            break
        noise.append(math.ldexp(1.0, -2 * lp.weight.bits) * s.e_w)
        if not s.shortcut:
            noise.append(math.ldexp(1.0, -2 * lp.activation.bits) * s.e_a)
    if missing:
        efqn = CriterionResult("EFQN", None, detail="noise gains missing")
    else:
        spread = max(noise) / min(noise)
        efqn = CriterionResult(
            "EFQN", spread <= EFQN_MAX_SPREAD, {"spread": spread, "limit": EFQN_MAX_SPREAD}
        )

    # GC
    betas = {}
    gc_missing = []
    for idx, (lp, s) in enumerate(pairs, start=1):
        if s.sigma_w_max is None:
            gc_missing.append(f"gw{idx}")
        else:
            betas[f"gw{idx}"] = gaussian_clipping_rate(lp.weight_grad.r, s.sigma_w_max)
        if not s.shortcut:
            if s.sigma_a_max is None:
                gc_missing.append(f"ga{idx}")
            else:
                betas[f"ga{idx}"] = gaussian_clipping_rate(lp.act_grad.r, s.sigma_a_max)
    gc = _threshold_result("GC", betas, beta0, gc_missing)

    # RQB
    etas = {}
    rqb_missing = []
    for idx, (lp, s) in enumerate(pairs, start=1):
        if s.sigma_w_min is None:
            rqb_missing.append(f"gw{idx}")
        else:
            etas[f"gw{idx}"] = relative_quantization_bias_gaussian(lp.weight_grad.delta, s.sigma_w_min)
    rqb = _threshold_result("RQB", etas, eta0, rqb_missing)

    # BQN
    ratios = {}
    bqn_missing = []
    for idx, (lp, s) in enumerate(pairs, start=1):
        if s.shortcut:
            continue
        if s.lambda_max is None or s.n_w is None or s.n_a is None:
            bqn_missing.append(f"layer{idx}")
            continue
        v_ga = s.lambda_max * math.sqrt(s.n_a * s.n_w) * lp.act_grad.delta**2 / 12.0
        v_gw = s.n_w * lp.weight_grad.delta**2 / 12.0
        ratios[f"layer{idx}"] = v_ga / v_gw
    bqn_ok = all(v <= 1.0 for v in ratios.values())
    bqn = CriterionResult(
        "BQN",
        None if bqn_missing else bqn_ok,
        {"ratio": ratios},
        f"unverifiable: {', '.join(bqn_missing)}" if bqn_missing else "",
    )

    # AS
    acc_bad = []
    for idx, lp in enumerate(config.layers, start=1):
        ok_step = lp.accumulator.delta < config.gamma_min * lp.weight_grad.delta
        ok_range = lp.accumulator.r >= math.ldexp(1.0, -lp.weight.bits)
        if not (ok_step and ok_range):
            acc_bad.append(idx)
    acc = CriterionResult(
        "AS",
        not acc_bad,
        {"failing_layers": acc_bad, "noise": 0.0 if not acc_bad else None},
    )
    return CriteriaReport(efqn, gc, rqb, bqn, acc)


def _threshold_result(name, values, limit, missing):
    ok = all(v < limit for v in values.values())
    return CriterionResult(
        name,
        None if missing else ok,
        {"values": values, "limit": limit},
        f"unverifiable: {', '.join(missing)}" if missing else "",
    )


# -- export ------------------------------------------------------------------


def config_to_dict(config: PrecisionConfig) -> dict:
    rows = []
    for lp in config.layers:
        b_w, b_a, b_gw, b_ga, b_acc = lp.bits()
        rows.append(
            {
                "b_w": b_w,
                "b_a": b_a,
                "b_gw": b_gw,
                "b_ga": b_ga,
                "b_acc": b_acc,
                "r_gw": lp.weight_grad.r,
                "r_ga": None if lp.act_grad is None else lp.act_grad.r,
                "delta_gw": lp.weight_grad.delta,
                "delta_ga": None if lp.act_grad is None else lp.act_grad.delta,
                "r_acc": lp.accumulator.r,
                "delta_acc": lp.accumulator.delta,
            }
        )
    return {
        "b_min": config.b_min,
        "gamma_min": config.gamma_min,
        "pm_target": config.pm_target,
        "extended_sign": config.extended_sign,
        "layers": rows,
    }


def config_from_dict(doc: dict) -> PrecisionConfig:
    try:
        ext = bool(doc.get("extended_sign", True))
        layers = []
        for idx, row in enumerate(doc["layers"], start=1):
            try:
                weight = QuantizerSpec.from_bits(row["b_w"], 1.0, True, ext)
                shortcut = row.get("b_a") is None
                activation = None if shortcut else QuantizerSpec.from_bits(row["b_a"], 1.0, False)
                gw = QuantizerSpec.from_range(snap_pow2(row["r_gw"]), snap_pow2(row["delta_gw"]), True, ext)
                ga = None
                if not shortcut:
                    ga = QuantizerSpec.from_range(snap_pow2(row["r_ga"]), snap_pow2(row["delta_ga"]), True, ext)
                acc = QuantizerSpec.from_range(snap_pow2(row["r_acc"]), snap_pow2(row["delta_acc"]), True, ext)
            except KeyError as exc:
                raise SchemaError(f"missing field {exc.args[0]!r}", f"layers[{idx}]") from None
            except (TypeError, ValueError) as exc:
                raise SchemaError(str(exc), f"layers[{idx}]") from None
            for key, spec in (("b_gw", gw), ("b_ga", ga), ("b_acc", acc)):
                if spec is not None and row.get(key) not in (None, spec.bits):
                    raise SchemaError(
                        f"{key}={row[key]} disagrees with its range/step ({spec.bits})",
                        f"layers[{idx}]",
                    )
            layers.append(LayerPrecision(weight, activation, gw, ga, acc))
        return PrecisionConfig(
            layers,
            float(doc["gamma_min"]),
            doc.get("b_min"),
            float(doc.get("pm_target", DEFAULT_PM_TARGET)),
            ext,
        )
    except KeyError as exc:
        raise SchemaError(f"missing field {exc.args[0]!r}") from None


def save_config(config: PrecisionConfig, path) -> None:
    Path(path).write_text(json.dumps(config_to_dict(config), indent=2) + "\n")


def load_config(path) -> PrecisionConfig:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise SchemaError(f"invalid JSON: {exc.msg}", f"{path}:{exc.lineno}") from None
    return config_from_dict(doc)


def format_config_table(config: PrecisionConfig) -> str:
    """Aligned text table, one ``(B_W, B_A, B_GW, B_GA, B_acc)`` tuple per layer."""
    head = ["layer", "B_W", "B_A", "B_GW", "B_GA", "B_acc", "r_GW", "d_GW", "r_GA", "d_GA"]
    lines = []
    for idx, lp in enumerate(config.layers, start=1):
        bits = ["-" if b is None else str(b) for b in lp.bits()]
        pw = [
            _fmt_pow2(lp.weight_grad.r),
            _fmt_pow2(lp.weight_grad.delta),
            "-" if lp.act_grad is None else _fmt_pow2(lp.act_grad.r),
            "-" if lp.act_grad is None else _fmt_pow2(lp.act_grad.delta),
        ]
        lines.append([str(idx)] + bits + pw)
    widths = [max(len(h), *(len(row[i]) for row in lines)) for i, h in enumerate(head)]
    out = ["  ".join(h.rjust(w) for h, w in zip(head, widths))]
    out += ["  ".join(c.rjust(w) for c, w in zip(row, widths)) for row in lines]
    footer = f"B_min={config.b_min}  gamma_min={config.gamma_min:g}  pm_target={config.pm_target:g}"
    return "\n".join(out + [footer]) + "\n"


def _fmt_pow2(x: float) -> str:
    return f"2^{log2_exact(x)}"
