"""Gradient statistics, quantization noise gains and square-Jacobian spectra.

The statistics document (JSON) is the interchange format between training
runs and the assigner. One document describes one network::

    {
      "network": "toy",
      "extended_sign": true,          # signed precision convention
      "b_min": 4,                      # optional, reference minimum precision
      "gamma_min": 1e-4,               # optional, smallest learning rate
      "pm_curve": {"1": 0.4, ...},     # optional, p_m measured per B_min
      "layers": [
        {"e_w": ..., "e_a": ..., "sigma_w_min": ..., "sigma_w_max": ...,
         "sigma_a_max": ..., "lambda_max": ..., "n_w": ..., "n_a": ...,
         "shortcut": false}
      ]
    }

Per layer, ``r_gw``, ``delta_gw``, ``r_ga`` and ``delta_ga`` may be given
directly instead of (or in addition to) the sigma statistics; pinned values
take precedence when a configuration is built.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .errors import DomainError, NumericError, SchemaError, StateError
from .fxnum import snap_pow2

logger = logging.getLogger(__name__)

DEFAULT_THETA = 0.1


@dataclass
class RunningVariance:
    """Moving-window variance estimate of one tensor plus its recorded extremes.

    ``estimate=None`` means the tracker is fresh: the first update seeds the
    estimate with the instantaneous variance instead of blending it with zero.
    """

    theta: float = DEFAULT_THETA
    estimate: float | None = None
    max_sigma: float = 0.0
    min_sigma: float = math.inf
    update_count: int = 0

    def __post_init__(self):
        if not 0.0 < self.theta <= 1.0:
            raise DomainError(f"theta must lie in (0, 1], got {self.theta!r}")

    @property
    def sigma(self) -> float:
        return math.sqrt(self.estimate) if self.estimate is not None else float("nan")


def update_running_variance(tracker: RunningVariance, tensor) -> RunningVariance:
    """Blend the spatial variance of ``tensor`` into ``tracker`` (in place; also returned)."""
    arr = np.asarray(tensor, dtype=np.float64)
    if arr.size == 0:
        raise DomainError("cannot update a running variance with an empty tensor")
    inst = float(np.var(arr))
    if tracker.estimate is None:
        tracker.estimate = inst
    else:
        tracker.estimate = (1.0 - tracker.theta) * tracker.estimate + tracker.theta * inst
    tracker.update_count += 1
    s = math.sqrt(tracker.estimate)
    tracker.max_sigma = max(tracker.max_sigma, s)
    # zero-variance updates say nothing about the smallest step the tensor needs
    if inst > 0.0 and s > 0.0:
        tracker.min_sigma = min(tracker.min_sigma, s)
    return tracker


@dataclass
class NoiseGains:
    e_w: list[float]
    e_a: list[float]
    skipped_ties: int = 0
    samples: int = 0


def _fsum_columns(rows: np.ndarray) -> list[float]:
    # exactly rounded, hence independent of sample order
    return [math.fsum(rows[:, j]) for j in range(rows.shape[1])]


def compute_noise_gains(model, inputs, batch_size: int = 512) -> NoiseGains:
    """Quantization noise gains of every weight and activation tensor of ``model``.

    For each sample the predicted class ``y`` is taken from the floating model.
    Every other class ``i`` contributes the squared gradient norm of
    ``Z_i - Z_y`` with respect to the tensor, divided by ``2 (Z_i - Z_y)^2``.
    Contributions are averaged over the samples.

    ``model`` must provide ``forward(x)`` returning a cache with ``outputs``
    and ``output_sensitivity(cache, seed)`` returning per-sample squared
    gradient norms ``(w_sq, a_sq)`` of ``seed . Z`` for each layer.
    Terms with ``Z_i == Z_y`` are skipped and counted in ``skipped_ties``.
    """
    x = np.asarray(inputs, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise DomainError("estimation set must be a non-empty 2-D array")
    w_rows, a_rows = [], []
    ties = 0
    for start in range(0, x.shape[0], batch_size):
        xb = x[start : start + batch_size]
        cache = model.forward(xb)
        z = cache.outputs
        n, m = z.shape
        y = np.argmax(z, axis=1)
        w_acc = None
        a_acc = None
        for i in range(m):
            seed = np.zeros_like(z)
            seed[:, i] = 1.0
            seed[np.arange(n), y] -= 1.0
            diff = z[:, i] - z[np.arange(n), y]
            active = (y != i) & (diff != 0.0)
            ties += int(np.count_nonzero((y != i) & (diff == 0.0)))
            seed[~active] = 0.0
            w_sq, a_sq = model.output_sensitivity(cache, seed)
            denom = np.where(active, 2.0 * diff * diff, 1.0)
            w_term = np.where(active[:, None], w_sq / denom[:, None], 0.0)
            a_term = np.where(active[:, None], a_sq / denom[:, None], 0.0)
            w_acc = w_term if w_acc is None else w_acc + w_term
            a_acc = a_term if a_acc is None else a_acc + a_term
        w_rows.append(w_acc)
        a_rows.append(a_acc)
    if ties:
        logger.warning("skipped %d tied soft-output terms while computing noise gains", ties)
    w_all = np.concatenate(w_rows)
    a_all = np.concatenate(a_rows)
    n_total = x.shape[0]
    e_w = [s / n_total for s in _fsum_columns(w_all)]
    e_a = [s / n_total for s in _fsum_columns(a_all)]
    return NoiseGains(e_w, e_a, ties, n_total)


def dense_square_jacobian(a_in, act_deriv) -> np.ndarray:
    """Mini-batch averaged square-Jacobian of a dense layer.

    The weight-gradient entry for ``w[i, j]`` depends on the activation
    gradient of unit ``j`` in sample ``b`` through ``act_deriv[b, j] * a_in[b, i]``.
    Squaring and averaging over the mini-batch gives an ``(n_in, n_out)``
    matrix.
    """
    a = np.asarray(a_in, dtype=np.float64)
    d = np.asarray(act_deriv, dtype=np.float64)
    if a.ndim != 2 or d.ndim != 2 or a.shape[0] != d.shape[0]:
        raise DomainError(f"incompatible shapes {a.shape} and {d.shape}")
    return (a * a).T @ (d * d) / a.shape[0]


@dataclass
class SpectralEstimate:
    """Moving-window square-Jacobian of one layer and its largest recorded singular value."""

    theta: float = DEFAULT_THETA
    matrix: np.ndarray | None = None
    lambda_max: float = 0.0
    update_count: int = 0

    @property
    def matrix_dims(self):
        return None if self.matrix is None else tuple(self.matrix.shape)


def update_square_jacobian(estimate: SpectralEstimate, a_in, act_deriv) -> SpectralEstimate:
    """Fold one backward pass of a dense layer into ``estimate`` (in place; also returned)."""
    new = dense_square_jacobian(a_in, act_deriv)
    if estimate.matrix is None:
        estimate.matrix = new
    else:
        if estimate.matrix.shape != new.shape:
            raise StateError(
                f"square-Jacobian shape changed from {estimate.matrix.shape} to {new.shape}"
            )
        estimate.matrix = (1.0 - estimate.theta) * estimate.matrix + estimate.theta * new
    estimate.update_count += 1
    estimate.lambda_max = max(estimate.lambda_max, lambda_max(estimate.matrix))
    return estimate


def lambda_max(matrix, tol: float = 1e-9, max_iter: int = 10_000) -> float:
    """Largest singular value by power iteration on ``M^T M``.

    Starts from the all-ones vector; restarts once from a fixed pseudorandom
    vector if the iterate collapses to zero or the residual stops improving.
    """
    m = np.asarray(matrix, dtype=np.float64)
    if m.ndim != 2:
        raise DomainError(f"expected a matrix, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise NumericError("matrix has non-finite entries")
    scale = float(np.max(np.abs(m)))
    if scale == 0.0:
        return 0.0
    # work on a unit-scale copy so M^T M neither underflows nor overflows
    m = m / scale
    starts = [np.ones(m.shape[1]), np.random.default_rng(12345).standard_normal(m.shape[1])]
    residual = math.inf
    for v in starts:
        v = v / np.linalg.norm(v)
        best = math.inf
        stall = 0
        for _ in range(max_iter):
            w = m.T @ (m @ v)
            mu = float(v @ w)
            norm_w = np.linalg.norm(w)
            if norm_w == 0.0:
                break
            residual = float(np.linalg.norm(w - mu * v)) / norm_w
            if residual < tol:
                return scale * math.sqrt(max(mu, 0.0))
            if residual < best * 0.999999:
                best = residual
                stall = 0
            else:
                stall += 1
                if stall > 200:
                    break
            v = w / norm_w
    raise NumericError(f"power iteration did not converge (final residual {residual:.3e})")


@dataclass
class LayerStats:
    """Recorded statistics of one layer (``shortcut`` rows carry weights only)."""

    e_w: float | None = None
    e_a: float | None = None
    sigma_w_min: float | None = None
    sigma_w_max: float | None = None
    sigma_a_max: float | None = None
    lambda_max: float | None = None
    n_w: int | None = None
    n_a: int | None = None
    shortcut: bool = False
    r_gw: float | None = None
    delta_gw: float | None = None
    r_ga: float | None = None
    delta_ga: float | None = None


_POW2_FIELDS = ("r_gw", "delta_gw", "r_ga", "delta_ga")
_POSITIVE_FIELDS = ("e_w", "e_a", "sigma_w_min", "sigma_w_max", "sigma_a_max")


@dataclass
class StatsBundle:
    layers: list[LayerStats]
    network: str = ""
    extended_sign: bool = True
    b_min: int | None = None
    gamma_min: float | None = None
    pm_curve: dict[int, float] = field(default_factory=dict)

    @property
    def feedforward_layers(self) -> list[LayerStats]:
        return [s for s in self.layers if not s.shortcut]

    def to_dict(self) -> dict:
        out = {
            "network": self.network,
            "extended_sign": self.extended_sign,
            "b_min": self.b_min,
            "gamma_min": self.gamma_min,
            "pm_curve": {str(k): v for k, v in sorted(self.pm_curve.items())},
            "layers": [],
        }
        for s in self.layers:
            out["layers"].append({k: v for k, v in asdict(s).items() if v is not None})
        return out

    def dump(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")


def stats_from_dict(doc: dict, snap_log: list | None = None) -> StatsBundle:
    """Validate and parse a statistics document.

    Pinned PDR/step values are snapped to exact powers of two when within
    0.5%; every snap is appended to ``snap_log`` and logged.
    """
    if not isinstance(doc, dict):
        raise SchemaError("document must be a JSON object")
    layers_doc = doc.get("layers")
    if not isinstance(layers_doc, list) or not layers_doc:
        raise SchemaError("'layers' must be a non-empty list", "layers")
    known = {f.name for f in fields(LayerStats)}
    layers = []
    for idx, row in enumerate(layers_doc, start=1):
        where = f"layers[{idx}]"
        if not isinstance(row, dict):
            raise SchemaError("layer entry must be an object", where)
        unknown = set(row) - known
        if unknown:
            raise SchemaError(f"unknown fields {sorted(unknown)}", where)
        vals = {}
        for k, v in row.items():
            if k == "shortcut":
                if not isinstance(v, bool):
                    raise SchemaError("'shortcut' must be boolean", f"{where}.{k}")
                vals[k] = v
                continue
            if v is None:
                continue
            if isinstance(v, bool) or not isinstance(v, (int, float)):
                raise SchemaError(f"expected a number, got {v!r}", f"{where}.{k}")
            if not math.isfinite(v):
                raise SchemaError(f"non-finite value {v!r}", f"{where}.{k}")
            if k in ("n_w", "n_a"):
                if int(v) != v or v < 1:
                    raise SchemaError(f"count must be a positive integer, got {v!r}", f"{where}.{k}")
                v = int(v)
            elif k in _POW2_FIELDS:
                try:
                    snapped = snap_pow2(float(v))
                except ValueError as exc:
                    raise SchemaError(str(exc), f"{where}.{k}") from None
                if snapped != v:
                    msg = f"{where}.{k}: snapped {v!r} -> 2^{int(math.log2(snapped))}"
                    logger.info(msg)
                    if snap_log is not None:
                        snap_log.append(msg)
                v = snapped
            elif k in _POSITIVE_FIELDS and v <= 0:
                raise SchemaError(f"must be positive, got {v!r}", f"{where}.{k}")
            elif v < 0:
                raise SchemaError(f"must be non-negative, got {v!r}", f"{where}.{k}")
            vals[k] = float(v) if k not in ("n_w", "n_a") else v
        layers.append(LayerStats(**vals))
    b_min = doc.get("b_min")
    if b_min is not None and (not isinstance(b_min, int) or b_min < 1):
        raise SchemaError(f"'b_min' must be a positive integer, got {b_min!r}", "b_min")
    gamma_min = doc.get("gamma_min")
    if gamma_min is not None and (not isinstance(gamma_min, (int, float)) or gamma_min <= 0):
        raise SchemaError(f"'gamma_min' must be positive, got {gamma_min!r}", "gamma_min")
    curve = {}
    for k, v in (doc.get("pm_curve") or {}).items():
        try:
            curve[int(k)] = float(v)
        except (TypeError, ValueError):
            raise SchemaError(f"bad pm_curve entry {k!r}: {v!r}", "pm_curve") from None
    return StatsBundle(
        layers=layers,
        network=str(doc.get("network", "")),
        extended_sign=bool(doc.get("extended_sign", True)),
        b_min=b_min,
        gamma_min=None if gamma_min is None else float(gamma_min),
        pm_curve=curve,
    )


def load_stats(path, snap_log: list | None = None) -> StatsBundle:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise SchemaError(f"invalid JSON: {exc.msg}", f"{path}:{exc.lineno}") from None
    return stats_from_dict(doc, snap_log)
