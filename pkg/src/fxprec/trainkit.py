"""Desk-scale dense networks trained with per-tensor fixed-point quantization.

Dataflow of one layer ``l`` (``A_l`` is the layer input, ``A_1`` the data):

* forward: ``A_{l+1} = q_A(clip(A_l W_l, 0, 2))``; the last layer emits soft outputs ``Z``;
* backward: the output gradient ``G^A_{l+1}`` is quantized first, then
  ``G^W_l = A_l^T (G^A_{l+1} * f')`` is quantized and ``G^A_l`` propagated
  with the quantized weights;
* update: ``W_acc <- q_acc(W_acc - lr G^W_l)`` clipped to ``[-1, 1]`` and
  ``W_l = q_W(W_acc)``.

With ``config=None`` nothing is quantized (the floating-point twin).
"""

from __future__ import annotations

import copy
import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .assigner import PrecisionConfig
from .errors import ConfigurationError, DomainError, NumericError
from .fxnum import QuantizerSpec, measure_clipping_rate, quantize
from .stats import (
    LayerStats,
    RunningVariance,
    SpectralEstimate,
    StatsBundle,
    update_running_variance,
    update_square_jacobian,
)

logger = logging.getLogger(__name__)

CLIP_LEVEL = 2.0


def clipped_relu(z):
    return np.clip(z, 0.0, CLIP_LEVEL)


def clipped_relu_deriv(z):
    return ((z > 0.0) & (z < CLIP_LEVEL)).astype(np.float64)


def accumulator_register(row, extended: bool = True) -> QuantizerSpec:
    """Full accumulator register: the weight's range at the accumulator's step."""
    return QuantizerSpec.from_range(1.0, row.accumulator.delta, signed=True, extended=extended)


def _check_finite(arr, what):
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values in {what}")


def layer_forward(a_in, w, out_spec: QuantizerSpec | None, last: bool = False):
    """One layer: returns ``(pre_activation, output)``; the output is quantized when a spec is given."""
    z = a_in @ w
    if last:
        return z, z
    a = clipped_relu(z)
    if out_spec is not None:
        a = quantize(a, out_spec)
    return z, a


@dataclass
class ForwardCache:
    inputs: list[np.ndarray]  # A_1..A_L as seen by each layer
    pre: list[np.ndarray]  # pre-activations of each layer
    outputs: np.ndarray  # soft outputs Z


@dataclass
class BackwardResult:
    weight_grads: list[np.ndarray]
    act_grads: list[np.ndarray]  # entry l is G^A_{l+1}, the gradient of layer l's output
    act_derivs: list[np.ndarray]
    clip_counts: dict[str, tuple[int, int]] = field(default_factory=dict)


class DenseNetwork:
    """A stack of bias-free dense layers with clipped rectifiers between them."""

    def __init__(self, sizes: Sequence[int], w_acc: list[np.ndarray], config: PrecisionConfig | None = None,
                 output_scale: float = 1.0):
        self.sizes = list(sizes)
        self.output_scale = output_scale
        self.config = config
        self.w_specs = None
        self.a_specs = None
        if config is not None:
            if len(config.layers) != len(self.sizes) - 1:
                raise ConfigurationError(
                    f"config has {len(config.layers)} rows for a {len(self.sizes) - 1}-layer network"
                )
            if any(lp.shortcut for lp in config.layers):
                raise ConfigurationError("dense networks have no shortcut rows")
            self.w_specs = [lp.weight for lp in config.layers]
            self.a_specs = [lp.activation for lp in config.layers]
            self.acc_specs = [accumulator_register(lp, config.extended_sign) for lp in config.layers]
            w_acc = [quantize(np.clip(w, -1.0, 1.0), s) for w, s in zip(w_acc, self.acc_specs)]
        self.w_acc = [np.array(w, dtype=np.float64) for w in w_acc]
        self.w = [self._weight_view(i) for i in range(len(self.w_acc))]

    @classmethod
    def init(cls, sizes: Sequence[int], seed: int, config: PrecisionConfig | None = None) -> DenseNetwork:
        rng = np.random.default_rng(seed)
        ws = []
        for n_in, n_out in zip(sizes[:-1], sizes[1:]):
            bound = min(1.0, math.sqrt(6.0 / (n_in + n_out)))
            ws.append(rng.uniform(-bound, bound, size=(n_in, n_out)))
        return cls(sizes, ws, config)

    @property
    def num_layers(self) -> int:
        return len(self.w_acc)

    def _weight_view(self, i):
        if self.w_specs is None:
            return self.w_acc[i]
        return quantize(self.w_acc[i], self.w_specs[i])

    def quantized_copy(self, b_w: Sequence[int], b_a: Sequence[int], extended: bool = True) -> DenseNetwork:
        """Inference-only copy with weights and activations quantized to the given precisions."""
        net = DenseNetwork(self.sizes, [w.copy() for w in self.w_acc], None, self.output_scale)
        net.w_specs = [QuantizerSpec.from_bits(b, 1.0, True, extended) for b in b_w]
        net.a_specs = [QuantizerSpec.from_bits(b, 1.0, False) for b in b_a]
        net.w = [net._weight_view(i) for i in range(net.num_layers)]
        return net

    def with_config(self, config: PrecisionConfig | None) -> DenseNetwork:
        return DenseNetwork(self.sizes, [w.copy() for w in self.w_acc], config, self.output_scale)

    def copy(self) -> DenseNetwork:
        return copy.deepcopy(self)

    # -- passes -----------------------------------------------------------

    def forward(self, x) -> ForwardCache:
        a = np.asarray(x, dtype=np.float64)
        _check_finite(a, "network input")
        if self.a_specs is not None:
            a = quantize(a, self.a_specs[0])
        inputs, pre = [], []
        for i, w in enumerate(self.w):
            last = i == self.num_layers - 1
            spec = None if (last or self.a_specs is None) else self.a_specs[i + 1]
            inputs.append(a)
            z, a = layer_forward(a, w, spec, last)
            _check_finite(z, f"layer {i + 1} pre-activation")
            pre.append(z)
        return ForwardCache(inputs, pre, a * self.output_scale)

    def predict(self, x) -> np.ndarray:
        return np.argmax(self.forward(x).outputs, axis=1)

    def backward(self, cache: ForwardCache, labels) -> BackwardResult:
        """Mean softmax cross-entropy gradients, quantized per the configuration."""
        z = cache.outputs
        n = z.shape[0]
        p = np.exp(z - z.max(axis=1, keepdims=True))
        p /= p.sum(axis=1, keepdims=True)
        p[np.arange(n), labels] -= 1.0
        g = p * (self.output_scale / n)
        return self.backward_from(cache, g)

    def backward_from(self, cache: ForwardCache, g_out) -> BackwardResult:
        """Back-propagate a gradient of the last layer's output."""
        L = self.num_layers
        gws = [None] * L
        gas = [None] * L
        derivs = [None] * L
        clips = {}
        g = np.asarray(g_out, dtype=np.float64)
        for i in reversed(range(L)):
            _check_finite(g, f"layer {i + 1} output gradient")
            if self.config is not None:
                spec = self.config.layers[i].act_grad
                rep = measure_clipping_rate(g, spec.r)
                clips[f"ga{i + 1}"] = (rep.clipped_count, rep.total_count)
                g = quantize(g, spec)
            gas[i] = g
            d = np.ones_like(cache.pre[i]) if i == L - 1 else clipped_relu_deriv(cache.pre[i])
            derivs[i] = d
            delta = g * d
            gw = cache.inputs[i].T @ delta
            _check_finite(gw, f"layer {i + 1} weight gradient")
            if self.config is not None:
                spec = self.config.layers[i].weight_grad
                rep = measure_clipping_rate(gw, spec.r)
                clips[f"gw{i + 1}"] = (rep.clipped_count, rep.total_count)
                gw = quantize(gw, spec)
            gws[i] = gw
            if i > 0:
                g = delta @ self.w[i].T
        return BackwardResult(gws, gas, derivs, clips)

    def sgd_update(self, i: int, lr: float, grad) -> None:
        """Vanilla SGD on the accumulator of layer ``i`` (0-based), then refresh its weight."""
        new = np.clip(self.w_acc[i] - lr * np.asarray(grad), -1.0, 1.0)
        if self.config is not None:
            new = quantize(new, self.acc_specs[i])
        self.w_acc[i] = new
        self.w[i] = self._weight_view(i)

    def output_sensitivity(self, cache: ForwardCache, seed):
        """Per-sample squared gradient norms of ``sum_k seed[:, k] Z[:, k]``.

        Returns ``(w_sq, a_sq)`` with shape ``(batch, L)``: the norm over each
        weight tensor and over each layer input ``A_l``.
        """
        L = self.num_layers
        n = cache.outputs.shape[0]
        w_sq = np.zeros((n, L))
        a_sq = np.zeros((n, L))
        delta = np.asarray(seed, dtype=np.float64) * self.output_scale
        for i in reversed(range(L)):
            if i < L - 1:
                delta = delta * clipped_relu_deriv(cache.pre[i])
            # d(seed.Z)/dW_i is the outer product A_i[b] x delta[b]
            w_sq[:, i] = np.sum(cache.inputs[i] ** 2, axis=1) * np.sum(delta**2, axis=1)
            g_in = delta @ self.w[i].T
            a_sq[:, i] = np.sum(g_in**2, axis=1)
            delta = g_in
        return w_sq, a_sq


def mismatch_probability(fl_model, fx_model, inputs) -> float:
    """Fraction of samples on which the two models predict different labels."""
    x = np.asarray(inputs, dtype=np.float64)
    if x.shape[0] == 0:
        raise DomainError("mismatch probability of an empty set is undefined")
    return float(np.mean(fl_model.predict(x) != fx_model.predict(x)))


# -- data ------------------------------------------------------------------


@dataclass
class Dataset:
    x_train: np.ndarray
    y_train: np.ndarray
    x_val: np.ndarray
    y_val: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray
    num_classes: int

    @property
    def dim(self) -> int:
        return self.x_train.shape[1]


def make_blobs(
    seed: int,
    num_classes: int = 4,
    dim: int = 16,
    n_train: int = 4000,
    n_val: int = 1000,
    n_test: int = 2000,
    separation: float = 0.5,
    clusters_per_class: int = 1,
) -> Dataset:
    """Overlapping Gaussian clusters, scaled into ``[0, 1]``.

    Each class owns ``clusters_per_class`` clusters whose means are drawn from
    ``N(0, separation^2 I)``; samples add unit noise. Several clusters per
    class make the decision regions non-convex. The affine scaling uses
    training-set statistics only.
    """
    rng = np.random.default_rng(seed)
    means = rng.normal(0.0, separation, size=(num_classes * clusters_per_class, dim))

    def draw(n):
        c = rng.integers(0, num_classes * clusters_per_class, size=n)
        return means[c] + rng.normal(size=(n, dim)), c % num_classes

    xtr, ytr = draw(n_train)
    xva, yva = draw(n_val)
    xte, yte = draw(n_test)
    lo = np.percentile(xtr, 0.5, axis=0)
    hi = np.percentile(xtr, 99.5, axis=0)

    def scale(x):
        return np.clip((x - lo) / (hi - lo), 0.0, 1.0)

    return Dataset(scale(xtr), ytr, scale(xva), yva, scale(xte), yte, num_classes)


def load_csv_dataset(path, seed: int = 0, val_fraction: float = 0.15, test_fraction: float = 0.2) -> Dataset:
    """Rows of comma-separated features followed by an integer label.

    Features must already lie in ``[0, 2)``, the activation range. The rows
    are split into train/validation/test with a seeded permutation.
    """
    rows = []
    with open(path, newline="") as fh:
        for lineno, rec in enumerate(csv.reader(fh), start=1):
            if not rec or rec[0].lstrip().startswith("#"):
                continue
            try:
                rows.append([float(v) for v in rec[:-1]] + [int(rec[-1])])
            except ValueError:
                raise DomainError(f"{path}:{lineno}: malformed row") from None
    if not rows:
        raise DomainError(f"{path}: no data rows")
    data = np.array(rows, dtype=np.float64)
    x, y = data[:, :-1], data[:, -1].astype(int)
    if x.min() < 0:
        raise DomainError(f"{path}: features must be non-negative")
    perm = np.random.default_rng(seed).permutation(len(y))
    n_test = int(round(test_fraction * len(y)))
    n_val = int(round(val_fraction * len(y)))
    te, va, tr = perm[:n_test], perm[n_test : n_test + n_val], perm[n_test + n_val :]
    return Dataset(x[tr], y[tr], x[va], y[va], x[te], y[te], int(y.max()) + 1)


# -- training --------------------------------------------------------------


@dataclass
class TrainSettings:
    epochs: int = 30
    batch_size: int = 256
    lr_max: float = 0.5
    lr_min: float = 0.005
    theta: float = 0.1

    def lr(self, epoch: int) -> float:
        """Geometric decay from ``lr_max`` (first epoch) to ``lr_min`` (last epoch)."""
        if self.epochs <= 1:
            return self.lr_min
        t = epoch / (self.epochs - 1)
        return self.lr_max * (self.lr_min / self.lr_max) ** t


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    train_loss: float
    test_error: float
    pm: float | None = None
    beta: dict[str, float] = field(default_factory=dict)
    sigma: dict[str, float] = field(default_factory=dict)


@dataclass
class TrainRunLog:
    label: str
    seed: int
    records: list[EpochRecord] = field(default_factory=list)
    aborted: str | None = None
    network: DenseNetwork | None = None
    test_predictions: list[np.ndarray] = field(default_factory=list)
    stats: StatsBundle | None = None

    @property
    def final_test_error(self) -> float:
        return self.records[-1].test_error if self.records else float("nan")

    def to_jsonl(self) -> str:
        lines = []
        for r in self.records:
            rec = {"run": self.label, "seed": self.seed, **r.__dict__}
            lines.append(json.dumps(rec, sort_keys=True))
        if self.aborted:
            lines.append(json.dumps({"run": self.label, "seed": self.seed, "aborted": self.aborted}))
        return "\n".join(lines) + "\n"

    def dump(self, path) -> None:
        Path(path).write_text(self.to_jsonl())


def _cross_entropy(z, y) -> float:
    zmax = z.max(axis=1, keepdims=True)
    lse = np.log(np.sum(np.exp(z - zmax), axis=1)) + zmax[:, 0]
    return float(np.mean(lse - z[np.arange(len(y)), y]))


def train(
    sizes: Sequence[int],
    data: Dataset,
    config: PrecisionConfig | None = None,
    seed: int = 0,
    settings: TrainSettings | None = None,
    reference: TrainRunLog | None = None,
    label: str | None = None,
) -> TrainRunLog:
    """Train from a seeded initialisation with a seeded data order.

    Runs sharing a seed see identical initial weights and mini-batches, so an
    FX run can be paired with its floating twin (``reference``) to log the
    per-epoch mismatch probability on the test set. Floating runs collect
    the gradient statistics needed for precision assignment in ``log.stats``.
    """
    settings = settings or TrainSettings()
    if sizes[0] != data.dim or sizes[-1] != data.num_classes:
        raise ConfigurationError(f"network sizes {list(sizes)} do not match the dataset")
    lr_floor = min(settings.lr(e) for e in range(settings.epochs))
    if config is not None and lr_floor < config.gamma_min * (1 - 1e-12):
        raise ConfigurationError(
            f"learning rate falls to {lr_floor:g}, below gamma_min={config.gamma_min:g} of the configuration"
        )
    net = DenseNetwork.init(sizes, seed, config)
    log = TrainRunLog(label or ("fl" if config is None else "fx"), seed)
    L = net.num_layers
    batch = min(settings.batch_size, len(data.y_train))
    order_rng = np.random.default_rng(seed + 1)
    collect = config is None
    gw_var = [RunningVariance(settings.theta) for _ in range(L)]
    ga_var = [RunningVariance(settings.theta) for _ in range(L)]
    gw_dumps = [[] for _ in range(L)]
    ga_dumps = [[] for _ in range(L)]
    jac = [SpectralEstimate(settings.theta) for _ in range(L)]
    n_a = [0] * L

    for epoch in range(settings.epochs):
        lr = settings.lr(epoch)
        perm = order_rng.permutation(len(data.y_train))
        losses = []
        clip_tot = {}
        try:
            for bstart in range(0, len(perm), batch):
                idx = perm[bstart : bstart + batch]
                xb, yb = data.x_train[idx], data.y_train[idx]
                cache = net.forward(xb)
                loss = _cross_entropy(cache.outputs, yb)
                if not math.isfinite(loss):
                    raise NumericError(f"loss diverged at epoch {epoch + 1}")
                losses.append(loss * len(idx))
                res = net.backward(cache, yb)
                for k, (c, t) in res.clip_counts.items():
                    pc, pt = clip_tot.get(k, (0, 0))
                    clip_tot[k] = (pc + c, pt + t)
                if collect:
                    for i in range(L):
                        update_running_variance(gw_var[i], res.weight_grads[i])
                        update_running_variance(ga_var[i], res.act_grads[i])
                        if bstart == 0:
                            update_square_jacobian(jac[i], cache.inputs[i], res.act_derivs[i])
                            n_a[i] = res.act_grads[i].size
                for i in range(L):
                    net.sgd_update(i, lr, res.weight_grads[i])
        except NumericError as exc:
            log.aborted = str(exc)
            logger.warning("run %s aborted: %s", log.label, exc)
            break
        preds = net.predict(data.x_test)
        rec = EpochRecord(
            epoch + 1,
            lr,
            math.fsum(losses) / len(perm),
            float(np.mean(preds != data.y_test)),
        )
        if reference is not None and epoch < len(reference.test_predictions):
            rec.pm = float(np.mean(preds != reference.test_predictions[epoch]))
        rec.beta = {k: c / t for k, (c, t) in sorted(clip_tot.items())}
        if collect:
            for i in range(L):
                gw_dumps[i].append(gw_var[i].sigma)
                ga_dumps[i].append(ga_var[i].sigma)
                rec.sigma[f"gw{i + 1}"] = gw_var[i].sigma
                rec.sigma[f"ga{i + 1}"] = ga_var[i].sigma
        log.records.append(rec)
        log.test_predictions.append(preds)
    log.network = net
    if collect and log.records:
        layers = []
        for i in range(L):
            positive = [s for s in gw_dumps[i] if s > 0]
            layers.append(
                LayerStats(
                    sigma_w_min=min(positive) if positive else None,
                    sigma_w_max=max(gw_dumps[i]),
                    sigma_a_max=max(ga_dumps[i]),
                    lambda_max=jac[i].lambda_max,
                    n_w=int(net.w_acc[i].size),
                    n_a=int(n_a[i]),
                )
            )
        log.stats = StatsBundle(layers, network="dense-" + "-".join(map(str, sizes)))
    return log
