"""Shared generators for randomized statistics bundles."""

import numpy as np

from fxprec.assigner import act_grad_step_bound
from fxprec.fxnum import floor_pow2_strict
from fxprec.stats import LayerStats, StatsBundle


def random_stats(rng: np.random.Generator, n_layers=None, shortcuts=None, extended=None) -> StatsBundle:
    """A statistics bundle for which a configuration exists.

    Gains span at most ten octaves (offsets <= 5) and the learning-rate floor
    is small enough that every accumulator step fits below its range;
    gradient ranges lie above their steps.
    """
    n_layers = n_layers or int(rng.integers(1, 9))
    shortcuts = int(rng.integers(0, 3)) if shortcuts is None else shortcuts
    layers = []
    for i in range(n_layers + shortcuts):
        sc = i >= n_layers
        w_min = float(10 ** rng.uniform(-6, -1))
        layer = LayerStats(
            e_w=float(10 ** rng.uniform(0, 3)),
            sigma_w_min=w_min,
            sigma_w_max=w_min * float(10 ** rng.uniform(0, 2)),
            n_w=int(rng.integers(1, 10**6)),
            shortcut=sc,
        )
        if not sc:
            layer.e_a = float(10 ** rng.uniform(0, 3))
            layer.lambda_max = float(10 ** rng.uniform(-2, 4))
            layer.n_a = int(rng.integers(1, 10**6))
            # the activation-gradient range must sit above its step
            bound = act_grad_step_bound(floor_pow2_strict(w_min / 4), layer.lambda_max, layer.n_w, layer.n_a)
            layer.sigma_a_max = bound * float(10 ** rng.uniform(0, 3))
        layers.append(layer)
    return StatsBundle(
        layers,
        network="random",
        extended_sign=bool(rng.integers(0, 2)) if extended is None else extended,
        b_min=int(rng.integers(2, 9)),
        gamma_min=float(10 ** rng.uniform(-5, -3)),
    )
