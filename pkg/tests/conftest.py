import numpy as np
import pytest

from segnas.config import SearchConfig
from segnas.shapesworld import DatasetSpec
from segnas.tensor import Tape, Tensor


def finite_difference_check(loss_fn, params, n_coords=10, h=1e-5, tol=1e-4, seed=0):
    """Central finite differences vs. one backward sweep.

    loss_fn() must rebuild the forward pass from the current param values
    and return a scalar Tensor.  Checks n_coords random coordinates of each
    tensor in `params`; relative error uses a floor so near-zero gradients
    are compared absolutely.
    """
    rng = np.random.default_rng(seed)
    tape = Tape()
    with tape:
        loss = loss_fn()
        tape.backward(loss)
    grads = {id(p): np.array(p.grad, copy=True) for p in params}
    for p in params:
        assert p.grad is not None, "parameter did not receive a gradient"
        flat = p.data.reshape(-1)
        coords = rng.choice(flat.size, size=min(n_coords, flat.size), replace=False)
        for c in coords:
            keep = flat[c]
            flat[c] = keep + h
            f_plus = loss_fn().item()
            flat[c] = keep - h
            f_minus = loss_fn().item()
            flat[c] = keep
            numeric = (f_plus - f_minus) / (2.0 * h)
            analytic = grads[id(p)].reshape(-1)[c]
            err = abs(numeric - analytic) / max(abs(numeric), abs(analytic), 1e-2)
            assert err < tol, (
                f"gradient mismatch at coord {c}: numeric={numeric:.8e} analytic={analytic:.8e} err={err:.2e}"
            )


def rand_tensor(rng, shape, requires_grad=True, scale=1.0):
    return Tensor(rng.standard_normal(shape) * scale, requires_grad=requires_grad)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def tiny_dataset(**overrides) -> DatasetSpec:
    base = dict(height=32, width=64, train=8, val=4, test=4, seed=3)
    base.update(overrides)
    return DatasetSpec(**base)


def tiny_config(**overrides) -> SearchConfig:
    base = dict(
        cells=(1, 1, 1),
        nodes_per_cell=2,
        initial_channels=4,
        agg_channels=8,
        epochs=3,
        warmup_epochs=1,
        batch_size=4,
        gamma=0.01,
        retrain_epochs=1,
        bench_reps=3,
        bench_warmup=1,
        seed=7,
        dataset=tiny_dataset(),
    )
    base.update(overrides)
    return SearchConfig(**base)


def unit_table(config) -> "LatencyTable":
    """A synthetic all-ones table covering the configured network."""
    from segnas.latency import LatencyTable, network_plan, plan_keys

    return LatencyTable({k: 1.0 for k in plan_keys(network_plan(config))}, {"synthetic": True})


def ramp_table(config) -> "LatencyTable":
    """Synthetic table with distinct, deterministic positive costs."""
    from segnas.latency import LatencyTable, network_plan, plan_keys

    keys = plan_keys(network_plan(config))
    return LatencyTable({k: 1.0 + 0.25 * i for i, k in enumerate(keys)}, {"synthetic": True})
