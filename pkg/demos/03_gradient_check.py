"""Compare hand-written backpropagation with central differences.

Every architecture has an explicit backward pass; this checks one small
random instance per architecture and reports the worst relative error.

    python demos/03_gradient_check.py
"""
import numpy as np

from mgrnlab.cells import loss_and_grad
from mgrnlab.params import DimPlan, GroupingScheme, ModelSpec, init_params
from mgrnlab.tensor import RngStream

rng = np.random.default_rng(0)
specs = {
    "gru": ModelSpec.gru(4, 3, lookback=3),
    "lstm": ModelSpec.lstm(4, 3, lookback=3),
    "mgrn": ModelSpec.mgrn(GroupingScheme(((0, 1), (2, 3))), DimPlan(2, 2), lookback=3),
    "cwlstm": ModelSpec.cwlstm(GroupingScheme(((0, 1), (2, 3))), DimPlan(1, 2), lookback=3),
}
h = 1e-5
for arch, spec in specs.items():
    params, _ = init_params(spec, RngStream(1))
    params.flat[:] = rng.normal(scale=0.5, size=params.flat.size)
    x = rng.normal(size=(2, spec.lookback, spec.n_inputs))
    y = rng.normal(size=2)
    _, grad = loss_and_grad(spec, params, x, y)
    worst = 0.0
    for i in range(params.flat.size):
        keep = params.flat[i]
        params.flat[i] = keep + h
        up, _ = loss_and_grad(spec, params, x, y)
        params.flat[i] = keep - h
        down, _ = loss_and_grad(spec, params, x, y)
        params.flat[i] = keep
        num = (up - down) / (2 * h)
        worst = max(worst, abs(num - grad.flat[i]) / max(abs(num), abs(grad.flat[i]), 1e-8))
    print(f"{arch:7s} {params.flat.size:4d} parameters, worst relative error {worst:.2e}")
