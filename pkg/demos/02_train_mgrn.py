"""Train a GRU and an mGRN on the same path and compare them with the oracle.

Each series keeps its own small marginal recurrent state before a joint layer
mixes them. Training is minibatch Adam with early stopping on
the validation split. Takes about a minute on one core.

    python demos/02_train_mgrn.py
"""
from mgrnlab.oracle import min_mse
from mgrnlab.params import DimPlan, ModelSpec, count_params, grouping_from_token
from mgrnlab.simgen import generate_path
from mgrnlab.training import TrainConfig, evaluate, make_windows, split, train

path = generate_path(("BA", "CAT"), steps=20_000, seed=3)
ds = split(make_windows(path))
cfg = TrainConfig(lr=1e-3, max_epochs=30, patience=5)

models = {
    "GRU(16)": ModelSpec.gru(16, 16),
    "mGRN total split, lam=2": ModelSpec.mgrn(grouping_from_token("total-split", 16), DimPlan(1, 2)),
}
oracle = min_mse(path)
print(f"oracle test MSE {oracle:.4f}")
for name, spec in models.items():
    ckpt, hist = train(spec, ds, cfg)
    test = evaluate(ckpt, ds, "test")
    print(f"{name:26s} params {count_params(spec):5d}  epoch {ckpt.epoch:3d}/{len(hist)}  "
          f"test {test:.4f}  excess {100 * (test - oracle) / oracle:+.2f}%")
