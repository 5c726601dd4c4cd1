"""Simulate one benchmark pair and measure how far the best predictor gets.

The target ``100 * y1 * y2`` is heavy tailed: most of its variance is noise
that no model can remove. The oracle uses the true AR parameters, so its test
MSE is the floor every trained model is measured against.

    python demos/01_simulate_and_oracle.py
"""
import numpy as np

from mgrnlab.oracle import min_mse, predict_path, test_rows
from mgrnlab.simgen import generate_path

path = generate_path(("IBM", "KO"), steps=20_000, seed=7)
rows = test_rows(path)
target = path.target[rows]
print(f"{len(path)} rows, {rows.size} test targets")
print(f"target variance on test      {target.var():9.3f}")
print(f"constant (train mean) MSE    {np.mean((target - path.target[:rows[0]].mean()) ** 2):9.3f}")
print(f"oracle MSE                   {min_mse(path, rows):9.3f}")

# the oracle is a conditional mean, so shifting it can only hurt
pred = predict_path(path, rows)
for shift in (-0.5, 0.5):
    print(f"oracle shifted by {shift:+.1f}       {min_mse(path, rows, predictions=pred + shift):9.3f}")
