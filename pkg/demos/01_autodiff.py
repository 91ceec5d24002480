"""Reverse-mode gradients on a tape, checked against central differences.

Run: python3 demos/01_autodiff.py
"""
import numpy as np

from mhim_mil import tensor as T
from mhim_mil.models import build_model
from mhim_mil.tensor import Tape, finite_diff_check
from mhim_mil.trainer import classification_loss

# A tape records every op performed on tensors that need gradients.
w = T.Tensor([[0.5, -1.0]], requires_grad=True)
with Tape() as tape:
    loss = T.sum_all(T.tanh(w) * w)
tape.backward(loss)
print("loss", loss.item(), "grad", w.grad)

# The same machinery drives whole models.  Compare against finite differences.
x = np.random.default_rng(0).normal(size=(12, 16))
for kind in ("gated", "msa"):
    model = build_model(kind, 16, 8, 8, 2, 2, seed=np.random.default_rng(1))
    err = finite_diff_check(
        lambda p: classification_loss(model.with_params(p).forward(x).probability, 1), model.params)
    print(f"{kind:5s} model: max relative gradient error {err:.2e}")
