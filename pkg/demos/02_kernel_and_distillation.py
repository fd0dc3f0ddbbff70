"""
The numpy kernel and the distillation loss
==========================================

Build the MNIST teacher and student, check a gradient by finite
differences, and train a student against a teacher for a few steps.
"""

# %%
import os

import numpy as np

from fedsikd import data
from fedsikd import tensor_nn as nn

teacher_arch, student_arch = nn.reference_architectures("mnist")
for arch in (teacher_arch, student_arch):
    print(arch.name, "parameters:", nn.build_model(arch, 0).num_parameters())
    print("  shapes:", arch.shapes)

# %% the distillation loss blends CE with a softened KL term
rng = np.random.default_rng(0)
s, t = rng.normal(size=(4, 10)), rng.normal(size=(4, 10))
y = rng.integers(0, 10, 4)
for lam in (0.0, 0.5, 1.0):
    loss, _ = nn.kd_loss_and_grad(s, t, y, temperature=3.0, kd_weight=lam)
    print(f"lambda={lam}: loss {loss:.4f}")
print("plain CE:", nn.ce_loss_and_grad(s, y)[0])

# %% a finite-difference check on one weight
x = rng.normal(size=(2, 28, 28, 1))
m = nn.build_model(student_arch, 1, dtype=np.float64)
logits, cache = nn.forward(m, x)
proj = rng.normal(size=logits.shape)
dw = nn.backward(m, cache, proj)[0][0]
w = m.layers[0][0]
eps = 1e-5
w[0, 0, 0, 0] += eps
up = (nn.forward(m, x)[0] * proj).sum()
w[0, 0, 0, 0] -= 2 * eps
down = (nn.forward(m, x)[0] * proj).sum()
w[0, 0, 0, 0] += eps
print("analytic", dw[0, 0, 0, 0], "numeric", (up - down) / (2 * eps))

# %% distil a teacher into a student on 2000 images
root = os.environ.get("FEDSIKD_DATA_ROOT", "data")
train, test = data.load_mnist(os.path.join(root, "mnist"))
small, held = train.subset(np.arange(2000)), test.subset(np.arange(1000))
cfg = nn.TrainConfig(batch_size=64, local_epochs=2, learning_rate=0.01)
teacher, _ = nn.sgd_train(nn.build_model(teacher_arch, 0), small, cfg)
plain, _ = nn.sgd_train(nn.build_model(student_arch, 0), small, cfg)
distilled, _ = nn.sgd_train(nn.build_model(student_arch, 0), small, cfg, teacher=teacher)
for name, p in (("teacher", teacher), ("student", plain), ("student+KD", distilled)):
    pred = nn.predict_logits(p, held.features).argmax(1)
    print(f"{name:<11} accuracy {(pred == held.labels).mean():.3f}")
