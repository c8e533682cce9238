"""Distilling a four-block ViT into one shared ODE block.

A scaled-down version of the desk experiment (D=32, 600 training images) so it
finishes in a few minutes.  Pass ``--full`` for the 2000/500, D=64 setting.
"""

# %%
import sys
import time

import numpy as np

from odeflow import data, distill, integrator, models

full = "--full" in sys.argv
n_train, n_eval, dim, epochs = (2000, 500, 64, 30) if full else (600, 200, 32, 12)

train = data.gen_synthetic(n_train, 4, 32, seed=0)
evals = data.gen_synthetic(n_eval, 4, 32, seed=1, split="eval").with_stats(train)
t0 = time.time()

# %% 1. a conventional teacher, trained with cross-entropy
teacher = models.TeacherViT.create(dim=dim, heads=4, depth=4, mlp_ratio=2, num_classes=4, seed=0)
log = distill.train_teacher(teacher, train, distill.TrainConfig(epochs=epochs, lr=1e-3), evals)
print(f"teacher eval accuracy {log[-1]['acc_eval']:.3f}  ({time.time() - t0:.0f}s)")

# %% 2. the student shares embedder and head; only the block is trained
student = models.OdeViT.from_teacher(teacher, mlp_ratio=2, N=24)
res = distill.train_distill(student, teacher, train, distill.DistillConfig(epochs=epochs, lr=1e-3), evals)
print("checkpoint steps for the four teacher layers:", res.schedule.step_indices)
last = res.log[-1]
print("per-checkpoint MSE", np.round(last["loss_mse"], 4), "bounds", np.round(last["bound"], 4))

t_logits = distill.model_logits(teacher, evals)
s_logits = distill.model_logits(student, evals)
agree = np.mean(models.predict(t_logits) == models.predict(s_logits))
print(f"student accuracy {distill.accuracy(s_logits, evals.labels):.3f}, agreement {agree:.3f}  "
      f"({time.time() - t0:.0f}s)")

# %% 3. close to the teacher's CLS means same prediction
table = distill.contraction_analysis(res.records, n_bins=6)
for b in table.bins:
    print(f"distance {b.lo:5.2f}-{b.hi:5.2f}  n={b.count:3d}  agreement {b.agreement:.2f}")
print(f"spearman {table.spearman:.2f}; agreement >= 95% up to distance {table.threshold:.2f}")

# %% 4. fewer or more Euler steps at inference
x0 = distill.embed_split(student.embedder, evals)
rows = integrator.step_sweep(x0, student.block, [18, 21, 24, 27, 30], student.T, student.head.logits)
for r in rows:
    print(f"N={r.N}  agreement with N=24: {r.agreement:.3f}  mean CLS drift {r.cls_drift.mean():.4f}")
