"""A single attention block as a vector field, integrated with explicit Euler.

Run with ``python demos/01_flow_and_step_size.py``.  Takes a few seconds.
"""

# %% build a block whose projections all start at spectral norm 1
import numpy as np

from odeflow import data, models
from odeflow import stability as stb
from odeflow.integrator import euler_integrate

model = models.OdeViT.create(dim=64, heads=4, mlp_ratio=2, num_classes=4, seed=0)
block = model.block
for name, w in block.projection_matrices()[:3]:
    print(f"{name:10s} sigma_max = {np.linalg.svd(w, compute_uv=False)[0]:.6f}")

# %% embed one synthetic image: 16 patches + CLS = 17 tokens of width 64
split = data.gen_synthetic(8, num_classes=4, seed=0)
x0 = models.patchify(split.normalized([0]), model.embedder).data
print("initial state", x0.shape, "norm", round(float(np.linalg.norm(x0)), 3))

# %% the same field, integrated with more and more steps
ref = euler_integrate(x0, block, 1024, 1.0, record=False).final
for N in (6, 12, 24, 48, 96):
    xN = euler_integrate(x0, block, N, 1.0, record=False).final
    print(f"N={N:3d}  distance to N=1024: {np.linalg.norm(xN - ref):.5f}")
# first order: each doubling of N roughly halves the distance

# %% how far can the coarse grid drift?  local Lipschitz constant and second derivative
L = stb.local_lipschitz(block, x0)
cn = stb.estimate_cn_sup(block, euler_integrate(x0, block, 16, 1.0))
err = stb.empirical_err(block, x0, 16, 1024)
print(f"L ~ {L:.3f}, C_N ~ {cn:.4f}")
print(f"measured error at N=16: {err:.5f}   bound: {stb.bound_prop1(L, cn, 16):.5f}")

# %% stability of the flow around this input
lam, t_lyap = stb.lyapunov_max(block, x0, N=24)
print(f"largest Lyapunov exponent {lam:+.4f}, Lyapunov time {t_lyap:.2f}")
print(f"closed-form bound with R=10, L=0.5: {stb.closed_form_for(block, 24, R=10.0, L=0.5):.3e}")
