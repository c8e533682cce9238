"""JaSMin: penalising peaked attention rows.

Each row of an attention map contributes log(top1 / top_k).  Uniform rows
cost nothing, sharp rows cost a lot.
"""

# %%
import math

import numpy as np

from odeflow import diffcore as dc
from odeflow import dynamics
from odeflow.stability import jasmin_loss

uniform = np.full((1, 4, 4), 0.25)
print("uniform map:", float(jasmin_loss([uniform]).data))

hand = np.array([[[0.5, 0.5], [0.9, 0.1]]])
print("hand case:", float(jasmin_loss([hand], k=2).data), "= log 9 =", math.log(9))

# %% attention maps of a freshly initialised block on random tokens
p = dynamics.OdeBlockParams.zeros(32, 4, 2)
dynamics.spectral_init(p, seed=1)
x = np.random.default_rng(7).standard_normal((2, 9, 32)) * 2
maps = dynamics.attention_maps(x, p).P
print("maps", maps.shape, "rows sum to", maps.data.sum(-1).min().round(12))
print("JaSMin at init:", round(float(jasmin_loss([maps]).data), 4))

# %% gradient descent on the logits alone flattens the rows
Z = dc.Tensor(np.random.default_rng(3).standard_normal((2, 5, 5)) * 2, requires_grad=True)
for step in range(11):
    with dc.Graph() as g:
        loss = jasmin_loss([dc.softmax_rows(Z)])
    if step % 2 == 0:
        print(f"step {step:2d}  loss {float(loss.data):.4f}")
    Z.grad = None
    g.backward(loss)
    Z.data -= 0.1 * Z.grad
