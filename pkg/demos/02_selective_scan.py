"""The selective SSM block on its own: discretisation, the recurrence, and a
cross-check against the convolution form when parameters do not vary in time."""
# %%
import math

import numpy as np

from stmamba import autodiff as ad
from stmamba.autodiff import Tensor
from stmamba.ssm import (DiscreteParams, SsmParams, causal_convolve, discretize_zoh, lti_kernel,
                         mamba_block_forward, selective_scan)

rng = np.random.default_rng(0)

# %% zero-order hold, hand case: A = -1, Delta = ln 2 halves the state each step
d = discretize_zoh(Tensor([[-1.0]]), Tensor([[1.0]]), Tensor([[math.log(2)]]))
print("A_bar, B_bar =", d.A_bar.item(), d.B_bar.item())

# %% tiny Delta: B_bar tends to Delta * B
for dt in (1e-2, 1e-5, 1e-9):
    d = discretize_zoh(Tensor([[-3.0]]), Tensor([[2.0]]), Tensor([[dt]]))
    print(f"Delta {dt:.0e}: B_bar / Delta = {d.B_bar.item() / dt:.12f}")

# %% with constant parameters the scan is a causal convolution
K, N, L = 3, 4, 10
A0, B0, C0 = rng.uniform(0, 1, (K, N)), rng.normal(size=(K, N)), rng.normal(size=N)
I = rng.normal(size=(K, L))
disc = DiscreteParams(Tensor(np.repeat(A0[..., None], L, -1)), Tensor(np.repeat(B0[..., None], L, -1)))
scan = selective_scan(Tensor(I), disc, Tensor(np.repeat(C0[:, None], L, -1))).data
conv = causal_convolve(I, lti_kernel(A0, B0, C0, L))
print("scan vs convolution, max diff:", np.abs(scan - conv).max())

# %% the full block: input-dependent B, C, Delta; gradients flow to every parameter
params = SsmParams.initialize(K=8, N=4, rng=rng)
x = Tensor(rng.normal(size=(5, 8, 6)), requires_grad=True)  # 5 independent sequences
out = mamba_block_forward(x, params)
ad.backward(ad.mean(ad.mul(out, out)))
for name, t in params.tensors().items():
    print(f"{name:8s} grad norm {np.linalg.norm(t.grad):.3e}")

# %% causality: changing the last input leaves earlier outputs untouched
y = x.data.copy()
y[..., -1] += 10
with ad.no_grad():
    diff = np.abs(mamba_block_forward(Tensor(y), params).data - out.data).max(axis=(0, 1))
print("per-step change:", np.round(diff, 6))
