# Reverse-mode autodiff and the self-supervised losses
# Every model in loglearn is built from a small tensor library with eager
# reverse-mode differentiation. This script checks a gradient by hand and
# evaluates a few losses on tiny inputs.
import numpy as np

from loglearn import autodiff as ad
from loglearn import losses as L
from loglearn.autodiff import Tensor

# 1. A scalar function of a matrix and its gradient
rng = np.random.default_rng(0)
w = Tensor(rng.standard_normal((3, 2)), requires_grad=True)
x = rng.standard_normal((4, 3))
y = ad.tanh(Tensor(x) @ w).sum()
(g,) = ad.gradients(y, [w])
print("f(w) =", round(y.item(), 6))

# 2. Central differences agree with the analytic gradient
eps = 1e-6
num = np.zeros_like(w.data)
for i in np.ndindex(w.shape):
    hi, lo = w.data.copy(), w.data.copy()
    hi[i] += eps
    lo[i] -= eps
    num[i] = (np.tanh(x @ hi).sum() - np.tanh(x @ lo).sum()) / (2 * eps)
print("max |analytic - numeric| =", float(np.abs(g - num).max()))

# 3. Losses on hand-sized inputs
print("reconstruction:", L.ae_loss([1.0, 2.0], [0.0, 0.0]).scalar)            # squared error 5
print("KL to N(0, 1):", L.vae_kl_loss([2.0], [1.0]).scalar)                  # mu^2 / 2 = 2
print("discriminator at 0.5:", L.aae_discriminator_loss([0.5], [0.5]).scalar)  # 2 ln 2
print("triplet (violated):", L.triplet_loss([[0.0]], [[2.0]], [[1.0]], margin=0.5).scalar)

# 4. Losses combine into one objective with named, weighted components
total = L.combine(L.ae_loss([1.0, 2.0], [0.0, 0.0]), [(0.1, L.ar_loss(np.zeros((1, 4)), np.ones((1, 4))))])
print("combined:", total.scalar, total.components)
