"""A worked look at the selective scan and the finite-difference checker.

    python demos/scan_and_gradients.py
"""

import numpy as np

from mddfnet.gradcheck import grad_check
from mddfnet.scan import selective_scan
from mddfnet.tensor import Tensor

rng = np.random.default_rng(0)
L, d, N = 6, 2, 3
u = Tensor(rng.standard_normal((L, d)))
delta = Tensor(rng.uniform(0.05, 1.0, (L, d)))
A = Tensor(-rng.uniform(0.5, 2.0, (d, N)))
B, C = Tensor(rng.standard_normal((L, N))), Tensor(rng.standard_normal((L, N)))
D = Tensor(rng.standard_normal(d))

par = selective_scan(u, delta, A, B, C, D).data
seq = selective_scan(u, delta, A, B, C, D, method="sequential").data
print("parallel output:\n", np.round(par, 4))
print("max |parallel - sequential|:", float(np.abs(par - seq).max()))

# analytic input gradient of sum(y) against central differences
err = grad_check(lambda x: selective_scan(x, delta, A, B, C, D).sum(), u, 1e-5)
print(f"gradient check on u: max relative error {err:.2e}")
