# coding: utf-8

# # The tensor engine in five minutes
#
# Every op builds a node holding its parents and a closure that maps the
# upstream gradient to one gradient per parent.

import numpy as np

from pipmn import autodiff as ad
from pipmn.autodiff import Parameter, Tensor

# A linear layer followed by GELU and a sum.

rng = np.random.default_rng(0)
x = Tensor(rng.standard_normal((2, 3, 4)))
w = Parameter("w", rng.standard_normal((4, 5)))
b = Parameter("b", np.zeros(5))
loss = ad.tensor_sum(ad.gelu(ad.linear(x, w, b)))
ad.backward(loss)
print("loss", float(loss.data))
print("dL/db", b.grad)

# The graph is freed after backward; a second call is an error.

try:
    ad.backward(loss)
except RuntimeError as exc:
    print("second backward:", exc)

# Finite differences in 64-bit confirm the closures. `grad_check` takes a
# zero-argument function so it can rebuild the graph after each nudge.

with ad.precision(np.float64):
    x = Parameter("x", rng.standard_normal((2, 4, 6)))
    g = Parameter("g", np.ones(6))
    beta = Parameter("beta", np.zeros(6))
    k = Parameter("k", rng.standard_normal((4, 3)))
    kb = Parameter("kb", np.zeros(4))
    proj = Tensor(rng.standard_normal((2, 4, 6)))

    def f():
        h = ad.layer_norm(x, g, beta)
        return ad.tensor_sum(ad.mul(ad.depthwise_conv1d(h, k, kb), proj))

    print(ad.grad_check(f, [x, g, beta, k, kb], name="layer_norm+conv"))

# The full suite is what `pipmn gradcheck` runs.

from pipmn.gradcheck import format_reports, run_suite
print(format_reports(run_suite()))
