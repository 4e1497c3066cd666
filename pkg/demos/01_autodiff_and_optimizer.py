"""Walk through the tape-based tensor engine and the Adam optimizer.

Builds a two-layer network by hand, checks its gradients against finite
differences, then fits a small regression problem.
"""

import numpy as np

from fedrecover import tensor as T
from fedrecover.optim import Adam
from fedrecover.tensor import Tensor

rng = np.random.default_rng(0)

# a scalar expression and its adjoints
x = Tensor(rng.normal(size=(3, 4)))
w = Tensor(rng.normal(size=(4, 2)))
out = T.sum_all(T.relu(T.matmul(x, w)))
T.backward(out)
print("value:", float(out.data))
print("dx has shape", x.grad.shape, "and dw has shape", w.grad.shape)

# the engine travels the tape exactly once per node, so reusing a tensor
# twice accumulates both paths
a = Tensor(np.array([1.0, 2.0]))
b = T.add(T.mul(a, a), a)  # a^2 + a -> gradient 2a + 1
T.backward(T.sum_all(b))
print("gradient of sum(a^2 + a):", a.grad, "(expect 2a + 1 =", 2 * a.data + 1, ")")

# finite differences agree with the tape
params = {
    "w1": Tensor(rng.normal(size=(4, 8)) * 0.5),
    "b1": Tensor(np.zeros(8)),
    "w2": Tensor(rng.normal(size=(8, 1)) * 0.5),
}
inputs = rng.normal(size=(16, 4))
targets = rng.normal(size=(16, 1))


def loss():
    h = T.relu(T.add(T.matmul(Tensor(inputs), params["w1"]),
                     T.broadcast_to(T.reshape(params["b1"], (1, 8)), (16, 8))))
    pred = T.matmul(h, params["w2"])
    diff = T.sub(pred, Tensor(targets))
    return T.mean_all(T.mul(diff, diff))


err = T.check_param_gradients(loss, params, eps=1e-5)
print(f"worst relative gradient error across all parameters: {err:.2e}")

# Adam drives the same loss down; note the optimizer is constructed
# without the parameters and receives them at each step
opt = Adam(lr=0.05)
for step in range(120):
    for p in params.values():
        p.grad = None
    value = loss()
    T.backward(value)
    opt.step(params)
    if step % 30 == 0 or step == 119:
        print(f"step {step:3d}  mse {float(value.data):.4f}")

# no_grad turns the tape off for evaluation passes
with T.no_grad():
    final = float(loss().data)
print("final mse without taping:", round(final, 4))
