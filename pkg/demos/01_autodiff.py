# Reverse-mode autodiff on a tiny two-layer model, checked against finite differences.
import numpy as np

from lafavlad.numerics import DiffArray, Tape, leaky_relu, log_softmax, matmul, multiply, reduce
from lafavlad.numerics.gradcheck import check_gradients

rng = np.random.default_rng(0)
x = DiffArray(rng.normal(size=(5, 3)))
w1 = DiffArray(rng.normal(size=(3, 4)), requires_grad=True)
w2 = DiffArray(rng.normal(size=(4, 2)), requires_grad=True)
onehot = DiffArray(np.eye(2)[[0, 1, 1, 0, 1]])


def loss():
    h = leaky_relu(matmul(x, w1), 0.2)
    logp = log_softmax(matmul(h, w2), -1)
    return multiply(reduce(multiply(logp, onehot), None, "sum"), DiffArray(-1 / 5))


# operations recorded inside the tape are replayed backwards
with Tape() as tape:
    out = loss()
    tape.backward(out)
print("loss", out.item())
print("dL/dw2 from the tape:\n", w2.grad)

# every entry of both weights is compared with a central difference
print("worst relative error vs finite differences:", check_gradients(loss, [w1, w2]))
