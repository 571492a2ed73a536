# A tour of the tape-based autodiff core that every network here is built on.
import numpy as np

from xmgc import tensor_core as tc
from xmgc.tensor_core import Tensor

x = Tensor(np.array([[1.0, -2.0, 3.0]]), requires_grad=True)
w = Tensor(np.array([[0.5, 0.25, -1.0]]), requires_grad=True)

# every op on a tensor that requires grad is appended to the global tape
y = tc.sigmoid(x * w).sum()
print("ops on tape:", [node.op for node in tc.get_tape().nodes])

tc.backward(y)  # walks the tape in reverse, then clears it
print("dy/dx =", x.grad)
print("dy/dw =", w.grad)

# the same numbers by hand: d sigmoid(u)/du = s(1 - s)
s = 1 / (1 + np.exp(-(x.data * w.data)))
print("by hand  ", s * (1 - s) * w.data)

# nothing is recorded under no_grad, which is how inference runs
with tc.no_grad():
    tc.relu(x * w)
print("tape after no_grad:", len(tc.get_tape()))

# convolution and its transpose: a stride-2 4x4 kernel halves, the transpose doubles back
img = Tensor(np.random.default_rng(0).standard_normal((1, 3, 16, 16)))
k = Tensor(np.random.default_rng(1).standard_normal((8, 3, 4, 4)) * 0.1)
down = tc.conv2d(img, k, Tensor(np.zeros(8)), stride=2, padding=1)
up = tc.conv2d_transpose(down, Tensor(np.random.default_rng(2).standard_normal((8, 3, 4, 4)) * 0.1),
                         Tensor(np.zeros(3)), stride=2, padding=1)
print("conv:", img.shape, "->", down.shape, "-> deconv:", up.shape)
tc.get_tape().clear()


# numerical check of a conv -> batchnorm -> tanh stack against central differences
def builder(rng):
    proj = rng.standard_normal((2, 4, 3, 3))

    def fn(x, k):
        h = tc.batchnorm2d(tc.conv2d(x, k, Tensor(np.zeros(4)), 2, 1), Tensor(np.ones(4)), Tensor(np.zeros(4)),
                           "train")
        return (tc.tanh(h) * Tensor(proj)).sum()

    return fn, [rng.standard_normal((2, 3, 6, 6)), rng.standard_normal((4, 3, 4, 4))]


report = tc.gradcheck(builder, tolerance=1e-3, seed=0)
print(f"gradcheck passed={report.passed} worst relative error={report.worst_relative_error:.2e}")
