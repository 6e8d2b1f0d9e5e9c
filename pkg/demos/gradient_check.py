"""
Checking the gradient engine against finite differences
========================================================

Builds a small graph by hand, backpropagates, and compares every parameter
gradient to a central difference.
"""
import numpy as np

from scenedecomp.gradcore import Graph, backward, fd_check

rng = np.random.default_rng(0)

# a one-layer attention block over 5 tokens
g = Graph()
x = g.const(rng.standard_normal((5, 4)))
wq = g.param(rng.standard_normal((4, 4)))
wk = g.param(rng.standard_normal((4, 4)))
scores = g.matmul(g.matmul(x, wq), g.transpose(g.matmul(x, wk), (1, 0)))
probs = g.apply("softmax", g.scale(scores, 0.5), axis=-1)
loss = g.mean(g.square(g.matmul(probs, x)))

grads = backward(g, loss)
print("loss", g.value(loss))
for name, node in [("wq", wq), ("wk", wk)]:
    print(name, "grad norm %.4f" % np.linalg.norm(grads[node]),
          "fd rel. error %.2e" % fd_check(g, loss, node))
