"""
Dense layers, manual backprop and Adam
======================================

Everything trains in float64 with hand-written gradients. This script checks a
small network against finite differences and takes a few Adam steps.
"""

# %%
import numpy as np

from deeposets.nn import AdamState, GradientTape, adam_step, backward, forward, init_net

net = init_net([3, 8, 8, 2], ["selu", "tanh", "identity"], seed=0)
print([layer.weights.shape for layer in net.layers])

# %% forward with a trace, then backward from an upstream gradient
x = np.array([0.5, -1.0, 2.0])
out, trace = forward(net, x, return_trace=True)
tape = GradientTape.for_net(net)
dx = backward(net, trace, np.array([1.0, 0.0]), tape)
print("output", out, "d out[0] / dx", dx)

# %% compare with central differences on the input
step = 1e-5
fd = np.array([(forward(net, x + step * e)[0] - forward(net, x - step * e)[0]) / (2 * step)
               for e in np.eye(3)])
print("max |analytic - numeric|", np.max(np.abs(dx - fd)))

# %% a few Adam steps fitting a fixed target
params = net.parameters()
opt = AdamState.for_params(params)
target = np.array([0.3, -0.7])
for it in range(200):
    out, trace = forward(net, x, return_trace=True)
    tape = GradientTape.for_net(net)
    backward(net, trace, 2 * (out - target), tape)
    adam_step(params, tape, opt)
    if it % 50 == 0:
        print(it, float(np.sum((out - target) ** 2)), opt.learning_rate())
print("final", forward(net, x))
