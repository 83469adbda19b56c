"""
Gradients through a hard peak pick
==================================

The F0 of a frame is the frequency of its strongest salience bin.  That
argmax has no gradient, so the forward pass keeps the hard value and the
backward pass hands the gradient of the binary map to the soft map.
"""

import numpy as np

from diffsep import autodiff as ad
from diffsep.salience import extract_f0

freqs = np.array([100.0, 200.0, 300.0, 400.0])
soft = ad.Value(np.array([[0.1, 0.8, 0.3, 0.2],     # voiced, peak at 200 Hz
                          [0.1, 0.2, 0.25, 0.1]]),  # every bin below 0.3: unvoiced
                requires_grad=True)

f0, binary = extract_f0(soft, threshold=0.3, freqs=freqs)
print("binary maps\n", binary)
print("F0 per frame:", f0.data)

# pull frame 0 towards 250 Hz
loss = ad.sum((f0 - np.array([250.0, 0.0])) ** 2)
ad.backward(loss)
print("dL/dF0 =", 2 * (f0.data - [250.0, 0.0]))
print("dL/dS^a =\n", soft.grad)
print("each row is dL/dF0 times the frequency vector", freqs)
