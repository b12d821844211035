"""Entropy coding a latent with a per-channel discretized logistic model.

Run: python3 demos/entropy_coding.py
"""

import numpy as np
import torch

from scalecodec.entropy import EntropyModel, decode_layer, encode_layer, estimate_rate_bits

# two channels: a tight one centred at 0, a wide one centred at 3
model = EntropyModel(torch.tensor([0.0, 3.0]), torch.log(torch.tensor([0.5, 4.0])), s_max=64)

rng = np.random.default_rng(0)
y = np.stack([rng.choice(np.arange(-64, 65), size=(8, 8), p=model.pmf_table(c)) for c in range(2)])
y = torch.from_numpy(y.astype(np.float32))

payload = encode_layer(y, model)
estimate = float(estimate_rate_bits(y.double(), model))
print(f"estimated {estimate:.1f} bits, coded {8 * len(payload)} bits")

back = decode_layer(payload, model, tuple(y.shape))
print("lossless:", torch.equal(back, y))
