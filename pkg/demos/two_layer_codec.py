"""End to end at toy scale: task proxy, base layer, enhancement layer, bitstream.

The training schedule is cut short so it finishes in about a minute;
the numbers only illustrate the workflow.

Run: python3 demos/two_layer_codec.py
"""

import torch

from scalecodec.codec import decode_image, encode_image, evaluate_base, evaluate_reconstruction
from scalecodec.config import ExperimentConfig
from scalecodec.data import datasets_for
from scalecodec.evaluation import psnr
from scalecodec.taskproxy import train_task_proxy
from scalecodec.training import train_base, train_enhancement

config = ExperimentConfig(synthetic_val=200,
                          stage1_epochs=8, stage2_epochs=4, decay_interval=2, preview_epochs=2)

train, val = datasets_for(config)

proxy = train_task_proxy(train, val, config, seed=0)
print(f"task proxy accuracy {proxy.accuracy:.3f}")

base = train_base(train, proxy, config, lambda_base=10.0)
print("base layer:", evaluate_base(base, val))

# the base is frozen from here on; only preview and residual parameters move
enh = train_enhancement(train, base, config, lambda_enh=300.0)
assert enh.params.hash(["base"]) == base.params.hash(["base"])
print("base + enhancement:", evaluate_reconstruction(enh, val))

x = val.images[0]
stream = encode_image(x, enh, "base+enh")
out = decode_image(stream, enh)
print(f"one image: {len(stream)} bytes, label {out['label']} (true {int(val.labels[0])}), "
      f"PSNR {psnr(x, out['reconstruction']):.2f} dB vs preview {psnr(x, out['preview']):.2f} dB")
