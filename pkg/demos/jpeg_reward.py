"""How the compressibility reward sees images.

Runs the differentiable JPEG round trip next to a hard-rounding reference,
then scores a few hand-made images. Takes a second or two.

    python demos/jpeg_reward.py
"""

import numpy as np

from ridiff import tensor as T
from ridiff.rewards import JpegPipelineConfig, diff_jpeg, jpeg_reference, reward_compress

side = np.arange(16)
images = {
    "flat": np.full((16, 16), 0.4),
    "gradient": np.tile(np.linspace(0.1, 0.9, 16), (16, 1)),
    "stripes": np.tile((side % 4 < 2) * 0.6 + 0.2, (16, 1)),
    "checkerboard": (np.add.outer(side, side) % 2) * 0.8 + 0.1,
    "noise": np.random.default_rng(0).random((16, 16)),
}

for q in (80, 10):
    cfg = JpegPipelineConfig(quality=q)
    print(f"\nquality {q}")
    print(f"{'image':>14} {'reward':>10} {'soft vs hard':>14} {'nonzero coefs':>14}")
    for name, img in images.items():
        hard, levels = jpeg_reference(img, q)
        soft = diff_jpeg(img, cfg).data
        rel = np.linalg.norm(soft - hard) / np.linalg.norm(hard)
        r = reward_compress(img, cfg).item()
        print(f"{name:>14} {r:10.4f} {rel:14.4f} {np.count_nonzero(levels):14d}")

# The reward is differentiable, so its gradient points at the pixels that
# survive quantization worst. For the noise image these are spread evenly.
x = T.Tensor(images["noise"].reshape(1, 256), requires_grad=True)
g = T.backward(T.tsum(reward_compress(x, JpegPipelineConfig(quality=10)))).get(x)
print("\ngradient norm on the noise image at q10:", round(float(np.linalg.norm(g)), 4))
