#!/usr/bin/env python3
"""Export the bundled desk-scale datasets into the repo's data/ directory.

Writes:
  data/digits-images-idx3-ubyte  (1797 x 8 x 8, IDX3)
  data/digits-labels-idx1-ubyte  (1797 labels, IDX1)
  data/natural/*.ppm             (six natural photographs, P6)
"""
import os
import struct

import numpy as np
from skimage import data as skdata
from sklearn.datasets import load_digits

HERE = os.path.dirname(os.path.abspath(__file__))
DATA = os.path.join(HERE, "..", "data")
os.makedirs(os.path.join(DATA, "natural"), exist_ok=True)

d = load_digits()
imgs = np.round(d.images / 16.0 * 255.0).astype(np.uint8)
labels = d.target.astype(np.uint8)
n, h, w = imgs.shape
with open(os.path.join(DATA, "digits-images-idx3-ubyte"), "wb") as f:
    f.write(struct.pack(">IIII", 0x00000803, n, h, w))
    f.write(imgs.tobytes())
with open(os.path.join(DATA, "digits-labels-idx1-ubyte"), "wb") as f:
    f.write(struct.pack(">II", 0x00000801, n))
    f.write(labels.tobytes())
print(f"digits: {n} images {h}x{w}")

for name in ["astronaut", "coffee", "rocket", "chelsea", "cat",
             "immunohistochemistry"]:
    img = getattr(skdata, name)()
    h, w, _ = img.shape
    path = os.path.join(DATA, "natural", f"{name}.ppm")
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode())
        f.write(img.astype(np.uint8).tobytes())
    print(f"{name}: {w}x{h}")
