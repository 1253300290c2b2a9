"""The five input variants built from one detection: full, fg_c, fg_m, bg_s, bg_b.

A synthetic 64x48 image holds a bright disc on a striped background. The
detection's box and mask describe the disc. Outputs are written as PNGs to
a temporary folder, or to the folder given as the first argument.

Run:  python demos/decomposition_views.py [out_dir]
"""

import sys
import tempfile
from pathlib import Path

import numpy as np

from l2r2.decomposition import DetectionRecord, PixelBuffer, ViewKind, apply_view, encode_rle, fallback_gate, save_image

W, H = 64, 48
yy, xx = np.mgrid[:H, :W]
image = np.zeros((H, W, 3), np.uint8)
image[..., 2] = np.where((xx // 4) % 2 == 0, 200, 40)
disc = (xx - 20) ** 2 + (yy - 24) ** 2 <= 10**2
image[disc] = (250, 220, 30)

ys, xs = np.nonzero(disc)
bbox = (xs.min() / W, ys.min() / H, (xs.max() + 1) / W, (ys.max() + 1) / H)
det = DetectionRecord("demo", "a yellow disc", 0.85, bbox, encode_rle(disc))

out = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(tempfile.mkdtemp())
out.mkdir(parents=True, exist_ok=True)
for kind in ViewKind:
    view = apply_view(kind, PixelBuffer(image), det)
    save_image(out / f"{kind.value}.png", view)
    print(f"{kind.value:5s} {view.width}x{view.height}")
print(f"written to {out}")

# a weak detection falls back to the full image
weak = DetectionRecord("demo", "a yellow disc", 0.2, bbox)
print("gate at tau=0.3:", "decompose" if fallback_gate([weak], 0.3) else "use full image")
