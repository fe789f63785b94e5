"""
From annotated signal to 128x128 beat images
============================================

Each beat annotation anchors a window 0.3 s before and 0.4 s after the R
peak. The window is mapped to an AAMI class and drawn as a one-pixel
polyline on a 128x128 canvas.
"""

import numpy as np

from ebgame.beats import map_aami, rasterize_beat, segment_record, synth_beat, synth_record

rec = synth_record("demo", ["normal", "normal", "inverted_qrs", "missing_p", "scaled"], seed=2)
beats = segment_record(rec)
for b in beats:
    print(f"R at {b.r_index:4d}  symbol {b.mit_code}  AAMI {map_aami(b.mit_code)}  "
          f"window {b.samples.size} samples")

# %%
# A coarse text rendering of two images (every 4th row and column).


def show(img, step=4):
    for row in img[::step]:
        print("".join("#" if v else "." for v in row.reshape(-1, step).max(axis=1)))


rng = np.random.default_rng(0)
for kind in ("normal", "inverted_qrs"):
    print(kind)
    show(rasterize_beat(synth_beat(kind, rng)))
