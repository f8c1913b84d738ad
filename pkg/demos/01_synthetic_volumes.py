"""
Synthetic fractured bone and the VOL1 container
===============================================

Generate a CT-like volume with its label, write both to disk, read them
back and split a list of case ids into train and test.
"""
import tempfile
from pathlib import Path

import numpy as np
from scipy import ndimage

from csaseg.volume import SyntheticSpec, generate_synthetic, read_volume, split_dataset, write_volume

# Two ellipsoidal bones on a 48^3 grid at 0.8 mm, each cut by a planar gap.
spec = SyntheticSpec(seed=7)
vol, lab = generate_synthetic(spec)
print("extents", vol.extents, "spacing", vol.spacing)
print("intensity range (HU) %.0f .. %.0f" % (vol.data.min(), vol.data.max()))
print("foreground fraction %.3f" % lab.labels.mean())

# A gap may cut a bone in two; overlapping bones can also merge.
_, n = ndimage.label(lab.labels, structure=np.ones((3, 3, 3)))
print("connected fragments:", n)

# Bone is a bright shell around a dim interior close to soft tissue.
shell = lab.labels.astype(bool) & ~ndimage.binary_erosion(lab.labels)
print("mean HU: shell %.0f, interior %.0f, background %.0f" % (
    vol.data[shell].mean(), vol.data[lab.labels.astype(bool) & ~shell].mean(),
    vol.data[lab.labels == 0].mean()))

with tempfile.TemporaryDirectory() as d:
    write_volume(vol, Path(d) / "case_image.vol")
    write_volume(lab, Path(d) / "case_label.vol")
    print("header:", (Path(d) / "case_image.vol").read_bytes().split(b"\n")[0].decode())
    back = read_volume(Path(d) / "case_image.vol")
    print("bit-exact round trip:", back.data.tobytes() == vol.data.tobytes())

train_ids, test_ids = split_dataset(range(103), ratio=0.8, seed=0)
print("split of 103 cases:", len(train_ids), "train /", len(test_ids), "test")
