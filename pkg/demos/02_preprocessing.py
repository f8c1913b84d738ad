"""
Windowing, resampling and patches
=================================

Clamp HU values to the bone window, resample to 0.8 mm and cut training
and inference patches.
"""
import numpy as np

from csaseg.preprocess import (PreprocessConfig, extract_patches, preprocess_pair, resample,
                               stitch_patches, tile_origins)
from csaseg.volume import SyntheticSpec, generate_synthetic

cfg = PreprocessConfig(patch_size=32)

# A scan acquired at 1.0 mm: generate at 0.8 mm and resample to fake it.
vol, lab = generate_synthetic(SyntheticSpec(seed=1, extents=(64, 64, 64)))
coarse = resample(vol, (1.0, 1.0, 1.0))
coarse_lab = resample(lab, (1.0, 1.0, 1.0))
print("acquired:", coarse.extents, coarse.spacing)

pv, pl = preprocess_pair(coarse, coarse_lab, cfg)
print("preprocessed:", pv.extents, pv.spacing, "range %.2f..%.2f" % (pv.data.min(), pv.data.max()))
print("labels still binary:", set(np.unique(pl.labels)) <= {0, 1})

# Training patches are biased towards bone.
patches = list(extract_patches(pv, pl, cfg, seed=0, count=200))
print("patches with bone: %d / %d" % (sum(p.label.any() for p in patches), len(patches)))

# Inference tiles cover every voxel; stitching averages overlaps.
origins = tile_origins(pv.extents, 32, overlap=8)
fake = [np.stack([1 - pv.data[tuple(slice(a, a + 32) for a in o)]] * 2) for o in origins]
full = stitch_patches(fake, origins, pv.extents)
print("%d tiles, stitched shape %s, exact:" % (len(origins), full.shape),
      np.allclose(full[0], 1 - pv.data))
