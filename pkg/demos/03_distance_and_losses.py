"""
Signed distance maps and the training losses
============================================

The surface loss weights each voxel's foreground probability by its signed
distance to the true boundary; the Dice loss measures overlap.
"""
import numpy as np

from csaseg.losses import LossConfig, combined_loss, dice_loss, signed_distance, surface_loss
from csaseg.tensor import Tensor
from csaseg.volume import LabelVolume


def probs(fg):
    fg = np.asarray(fg, np.float32)
    return Tensor(np.stack([1 - fg, fg])[None], requires_grad=True)


# Three voxels, the middle one is bone.
mask = LabelVolume(np.array([0, 1, 0], np.uint8).reshape(1, 1, 3))
sdf = signed_distance(mask)
print("phi:", sdf.phi.ravel())
raw = LossConfig(surface_reduction="sum")
print("surface loss, perfect prediction:", surface_loss(probs([[[0, 1, 0]]]), sdf, raw).item())
print("surface loss, uniform 0.5:       ", surface_loss(probs([[[0.5] * 3]]), sdf, raw).item())

# Distances are in mm and respect anisotropic spacing.
ball = np.zeros((9, 9, 9), np.uint8)
ball[3:6, 3:6, 3:6] = 1
phi = signed_distance(ball, (2.0, 1.0, 1.0)).phi
print("distance above the cube (2 mm axis): %.1f, beside it (1 mm axis): %.1f" % (phi[6, 4, 4], phi[4, 4, 6]))

# A prediction that bleeds outside the cube costs more the further it spreads.
for grow in range(3):
    pred = np.zeros_like(ball, dtype=np.float32)
    pred[3 - grow:6 + grow, 3:6, 3:6] = 1
    p = probs(pred)
    print("spill %d voxel(s): surface %.4f  dice %.4f  combined %.4f" % (
        grow, surface_loss(p, signed_distance(ball)).item(), dice_loss(p, ball).item(),
        combined_loss(p, ball, signed_distance(ball)).item()))

# The surface-loss gradient with respect to the foreground probability is phi itself.
p = probs(np.full((9, 9, 9), 0.5))
surface_loss(p, signed_distance(ball), raw).backward()
print("gradient equals phi:", np.allclose(p.grad[0, 1], signed_distance(ball).phi))
