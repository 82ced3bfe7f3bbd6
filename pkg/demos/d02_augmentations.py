"""
Views of a volume
=================

Pretraining compares two randomly augmented views. Every view records the
operations that produced it, so a draw can be inspected or replayed.
"""

import numpy as np

from tinc3d import AugmentConfig, derive_rng, make_view

rng = np.random.default_rng(0)
volume = rng.random((8, 48, 48), dtype=np.float32)

cfg = AugmentConfig(output_shape=(8, 32, 32), blur_kernel=9)
view = make_view(volume, cfg, derive_rng(0, "demo", 1))
# The slab depth must already match; crops act within each slice.
print("input", volume.shape, "-> view", view.voxels.shape)
for name, params in view.applied_ops.items():
    print(f"  {name:12s} {params}")

# Named sub-streams make draws reproducible without sharing a global RNG.
again = make_view(volume, cfg, derive_rng(0, "demo", 1))
other = make_view(volume, cfg, derive_rng(0, "demo", 2))
print("\nsame key, same view:", np.array_equal(view.voxels, again.voxels))
print("different key, same view:", np.array_equal(view.voxels, other.voxels))

# Intensities stay in the unit interval whatever the draw.
lo = min(make_view(volume, cfg, derive_rng(1, i)).voxels.min() for i in range(20))
hi = max(make_view(volume, cfg, derive_rng(1, i)).voxels.max() for i in range(20))
print(f"range over 20 views: [{lo:.3f}, {hi:.3f}]")
