"""
Loss terms and the time margin
==============================

The regulariser keeps every projection dimension spread out and
decorrelated. The similarity term either pulls the two views together
outright or, with the time-informed hinge, only pulls them closer than
their normalized time gap.
"""

import torch

from tinc3d import (LossConfig, barlow_twins_loss, combined_loss, covariance_term,
                    invariance_term, tinc_term, variance_term)

Z = torch.tensor([[0.0, 0.0], [1.0, 1.0]])
Zp = torch.tensor([[0.0, 0.0], [1.0, 0.0]])

print("invariance:", float(invariance_term(Z, Zp)))
print("variance:", float(variance_term(Z)))
print("covariance:", float(covariance_term(Z)))

# Pairs whose squared distance stays under the gap contribute nothing.
for gap in (0.0, 0.5, 1.0):
    print(f"hinge with gap {gap}:", float(tinc_term(Z, Zp, torch.full((2,), gap))))

torch.manual_seed(0)
A = torch.randn(64, 8)
B = A + 0.1 * torch.randn(64, 8)
dt = torch.rand(64)
for mode in ("tinc", "vicreg_invariance"):
    parts = combined_loss(A, B, dt, LossConfig(similarity_mode=mode)).as_floats()
    print(mode, {k: round(v, 4) for k, v in parts.items()})
print("barlow twins:", round(float(barlow_twins_loss(A, B)), 4))
