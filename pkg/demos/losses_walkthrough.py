"""
Reverse guidance and shape regularization on toy logits
=======================================================

Builds the two self-distillation losses by hand on a small batch and checks
the pieces add up.
"""

import torch

from selfdistill import losses as L

torch.manual_seed(0)

# a batch of 4 samples over 5 classes: the whole model and a shallow auxiliary head
z = torch.randn(4, 5) * 2
aux = torch.randn(4, 5)
y = torch.tensor([0, 3, 1, 4])

# softening at a higher temperature flattens the distribution
print("tau=1:", L.softened_distribution(z[0], 1.0).numpy().round(3))
print("tau=4:", L.softened_distribution(z[0], 4.0).numpy().round(3))

# reverse guidance: the auxiliary head is the (poor) teacher, the whole model is the student
hl = L.hard_label_loss(aux, z, y)
rg = L.reverse_guidance_loss(aux, z, tau=1.0)
drg = L.drg_loss(aux, z, y, tau=1.0, alpha=0.2)
print(f"L_HL={hl:.4f}  L_RG={rg:.4f}  L_DRG={drg:.4f}  check={hl + 0.2 * rg:.4f}")

# shape regularization compares sorted logits, so class identity is dropped
ranked = L.rank_ascending(z)
print("ranked row 0:", ranked.values[0].numpy().round(3), "from positions", ranked.permutation[0].tolist())

# the previous iteration's ranked batch acts as a constant target
prev = L.rank_ascending(torch.randn(4, 5) * 2).values
sr = L.shape_regularization_loss(prev, ranked.values, tau=4.0, reduction="none")
print("per-sample L_SR:", sr.numpy().round(4))

# shuffling classes inside each row leaves the shape term untouched
perm = torch.stack([torch.randperm(5) for _ in range(4)])
shuffled = L.rank_ascending(z.gather(1, perm)).values
print("invariant under class shuffles:", torch.equal(sr, L.shape_regularization_loss(prev, shuffled, 4.0, "none")))

# the overall objective used by the combined trainer
total = L.combined_loss(aux, z, y, sr, tau=1.0, alpha=0.2, beta=1.0)
print(f"combined={total:.4f}  check={drg + sr.mean():.4f}")
