"""
Attaching an auxiliary classifier to a block-sequential network
===============================================================

Shows where the shallow teacher taps in, what it adds in parameters, and
that attaching it leaves the main network's output unchanged.
"""

import torch

from selfdistill.models import attach_auxiliary, count_parameters, model_registry, parameter_partition

torch.manual_seed(0)
model = model_registry("resnet18-style", num_classes=100).eval()
x = torch.randn(2, 3, 32, 32)
with torch.no_grad():
    before = model(x)

for tap in range(1, model.num_blocks):
    scaffold = attach_auxiliary(model, tap).eval()
    shallow, deep, aux = parameter_partition(scaffold)
    with torch.no_grad():
        out = scaffold.forward_dual(x)
    print(
        f"tap after block {tap}: shallow {count_parameters(shallow):>9,}  deep {count_parameters(deep):>9,}  "
        f"AC {count_parameters(aux):>7,}  main output unchanged: {torch.equal(before, out.main_logits)}"
    )

# one dual forward runs the shallow blocks once and branches at the tap
print("aux logits shape:", tuple(out.aux_logits.shape))
