"""
Fusion wiring
=============

Two properties of the dual-decoder block that are easy to get wrong:
cross-attention reads the *other* modality's encoder embedding in every
layer, and the batch axis carries no position.
"""

# %%
import torch

from cardium.fusion import FusionConfig, FusionModel, canonical_order

torch.manual_seed(0)
model = FusionModel(FusionConfig(layers=2, heads=2, shared_dim=16, image_dim=16, tabular_dim=16)).double().eval()
z_img, z_tab = torch.randn(5, 16, dtype=torch.float64), torch.randn(5, 16, dtype=torch.float64)

# %% record what each cross-attention receives as keys
keys = []
hooks = [layer.cross_attn.register_forward_pre_hook(lambda m, a, s=s: keys.append((s, a[1][0])))
         for s, stack in (("image", model.core.image_stack), ("tabular", model.core.tabular_stack)) for layer in stack]
with torch.no_grad():
    model(z_img, z_tab)
for h in hooks:
    h.remove()
order = canonical_order(z_img, z_tab)
p_img, p_tab = model.project(z_img[order], z_tab[order])
for stack, k in keys:
    src = p_tab if stack == "image" else p_img
    print(stack, "stack keys == other encoder embedding:", torch.equal(k, src))

# %% shuffling the batch shuffles the outputs, bit for bit
perm = torch.randperm(5)
with torch.no_grad():
    print("equivariant:", torch.equal(model(z_img[perm], z_tab[perm]), model(z_img, z_tab)[perm]))

# %% but a prediction does depend on who else is in the batch
with torch.no_grad():
    alone = model(z_img[:1], z_tab[:1])
    crowd = model(z_img, z_tab)[:1]
print("row 0 alone vs in a batch of 5:", alone.item(), crowd.item())
