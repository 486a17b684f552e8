"""
How many parameters does a LoRA adapter train?
==============================================

Each adapted linear layer W (d_out x d_in) gains B (d_out x r) and A (r x d_in),
so an injection site costs r * (d_in + d_out) trainable numbers.
"""

import numpy as np

from promptseg.grounder import build_model, forward, trainable_fraction
from promptseg.lora import LoRAConfig

# A wide host so that ranks up to 128 stay below min(d_in, d_out).
model = build_model(d_model=128, d_hidden=256)
print(f"host parameters: {model.host_param_count()}")

site_sets = {
    "visual encoder/decoder": {"ffn", "box_head_first"},
    "+ feature enhancer": {"ffn", "box_head_first", "image_self_attn"},
}
for label, sites in site_sets.items():
    for rank in (32, 64, 128):
        n, total, frac = trainable_fraction(model, LoRAConfig(rank=rank, sites=frozenset(sites)))
        print(f"{label:<24} r={rank:<4} trainable={n:<7} ({100 * frac:.2f}% of all weights)")

# A fresh adapter changes nothing: B starts at zero, so the adapted forward pass
# reproduces the frozen host bit for bit.
small = build_model(seed=1)
img = np.random.default_rng(0).random((32, 32))
before = forward(small, img, "glioma")
small.apply_lora(LoRAConfig(rank=4))
after = forward(small, img, "glioma")
print("identical after injection:", np.array_equal(before[0], after[0]) and before[1] == after[1])
