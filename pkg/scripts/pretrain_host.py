"""Regenerate the shipped toy host checkpoint (about 10 minutes on one core).

    python3 scripts/pretrain_host.py [output path]

Without an argument the checkpoint is written into the package data directory.
Training is deterministic, so the output is byte-identical to the committed file.
"""
import sys
import time

from promptseg.grounder import gen_synthetic, validation_iou
from promptseg.grounder.recipe import HOST_DATA_SEED, host_checkpoint_path, pretrain_host

out = sys.argv[1] if len(sys.argv) > 1 else host_checkpoint_path()
start = time.time()
result = pretrain_host()
result.model.save(out)
val = gen_synthetic(200, HOST_DATA_SEED + 1000, domain="source", prefix="val")
print(f"first/last epoch loss {result.history[0]:.4f} / {result.history[-1]:.4f}")
print(f"source-domain validation IoU {validation_iou(result.model, val):.3f}")
print(f"wrote {out} in {time.time() - start:.0f} s")
