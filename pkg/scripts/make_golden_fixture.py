"""Build tests/fixtures/golden: six Table-1 transcripts, matching synthetic images, a
LoRA-adapted toy checkpoint, a run config, and the expected metrics report.

    python3 scripts/make_golden_fixture.py

Re-running reproduces the committed files byte for byte.
"""
import json
import shutil
import sys
from pathlib import Path

import numpy as np

from promptseg.cli import main
from promptseg.dataset import write_dataset
from promptseg.fileio import SCHEMA_VERSION, write_jsonl
from promptseg.grounder.recipe import reference_config, reference_data, load_reference_host
from promptseg.grounder.synthetic import render_sample
from promptseg.grounder.train import train
from promptseg.lora import save_adapters

ROOT = Path(__file__).resolve().parents[1]
OUT = ROOT / "tests" / "fixtures" / "golden"
SEED = 2024

# transcript text, true image class (gg = glioma image whose transcript is misspelled)
CASES = [
    ("00013_gl", "There is a large heterogeneous enhancing mass in the left temporal lobe consistent with glioblastoma.", "glioma"),
    ("00430_me", "Extra-axial dural-based lesion along the falx, most likely a meningioma.", "meningioma"),
    ("00647_no", "The ventricles are normal in size. Midline structures are preserved.", "healthy"),
    ("00686_no", "No evidence of diffusion restriction. Brain parenchyma appears unremarkable.", "healthy"),
    ("00743_pi", "Enlarged sella with a macroadenoma compressing the optic chiasm.", "pituitary"),
    ("gg (227)", "Findings suggest a glioplaston in the right frontal lobe.", "glioma"),
]


def build() -> None:
    if OUT.exists():
        shutil.rmtree(OUT)
    OUT.mkdir(parents=True)
    write_jsonl(OUT / "transcripts.jsonl", [{"case_id": c, "text": t} for c, t, _ in CASES])
    samples = [render_sample(np.random.default_rng([SEED, i]), cls, case_id, "target")
               for i, (case_id, _, cls) in enumerate(CASES)]
    write_dataset(OUT, samples)

    data, _ = reference_data()
    config = reference_config("lora")
    model = train(load_reference_host(), data, config).model
    model.save(OUT / "host.ckpt")
    save_adapters(OUT / "adapters.ckpt", model.adapters(), config.lora, config.lora.sites)

    run_config = {
        "schema_version": SCHEMA_VERSION,
        "seed": 0,
        "paths": {
            "transcripts": "transcripts.jsonl",
            "images": "images",
            "annotations": "annotations.jsonl",
            "gt_masks": "gt_masks",
            "checkpoint": "host.ckpt",
            "adapters": "adapters.ckpt",
        },
        "filter": {"tau": 0.3},
        "segment": {"segmenter": "box_fill"},
    }
    (OUT / "config.json").write_text(json.dumps(run_config, indent=2, sort_keys=True) + "\n")

    scratch = OUT / "_run"
    code = main(["run", "--config", str(OUT / "config.json"), "--paths.out_dir", str(scratch)])
    shutil.copy(scratch / "report.json", OUT / "expected_report.json")
    shutil.rmtree(scratch)
    print(f"run exit code {code}; wrote {OUT}")
    print((OUT / "expected_report.json").read_text())
    sys.exit(code)


if __name__ == "__main__":
    build()
