"""Acceptance gate: one PASS/FAIL line per criterion, each at its stated tolerance and time budget.

Lines are echoed in the "acceptance criteria" section of the pytest summary.
"""
import json
import time
from pathlib import Path

import numpy as np
import pytest

from oracles import oracle_ap, random_instance
from promptseg.cli import main
from promptseg.clinical_prompt import Transcript, extract, load_rules, load_vocabulary
from promptseg.detect2seg import BBox, DetectionSet, Mask, threshold_boxes
from promptseg.grounder import (
    GrounderModel,
    TrainConfig,
    build_model,
    forward,
    gen_synthetic,
    make_pairs,
    pair_loss_fn,
    train,
    trainable_fraction,
)
from promptseg.grounder.model import PROMPT_VOCAB
from promptseg.grounder.recipe import load_reference_host
from promptseg.lora import LoRAConfig
from promptseg.metrics import GroundTruth, average_precision, dice, iou_mask
from promptseg.tensor_core import grad_check

FIXTURES = Path(__file__).parent / "fixtures"
TUMOR_PROMPTS = PROMPT_VOCAB[:3]


def read_rows(name):
    return [json.loads(line) for line in (FIXTURES / name).read_text().splitlines() if line.strip()]


def random_images(n, seed):
    return np.random.default_rng(seed).random((n, 32, 32))


def test_table1_golden(acceptance):
    rows = read_rows("table1.jsonl")
    start = time.perf_counter()
    vocab, rules = load_vocabulary(), load_rules()
    hits = 0
    for r in rows:
        out = extract(Transcript(r["case_id"], r["text"]), vocab, rules)
        hits += out.class_label == r["expected_class"] and out.evidence == r["expected_evidence"]
    elapsed = time.perf_counter() - start
    acceptance("reference transcript prompts", hits == 6 and elapsed < 1.0, f"{hits}/6 exact, {elapsed:.3f} s (< 1 s)")


def test_case_level_accuracy(acceptance):
    rows = read_rows("case_suite.jsonl")
    start = time.perf_counter()
    vocab, rules = load_vocabulary(), load_rules()
    correct = sum(extract(Transcript(r["case_id"], r["text"]), vocab, rules).class_label == r["class"] for r in rows)
    elapsed = time.perf_counter() - start
    acc = correct / len(rows)
    acceptance("case-level accuracy", correct == 11 and len(rows) == 12 and elapsed < 1.0,
               f"{correct}/{len(rows)} = {acc:.4f} (want 11/12 = 0.9167), {elapsed:.3f} s (< 1 s)")


def test_lora_zero_init_equivalence(acceptance):
    host = load_reference_host()
    adapted = load_reference_host()
    adapted.apply_lora(LoRAConfig(rank=4))
    start = time.perf_counter()
    worst = 0.0
    for i, img in enumerate(random_images(100, 0)):
        prompt = TUMOR_PROMPTS[i % 3]
        (b0, s0), (b1, s1) = forward(host, img, prompt), forward(adapted, img, prompt)
        worst = max(worst, float(np.max(np.abs(b0 - b1))), abs(s0 - s1))
    elapsed = time.perf_counter() - start
    acceptance("LoRA zero-init equivalence", worst == 0.0 and elapsed < 1.0,
               f"max abs diff {worst:g} over 100 inputs (want 0), {elapsed:.3f} s (< 1 s)")


def test_merge_equivalence(acceptance):
    rng = np.random.default_rng(1)
    adapted = load_reference_host()
    for a in adapted.apply_lora(LoRAConfig(rank=4)):
        a.B.value[...] = 0.1 * rng.normal(size=a.B.shape)
    start = time.perf_counter()
    merged = GrounderModel.from_state(adapted.merged_state())
    worst = 0.0
    for i, img in enumerate(random_images(100, 2)):
        prompt = TUMOR_PROMPTS[i % 3]
        (b0, s0), (b1, s1) = forward(adapted, img, prompt), forward(merged, img, prompt)
        ref = np.append(b0, s0)
        worst = max(worst, float(np.max(np.abs(np.append(b1, s1) - ref) / np.abs(ref))))
    elapsed = time.perf_counter() - start
    acceptance("merge equivalence", worst < 1e-6 and elapsed < 1.0,
               f"max rel diff {worst:.2e} (< 1e-6) over 100 inputs, {elapsed:.3f} s (< 1 s)")


def grad_check_model(seed, lora):
    """Every trainable tensor of the grounder architecture at reduced width (8/8)."""
    rng = np.random.default_rng(seed)
    model = build_model(d_model=8, d_hidden=8, seed=seed)
    for p in model.host_parameters():  # move off the zero-init box head and symmetric points
        p.value += 0.1 * rng.normal(size=p.shape)
    if lora:
        model.apply_lora(LoRAConfig(rank=2, seed=seed))
        for a in model.adapters():
            a.B.value[...] = 0.1 * rng.normal(size=a.B.shape)
    pairs = make_pairs(gen_synthetic(6, seed), rng)
    pairs = [next(p for p in pairs if p.present), next(p for p in pairs if not p.present)]
    return model, pair_loss_fn(model, pairs, box_weight=3.0)


def test_gradient_verification(acceptance):
    start = time.perf_counter()
    worst, tensors, elements = 0.0, 0, 0
    for seed in range(3):
        for lora in (False, True):
            model, fn = grad_check_model(seed, lora)
            results = grad_check(fn, model.trainable_parameters(), eps=1e-4)
            tensors += len(results)
            elements += sum(r.checked for r in results.values())
            worst = max([worst] + [r.max_rel_err for r in results.values()])
    elapsed = time.perf_counter() - start
    acceptance("gradient verification", worst < 1e-4 and elapsed < 60.0,
               f"max rel err {worst:.2e} (< 1e-4) over {tensors} tensors / {elements} elements, "
               f"3 seeds x 2 modes, {elapsed:.1f} s (< 60 s)")


def test_frozen_immutability(acceptance):
    model = load_reference_host()
    init = {k: v.tobytes() for k, v in model.host_state().items()}
    start = time.perf_counter()
    config = TrainConfig(lr=1e-2, epochs=25, batch_size=16, mode="lora", lora=LoRAConfig(rank=4), box_weight=20.0)
    result = train(model, gen_synthetic(48, 3, domain="target"), config, record_steps=True)
    elapsed = time.perf_counter() - start
    changed = [k for k, v in model.host_state().items() if v.tobytes() != init[k]]
    moved = any(np.any(a.B.value) for a in model.adapters())
    acceptance("frozen immutability", not changed and moved and len(result.steps) >= 100 and elapsed < 30.0,
               f"{len(result.steps)} LoRA steps, {len(changed)} frozen tensors changed, adapters moved={moved}, "
               f"{elapsed:.1f} s (< 30 s)")


def test_rank_ablation_structure(acceptance):
    start = time.perf_counter()
    model = build_model(d_model=128, d_hidden=256)
    counts, fractions = {}, {}
    for r in (32, 64, 128):
        counts[r], _, fractions[r] = trainable_fraction(model, LoRAConfig(rank=r))
    elapsed = time.perf_counter() - start
    ok = fractions[32] < fractions[64] < fractions[128] and counts[128] == 4 * counts[32]
    pct = " < ".join(f"{100 * fractions[r]:.2f}%" for r in (32, 64, 128))
    acceptance("rank ablation structure", ok and elapsed < 5.0,
               f"r=32/64/128: {pct}, count(128)/count(32) = {counts[128] / counts[32]:g} (want 4), "
               f"{elapsed:.2f} s (< 5 s)")


def test_toy_training(acceptance, reference_runs):
    (full, full_iou, t_full), (lora, lora_iou, t_lora) = reference_runs["full_finetune"], reference_runs["lora"]
    elapsed = t_full + t_lora
    ratios = {m: r.history[-1] / r.history[0] for m, r in (("full", full), ("lora", lora))}
    iou_ratio = lora_iou / full_iou
    soft = "met" if iou_ratio >= 0.90 else "missed"
    ok = all(v < 0.5 for v in ratios.values()) and iou_ratio >= 0.75 and elapsed < 180.0
    acceptance("toy training", ok,
               f"last/first loss full {ratios['full']:.4f}, lora {ratios['lora']:.4f} (< 0.5); "
               f"val IoU full {full_iou:.3f}, lora {lora_iou:.3f}, ratio {iou_ratio:.3f} "
               f"(>= 0.75, soft target 0.90 {soft}); {elapsed:.0f} s (< 180 s)")


def test_metric_oracles(acceptance):
    start = time.perf_counter()
    masks = [Mask(np.array([(v >> i) & 1 for i in range(9)], bool).reshape(3, 3)) for v in range(512)]
    flat = [m.bits.reshape(-1) for m in masks]
    pixel_mismatches = 0
    for a in range(512):
        for b in range(512):
            inter = int(np.sum(flat[a] & flat[b]))
            union = int(np.sum(flat[a] | flat[b]))
            total = int(flat[a].sum() + flat[b].sum())
            want_dice = 1.0 if total == 0 else 2 * inter / total
            want_iou = 1.0 if union == 0 else inter / union
            pixel_mismatches += dice(masks[a], masks[b]) != want_dice or iou_mask(masks[a], masks[b]) != want_iou

    worst_ap = 0.0
    for seed in range(200):
        cases, gts, dets = random_instance(np.random.default_rng(seed))
        gt_objs = [GroundTruth(c, "glioma", tuple(BBox(*b, label="glioma") for b in gts.get(c, []))) for c in cases]
        det_objs = [DetectionSet(c, 20, 20, tuple(BBox(*d[3], score=d[2], label="glioma") for d in dets if d[0] == c))
                    for c in cases]
        got = average_precision(det_objs, gt_objs).per_class["glioma"]
        worst_ap = max(worst_ap, abs(got - float(oracle_ap(dets, gts))))

    box = (0, 0, 10, 10)
    worked = average_precision(
        [DetectionSet("a", 32, 32, (BBox(*box, 0.9, "glioma"),)),
         DetectionSet("c", 32, 32, (BBox(*box, 0.8, "glioma"),)),
         DetectionSet("b", 32, 32, (BBox(*box, 0.7, "glioma"),))],
        [GroundTruth("a", "glioma", (BBox(*box, label="glioma"),)),
         GroundTruth("b", "glioma", (BBox(*box, label="glioma"),))],
    ).map
    elapsed = time.perf_counter() - start
    ok = pixel_mismatches == 0 and worst_ap < 1e-9 and round(worked, 4) == 0.8333 and elapsed < 60.0
    acceptance("metric oracles", ok,
               f"3x3 dice/IoU mismatches {pixel_mismatches}/262144, AP oracle max diff {worst_ap:.1e} (< 1e-9) "
               f"on 200 instances, worked example {worked:.4f} (want 0.8333), {elapsed:.1f} s (< 60 s)")


def test_threshold_law(acceptance):
    rng = np.random.default_rng(0)
    start = time.perf_counter()
    violations = 0
    for _ in range(500):
        n = int(rng.integers(0, 13))
        scores = rng.choice([0.0, 0.3, 0.5, 1.0, *rng.random(4)], size=n)
        boxes = tuple(BBox(1, 1, 5, 5, float(s), "glioma") for s in scores)
        d = DetectionSet("c", 32, 32, boxes)
        lo, hi = sorted(rng.choice([0.0, 0.3, *rng.random(2), *scores[:2]], size=2))
        kept_lo, kept_hi = threshold_boxes(d, lo).boxes, threshold_boxes(d, hi).boxes
        violations += not set(map(id, kept_hi)) <= set(map(id, kept_lo))
        violations += list(kept_lo) != [b for b in boxes if b.score >= lo]
        violations += any(b not in threshold_boxes(d, b.score).boxes for b in boxes)
    elapsed = time.perf_counter() - start
    acceptance("threshold law", violations == 0 and elapsed < 5.0,
               f"{violations} violations over 500 random sets (monotone subset, inclusive >=), "
               f"{elapsed:.2f} s (< 5 s)")


def test_golden_run(acceptance, tmp_path):
    golden = FIXTURES / "golden"
    start = time.perf_counter()
    code = main(["run", "--config", str(golden / "config.json"), "--paths.out_dir", str(tmp_path)])
    elapsed = time.perf_counter() - start
    same = (tmp_path / "report.json").read_bytes() == (golden / "expected_report.json").read_bytes()
    acceptance("end-to-end golden run", code == 0 and same and elapsed < 120.0,
               f"exit {code}, report byte-identical={same}, {elapsed:.1f} s (< 120 s)")


def test_full_scale_benchmarks_not_reproduced():
    pytest.skip("full-scale detection/segmentation benchmark numbers need pretrained foundation-model "
                "weights and the full datasets; the oracle and property checks above stand in for them")
