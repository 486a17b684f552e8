"""Command-line pipeline: transcript -> prompt -> detect -> filter -> segment -> evaluate.

Each stage reads and writes files (JSON-lines, PGM, CSV) so any stage can be
swapped for an external tool.  Exit status is 0 iff no per-case failure was
recorded; configuration and input-format errors exit with status 2.
"""
from __future__ import annotations

import argparse
import csv
import io
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Any, Callable, Iterable, Sequence

from . import __version__
from .clinical_prompt import Transcript, extract, load_rules, load_vocabulary
from .config import ConfigError, get, load_config
from .dataset import load_ground_truth, load_image, write_dataset
from .detect2seg import (
    BoxFillSegmenter,
    DetectionSet,
    ExternalMaskSegmenter,
    Mask,
    merge_masks,
    segment_from_boxes,
    threshold_boxes,
)
from .fileio import JSONLError, SCHEMA_VERSION, atomic_write_text, read_jsonl, read_pgm, write_json, write_jsonl, write_pgm
from .grounder import (
    GrounderModel,
    TrainConfig,
    build_model,
    gen_synthetic,
    predict_detections,
    train,
    trainable_fraction,
    validation_iou,
)
from .lora import LoRAConfig, load_adapters, save_adapters
from .metrics import build_report

log = logging.getLogger("promptseg")


class CaseFailures:
    """Collects per-case errors; written next to the stage output when non-empty."""

    def __init__(self, stage: str):
        self.stage = stage
        self.items: list[dict[str, Any]] = []

    def add(self, case_id: str, error: str) -> None:
        log.error("%s: %s: %s", self.stage, case_id, error)
        self.items.append({"schema_version": SCHEMA_VERSION, "stage": self.stage, "case_id": case_id, "error": error})

    def flush(self, output: str | Path) -> int:
        side = Path(str(output) + ".failures.jsonl")
        if self.items:
            write_jsonl(side, sorted(self.items, key=lambda r: r["case_id"]))
        elif side.exists():
            side.unlink()
        return len(self.items)


def _pmap(fn: Callable, items: Sequence, workers: int) -> list:
    """Ordered map; threads only when ``workers`` > 1."""
    if workers <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def _lora_config(cfg: dict[str, Any]) -> LoRAConfig:
    section = cfg["lora"]
    return LoRAConfig(rank=int(section["rank"]), alpha=section["alpha"], sites=frozenset(section["sites"]),
                      seed=int(cfg["seed"]))


def _train_config(cfg: dict[str, Any]) -> TrainConfig:
    t = cfg["train"]
    return TrainConfig(
        lr=float(t["lr"]), epochs=int(t["epochs"]), warmup=float(t["warmup"]),
        max_grad_norm=float(t["max_grad_norm"]), batch_size=int(t["batch_size"]), mode=t["mode"],
        weight_decay=float(t["weight_decay"]), augment=bool(t["augment"]), box_weight=float(t["box_weight"]),
        lora=_lora_config(cfg) if t["mode"] == "lora" else None, seed=int(cfg["seed"]),
    )


def load_model(cfg: dict[str, Any]) -> GrounderModel:
    model = GrounderModel.load(get(cfg, "paths.checkpoint"))
    adapters = get(cfg, "paths.adapters", required=False)
    if adapters is not None:
        lcfg, pairs = load_adapters(adapters)
        model.load_adapters(lcfg, pairs)
    return model


# stages -----------------------------------------------------------------

def stage_extract(cfg: dict[str, Any], transcripts: str | Path, out: str | Path) -> int:
    rules = load_rules(get(cfg, "paths.rules", required=False))
    vocab = load_vocabulary(get(cfg, "paths.vocab", required=False))
    records = read_jsonl(transcripts)
    failures = CaseFailures("extract-prompts")
    items = []
    for lineno, rec in enumerate(records, start=1):
        try:
            items.append(Transcript.from_record(rec))
        except (KeyError, ValueError) as exc:
            failures.add(str(rec.get("case_id", f"line{lineno}")), f"bad transcript record: {exc}")
    results = _pmap(lambda t: extract(t, vocab, rules).to_record(), items, cfg["workers"])
    write_jsonl(out, sorted(results, key=lambda r: r["case_id"]))
    return failures.flush(out)


def stage_detect(cfg: dict[str, Any], prompts: str | Path, images: str | Path, out: str | Path) -> int:
    model = load_model(cfg)
    failures = CaseFailures("detect")

    def one(rec: dict[str, Any]) -> dict[str, Any] | None:
        case_id = str(rec["case_id"])
        try:
            image = load_image(images, case_id)
        except (OSError, ValueError) as exc:
            failures.add(case_id, f"image unavailable: {exc}")
            return None
        try:
            return predict_detections(model, image, rec["prompt"], case_id).to_record()
        except ValueError as exc:
            failures.add(case_id, str(exc))
            return None

    results = [r for r in _pmap(one, read_jsonl(prompts), cfg["workers"]) if r is not None]
    write_jsonl(out, sorted(results, key=lambda r: r["case_id"]))
    return failures.flush(out)


def stage_filter(cfg: dict[str, Any], detections: str | Path, out: str | Path) -> int:
    tau = float(cfg["filter"]["tau"])
    sets = [DetectionSet.from_record(r) for r in read_jsonl(detections)]
    write_jsonl(out, [threshold_boxes(d, tau).to_record() for d in sorted(sets, key=lambda d: d.case_id)])
    return 0


def stage_segment(cfg: dict[str, Any], detections: str | Path, masks_dir: str | Path) -> int:
    kind = cfg["segment"]["segmenter"]
    segmenter = BoxFillSegmenter() if kind == "box_fill" else ExternalMaskSegmenter(get(cfg, "paths.external_masks"))
    out = Path(masks_dir)
    out.mkdir(parents=True, exist_ok=True)
    failures = CaseFailures("segment")

    def one(d: DetectionSet) -> None:
        result = segment_from_boxes(d, segmenter)
        for i, mask in zip(result.indices, result.masks):
            write_pgm(out / f"{d.case_id}__{i}.pgm", mask.to_pgm())
        for i, err in result.failures:
            failures.add(d.case_id, f"box {i}: {err}")
        write_pgm(out / f"{d.case_id}.pgm", merge_masks(result.masks, d.height, d.width).to_pgm())

    sets = sorted((DetectionSet.from_record(r) for r in read_jsonl(detections)), key=lambda d: d.case_id)
    _pmap(one, sets, cfg["workers"])
    return failures.flush(out / "segment")


def stage_evaluate(cfg: dict[str, Any], detections: str | Path, annotations: str | Path, out: str | Path,
                   prompts: str | Path | None = None, masks_dir: str | Path | None = None,
                   gt_masks: str | Path | None = None) -> int:
    gts = load_ground_truth(annotations, gt_masks)
    dets = [DetectionSet.from_record(r) for r in read_jsonl(detections)] if detections else []
    failures = CaseFailures("evaluate")
    predicted = None
    if prompts is not None:
        predicted = {str(r["case_id"]): r["class"] for r in read_jsonl(prompts)}
        for g in gts:
            if g.case_id not in predicted:
                failures.add(g.case_id, "no prompt record")
                predicted[g.case_id] = "missing"
        predicted = {g.case_id: predicted[g.case_id] for g in gts}
    pred_masks = None
    if masks_dir is not None and gt_masks is not None:
        pred_masks = {}
        for g in gts:
            path = Path(masks_dir) / f"{g.case_id}.pgm"
            if path.exists():
                pred_masks[g.case_id] = Mask.from_pgm(read_pgm(path))
            elif g.boxes:
                failures.add(g.case_id, "no predicted mask")
    report = build_report(dets, gts, predicted, pred_masks)
    write_json(out, report.to_dict())
    return failures.flush(out)


# commands ---------------------------------------------------------------

def cmd_extract_prompts(cfg: dict[str, Any]) -> int:
    return stage_extract(cfg, get(cfg, "paths.transcripts"), get(cfg, "paths.prompts"))


def cmd_detect(cfg: dict[str, Any]) -> int:
    return stage_detect(cfg, get(cfg, "paths.prompts"), get(cfg, "paths.images"), get(cfg, "paths.detections"))


def cmd_filter(cfg: dict[str, Any]) -> int:
    return stage_filter(cfg, get(cfg, "paths.detections"), get(cfg, "paths.filtered"))


def cmd_segment(cfg: dict[str, Any]) -> int:
    return stage_segment(cfg, get(cfg, "paths.filtered"), get(cfg, "paths.masks"))


def cmd_evaluate(cfg: dict[str, Any]) -> int:
    return stage_evaluate(
        cfg,
        get(cfg, "paths.filtered", required=False),
        get(cfg, "paths.annotations"),
        get(cfg, "paths.report"),
        prompts=get(cfg, "paths.prompts", required=False),
        masks_dir=get(cfg, "paths.masks", required=False),
        gt_masks=get(cfg, "paths.gt_masks", required=False),
    )


def cmd_run(cfg: dict[str, Any]) -> int:
    """All stages in sequence; intermediate files land in ``paths.out_dir``."""
    out = Path(get(cfg, "paths.out_dir"))
    out.mkdir(parents=True, exist_ok=True)
    transcripts = get(cfg, "paths.transcripts")
    images = get(cfg, "paths.images")
    annotations = get(cfg, "paths.annotations")
    get(cfg, "paths.checkpoint")
    failed = stage_extract(cfg, transcripts, out / "prompts.jsonl")
    failed += stage_detect(cfg, out / "prompts.jsonl", images, out / "detections.jsonl")
    failed += stage_filter(cfg, out / "detections.jsonl", out / "filtered.jsonl")
    failed += stage_segment(cfg, out / "filtered.jsonl", out / "masks")
    failed += stage_evaluate(cfg, out / "filtered.jsonl", annotations, out / "report.json",
                             prompts=out / "prompts.jsonl", masks_dir=out / "masks",
                             gt_masks=get(cfg, "paths.gt_masks", required=False))
    return failed


def cmd_make_dataset(cfg: dict[str, Any]) -> int:
    d = cfg["dataset"]
    samples = gen_synthetic(int(d["n"]), int(cfg["seed"]), domain=d["domain"], prefix=d["prefix"])
    write_dataset(get(cfg, "paths.out_dir"), samples)
    return 0


def cmd_train_toy(cfg: dict[str, Any]) -> int:
    out = Path(get(cfg, "paths.out_dir"))
    out.mkdir(parents=True, exist_ok=True)
    t = cfg["train"]
    seed = int(cfg["seed"])
    host = get(cfg, "paths.host", required=False)
    if host is not None:
        model = GrounderModel.load(host)
    else:
        model = build_model(int(cfg["model"]["d_model"]), int(cfg["model"]["d_hidden"]), seed)
    config = _train_config(cfg)
    data = gen_synthetic(int(t["n_train"]), seed, domain=t["domain"], prefix="train")
    val = gen_synthetic(int(t["n_val"]), seed + 1, domain=t["domain"], prefix="val")
    result = train(model, data, config)
    if config.mode == "lora":
        model.save(out / "host.ckpt")
        save_adapters(out / "adapters.ckpt", model.adapters(), config.lora, config.lora.sites)
        trainable, total, frac = trainable_fraction(model, config.lora)
    else:
        model.save(out / "model.ckpt")
        trainable = total = model.host_param_count()
        frac = 1.0
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["epoch", "loss"])
    for i, v in enumerate(result.history, start=1):
        writer.writerow([i, repr(v)])
    atomic_write_text(out / "loss.csv", buf.getvalue())
    write_json(out / "train_summary.json", {
        "schema_version": SCHEMA_VERSION,
        "mode": config.mode,
        "epochs": config.epochs,
        "first_epoch_loss": result.history[0],
        "final_epoch_loss": result.history[-1],
        "val_mean_iou": validation_iou(model, val),
        "trainable_params": trainable,
        "total_params": total,
        "trainable_fraction": frac,
    })
    return 0


def ablation_rows(cfg: dict[str, Any]) -> list[dict[str, Any]]:
    a = cfg["ablate"]
    model = build_model(int(a["d_model"]), int(a["d_hidden"]), int(cfg["seed"]))
    rows = []
    for name, sites in a["site_sets"].items():
        for r in a["ranks"]:
            lcfg = LoRAConfig(rank=int(r), sites=frozenset(sites), seed=int(cfg["seed"]))
            trainable, total, frac = trainable_fraction(model, lcfg)
            rows.append({"site_set": name, "sites": "+".join(sorted(sites)), "rank": int(r),
                         "trainable": trainable, "total": total, "fraction": frac})
    return rows


def cmd_ablate(cfg: dict[str, Any]) -> int:
    out = Path(get(cfg, "paths.out_dir"))
    out.mkdir(parents=True, exist_ok=True)
    rows = ablation_rows(cfg)
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({**row, "fraction": f"{row['fraction']:.6f}"})
    atomic_write_text(out / "ablation.csv", buf.getvalue())
    return 0


COMMANDS: dict[str, tuple[Callable[[dict[str, Any]], int], str]] = {
    "extract-prompts": (cmd_extract_prompts, "transcripts JSONL -> prompts JSONL"),
    "make-dataset": (cmd_make_dataset, "write a synthetic PGM dataset with annotations"),
    "train-toy": (cmd_train_toy, "train the toy grounder (full_finetune or lora)"),
    "detect": (cmd_detect, "prompts + images -> detections JSONL"),
    "filter": (cmd_filter, "score-threshold detections at filter.tau"),
    "segment": (cmd_segment, "detections -> per-box and merged PGM masks"),
    "evaluate": (cmd_evaluate, "predictions + ground truth -> metrics report JSON"),
    "ablate": (cmd_ablate, "LoRA rank / site parameter-count table (CSV)"),
    "run": (cmd_run, "every stage end to end"),
}


def _split_overrides(extra: Iterable[str]) -> list[tuple[str, str]]:
    extra = list(extra)
    pairs = []
    i = 0
    while i < len(extra):
        tok = extra[i]
        if not tok.startswith("--") or tok == "--":
            raise ConfigError(tok, "unexpected argument")
        key = tok[2:]
        if "=" in key:
            key, value = key.split("=", 1)
        else:
            if i + 1 >= len(extra):
                raise ConfigError(key, "override needs a value")
            i += 1
            value = extra[i]
        pairs.append((key, value))
        i += 1
    return pairs


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="promptseg",
        description="Speech-transcript prompted tumor detection and segmentation pipeline (toy scale).",
        epilog="Any config key can be overridden with --<dotted.key> <value>, e.g. --filter.tau 0.5",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="JSON config file")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, _split_overrides(extra))
        failures = COMMANDS[args.command][0](cfg)
    except ConfigError as exc:
        print(f"promptseg: config error: {exc}", file=sys.stderr)
        return 2
    except JSONLError as exc:
        print(f"promptseg: {exc}", file=sys.stderr)
        return 2
    except (OSError, KeyError, ValueError) as exc:
        print(f"promptseg: error: {exc}", file=sys.stderr)
        return 2
    if failures:
        print(f"promptseg: {failures} per-case failure(s) recorded", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
