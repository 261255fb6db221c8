"""Referring-expression evaluation: datasets, metrics, ablations, reports.

A prediction is a hit when its IoU with the ground-truth box strictly
exceeds 0.5. Generation recall counts a sample whose ground truth overlaps
at least one post-refinement candidate at the (inclusive) recall threshold;
rejected samples score 0 for accuracy but still count toward recall.
"""

from __future__ import annotations

import csv
import json
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

from PIL import Image

from .errors import DatasetParseError, EvaluationError, RefGroundError
from .gateway import ImagePayload, detect
from .geometry import PixelBox, area_fraction, iou, nms_indices
from .pipeline import (
    Backends,
    Candidate,
    CandidateSet,
    GroundingResult,
    PipelineConfig,
    extract_concepts,
    generate_global_caption,
    ground,
)

ABLATION_MODES = ("caption", "query_echo", "query_plus")


@dataclass(frozen=True)
class DatasetRecord:
    sample_id: str
    image_path: str
    query: str
    gt_box: PixelBox | None  # None marks a no-target (rejection) sample
    split: str


@dataclass
class SampleOutcome:
    sample_id: str
    predicted_box: PixelBox | None
    rejected: bool
    iou_with_gt: float
    hit_at_05: bool
    generation_recall_hit: bool
    n_candidates: int
    n_reasoning_steps: int
    trace_text: str

    def to_record(self) -> dict:
        return {
            "record_type": "outcome",
            "sample_id": self.sample_id,
            "predicted_box": None if self.predicted_box is None else self.predicted_box.as_list(),
            "rejected": self.rejected,
            "iou_with_gt": self.iou_with_gt,
            "hit_at_05": self.hit_at_05,
            "generation_recall_hit": self.generation_recall_hit,
            "n_candidates": self.n_candidates,
            "n_reasoning_steps": self.n_reasoning_steps,
            "trace_text": self.trace_text,
        }

    @classmethod
    def from_record(cls, row: dict) -> "SampleOutcome":
        box = row["predicted_box"]
        return cls(
            sample_id=row["sample_id"],
            predicted_box=None if box is None else PixelBox(*box),
            rejected=row["rejected"],
            iou_with_gt=row["iou_with_gt"],
            hit_at_05=row["hit_at_05"],
            generation_recall_hit=row["generation_recall_hit"],
            n_candidates=row["n_candidates"],
            n_reasoning_steps=row["n_reasoning_steps"],
            trace_text=row["trace_text"],
        )


@dataclass
class MetricsReport:
    split: str
    n_samples: int
    accuracy: float
    generation_recall: float
    rejection_rate: float
    mean_reasoning_steps: float
    mode: str = "caption"
    stage_timings: dict[str, float] = field(default_factory=dict)

    def summary_record(self) -> dict:
        # Wall-clock timings stay out of the persisted report so record and
        # replay runs of the same data produce byte-identical files.
        return {
            "record_type": "summary",
            "split": self.split,
            "n_samples": self.n_samples,
            "accuracy": self.accuracy,
            "generation_recall": self.generation_recall,
            "rejection_rate": self.rejection_rate,
            "mean_reasoning_steps": self.mean_reasoning_steps,
            "mode": self.mode,
        }

    def summary_line(self) -> str:
        return (
            f"accuracy={self.accuracy:.4f} recall={self.generation_recall:.4f} "
            f"rejection={self.rejection_rate:.4f} samples={self.n_samples}"
        )


def load_dataset(path: str | Path) -> list[DatasetRecord]:
    """Newline-delimited JSON records; image paths resolve against the file's directory."""
    path = Path(path)
    if not path.exists():
        raise EvaluationError(f"dataset not found: {path}")
    base = path.parent
    records = []
    with path.open() as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetParseError(line_no, f"invalid JSON: {exc}") from exc
            try:
                sample_id = row["sample_id"]
                image_path = str(base / row["image_path"])
                query = row["query"]
                raw_box = row["gt_box"]
                split = row["split"]
            except KeyError as exc:
                raise DatasetParseError(line_no, f"missing field {exc}") from exc
            if not query:
                raise DatasetParseError(line_no, "empty query")
            if not Path(image_path).exists():
                raise DatasetParseError(line_no, f"missing image {image_path}")
            gt_box = None
            if raw_box is not None:
                try:
                    gt_box = PixelBox(*raw_box)
                except (TypeError, RefGroundError) as exc:
                    raise DatasetParseError(line_no, f"invalid gt_box {raw_box}: {exc}") from exc
                with Image.open(image_path) as img:
                    if gt_box.x_max > img.width or gt_box.y_max > img.height:
                        raise DatasetParseError(
                            line_no, f"gt_box {raw_box} outside {img.width}x{img.height} image"
                        )
            records.append(DatasetRecord(sample_id, image_path, query, gt_box, split))
    return records


def write_dataset(records: list[DatasetRecord], path: str | Path) -> None:
    with Path(path).open("w") as fh:
        for r in records:
            fh.write(json.dumps({
                "sample_id": r.sample_id,
                "image_path": r.image_path,
                "query": r.query,
                "gt_box": None if r.gt_box is None else r.gt_box.as_list(),
                "split": r.split,
            }, sort_keys=True) + "\n")


def judge_sample(result: GroundingResult, record: DatasetRecord,
                 recall_iou: float = 0.5) -> SampleOutcome:
    gt = record.gt_box
    iou_with_gt = 0.0
    if not result.rejected and gt is not None:
        iou_with_gt = iou(result.predicted_box, gt)
    hit = (not result.rejected) and iou_with_gt > 0.5  # strictly exceeds
    recall_hit = gt is not None and any(
        iou(c.box, gt) >= recall_iou for c in result.candidate_set.candidates
    )
    return SampleOutcome(
        sample_id=record.sample_id,
        predicted_box=result.predicted_box,
        rejected=result.rejected,
        iou_with_gt=iou_with_gt,
        hit_at_05=hit,
        generation_recall_hit=recall_hit,
        n_candidates=len(result.candidate_set.candidates),
        n_reasoning_steps=len(result.trace.steps),
        trace_text=result.trace.raw_text,
    )


def aggregate(outcomes: list[SampleOutcome], split: str, mode: str = "caption",
              stage_timings: dict[str, float] | None = None) -> MetricsReport:
    if not outcomes:
        raise EvaluationError("empty-split: no outcomes to aggregate")
    n = len(outcomes)
    report = MetricsReport(
        split=split,
        n_samples=n,
        accuracy=sum(o.hit_at_05 for o in outcomes) / n,
        generation_recall=sum(o.generation_recall_hit for o in outcomes) / n,
        rejection_rate=sum(o.rejected for o in outcomes) / n,
        mean_reasoning_steps=sum(o.n_reasoning_steps for o in outcomes) / n,
        mode=mode,
        stage_timings=dict(stage_timings or {}),
    )
    if report.accuracy > report.generation_recall + 1e-12:
        raise EvaluationError(
            "accuracy exceeds generation recall; check that the recall IoU "
            "threshold is not stricter than the 0.5 accuracy threshold"
        )
    return report


# --------------------------------------------------------------------------
# Benchmark runner with per-sample checkpointing.

def _load_image(record: DatasetRecord) -> ImagePayload:
    return ImagePayload.from_file(record.image_path)


def _override_for_mode(mode: str, record: DatasetRecord, recall_iou: float):
    """Description substitution for the selection-stage ablations.

    In query_echo / query_plus modes the candidates matching the ground
    truth get the raw query (resp. query plus global caption) instead of a
    model description; everything else keeps the describer path.
    """
    if mode == "caption":
        return None
    if mode not in ABLATION_MODES:
        raise EvaluationError(f"unknown ablation mode {mode!r}")
    if record.gt_box is None:
        return None

    def override(candidate: Candidate, candidate_set: CandidateSet):
        if iou(candidate.box, record.gt_box) < recall_iou:
            return None
        if mode == "query_echo":
            return record.query
        return f"{record.query} {candidate_set.global_caption}"

    return override


def load_checkpoint(path: str | Path) -> dict[str, SampleOutcome]:
    done = {}
    path = Path(path)
    if not path.exists():
        return done
    with path.open() as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            row = json.loads(line)
            done[row["sample_id"]] = SampleOutcome.from_record(row)
    return done


def run_bench(backends: Backends, records: list[DatasetRecord], cfg: PipelineConfig,
              mode: str = "caption", recall_iou: float = 0.5,
              checkpoint_path: str | Path | None = None, resume: bool = False,
              workers: int = 1, split: str | None = None) -> tuple[MetricsReport, list[SampleOutcome]]:
    """Grounding + judging over a dataset; outcomes come back in dataset order."""
    if not records:
        raise EvaluationError("empty-split: no dataset records")
    done = load_checkpoint(checkpoint_path) if (resume and checkpoint_path) else {}
    checkpoint_lock = threading.Lock()
    checkpoint_fh = None
    if checkpoint_path is not None:
        checkpoint_fh = Path(checkpoint_path).open("a" if resume else "w")

    timing_sums: dict[str, float] = {}
    timing_counts = 0

    def process(record: DatasetRecord) -> SampleOutcome:
        nonlocal timing_counts
        if record.sample_id in done:
            return done[record.sample_id]
        image = _load_image(record)
        result = ground(backends, image, record.query, cfg,
                        describe_override=_override_for_mode(mode, record, recall_iou))
        outcome = judge_sample(result, record, recall_iou=recall_iou)
        with checkpoint_lock:
            timing_counts += 1
            for stage, seconds in result.stage_timings.items():
                timing_sums[stage] = timing_sums.get(stage, 0.0) + seconds
            if checkpoint_fh is not None:
                checkpoint_fh.write(json.dumps(outcome.to_record(), sort_keys=True) + "\n")
                checkpoint_fh.flush()
        return outcome

    try:
        if workers > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                outcomes = list(pool.map(process, records))
        else:
            outcomes = [process(r) for r in records]
    finally:
        if checkpoint_fh is not None:
            checkpoint_fh.close()

    mean_timings = {
        stage: total / timing_counts for stage, total in sorted(timing_sums.items())
    } if timing_counts else {}
    report = aggregate(outcomes, split or records[0].split, mode=mode,
                       stage_timings=mean_timings)
    return report, outcomes


def run_ablation(backends: Backends, records: list[DatasetRecord], cfg: PipelineConfig,
                 mode: str, recall_iou: float = 0.5,
                 workers: int = 1) -> tuple[MetricsReport, list[SampleOutcome]]:
    if mode not in ABLATION_MODES:
        raise EvaluationError(f"unknown ablation mode {mode!r}")
    return run_bench(backends, records, cfg, mode=mode, recall_iou=recall_iou, workers=workers)


# --------------------------------------------------------------------------
# Candidate-generation recall curve.

RECALL_CONDITIONS = ("pre_nms", "post_nms", "major_only")


@dataclass(frozen=True)
class RecallCurveRow:
    sweep_value: float
    condition: str
    mean_boxes_per_image: float
    recall: float


def recall_curve(backends: Backends, records: list[DatasetRecord], cfg: PipelineConfig,
                 sweep_values: list[float], recall_iou: float = 0.5,
                 major_fraction: float = 0.025) -> list[RecallCurveRow]:
    """Candidate recall under three conditions at each detector threshold.

    Conditions: the raw per-concept detection union (pre_nms), that union
    after NMS (post_nms), and the union restricted to boxes covering at
    least ``major_fraction`` of the image (major_only). Records without a
    ground-truth box are skipped.
    """
    scored = [r for r in records if r.gt_box is not None]
    if not scored:
        raise EvaluationError("recall curve needs records with ground-truth boxes")
    rows = []
    for value in sweep_values:
        hits = {c: 0 for c in RECALL_CONDITIONS}
        boxes = {c: 0 for c in RECALL_CONDITIONS}
        for record in scored:
            image = _load_image(record)
            caption = generate_global_caption(backends, image, cfg)
            concepts = extract_concepts(backends, record.query, caption, cfg)
            union = []
            for concept in concepts:
                union.extend(
                    detect(backends.detector, image, [concept], confidence_threshold=value)
                )
            union_boxes = [d.box for d in union]
            post = [union_boxes[i] for i in nms_indices(union_boxes, cfg.nms_iou)] \
                if union_boxes else []
            major = [
                b for b in union_boxes
                if area_fraction(b, image.dims) >= major_fraction
            ]
            for condition, subset in (
                ("pre_nms", union_boxes), ("post_nms", post), ("major_only", major)
            ):
                boxes[condition] += len(subset)
                if any(iou(b, record.gt_box) >= recall_iou for b in subset):
                    hits[condition] += 1
        n = len(scored)
        for condition in RECALL_CONDITIONS:
            rows.append(RecallCurveRow(value, condition, boxes[condition] / n,
                                       hits[condition] / n))
    return rows


def write_recall_rows(rows: list[RecallCurveRow], fh) -> None:
    writer = csv.writer(fh)
    writer.writerow(["sweep_value", "condition", "mean_boxes_per_image", "recall"])
    for row in rows:
        writer.writerow([row.sweep_value, row.condition,
                         row.mean_boxes_per_image, row.recall])


# --------------------------------------------------------------------------
# Report files: one summary record, then one record per outcome.

_CSV_COLUMNS = [
    "record_type", "sample_id", "split", "n_samples", "accuracy",
    "generation_recall", "rejection_rate", "mean_reasoning_steps", "mode",
    "predicted_box", "rejected", "iou_with_gt", "hit_at_05",
    "generation_recall_hit", "n_candidates", "n_reasoning_steps", "trace_text",
]


def write_report(report: MetricsReport, outcomes: list[SampleOutcome],
                 path: str | Path, fmt: str = "jsonl") -> None:
    path = Path(path)
    try:
        if fmt == "jsonl":
            with path.open("w") as fh:
                fh.write(json.dumps(report.summary_record(), sort_keys=True) + "\n")
                for o in outcomes:
                    fh.write(json.dumps(o.to_record(), sort_keys=True) + "\n")
        elif fmt == "csv":
            with path.open("w", newline="") as fh:
                writer = csv.DictWriter(fh, fieldnames=_CSV_COLUMNS)
                writer.writeheader()
                summary = report.summary_record()
                writer.writerow({k: summary.get(k, "") for k in _CSV_COLUMNS})
                for o in outcomes:
                    row = o.to_record()
                    row["predicted_box"] = json.dumps(row["predicted_box"])
                    writer.writerow({k: row.get(k, "") for k in _CSV_COLUMNS})
        else:
            raise EvaluationError(f"unknown report format {fmt!r}")
    except OSError as exc:
        raise EvaluationError(f"cannot write report {path}: {exc}") from exc


def _parse_csv_cell(key: str, value: str):
    if key in ("rejected", "hit_at_05", "generation_recall_hit"):
        return value == "True"
    if key in ("n_samples", "n_candidates", "n_reasoning_steps"):
        return int(value)
    if key in ("accuracy", "generation_recall", "rejection_rate",
               "mean_reasoning_steps", "iou_with_gt"):
        return float(value)
    if key == "predicted_box":
        return json.loads(value)
    return value


def read_report(path: str | Path) -> tuple[dict, list[dict]]:
    """Load a report back as (summary record, outcome records)."""
    path = Path(path)
    text = path.read_text()
    summary, outcomes = None, []
    if text.lstrip().startswith("{"):
        for line in text.splitlines():
            if not line.strip():
                continue
            row = json.loads(line)
            if row["record_type"] == "summary":
                summary = row
            else:
                outcomes.append(row)
    else:
        summary_keys = ["record_type", "split", "n_samples", "accuracy", "generation_recall",
                        "rejection_rate", "mean_reasoning_steps", "mode"]
        outcome_keys = ["record_type", "sample_id", "predicted_box", "rejected", "iou_with_gt",
                        "hit_at_05", "generation_recall_hit", "n_candidates",
                        "n_reasoning_steps", "trace_text"]
        with path.open(newline="") as fh:
            for raw in csv.DictReader(fh):
                keys = summary_keys if raw["record_type"] == "summary" else outcome_keys
                row = {k: _parse_csv_cell(k, raw[k]) for k in keys}
                if row["record_type"] == "summary":
                    summary = row
                else:
                    outcomes.append(row)
    if summary is None:
        raise EvaluationError(f"report {path} has no summary record")
    return summary, outcomes


def convert_coco_referring(path_in: str | Path, path_out: str | Path,
                           split: str = "val") -> int:
    """Best-effort converter for COCO-style referring annotation exports.

    Accepts either a flat list of {image, query|sentence, bbox} objects or a
    COCO-ish {"images": [...], "annotations": [...], "refs": [...]} document
    with xywh boxes. Returns the number of records written.
    """
    data = json.loads(Path(path_in).read_text())
    records = []

    def xywh_to_box(b):
        x, y, w, h = b
        return [x, y, x + w, y + h]

    if isinstance(data, list):
        for i, row in enumerate(data):
            query = row.get("query") or row.get("sentence") or row.get("sent")
            image = row.get("image") or row.get("image_path") or row.get("file_name")
            bbox = row.get("bbox") or row.get("gt_box")
            if not (query and image and bbox):
                continue
            box = xywh_to_box(bbox) if row.get("bbox_format", "xywh") == "xywh" else list(bbox)
            records.append({
                "sample_id": row.get("sample_id", f"sample_{i:06d}"),
                "image_path": image,
                "query": query,
                "gt_box": box,
                "split": row.get("split", split),
            })
    elif isinstance(data, dict) and "annotations" in data:
        images = {img["id"]: img["file_name"] for img in data.get("images", [])}
        anns = {ann["id"]: ann for ann in data["annotations"]}
        for i, ref in enumerate(data.get("refs", [])):
            ann = anns.get(ref.get("ann_id"))
            if ann is None:
                continue
            for j, sent in enumerate(ref.get("sentences", [])):
                records.append({
                    "sample_id": f"ref_{ref.get('ref_id', i)}_{j}",
                    "image_path": images.get(ann["image_id"], ""),
                    "query": sent.get("sent") or sent.get("raw", ""),
                    "gt_box": xywh_to_box(ann["bbox"]),
                    "split": ref.get("split", split),
                })
    else:
        raise EvaluationError("unrecognized referring-annotation layout")

    with Path(path_out).open("w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    return len(records)
