"""Acceptance suite: one test per criterion, each printing a pass/fail line.

Run with ``pytest tests/test_acceptance.py -v -s`` to see the per-criterion
lines. Every test pins its stated tolerance and wall-clock budget.
"""

import json
import random
import socket
import time
from contextlib import contextmanager
from pathlib import Path

import numpy as np
import pytest
import yaml
from click.testing import CliRunner
from PIL import Image

from conftest import load_golden, load_trace_corpus, oracle_backends
from refground.cli import main as cli_main
from refground.evaluation import (
    load_dataset,
    read_report,
    recall_curve,
    run_ablation,
    run_bench,
)
from refground.gateway import ImagePayload
from refground.geometry import (
    ImageDims,
    NormalizedBox,
    PixelBox,
    area_fraction,
    denormalize,
    filter_by_area,
    iou,
    nms,
    normalize,
)
from refground.oracle import OracleDetector, OracleLLM, OracleMLLM
from refground.pipeline import (
    Backends,
    PipelineConfig,
    ground,
    parse_reasoning_trace,
)
from refground.prompts import (
    render_aggregation_prompt,
    render_concept_extraction,
    render_global_caption_prompt,
    render_instance_description_prompt,
)
from refground.scenes import SceneManifest, SceneObject, SceneQuery, generate_scene_set, render_scene
from refground.visual import VisualPromptSpec, outline_band, render_visual_prompt_image
from test_prompts import selection_bundle_from_case


@contextmanager
def criterion(number: int, title: str, budget_seconds: float):
    start = time.perf_counter()
    try:
        yield
    except BaseException:
        print(f"ACCEPTANCE FAIL [{number:2d}] {title}")
        raise
    elapsed = time.perf_counter() - start
    assert elapsed < budget_seconds, (
        f"criterion {number} exceeded its {budget_seconds}s budget: {elapsed:.2f}s"
    )
    print(f"ACCEPTANCE PASS [{number:2d}] {title} ({elapsed:.2f}s)")


@contextmanager
def network_disabled():
    real_connect = socket.socket.connect

    def refused(self, *args, **kwargs):
        raise AssertionError("network access attempted during a no-network criterion")

    socket.socket.connect = refused
    try:
        yield
    finally:
        socket.socket.connect = real_connect


def matrix_brute_nms(boxes: list[PixelBox], threshold: float) -> list[PixelBox]:
    """Independent O(n^2) reference: full pairwise IoU matrix, greedy scan."""
    n = len(boxes)
    if n == 0:
        return []
    arr = np.array([b.as_list() for b in boxes])
    x0, y0, x1, y1 = arr[:, 0], arr[:, 1], arr[:, 2], arr[:, 3]
    areas = (x1 - x0) * (y1 - y0)
    iw = np.minimum(x1[:, None], x1[None, :]) - np.maximum(x0[:, None], x0[None, :])
    ih = np.minimum(y1[:, None], y1[None, :]) - np.maximum(y0[:, None], y0[None, :])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    matrix = inter / (areas[:, None] + areas[None, :] - inter)
    order = sorted(range(n), key=lambda k: -areas[k])
    kept = []
    for i in order:
        if all(matrix[i][j] <= threshold for j in kept):
            kept.append(i)
    return [boxes[i] for i in kept]


@pytest.fixture(scope="module")
def big_scene_set(tmp_path_factory):
    """200 unambiguous scenes shared by the end-to-end and ablation criteria."""
    out = tmp_path_factory.mktemp("acceptance_scenes")
    dataset = generate_scene_set(out, 200, seed=2024)
    return out, dataset


def oracle_config_file(tmp_path, scenes_dir, **mllm_extra) -> Path:
    config = tmp_path / "config.yaml"
    mllm = {"kind": "oracle", "scenes_dir": str(scenes_dir), **mllm_extra}
    config.write_text(yaml.safe_dump({
        "endpoints": {
            "llm": {"kind": "oracle", "scenes_dir": str(scenes_dir)},
            "mllm": mllm,
            "detector": {"kind": "oracle", "scenes_dir": str(scenes_dir)},
        },
    }))
    return config


def test_criterion_01_geometry_oracle_equivalence():
    with criterion(1, "NMS brute-force equivalence and IoU properties", 10.0):
        rng = random.Random(1001)
        for case in range(1000):
            n = rng.randrange(0, 201)
            boxes = []
            for _ in range(n):
                x0, y0 = rng.uniform(0, 900), rng.uniform(0, 900)
                boxes.append(PixelBox(x0, y0, x0 + rng.uniform(0.5, 120),
                                      y0 + rng.uniform(0.5, 120)))
            threshold = rng.choice([0.3, 0.5, 0.7, 0.9])
            assert nms(boxes, threshold) == matrix_brute_nms(boxes, threshold), \
                f"case {case} diverged"
        for _ in range(10000):
            ax, ay = rng.uniform(0, 500), rng.uniform(0, 500)
            a = PixelBox(ax, ay, ax + rng.uniform(0.5, 200), ay + rng.uniform(0.5, 200))
            bx, by = rng.uniform(0, 500), rng.uniform(0, 500)
            b = PixelBox(bx, by, bx + rng.uniform(0.5, 200), by + rng.uniform(0.5, 200))
            assert iou(a, b) == iou(b, a)
            assert iou(a, a) == 1.0
            disjoint = PixelBox(a.x_max + 1, a.y_min, a.x_max + 10, a.y_max)
            assert iou(a, disjoint) == 0.0


def test_criterion_02_normalization_contract():
    with criterion(2, "bottom-left 3-decimal normalization and round-trip", 2.0):
        rng = random.Random(2002)
        for _ in range(1000):
            w, h = rng.randrange(16, 4000), rng.randrange(16, 4000)
            dims = ImageDims(w, h)
            bw, bh = rng.uniform(0.01, 1.0) * w, rng.uniform(0.01, 1.0) * h
            x0, y0 = rng.uniform(0, w - bw), rng.uniform(0, h - bh)
            box = PixelBox(x0, y0, x0 + bw, y0 + bh)
            nb = normalize(box, dims)
            # exactly three decimals in the serialized form, lossless to reparse
            for rendered, stored in zip(nb.format_fields(), nb.as_tuple()):
                assert len(rendered.split(".")[1]) == 3
                assert float(rendered) == stored
            # bottom-left origin: a top-edge box has center_y above 0.5
            top_edge = PixelBox(0, 0, max(bw, 1.0), max(1.0, h * 0.1))
            assert normalize(top_edge, dims).center_y > 0.5
            # round-trip: each normalized coordinate within half a rounding
            # step of the original, scaled by its dimension
            back = denormalize(nb, dims)
            tol_x, tol_y = 0.0005 * w + 1e-9, 0.0005 * h + 1e-9
            assert abs((back.x_min + back.x_max) / 2 - (x0 + bw / 2)) <= tol_x
            assert abs((back.y_min + back.y_max) / 2 - (y0 + bh / 2)) <= tol_y
            assert abs(back.width - bw) <= tol_x
            assert abs(back.height - bh) <= tol_y
            # corner positions inherit at most 1.5 rounding steps
            assert abs(back.x_min - x0) <= 2 * tol_x
            assert abs(back.y_max - (y0 + bh)) <= 2 * tol_y


def test_criterion_03_prompt_byte_exactness():
    with criterion(3, "rendered prompts equal reviewed golden fixtures", 1.0):
        concept_cases = load_golden("concept_extraction")
        assert len(concept_cases) == 10
        for case in concept_cases:
            bundle = render_concept_extraction(
                case["params"]["query"], case["params"]["caption"],
                case["params"].get("noun_examples"),
            )
            assert bundle.system_text == case["system"]
            assert bundle.user_text == case["user"]
            assert (
                "Image description: ... (For example, two kids playing in the park)\n"
                "Query: left kid in blue shirt\n"
                "<assistant>\n"
                "kid, child, person, shirt, clothing\n"
            ) in bundle.system_text

        global_case = load_golden("global_caption")[0]
        for _ in range(10):
            assert render_global_caption_prompt().user_text == global_case["user"]

        instance_cases = load_golden("instance_description")
        assert len(instance_cases) == 10
        for case in instance_cases:
            params = case["params"]
            kwargs = {k: params[k] for k in ("box_format_label", "visual_prompt_name")
                      if k in params}
            bundle = render_instance_description_prompt(
                params["concept"], NormalizedBox(*params["box"]), **kwargs
            )
            assert bundle.system_text == case["system"]
            assert bundle.user_text == case["user"]

        selection_cases = load_golden("selection")
        assert len(selection_cases) == 10
        for case in selection_cases:
            bundle = selection_bundle_from_case(case)
            assert bundle.system_text == case["system"]
            assert bundle.user_text == case["user"]

        aggregation_cases = load_golden("aggregation")
        assert len(aggregation_cases) == 10
        for case in aggregation_cases:
            bundle = render_aggregation_prompt(case["params"]["descriptions"])
            assert bundle.user_text == case["user"]


def test_criterion_04_visual_prompt_pixel_contract():
    with criterion(4, "visual prompt: interior kept, band red, exterior blurred", 5.0):
        yy, xx = np.indices((240, 320))
        board = ((xx + yy) % 2 * 255).astype(np.uint8)
        source = ImagePayload.from_pil(Image.fromarray(np.stack([board] * 3, axis=-1)))
        box = PixelBox(120, 80, 200, 160)
        spec = VisualPromptSpec()  # red outline, sigma 10.0
        out = render_visual_prompt_image(source, box, spec)
        a = np.asarray(source.to_pil())
        b = np.asarray(out.to_pil())
        assert np.array_equal(b[80:160, 120:200], a[80:160, 120:200])
        (ox0, oy0, ox1, oy1), (ix0, iy0, ix1, iy1) = outline_band(box, 320, 240, 3)
        band = np.zeros((240, 320), dtype=bool)
        band[oy0:oy1, ox0:ox1] = True
        band[iy0:iy1, ix0:ix1] = False
        assert np.all(b[band] == np.array([255, 0, 0], dtype=np.uint8))
        exterior = np.ones((240, 320), dtype=bool)
        exterior[oy0:oy1, ox0:ox1] = False
        assert np.any(a[exterior] != b[exterior])


def test_criterion_05_end_to_end_oracle_pipeline(big_scene_set, tmp_path):
    with criterion(5, "200-scene oracle bench: accuracy, recall 100%, recount", 60.0):
        scenes_dir, dataset = big_scene_set
        config = oracle_config_file(tmp_path, scenes_dir)
        report_path = tmp_path / "report.jsonl"
        with network_disabled():
            result = CliRunner().invoke(cli_main, [
                "bench", str(dataset), "--config", str(config),
                "--report", str(report_path),
            ])
        assert result.exit_code == 0, result.output
        summary, outcomes = read_report(report_path)
        assert summary["n_samples"] == 200
        assert summary["accuracy"] == 1.0
        assert summary["generation_recall"] == 1.0
        assert summary["rejection_rate"] == 0.0
        # recount oracle: one independent pass over the outcome records
        n = len(outcomes)
        assert n == 200
        assert sum(1 for o in outcomes if o["hit_at_05"]) / n == summary["accuracy"]
        assert sum(1 for o in outcomes if o["generation_recall_hit"]) / n \
            == summary["generation_recall"]
        assert sum(1 for o in outcomes if o["rejected"]) / n == summary["rejection_rate"]
        assert f"accuracy={summary['accuracy']:.4f}" in result.output


def test_criterion_06_ablation_ordering(big_scene_set):
    with criterion(6, "query-echo accuracy beats corrupted captions, equals recall", 90.0):
        scenes_dir, dataset = big_scene_set
        records = load_dataset(dataset)
        backends = oracle_backends(scenes_dir, corrupt_fraction=0.3, corrupt_seed=11)
        cfg = PipelineConfig()
        caption_report, _ = run_ablation(backends, records, cfg, "caption")
        echo_report, _ = run_ablation(backends, records, cfg, "query_echo")
        assert echo_report.accuracy > caption_report.accuracy  # strict inequality
        assert echo_report.accuracy == echo_report.generation_recall  # exact


def test_criterion_07_refinement_constants():
    with criterion(7, "2.5% filter boundary and top-10 primary split", 5.0):
        dims = ImageDims(640, 480)
        at_boundary = PixelBox(0, 0, 80, 96)            # exactly 2.5%
        below = PixelBox(100, 0, 176.4928, 100)         # exactly 2.49%
        assert area_fraction(at_boundary, dims) == 0.025
        assert abs(area_fraction(below, dims) - 0.0249) < 1e-12
        survivors = filter_by_area([at_boundary, below], dims)
        assert survivors == [at_boundary]

        grid_dims = ImageDims(1200, 900)
        objects = []
        for i in range(12):
            x0, y0 = (i % 4) * 300 + 10, (i // 4) * 300 + 10
            side = 250 - 4 * i
            objects.append(SceneObject(
                f"obj{i}", "box", ["crate"], f"c{i}", (10, 10, 10), "top left",
                f"a c{i} box in the top left", PixelBox(x0, y0, x0 + side, y0 + side),
            ))
        scene = SceneManifest(
            scene_id="twelve", dims=grid_dims, background_rgb=(235, 235, 235),
            global_caption="A plain scene containing twelve boxes.",
            objects=objects, queries=[SceneQuery("the c5 box", "obj5")],
        )
        backends = Backends(llm=OracleLLM(scene=scene), mllm=OracleMLLM(scene=scene),
                            detector=OracleDetector(scene=scene))
        image = ImagePayload.from_pil(render_scene(scene), source_path="twelve.png")
        result = ground(backends, image, "the c5 box", PipelineConfig())
        tiers = [c.tier for c in result.candidate_set.candidates]
        assert tiers == ["primary"] * 10 + ["other"] * 2
        described = [c.description is not None for c in result.candidate_set.candidates]
        assert described == [True] * 10 + [False] * 2
        assert result.predicted_box == objects[5].box


def test_criterion_08_rejection_path(tmp_path):
    with criterion(8, "no-target queries reject: exit 2 and nonzero rate", 10.0):
        scenes_dir = tmp_path / "rejection_scenes"
        dataset = generate_scene_set(scenes_dir, 20, seed=31, rejection_fraction=1.0)
        records = load_dataset(dataset)
        assert len(records) == 20 and all(r.gt_box is None for r in records)
        backends = oracle_backends(scenes_dir)
        report, outcomes = run_bench(backends, records, PipelineConfig())
        assert report.rejection_rate == 1.0
        assert all(o.rejected for o in outcomes)
        from refground.evaluation import write_report
        report_path = tmp_path / "rejections.jsonl"
        write_report(report, outcomes, report_path)
        summary, _ = read_report(report_path)
        assert summary["rejection_rate"] > 0.0

        config = oracle_config_file(tmp_path, scenes_dir)
        record = records[0]
        result = CliRunner().invoke(cli_main, [
            "ground", record.image_path, record.query, "--config", str(config),
        ])
        assert result.exit_code == 2, result.output
        assert "rejected: true" in result.output


def test_criterion_09_trace_parser_corpus():
    with criterion(9, "20 pre-registered trace variants parse exactly", 1.0):
        corpus = load_trace_corpus()
        assert len(corpus) == 20
        assert any("Answer: 1" in case["raw"] for case in corpus)
        for case in corpus:
            trace = parse_reasoning_trace(case["raw"], case["n_candidates"])
            expected = case["expected"]
            assert len(trace.steps) == expected["steps"], case["id"]
            assert trace.answer_index == expected["answer_index"], case["id"]
            assert trace.rejected == expected["rejected"], case["id"]
            assert trace.parse_quality == expected["parse_quality"], case["id"]


def test_criterion_10_replay_determinism(tmp_path):
    with criterion(10, "record then network-disabled replay: identical report", 10.0):
        scenes_dir = tmp_path / "replay_scenes"
        dataset = generate_scene_set(scenes_dir, 5, seed=47)
        config = oracle_config_file(tmp_path, scenes_dir)
        cassette = tmp_path / "run.cassette.jsonl"
        report_rec = tmp_path / "recorded.jsonl"
        report_rep = tmp_path / "replayed.jsonl"

        rec = CliRunner().invoke(cli_main, [
            "record", str(dataset), "--config", str(config),
            "--cassette", str(cassette), "--report", str(report_rec),
        ])
        assert rec.exit_code == 0, rec.output

        with network_disabled():
            rep = CliRunner().invoke(cli_main, [
                "replay", str(dataset), "--config", str(config),
                "--cassette", str(cassette), "--report", str(report_rep),
            ])
        assert rep.exit_code == 0, rep.output
        assert report_rec.read_bytes() == report_rep.read_bytes()


def test_criterion_11_recall_curve_structure(tmp_path):
    with criterion(11, "major-only recall gap equals the built small fraction", 30.0):
        scenes_dir = tmp_path / "curve_scenes"
        dataset = generate_scene_set(scenes_dir, 50, seed=59, small_fraction=0.1)
        records = load_dataset(dataset)
        flagged = sum(
            1 for r in records
            if json.loads(
                (scenes_dir / (Path(r.image_path).stem + ".json")).read_text()
            )["metadata"]["small_target"]
        )
        assert flagged == 5  # exactly 10% of 50
        backends = oracle_backends(scenes_dir)
        rows = recall_curve(backends, records, PipelineConfig(),
                            sweep_values=[0.1, 0.3, 0.5])
        n, n_small = len(records), flagged
        for value in (0.1, 0.3, 0.5):
            at = {r.condition: r for r in rows if r.sweep_value == value}
            # exactly the constructed fraction: the gap is n_small hits of n
            assert at["pre_nms"].recall == 1.0
            assert at["major_only"].recall == (n - n_small) / n
            assert round(n * (at["pre_nms"].recall - at["major_only"].recall)) == n_small
            assert at["post_nms"].recall <= at["pre_nms"].recall
