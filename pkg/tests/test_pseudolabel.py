import asyncio
import math
from pathlib import Path

import numpy as np
import pytest
from PIL import Image

from reefdeploy.exceptions import (
    ClassificationError,
    ClassOutOfRangeError,
    DimensionMismatchError,
    NoParseableObjectError,
    ZeroNormError,
)
from reefdeploy.models.configs import VlmClientConfig
from reefdeploy.models.reports import LabelingResult, PseudoLabel, PseudoLabelSource
from reefdeploy.models.schemas import GridSpec, PatchClass, PatchFeatures
from reefdeploy.services.manifest_service import load_manifest
from reefdeploy.services.pseudolabel_service import (
    PromptEmbeddings,
    VlmLabeler,
    build_prompt,
    format_response,
    label_patches_similarity,
    label_patches_vlm,
    labels_to_manifest,
    manifest_patches,
    parse_response,
    write_labels,
    write_rejects,
)
from reefdeploy.services.vlm_service import ChatCompletionsTransport
from tests.helpers import read_lines, write_lines
from tests.stub_vlm import ENDPOINT, create_app, stub_client

FIXTURES = Path(__file__).parent / "fixtures"


class FakeSleep:
    def __init__(self):
        self.calls = []

    async def __call__(self, seconds: float) -> None:
        self.calls.append(seconds)


def stub_transport(app):
    return ChatCompletionsTransport(ENDPOINT, "sk-test", "stub-model", client=stub_client(app))


def label_one(app, image: bytes, config: VlmClientConfig, sleep: FakeSleep):
    labeler = VlmLabeler(stub_transport(app), config, sleep=sleep)
    return asyncio.run(labeler.label_one("f0", 0, image))


class TestPrompt:
    def test_prompt_text_is_fixed(self):
        assert build_prompt() == (FIXTURES / "vlm_prompt.txt").read_text(encoding="utf-8")

    def test_prompt_names_output_format(self):
        prompt = build_prompt()
        assert prompt.count("\n\n") == 5
        assert '{"class": 0, "conf": 0.5}' in prompt


class TestParseResponse:
    @pytest.mark.parametrize("code", [0, 1, 2])
    @pytest.mark.parametrize("conf", [0.0, 0.5, 1.0])
    def test_formatted_response(self, code, conf):
        assert parse_response(format_response(code, conf)) == (PatchClass(code), conf)

    def test_prose_wrapped(self):
        assert parse_response('I think {"class": 2, "conf": 0.83} fits best.') == (PatchClass.DEPLOY, 0.83)

    def test_code_fence(self):
        assert parse_response('```json\n{"class": 1, "conf": 0.6}\n```') == (PatchClass.CORAL, 0.6)

    def test_single_quotes(self):
        assert parse_response("{'class': 0, 'conf': 0.4}") == (PatchClass.NO_DEPLOY, 0.4)

    def test_first_object_wins(self):
        assert parse_response('{"class": 1, "conf": 0.3} or maybe {"class": 2, "conf": 0.9}')[0] is PatchClass.CORAL

    def test_skips_objects_without_fields(self):
        text = 'Options: {"a": 1}. Answer: {"class": 2, "conf": 0.7}'
        assert parse_response(text) == (PatchClass.DEPLOY, 0.7)

    @pytest.mark.parametrize("conf, expected", [(1.7, 1.0), (-0.2, 0.0), ("0.25", 0.25)])
    def test_confidence_clamped(self, conf, expected):
        assert parse_response(f'{{"class": 1, "conf": {conf!r}}}'.replace("'", '"'))[1] == expected

    @pytest.mark.parametrize("code, expected", [('"1"', PatchClass.CORAL), ('" 2 "', PatchClass.DEPLOY), ("2.0", PatchClass.DEPLOY)])
    def test_integer_like_class(self, code, expected):
        assert parse_response(f'{{"class": {code}, "conf": 0.9}}') == (expected, 0.9)

    @pytest.mark.parametrize("code", [3, -1, 1.5, '"two"', "true", '"3"', '"1.5"'])
    def test_class_out_of_range(self, code):
        with pytest.raises(ClassOutOfRangeError):
            parse_response(f'{{"class": {code}, "conf": 0.5}}')

    @pytest.mark.parametrize("text", ["", "I cannot tell.", '{"class": 1}', "{class: 1, conf: 0.5}"])
    def test_no_object(self, text):
        with pytest.raises(NoParseableObjectError):
            parse_response(text)


class TestVlmLabeler:
    def test_labels_and_rejects_cover_inputs(self):
        app = create_app()
        patches = [
            ("f0", 0, b"class-2-0.8"),
            ("f0", 1, b"fenced-1"),
            ("f0", 2, b"prose"),
            ("f0", 3, b"class-7"),
            ("f1", 0, b"class-0"),
        ]
        config = VlmClientConfig(retries=1, backoff_ms=10)
        result = label_patches_vlm(stub_transport(app), patches, config, sleep=FakeSleep())

        assert [(l.frame_id, l.patch_index, l.patch_class, l.confidence) for l in result.labels] == [
            ("f0", 0, PatchClass.DEPLOY, 0.8),
            ("f0", 1, PatchClass.CORAL, 0.75),
            ("f1", 0, PatchClass.NO_DEPLOY, 0.9),
        ]
        assert {(r.patch_index, r.reason) for r in result.rejects} == {(2, "no parseable object"), (3, "class out of range")}
        assert len(result.labels) + len(result.rejects) == len(patches)
        assert all(l.source is PseudoLabelSource.CHAT_VLM for l in result.labels)
        assert all(l.raw_response for l in result.labels)

    def test_server_error_is_retried(self):
        app, sleep = create_app(), FakeSleep()
        label = label_one(app, b"flaky-2", VlmClientConfig(retries=2, backoff_ms=100), sleep)
        assert isinstance(label, PseudoLabel)
        assert label.patch_class is PatchClass.DEPLOY
        assert app.state.seen["flaky-2"] == 2
        assert sleep.calls == [0.1]

    def test_parse_failures_back_off_exponentially(self):
        app, sleep = create_app(), FakeSleep()
        reject = label_one(app, b"prose", VlmClientConfig(retries=2, backoff_ms=100), sleep)
        assert reject.reason == "no parseable object"
        assert reject.attempts == 3
        assert reject.raw_response == "I cannot tell what this image shows."
        assert sleep.calls == [0.1, 0.2]

    def test_rate_limit_honours_retry_after(self):
        app, sleep = create_app(), FakeSleep()
        reject = label_one(app, b"throttle", VlmClientConfig(retries=2, backoff_ms=100), sleep)
        assert reject.reason == "rate limited"
        assert reject.attempts == 3
        assert sleep.calls == [0.0, 0.0]

    def test_auth_failure_is_not_retried(self):
        app, sleep = create_app(), FakeSleep()
        reject = label_one(app, b"deny", VlmClientConfig(retries=3), sleep)
        assert (reject.reason, reject.attempts) == ("auth failure", 1)
        assert app.state.seen["deny"] == 1
        assert sleep.calls == []

    def test_confidence_floor(self):
        app, sleep = create_app(), FakeSleep()
        reject = label_one(app, b"class-1-0.2", VlmClientConfig(confidence_floor=0.5), sleep)
        assert reject.reason == "below confidence floor"
        kept = label_one(app, b"class-1-0.5", VlmClientConfig(confidence_floor=0.5), sleep)
        assert kept.confidence == 0.5

    def test_in_flight_bound(self):
        app = create_app(latency_s=0.02)
        patches = [("f0", i, b"class-1") for i in range(12)]
        result = label_patches_vlm(stub_transport(app), patches, VlmClientConfig(max_in_flight=3), sleep=FakeSleep())
        assert len(result.labels) == 12
        assert 1 <= app.state.max_in_flight <= 3

    def test_results_written(self, tmp_path):
        app = create_app()
        patches = [("f0", 0, b"class-2"), ("f0", 1, b"deny")]
        result = label_patches_vlm(stub_transport(app), patches, VlmClientConfig(), sleep=FakeSleep())
        assert write_labels(tmp_path / "labels.jsonl", result) == 1
        assert write_rejects(tmp_path / "rejects.jsonl", result) == 1

        label = read_lines(tmp_path / "labels.jsonl")[0]
        assert {k: label[k] for k in ("frame_id", "patch_index", "class", "conf", "source")} == {
            "frame_id": "f0",
            "patch_index": 0,
            "class": 2,
            "conf": 0.9,
            "source": "chat_vlm",
        }
        assert read_lines(tmp_path / "rejects.jsonl")[0]["reason"] == "auth failure"


def cosine_oracle(patch, prompts):
    """Plain-Python argmax of cosine similarity and its softmax share."""
    def cos(a, b):
        dot = sum(x * y for x, y in zip(a, b))
        return dot / (math.sqrt(sum(x * x for x in a)) * math.sqrt(sum(y * y for y in b)))

    sims = [cos(patch, p) for p in prompts]
    best = max(range(len(sims)), key=sims.__getitem__)
    total = sum(math.exp(s) for s in sims)
    return best, math.exp(sims[best]) / total


class TestSimilarityLabeler:
    def test_matches_brute_force(self):
        rng = np.random.default_rng(9)
        vectors = rng.normal(size=(3, 16))
        prompts = PromptEmbeddings(vectors=tuple(tuple(v) for v in vectors))
        patches = [
            PatchFeatures(frame_id=f"f{i // 28}", patch_index=i % 28, values=tuple(rng.normal(size=16)))
            for i in range(200)
        ]
        labels = label_patches_similarity(patches, prompts)

        assert len(labels) == 200
        for features, label in zip(patches, labels):
            code, share = cosine_oracle(features.values, prompts.vectors)
            assert int(label.patch_class) == code
            assert label.confidence == pytest.approx(share, rel=1e-9)
            assert label.source is PseudoLabelSource.EMBEDDING_SIMILARITY
            assert (label.frame_id, label.patch_index) == (features.frame_id, features.patch_index)

    def test_scale_invariant(self):
        prompts = PromptEmbeddings(vectors=((1.0, 0.0), (0.0, 1.0), (-1.0, 0.0)))
        near = [PatchFeatures(frame_id="a", patch_index=0, values=(0.1, 0.9))]
        far = [PatchFeatures(frame_id="a", patch_index=0, values=(10.0, 90.0))]
        a, b = label_patches_similarity(near, prompts)[0], label_patches_similarity(far, prompts)[0]
        assert a.patch_class is b.patch_class is PatchClass.CORAL
        assert a.confidence == pytest.approx(b.confidence)

    def test_zero_norm_patch(self):
        prompts = PromptEmbeddings(vectors=((1.0, 0.0), (0.0, 1.0), (-1.0, 0.0)))
        with pytest.raises(ZeroNormError):
            label_patches_similarity([PatchFeatures(frame_id="a", patch_index=0, values=(0.0, 0.0))], prompts)

    def test_zero_norm_prompt(self):
        with pytest.raises(ValueError):
            PromptEmbeddings(vectors=((1.0, 0.0), (0.0, 0.0), (-1.0, 0.0)))

    def test_dimension_mismatch(self):
        prompts = PromptEmbeddings(vectors=((1.0, 0.0), (0.0, 1.0), (-1.0, 0.0)))
        with pytest.raises(DimensionMismatchError):
            label_patches_similarity([PatchFeatures(frame_id="a", patch_index=0, values=(1.0, 2.0, 3.0))], prompts)

    def test_empty(self):
        prompts = PromptEmbeddings(vectors=((1.0, 0.0), (0.0, 1.0), (-1.0, 0.0)))
        assert label_patches_similarity([], prompts) == []

    def test_prompt_ensemble_averages_unit_vectors(self):
        ensemble = PromptEmbeddings.from_prompt_ensemble(
            [[[2.0, 0.0], [0.0, 5.0]], [[0.0, 1.0]], [[-3.0, 0.0]]],
            [["sand", "water"], ["coral"], ["rock"]],
        )
        np.testing.assert_allclose(ensemble.vectors[0], [math.sqrt(0.5), math.sqrt(0.5)])
        assert ensemble.vectors[2] == (-1.0, 0.0)
        assert ensemble.prompts[0] == ("sand", "water")

    def test_prompts_from_file(self, tmp_path):
        rows = [
            {"class": 0, "prompt": "sand", "values": [1.0, 0.0]},
            {"class": 1, "prompt": "coral", "values": [0.0, 1.0]},
            {"class": 2, "prompt": "rock", "values": [-1.0, 0.0]},
            {"class": 2, "prompt": "bare rock", "values": [-1.0, 0.1]},
        ]
        prompts = PromptEmbeddings.from_file(write_lines(tmp_path / "prompts.jsonl", rows))
        assert prompts.dim == 2
        assert prompts.prompts[2] == ("rock", "bare rock")

    def test_prompts_file_missing_class(self, tmp_path):
        rows = [{"class": 0, "values": [1.0]}, {"class": 1, "values": [2.0]}]
        with pytest.raises(ClassificationError, match=r"\[2\]"):
            PromptEmbeddings.from_file(write_lines(tmp_path / "prompts.jsonl", rows))


def grid_labels(frame_id: str, classes, source=PseudoLabelSource.EMBEDDING_SIMILARITY):
    return [
        PseudoLabel(frame_id=frame_id, patch_index=i, patch_class=PatchClass(c), confidence=0.9, source=source)
        for i, c in enumerate(classes)
    ]


def test_labels_fill_complete_grids(manifest_path):
    manifest = load_manifest(manifest_path)
    labels = grid_labels("f2", [2] * 28) + grid_labels("f1", [1] * 27)
    filled = labels_to_manifest(labels, manifest).by_id
    assert filled["f2"].patch_labels == (PatchClass.DEPLOY,) * 28
    assert filled["f2"].geo.depth_m == 6.5
    assert filled["f1"].patch_labels is None
    assert filled["p0"].patch_labels == manifest.by_id["p0"].patch_labels


def test_manifest_patches_crop_each_frame(tmp_path):
    for name, colour in (("a.png", (10, 20, 30)), ("b.png", (200, 100, 0))):
        Image.new("RGB", (60, 40), colour).save(tmp_path / name)
    manifest_file = write_lines(
        tmp_path / "m.jsonl", [{"frame_id": "a", "source": "a.png"}, {"frame_id": "b", "source": "b.png"}]
    )
    manifest = load_manifest(manifest_file, grid=GridSpec(rows=2, cols=3))
    patches = manifest_patches(manifest, image_root=tmp_path)
    assert [(f, i) for f, i, _ in patches] == [("a", i) for i in range(6)] + [("b", i) for i in range(6)]
    assert all(image.startswith(b"\x89PNG") for _, _, image in patches)


def test_empty_result_writes_empty_files(tmp_path):
    assert write_labels(tmp_path / "l.jsonl", LabelingResult()) == 0
    assert (tmp_path / "l.jsonl").read_text() == ""
