from __future__ import annotations

import hashlib
import io
import random

import httpx
import numpy as np
import pytest
from PIL import Image

from failscope._data import coco_classes
from failscope.assist import (
    CHALLENGE_TEMPLATES,
    AugmentationError,
    AugmentationKind,
    AugmentationSpec,
    CaptionError,
    FixtureImageGenerator,
    HttpCaptionBackend,
    Lexicon,
    LexiconError,
    PromptStrategy,
    PromptSuggestion,
    StubCaptionBackend,
    augment,
    bundled_lexicon,
    challenge_templates,
    suggest_prompts,
)
from failscope.classify import AnnotatedObject, PredictedObject, classify
from failscope.geometry import (
    BoundingBox,
    LabeledBox,
    build_cost_matrix,
    optimal_assignment,
)

CLASSES = coco_classes()


def run_pipeline(anns, preds, classes=CLASSES):
    matrix = build_cost_matrix([a.labeled for a in anns], [p.labeled for p in preds])
    assignment = optimal_assignment(matrix)
    return classify(anns, preds, assignment, classes, image_id="img-1")


def ann(ann_id, label, box=(0.2, 0.3, 0.7, 0.8)):
    return AnnotatedObject(id=ann_id, labeled=LabeledBox(label, BoundingBox(*box)), image_id="img-1")


def pred(pred_id, label, box=(0.2, 0.3, 0.7, 0.8), score=0.99):
    return PredictedObject(id=pred_id, labeled=LabeledBox(label, BoundingBox(*box)), score=score)


def encode_png(pixels, mode="RGB"):
    height = len(pixels)
    width = len(pixels[0])
    img = Image.new(mode, (width, height))
    img.putdata([px for row in pixels for px in row])
    buffer = io.BytesIO()
    img.save(buffer, format="PNG")
    return buffer.getvalue()


def decode_array(data):
    return np.asarray(Image.open(io.BytesIO(data)))


def random_png(rng, width=16, height=12):
    rows = [
        [(rng.randrange(256), rng.randrange(256), rng.randrange(256)) for _ in range(width)]
        for _ in range(height)
    ]
    return encode_png(rows)


class TestChallengeTemplates:
    def test_cat_expansion(self):
        prompts = challenge_templates("cat")
        assert len(prompts) == 5
        assert prompts[0] == "an image of a cat at night"
        assert prompts == [
            "an image of a cat at night",
            "many cats",
            "a partially occluded cat",
            "a blurry photo of a cat",
            "a drawing of a cat",
        ]

    def test_taxi_substitution(self):
        prompts = challenge_templates("taxi")
        assert len(prompts) == 5
        assert all("taxi" in p for p in prompts)

    def test_empty_label_rejected(self):
        with pytest.raises(ValueError):
            challenge_templates("")
        with pytest.raises(ValueError):
            challenge_templates("   ")

    def test_label_normalized_first(self):
        assert challenge_templates("  CAT ") == challenge_templates("cat")

    def test_template_constant_order(self):
        assert CHALLENGE_TEMPLATES == (
            "an image of a {label} at night",
            "many {label}s",
            "a partially occluded {label}",
            "a blurry photo of a {label}",
            "a drawing of a {label}",
        )


class TestBundledLexicon:
    def test_taxi_has_car_hypernym(self):
        lex = bundled_lexicon()
        assert "car" in lex.hypernyms["taxi"]

    def test_vehicle_hyponyms_cover_coco_vehicles(self):
        lex = bundled_lexicon()
        narrower = set(lex.hyponyms["vehicle"])
        assert {"car", "truck", "bus", "train"} <= narrower

    def test_labels_normalized(self):
        lex = bundled_lexicon()
        for mapping in (lex.hypernyms, lex.hyponyms):
            for label, related in mapping.items():
                assert label == label.strip().lower()
                assert all(r == r.strip().lower() for r in related)

    def test_cycle_detected(self):
        raw = {"hypernyms": {"a": ["b"], "b": ["a"]}, "hyponyms": {}}
        with pytest.raises(LexiconError):
            Lexicon.from_dict(raw)

    def test_self_relation_rejected(self):
        raw = {"hypernyms": {"a": ["a"]}, "hyponyms": {}}
        with pytest.raises(LexiconError):
            Lexicon.from_dict(raw)

    def test_unnormalized_key_rejected(self):
        raw = {"hypernyms": {"Taxi": ["car"]}, "hyponyms": {}}
        with pytest.raises(LexiconError):
            Lexicon.from_dict(raw)

    def test_related_in_classes_filters(self):
        lex = bundled_lexicon()
        related = lex.related_in_classes("taxi", {"car", "dog"})
        assert ("car", "broader") in related
        assert all(label in {"car", "dog"} for label, _ in related)


class TestSuggestPrompts:
    def test_ood_taxi_guides_to_car(self):
        # taxi is not a COCO class; its broader label car is
        anns = [ann("a1", "taxi")]
        preds = [pred("p1", "car", box=(0.21, 0.31, 0.69, 0.79))]
        report = run_pipeline(anns, preds)
        plan = suggest_prompts(report, anns, bundled_lexicon(), CLASSES)
        guides = [s for s in plan.suggestions if s.strategy is PromptStrategy.GUIDE]
        assert guides
        assert any("car" in s.text for s in guides)
        assert all(s.annotation_id == "a1" for s in guides)

    def test_cd_emits_five_challenges_in_order(self):
        anns = [ann("a1", "cat")]
        preds = [pred("p1", "cat")]
        report = run_pipeline(anns, preds)
        plan = suggest_prompts(report, anns, bundled_lexicon(), CLASSES)
        challenges = [s for s in plan.suggestions if s.strategy is PromptStrategy.CHALLENGE]
        assert [s.text for s in challenges] == challenge_templates("cat")
        assert "an image of a cat at night" in {s.text for s in challenges}
        assert "many cats" in {s.text for s in challenges}

    def test_fd_id_without_backend_records_notice(self):
        anns = [ann("a1", "dog")]
        preds = [pred("p1", "cat")]
        report = run_pipeline(anns, preds)
        plan = suggest_prompts(report, anns, bundled_lexicon(), CLASSES)
        repeats = [s for s in plan.suggestions if s.strategy is PromptStrategy.REPEAT]
        assert repeats == []
        assert len(plan.notices) == 1
        assert "a1" in plan.notices[0]
        assert "caption backend" in plan.notices[0]

    def test_fd_id_with_backend_emits_repeat(self):
        anns = [ann("a1", "dog")]
        preds = [pred("p1", "cat")]
        report = run_pipeline(anns, preds)
        image = encode_png([[(1, 2, 3), (4, 5, 6)]])
        key = hashlib.sha256(image).hexdigest()
        backend = StubCaptionBackend({key: "a dog on a sofa"})
        plan = suggest_prompts(
            report, anns, bundled_lexicon(), CLASSES, caption_backend=backend, image=image
        )
        repeats = [s for s in plan.suggestions if s.strategy is PromptStrategy.REPEAT]
        assert len(repeats) == 1
        assert repeats[0].text == "a dog on a sofa"
        assert plan.notices == ()

    def test_fd_id_backend_but_no_image_records_notice(self):
        anns = [ann("a1", "dog")]
        preds = [pred("p1", "cat")]
        report = run_pipeline(anns, preds)
        backend = StubCaptionBackend({})
        plan = suggest_prompts(report, anns, bundled_lexicon(), CLASSES, caption_backend=backend)
        assert [s for s in plan.suggestions if s.strategy is PromptStrategy.REPEAT] == []
        assert any("image bytes unavailable" in n for n in plan.notices)

    def test_caption_failure_becomes_notice(self):
        anns = [ann("a1", "dog")]
        preds = [pred("p1", "cat")]
        report = run_pipeline(anns, preds)
        backend = StubCaptionBackend({})  # sha miss -> CaptionError
        plan = suggest_prompts(
            report, anns, bundled_lexicon(), CLASSES, caption_backend=backend, image=b"img"
        )
        assert [s for s in plan.suggestions if s.strategy is PromptStrategy.REPEAT] == []
        assert len(plan.notices) == 1

    def test_fd_ood_never_repeats(self):
        anns = [ann("a1", "taxi")]
        preds = [pred("p1", "car")]
        report = run_pipeline(anns, preds)
        image = encode_png([[(9, 9, 9)]])
        backend = StubCaptionBackend({hashlib.sha256(image).hexdigest(): "whatever"})
        plan = suggest_prompts(
            report, anns, bundled_lexicon(), CLASSES, caption_backend=backend, image=image
        )
        assert [s for s in plan.suggestions if s.strategy is PromptStrategy.REPEAT] == []
        assert plan.notices == ()

    def test_block_order_and_sorting(self):
        # two OOD annotations far apart, one CD, one FD(ID); ids chosen so
        # sorting by annotation id is visible
        anns = [
            ann("a3", "taxi", box=(0.0, 0.0, 0.2, 0.2)),
            ann("a1", "sedan", box=(0.4, 0.4, 0.6, 0.6)),
            ann("a2", "cat", box=(0.7, 0.7, 0.9, 0.9)),
            ann("a4", "dog", box=(0.0, 0.7, 0.2, 0.9)),
        ]
        preds = [
            pred("p2", "cat", box=(0.7, 0.7, 0.9, 0.9)),
            pred("p4", "bird", box=(0.0, 0.7, 0.2, 0.9)),
        ]
        report = run_pipeline(anns, preds)
        plan = suggest_prompts(report, anns, bundled_lexicon(), CLASSES)
        strategies = [s.strategy for s in plan.suggestions]
        first_challenge = strategies.index(PromptStrategy.CHALLENGE)
        assert all(s is PromptStrategy.GUIDE for s in strategies[:first_challenge])
        assert all(s is PromptStrategy.CHALLENGE for s in strategies[first_challenge:])
        guide_ids = [s.annotation_id for s in plan.suggestions if s.strategy is PromptStrategy.GUIDE]
        assert guide_ids == sorted(guide_ids)

    def test_deterministic(self):
        anns = [ann("a1", "taxi"), ann("a2", "cat", box=(0.0, 0.0, 0.1, 0.1))]
        preds = [pred("p1", "car", box=(0.2, 0.3, 0.7, 0.8)), pred("p2", "cat", box=(0.0, 0.0, 0.1, 0.1))]
        report = run_pipeline(anns, preds)
        lex = bundled_lexicon()
        first = suggest_prompts(report, anns, lex, CLASSES)
        second = suggest_prompts(report, anns, lex, CLASSES)
        assert first == second

    def test_guide_labels_stay_inside_model_classes(self):
        lex = bundled_lexicon()
        rng = random.Random(20240817)
        candidates = sorted(lex.hypernyms)
        for trial in range(50):
            label = rng.choice(candidates)
            if label in CLASSES:
                continue
            anns = [ann(f"a{trial}", label)]
            report = run_pipeline(anns, [])
            plan = suggest_prompts(report, anns, lex, CLASSES)
            for suggestion in plan.suggestions:
                if suggestion.strategy is PromptStrategy.GUIDE:
                    related = suggestion.text.removeprefix("an image of a ")
                    assert related in CLASSES

    def test_ood_with_no_known_relation_emits_nothing(self):
        anns = [ann("a1", "dessert")]
        report = run_pipeline(anns, [], classes={"car"})
        plan = suggest_prompts(report, anns, bundled_lexicon(), {"car"})
        assert plan.suggestions == ()

    def test_unknown_annotation_reference_rejected(self):
        anns = [ann("a1", "cat")]
        preds = [pred("p1", "cat")]
        report = run_pipeline(anns, preds)
        with pytest.raises(ValueError):
            suggest_prompts(report, [], bundled_lexicon(), CLASSES)

    def test_empty_suggestion_text_rejected(self):
        with pytest.raises(ValueError):
            PromptSuggestion(PromptStrategy.GUIDE, "", "why", "a1")


class TestCaptionBackends:
    def test_stub_round_trip(self):
        image = b"image-bytes"
        key = hashlib.sha256(image).hexdigest()
        backend = StubCaptionBackend({key: "two dogs"})
        assert backend.caption(image) == "two dogs"

    def test_stub_unknown_image(self):
        backend = StubCaptionBackend({})
        with pytest.raises(CaptionError):
            backend.caption(b"mystery")

    def test_http_success(self):
        seen = {}

        def handler(request):
            seen["body"] = request.content
            seen["content_type"] = request.headers["content-type"]
            return httpx.Response(200, json={"caption": " a cat on a mat "})

        backend = HttpCaptionBackend(
            "http://caption.test/v1", transport=httpx.MockTransport(handler)
        )
        assert backend.caption(b"raw-bytes") == "a cat on a mat"
        assert seen["body"] == b"raw-bytes"
        assert seen["content_type"] == "application/octet-stream"

    def test_http_error_status(self):
        transport = httpx.MockTransport(lambda request: httpx.Response(500))
        backend = HttpCaptionBackend("http://caption.test/v1", transport=transport)
        with pytest.raises(CaptionError):
            backend.caption(b"x")

    def test_http_bad_payloads(self):
        for response in (
            httpx.Response(200, content=b"not json"),
            httpx.Response(200, json={"nope": 1}),
            httpx.Response(200, json={"caption": "   "}),
        ):
            transport = httpx.MockTransport(lambda request, r=response: r)
            backend = HttpCaptionBackend("http://caption.test/v1", transport=transport)
            with pytest.raises(CaptionError):
                backend.caption(b"x")


class TestFixtureImageGenerator:
    def test_keyed_by_prompt_hash(self):
        prompt = "an image of a car"
        key = hashlib.sha256(prompt.encode("utf-8")).hexdigest()
        gen = FixtureImageGenerator({key: [b"blob-1", b"blob-2"]})
        assert gen.generate(prompt) == [b"blob-1", b"blob-2"]
        assert gen.generate("something else") == []


class TestAugmentationSpec:
    def test_valid_ranges(self):
        AugmentationSpec(AugmentationKind.BRIGHTNESS, 0.5)
        AugmentationSpec(AugmentationKind.ROTATION, -45.0)
        AugmentationSpec(AugmentationKind.BLUR, 0.0)
        AugmentationSpec(AugmentationKind.CROP, 1.0)

    def test_invalid_parameters(self):
        with pytest.raises(AugmentationError):
            AugmentationSpec(AugmentationKind.BRIGHTNESS, 0.0)
        with pytest.raises(AugmentationError):
            AugmentationSpec(AugmentationKind.BRIGHTNESS, -1.0)
        with pytest.raises(AugmentationError):
            AugmentationSpec(AugmentationKind.BLUR, -0.1)
        with pytest.raises(AugmentationError):
            AugmentationSpec(AugmentationKind.CROP, 0.0)
        with pytest.raises(AugmentationError):
            AugmentationSpec(AugmentationKind.CROP, 1.5)
        with pytest.raises(AugmentationError):
            AugmentationSpec(AugmentationKind.ROTATION, float("nan"))

    def test_identity_flags(self):
        assert AugmentationSpec(AugmentationKind.BRIGHTNESS, 1.0).is_identity
        assert AugmentationSpec(AugmentationKind.ROTATION, 0.0).is_identity
        assert AugmentationSpec(AugmentationKind.ROTATION, 360.0).is_identity
        assert AugmentationSpec(AugmentationKind.ROTATION, -720.0).is_identity
        assert AugmentationSpec(AugmentationKind.BLUR, 0.0).is_identity
        assert AugmentationSpec(AugmentationKind.CROP, 1.0).is_identity
        assert not AugmentationSpec(AugmentationKind.ROTATION, 90.0).is_identity


class TestAugment:
    def test_identity_is_bitwise_noop_for_every_kind(self):
        data = random_png(random.Random(7))
        for spec in (
            AugmentationSpec(AugmentationKind.BRIGHTNESS, 1.0),
            AugmentationSpec(AugmentationKind.ROTATION, 0.0),
            AugmentationSpec(AugmentationKind.ROTATION, 360.0),
            AugmentationSpec(AugmentationKind.BLUR, 0.0),
            AugmentationSpec(AugmentationKind.CROP, 1.0),
        ):
            assert augment(data, spec) == data

    def test_rotation_90_on_2x1_bitmap(self):
        # hand-computed: row [A, B] turned counterclockwise becomes a column
        # with B on top and A at the bottom
        a, b = (255, 0, 0), (0, 0, 255)
        data = encode_png([[a, b]])
        rotated = augment(data, AugmentationSpec(AugmentationKind.ROTATION, 90.0))
        img = Image.open(io.BytesIO(rotated))
        assert img.size == (1, 2)
        assert img.getpixel((0, 0)) == b
        assert img.getpixel((0, 1)) == a

    def test_rotation_90_matches_numpy_oracle(self):
        data = random_png(random.Random(11), width=9, height=5)
        rotated = augment(data, AugmentationSpec(AugmentationKind.ROTATION, 90.0))
        expected = np.rot90(decode_array(data), k=1)
        assert np.array_equal(decode_array(rotated), expected)

    def test_rotation_180_and_270_match_numpy_oracle(self):
        data = random_png(random.Random(12), width=6, height=4)
        for degrees, k in ((180.0, 2), (270.0, 3)):
            rotated = augment(data, AugmentationSpec(AugmentationKind.ROTATION, degrees))
            expected = np.rot90(decode_array(data), k=k)
            assert np.array_equal(decode_array(rotated), expected)

    def test_four_quarter_turns_restore_exactly(self):
        data = random_png(random.Random(13))
        spec = AugmentationSpec(AugmentationKind.ROTATION, 90.0)
        out = data
        for _ in range(4):
            out = augment(out, spec)
        assert np.array_equal(decode_array(out), decode_array(data))

    def test_arbitrary_angle_expands_canvas(self):
        data = random_png(random.Random(14), width=20, height=10)
        rotated = augment(data, AugmentationSpec(AugmentationKind.ROTATION, 45.0))
        img = Image.open(io.BytesIO(rotated))
        assert img.size[0] > 20 and img.size[1] > 10

    def test_brightness_matches_pixel_formula(self):
        data = random_png(random.Random(15))
        for factor in (0.25, 0.5, 1.5, 3.6):
            out = augment(data, AugmentationSpec(AugmentationKind.BRIGHTNESS, factor))
            arr = decode_array(data).astype(np.float64)
            expected = np.minimum(255, np.round(arr * factor)).astype(np.uint8)
            assert np.array_equal(decode_array(out), expected), factor

    def test_brightness_preserves_alpha(self):
        img = Image.new("RGBA", (2, 2), (100, 100, 100, 37))
        buffer = io.BytesIO()
        img.save(buffer, format="PNG")
        out = augment(buffer.getvalue(), AugmentationSpec(AugmentationKind.BRIGHTNESS, 2.0))
        arr = decode_array(out)
        assert (arr[..., 3] == 37).all()
        assert (arr[..., :3] == 200).all()

    def test_crop_matches_slice_oracle(self):
        data = random_png(random.Random(16), width=10, height=8)
        out = augment(data, AugmentationSpec(AugmentationKind.CROP, 0.5))
        arr = decode_array(data)
        cropped = decode_array(out)
        assert cropped.shape == (4, 5, 3)
        # centered window: left=(10-5)//2=2, top=(8-4)//2=2
        assert np.array_equal(cropped, arr[2:6, 2:7])

    def test_crop_never_collapses_to_zero(self):
        data = random_png(random.Random(17), width=3, height=3)
        out = augment(data, AugmentationSpec(AugmentationKind.CROP, 0.01))
        img = Image.open(io.BytesIO(out))
        assert img.size == (1, 1)

    def test_blur_deterministic_same_size(self):
        data = random_png(random.Random(18))
        spec = AugmentationSpec(AugmentationKind.BLUR, 2.0)
        first = augment(data, spec)
        second = augment(data, spec)
        assert first == second
        assert first != data
        img = Image.open(io.BytesIO(first))
        assert img.size == Image.open(io.BytesIO(data)).size

    def test_undecodable_bytes_rejected(self):
        for spec in (
            AugmentationSpec(AugmentationKind.BRIGHTNESS, 1.0),
            AugmentationSpec(AugmentationKind.ROTATION, 90.0),
        ):
            with pytest.raises(AugmentationError):
                augment(b"definitely not an image", spec)
