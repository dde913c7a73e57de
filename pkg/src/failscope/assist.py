"""Exploration assistance: follow-up prompts and deterministic augmentations.

Three prompt strategies, chosen by what the failure report says about each
annotation:

    Guide      annotation label is OOD  -> steer toward related labels the
                                           model does know
    Challenge  correct detection        -> stress the same label with harder
                                           scene variations
    Repeat     false detection, ID label-> caption the image and reuse the
                                           caption as a generation prompt

Augmentations are pure pixel transforms (brightness, rotation, blur, crop);
identity parameters return the input bytes untouched.
"""

from __future__ import annotations

import hashlib
import io
from dataclasses import dataclass
from enum import Enum
from functools import lru_cache
from typing import Callable, Mapping, Protocol, Sequence

import httpx
from PIL import Image, ImageFilter, UnidentifiedImageError

from ._data import load_resource
from .classify import (
    AnnotatedObject,
    DistributionTag,
    FailureMode,
    FailureReport,
)
from .geometry import normalize_label

LEXICON_RESOURCE = "lexicon.json"

CAPTION_TIMEOUT_SECONDS = 10.0

# Fixed Challenge expansion; order is part of the contract.
CHALLENGE_TEMPLATES = (
    "an image of a {label} at night",
    "many {label}s",
    "a partially occluded {label}",
    "a blurry photo of a {label}",
    "a drawing of a {label}",
)


class PromptStrategy(str, Enum):
    GUIDE = "Guide"
    CHALLENGE = "Challenge"
    REPEAT = "Repeat"


class LexiconError(ValueError):
    """The lexicon dataset is malformed (bad labels or cyclic relations)."""


class CaptionError(Exception):
    """The caption backend failed or returned an unusable response."""


class AugmentationError(ValueError):
    """Augmentation rejected its input (bad parameter or undecodable image)."""


@dataclass(frozen=True)
class PromptSuggestion:
    strategy: PromptStrategy
    text: str
    rationale: str
    annotation_id: str

    def __post_init__(self) -> None:
        if not self.text:
            raise ValueError("suggestion text must be non-empty")


@dataclass(frozen=True)
class PromptPlan:
    """Ordered suggestions plus notices for rules that could not fire."""

    suggestions: tuple[PromptSuggestion, ...]
    notices: tuple[str, ...]


class AugmentationKind(str, Enum):
    BRIGHTNESS = "brightness"
    ROTATION = "rotation"
    BLUR = "blur"
    CROP = "crop"


@dataclass(frozen=True)
class AugmentationSpec:
    """One transform request.

    Parameter meaning by kind: brightness scale factor (> 0, 1.0 identity),
    rotation degrees counterclockwise (0 identity), Gaussian blur radius in
    pixels (>= 0, 0 identity), crop fraction retained per side (0 < f <= 1,
    1.0 identity).
    """

    kind: AugmentationKind
    parameter: float

    def __post_init__(self) -> None:
        kind = AugmentationKind(self.kind)
        object.__setattr__(self, "kind", kind)
        value = float(self.parameter)
        object.__setattr__(self, "parameter", value)
        if value != value or value in (float("inf"), float("-inf")):
            raise AugmentationError("parameter must be finite")
        if kind is AugmentationKind.BRIGHTNESS and value <= 0:
            raise AugmentationError("brightness factor must be > 0")
        if kind is AugmentationKind.BLUR and value < 0:
            raise AugmentationError("blur radius must be >= 0")
        if kind is AugmentationKind.CROP and not 0 < value <= 1:
            raise AugmentationError("crop fraction must be in (0, 1]")

    @property
    def is_identity(self) -> bool:
        if self.kind is AugmentationKind.BRIGHTNESS:
            return self.parameter == 1.0
        if self.kind is AugmentationKind.ROTATION:
            return self.parameter % 360.0 == 0.0
        if self.kind is AugmentationKind.BLUR:
            return self.parameter == 0.0
        return self.parameter == 1.0


@dataclass(frozen=True)
class Lexicon:
    """Static word relations: label -> broader labels / narrower labels."""

    hypernyms: Mapping[str, tuple[str, ...]]
    hyponyms: Mapping[str, tuple[str, ...]]

    @classmethod
    def from_dict(cls, raw: Mapping[str, object]) -> Lexicon:
        hypernyms = _parse_relation(raw.get("hypernyms"), "hypernyms")
        hyponyms = _parse_relation(raw.get("hyponyms"), "hyponyms")
        _check_acyclic(hypernyms)
        return cls(hypernyms=hypernyms, hyponyms=hyponyms)

    def related_in_classes(
        self, label: str, model_classes: frozenset[str] | set[str]
    ) -> list[tuple[str, str]]:
        """(related label, relation kind) pairs that the model can predict."""
        label = normalize_label(label)
        known = {normalize_label(c) for c in model_classes}
        seen: set[str] = set()
        out: list[tuple[str, str]] = []
        for relation, candidates in (
            ("broader", self.hypernyms.get(label, ())),
            ("narrower", self.hyponyms.get(label, ())),
        ):
            for candidate in candidates:
                if candidate in known and candidate not in seen:
                    seen.add(candidate)
                    out.append((candidate, relation))
        return out


def _parse_relation(raw: object, name: str) -> dict[str, tuple[str, ...]]:
    if not isinstance(raw, dict):
        raise LexiconError(f"{name} must be a mapping")
    parsed: dict[str, tuple[str, ...]] = {}
    for label, related in raw.items():
        if not isinstance(label, str) or normalize_label(label) != label or not label:
            raise LexiconError(f"{name} key not a normalized label: {label!r}")
        if not isinstance(related, list) or not related:
            raise LexiconError(f"{name}[{label!r}] must be a non-empty list")
        for other in related:
            if not isinstance(other, str) or normalize_label(other) != other:
                raise LexiconError(f"{name}[{label!r}] entry not normalized: {other!r}")
            if other == label:
                raise LexiconError(f"{name}[{label!r}] relates the label to itself")
        parsed[label] = tuple(related)
    return parsed


def _check_acyclic(edges: Mapping[str, tuple[str, ...]]) -> None:
    WHITE, GRAY, BLACK = 0, 1, 2
    color: dict[str, int] = {}

    def visit(node: str) -> None:
        state = color.get(node, WHITE)
        if state == GRAY:
            raise LexiconError(f"cyclic relation through {node!r}")
        if state == BLACK:
            return
        color[node] = GRAY
        for parent in edges.get(node, ()):
            visit(parent)
        color[node] = BLACK

    for label in edges:
        visit(label)


@lru_cache(maxsize=1)
def bundled_lexicon() -> Lexicon:
    raw = load_resource(LEXICON_RESOURCE)
    version = raw.get("lexicon_version")
    if not isinstance(version, int) or version < 1:
        raise LexiconError("lexicon_version must be a positive integer")
    return Lexicon.from_dict(raw)


class CaptionBackend(Protocol):
    def caption(self, image: bytes) -> str: ...


class HttpCaptionBackend:
    """POSTs raw image bytes to a captioning endpoint, expects {"caption": str}."""

    def __init__(
        self,
        endpoint: str,
        timeout: float = CAPTION_TIMEOUT_SECONDS,
        transport: httpx.BaseTransport | None = None,
    ) -> None:
        self.endpoint = endpoint
        self.timeout = timeout
        self._transport = transport

    def caption(self, image: bytes) -> str:
        try:
            with httpx.Client(transport=self._transport, timeout=self.timeout) as client:
                response = client.post(
                    self.endpoint,
                    content=image,
                    headers={"content-type": "application/octet-stream"},
                )
                response.raise_for_status()
                payload = response.json()
        except httpx.HTTPError as exc:
            raise CaptionError(f"caption request failed: {exc}") from exc
        except ValueError as exc:
            raise CaptionError("caption response is not valid JSON") from exc
        text = payload.get("caption") if isinstance(payload, dict) else None
        if not isinstance(text, str) or not text.strip():
            raise CaptionError("caption response missing a non-empty 'caption'")
        return text.strip()


class StubCaptionBackend:
    """Fixture captions keyed by sha256 hexdigest of the image bytes.

    Mirrors the wire behavior of HttpCaptionBackend: unknown image -> error.
    """

    def __init__(self, captions: Mapping[str, str]) -> None:
        self._captions = dict(captions)

    def caption(self, image: bytes) -> str:
        key = hashlib.sha256(image).hexdigest()
        try:
            return self._captions[key]
        except KeyError:
            raise CaptionError(f"no fixture caption for image {key[:12]}") from None


class ImageGenerator(Protocol):
    def generate(self, prompt: str) -> list[bytes]: ...


class FixtureImageGenerator:
    """Canned image blobs keyed by sha256 hexdigest of the prompt text."""

    def __init__(self, fixtures: Mapping[str, Sequence[bytes]]) -> None:
        self._fixtures = {key: tuple(blobs) for key, blobs in fixtures.items()}

    def generate(self, prompt: str) -> list[bytes]:
        key = hashlib.sha256(prompt.encode("utf-8")).hexdigest()
        return list(self._fixtures.get(key, ()))


def challenge_templates(label: str) -> list[str]:
    """The five fixed Challenge prompts for a label, in contract order."""
    normalized = normalize_label(label)
    if not normalized:
        raise ValueError("label must be non-empty")
    return [template.format(label=normalized) for template in CHALLENGE_TEMPLATES]


def suggest_prompts(
    report: FailureReport,
    anns: Sequence[AnnotatedObject],
    lexicon: Lexicon,
    model_classes: frozenset[str] | set[str],
    caption_backend: CaptionBackend | None = None,
    image: bytes | None = None,
) -> PromptPlan:
    """Derive follow-up prompts from a single image's failure report.

    Output order is fixed: Guide, then Challenge, then Repeat, each block
    sorted by source annotation id. Repeat needs the image bytes and a
    caption backend; when either is missing the rule is skipped and a
    notice records why.
    """
    by_id = {ann.id: ann for ann in anns}
    guides: list[PromptSuggestion] = []
    challenges: list[PromptSuggestion] = []
    repeats: list[PromptSuggestion] = []
    notices: list[str] = []

    def annotation(ann_id: str) -> AnnotatedObject:
        try:
            return by_id[ann_id]
        except KeyError:
            raise ValueError(f"report references unknown annotation {ann_id!r}") from None

    cached_caption: list[str] | None = None

    def image_caption() -> str:
        nonlocal cached_caption
        if cached_caption is None:
            assert caption_backend is not None and image is not None
            cached_caption = [caption_backend.caption(image)]
        return cached_caption[0]

    for instance in report.instances:
        if not instance.annotation_id:
            continue
        ann = annotation(instance.annotation_id)
        label = ann.label

        if instance.distribution is DistributionTag.OOD:
            for related, relation in lexicon.related_in_classes(label, model_classes):
                guides.append(
                    PromptSuggestion(
                        strategy=PromptStrategy.GUIDE,
                        text=f"an image of a {related}",
                        rationale=(
                            f"'{label}' is outside the model's classes; "
                            f"'{related}' is a {relation} label it does know"
                        ),
                        annotation_id=ann.id,
                    )
                )

        if instance.mode is FailureMode.CD:
            for text in challenge_templates(label):
                challenges.append(
                    PromptSuggestion(
                        strategy=PromptStrategy.CHALLENGE,
                        text=text,
                        rationale=f"'{label}' was detected correctly; probe a harder variation",
                        annotation_id=ann.id,
                    )
                )

        if instance.mode is FailureMode.FD and instance.distribution is DistributionTag.ID:
            if caption_backend is None:
                notices.append(
                    f"Repeat skipped for annotation '{ann.id}': no caption backend configured"
                )
            elif image is None:
                notices.append(
                    f"Repeat skipped for annotation '{ann.id}': image bytes unavailable"
                )
            else:
                try:
                    text = image_caption()
                except CaptionError as exc:
                    notices.append(f"Repeat skipped for annotation '{ann.id}': {exc}")
                else:
                    repeats.append(
                        PromptSuggestion(
                            strategy=PromptStrategy.REPEAT,
                            text=text,
                            rationale=(
                                f"'{label}' was misread by the model; "
                                "generate more scenes like this one"
                            ),
                            annotation_id=ann.id,
                        )
                    )

    guides.sort(key=lambda s: s.annotation_id)
    challenges.sort(key=lambda s: s.annotation_id)
    repeats.sort(key=lambda s: s.annotation_id)
    return PromptPlan(
        suggestions=tuple(guides + challenges + repeats),
        notices=tuple(notices),
    )


_NINETY_TRANSPOSES: dict[int, Image.Transpose] = {
    90: Image.Transpose.ROTATE_90,
    180: Image.Transpose.ROTATE_180,
    270: Image.Transpose.ROTATE_270,
}


def _decode(image: bytes) -> Image.Image:
    try:
        decoded = Image.open(io.BytesIO(image))
        decoded.load()
    except (UnidentifiedImageError, OSError, ValueError) as exc:
        raise AugmentationError("image bytes are not a decodable raster") from exc
    if decoded.mode not in ("L", "RGB", "RGBA"):
        decoded = decoded.convert("RGB")
    return decoded


def _encode(decoded: Image.Image) -> bytes:
    buffer = io.BytesIO()
    decoded.save(buffer, format="PNG")
    return buffer.getvalue()


def _apply_brightness(decoded: Image.Image, factor: float) -> Image.Image:
    # out = min(255, round(in * factor)), alpha untouched
    lut = [min(255, round(value * factor)) for value in range(256)]
    if decoded.mode == "RGBA":
        r, g, b, a = decoded.split()
        return Image.merge("RGBA", (r.point(lut), g.point(lut), b.point(lut), a))
    return decoded.point(lut * len(decoded.getbands()))


def _apply_rotation(decoded: Image.Image, degrees: float) -> Image.Image:
    # counterclockwise; canvas expands to fit
    turn = degrees % 360.0
    if turn in (90.0, 180.0, 270.0):
        return decoded.transpose(_NINETY_TRANSPOSES[int(turn)])
    return decoded.rotate(turn, resample=Image.Resampling.BICUBIC, expand=True)


def _apply_crop(decoded: Image.Image, fraction: float) -> Image.Image:
    width, height = decoded.size
    new_width = max(1, round(width * fraction))
    new_height = max(1, round(height * fraction))
    left = (width - new_width) // 2
    top = (height - new_height) // 2
    return decoded.crop((left, top, left + new_width, top + new_height))


_TRANSFORMS: dict[AugmentationKind, Callable[[Image.Image, float], Image.Image]] = {
    AugmentationKind.BRIGHTNESS: _apply_brightness,
    AugmentationKind.ROTATION: _apply_rotation,
    AugmentationKind.BLUR: lambda img, radius: img.filter(ImageFilter.GaussianBlur(radius)),
    AugmentationKind.CROP: _apply_crop,
}


def augment(image: bytes, spec: AugmentationSpec) -> bytes:
    """Apply one deterministic transform to an encoded image.

    Identity parameters return the input bytes unchanged (still validated
    as decodable). Everything else is re-encoded as PNG; rotation expands
    the canvas to fit, crop keeps a centered window.
    """
    decoded = _decode(image)
    if spec.is_identity:
        return image
    return _encode(_TRANSFORMS[spec.kind](decoded, spec.parameter))
