import asyncio
import json
import logging
import math
import re
from collections import defaultdict
from pathlib import Path
from typing import Awaitable, Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, field_validator

from reefdeploy.exceptions import (
    ClassificationError,
    ClassOutOfRangeError,
    DimensionMismatchError,
    NoParseableObjectError,
    ResponseParseError,
    VlmAuthError,
    VlmRateLimitError,
    VlmTransportError,
    ZeroNormError,
)
from reefdeploy.models.configs import VlmClientConfig
from reefdeploy.models.network import softmax
from reefdeploy.models.reports import LabelingResult, LabelReject, PseudoLabel, PseudoLabelSource
from reefdeploy.models.schemas import NUM_PATCH_CLASSES, DatasetManifest, GridSpec, PatchClass, PatchFeatures
from reefdeploy.services.tiling_service import crop_patches
from reefdeploy.services.vlm_service import VlmTransport
from reefdeploy.storage import JsonlDecodeError, read_jsonl, write_jsonl

logger = logging.getLogger(__name__)

PROMPT_PARAGRAPHS = (
    "You are a specialized agent in classifying underwater images. Your goal is to carefully inspect the image, "
    "and then classify it in one of the following classes: 0, 1, 2.",
    "The class 1 corresponds to: mainly coral.",
    "The class 2 corresponds to: rocky seafloor or substrate.  It looks solid and has minimal coral.",
    "The class 0 corresponds to: images that do not fit into class 1 or class 2, typically algae, sand, rubble, "
    "water or blurry images.",
    "Pay attention to the image and only classify it as class 0 if you're absolutely certain the image cannot be "
    "described as class 1 or 2.",
    'Always provide the output as a dictionary in the format {"class": 0, "conf": 0.5}, where the \'class\' is an '
    "integer number corresponding to the best class: 0, 1, 2, and the 'conf' is a decimal number between 0 and 1 "
    "to represent your confidence that the chosen class matches the image. If you think two classes could "
    "accurately describe the image, the confidence should be closer to 0.",
)

# Placeholder prompt texts, one per class code; replace with a tuned ensemble when available.
DEFAULT_CLASS_PROMPTS: Dict[PatchClass, Tuple[str, ...]] = {
    PatchClass.NO_DEPLOY: ("a photo of sand, rubble, algae or water",),
    PatchClass.CORAL: ("a photo of coral",),
    PatchClass.DEPLOY: ("a photo of bare rocky seafloor",),
}

REASON_BELOW_FLOOR = "below confidence floor"

_FENCE_RE = re.compile(r"```[a-zA-Z]*")
_OBJECT_RE = re.compile(r"\{[^{}]*\}")

PatchInput = Tuple[str, int, bytes]


def build_prompt() -> str:
    return "\n\n".join(PROMPT_PARAGRAPHS)


def format_response(patch_class: int, confidence: float) -> str:
    return json.dumps({"class": int(patch_class), "conf": float(confidence)})


def _load_candidate(candidate: str) -> Optional[dict]:
    for text in (candidate, candidate.replace("'", '"')):
        try:
            obj = json.loads(text)
        except json.JSONDecodeError:
            continue
        return obj if isinstance(obj, dict) else None
    return None


def _class_code(value) -> int:
    if isinstance(value, bool):
        raise ClassOutOfRangeError(f"class {value!r} is not one of 0, 1, 2")
    if isinstance(value, str):
        try:
            value = int(value)
        except ValueError:
            raise ClassOutOfRangeError(f"class {value!r} is not one of 0, 1, 2") from None
    if isinstance(value, float) and value.is_integer():
        value = int(value)
    if not isinstance(value, int) or value not in range(NUM_PATCH_CLASSES):
        raise ClassOutOfRangeError(f"class {value!r} is not one of 0, 1, 2")
    return value


def parse_response(text: str) -> Tuple[PatchClass, float]:
    """Extract the first ``{"class": k, "conf": c}`` object from free-form model output."""
    cleaned = _FENCE_RE.sub("", text or "")
    for match in _OBJECT_RE.finditer(cleaned):
        obj = _load_candidate(match.group(0))
        if obj is None or "class" not in obj or "conf" not in obj:
            continue
        try:
            conf = float(obj["conf"])
        except (TypeError, ValueError):
            continue
        if not math.isfinite(conf):
            continue
        code = _class_code(obj["class"])
        return PatchClass(code), min(1.0, max(0.0, conf))
    raise NoParseableObjectError(f"no {{\"class\", \"conf\"}} object in response: {text[:200]!r}")


class VlmLabeler:
    """Labels patches through a VLM transport with bounded concurrency and retries."""

    def __init__(
        self,
        transport: VlmTransport,
        config: VlmClientConfig,
        sleep: Callable[[float], Awaitable[None]] = asyncio.sleep,
        prompt: Optional[str] = None,
    ):
        self.transport = transport
        self.config = config
        self.prompt = prompt or build_prompt()
        self._sleep = sleep
        self._semaphore: Optional[asyncio.Semaphore] = None

    def _backoff_s(self, attempt: int) -> float:
        return self.config.backoff_ms * (2**attempt) / 1000.0

    async def label_one(self, frame_id: str, patch_index: int, image: bytes) -> Union[PseudoLabel, LabelReject]:
        if self._semaphore is None:
            self._semaphore = asyncio.Semaphore(self.config.max_in_flight)
        attempts = self.config.retries + 1
        raw = None
        last_error: Exception = NoParseableObjectError("no attempt made")
        for attempt in range(attempts):
            delay = self._backoff_s(attempt)
            try:
                async with self._semaphore:
                    raw = await self.transport.complete(self.prompt, image)
                patch_class, confidence = parse_response(raw)
            except ResponseParseError as e:
                last_error = e
                logger.warning(f"{frame_id}/{patch_index}: attempt {attempt + 1}/{attempts}: {e.reason}")
            except VlmTransportError as e:
                last_error = e
                logger.warning(f"{frame_id}/{patch_index}: attempt {attempt + 1}/{attempts}: {e}")
                if not e.retryable:
                    break
                if isinstance(e, VlmRateLimitError) and e.retry_after_s is not None:
                    delay = e.retry_after_s
            else:
                if confidence < self.config.confidence_floor:
                    return LabelReject(
                        frame_id=frame_id,
                        patch_index=patch_index,
                        reason=REASON_BELOW_FLOOR,
                        attempts=attempt + 1,
                        detail=f"conf {confidence} < {self.config.confidence_floor}",
                        raw_response=raw,
                    )
                return PseudoLabel(
                    frame_id=frame_id,
                    patch_index=patch_index,
                    patch_class=patch_class,
                    confidence=confidence,
                    source=PseudoLabelSource.CHAT_VLM,
                    raw_response=raw,
                )
            if attempt + 1 < attempts:
                await self._sleep(delay)

        if isinstance(last_error, ResponseParseError):
            reason = last_error.reason
        elif isinstance(last_error, VlmAuthError):
            reason = "auth failure"
        elif isinstance(last_error, VlmRateLimitError):
            reason = "rate limited"
        else:
            reason = "transport error"
        return LabelReject(
            frame_id=frame_id,
            patch_index=patch_index,
            reason=reason,
            attempts=attempt + 1,
            detail=str(last_error),
            raw_response=raw,
        )

    async def label_all(self, patches: Sequence[PatchInput]) -> LabelingResult:
        self._semaphore = asyncio.Semaphore(self.config.max_in_flight)
        # gather keeps input order
        results = await asyncio.gather(*(self.label_one(f, i, image) for f, i, image in patches))
        labels = tuple(r for r in results if isinstance(r, PseudoLabel))
        rejects = tuple(r for r in results if isinstance(r, LabelReject))
        logger.info(f"VLM labelled {len(labels)} of {len(patches)} patches, {len(rejects)} rejected")
        return LabelingResult(labels=labels, rejects=rejects)


def label_patches_vlm(
    transport: VlmTransport,
    patches: Sequence[PatchInput],
    config: VlmClientConfig,
    sleep: Callable[[float], Awaitable[None]] = asyncio.sleep,
    close_transport: bool = True,
) -> LabelingResult:
    labeler = VlmLabeler(transport, config, sleep=sleep)

    async def run() -> LabelingResult:
        try:
            return await labeler.label_all(patches)
        finally:
            if close_transport:
                await transport.aclose()

    return asyncio.run(run())


def manifest_patches(manifest: DatasetManifest, image_root: Union[str, Path] = ".") -> List[PatchInput]:
    """Crop every manifest frame into grid patches encoded as PNG."""
    root = Path(image_root)
    patches = []
    for record in manifest.records:
        for index, image in crop_patches(root / record.source, manifest.grid):
            patches.append((record.frame_id, index, image))
    logger.info(f"Cropped {len(patches)} patches from {len(manifest.records)} frames")
    return patches


def _unit(vectors: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(vectors, axis=-1, keepdims=True)
    if np.any(norms == 0):
        raise ZeroNormError("embedding has zero norm")
    return vectors / norms


class PromptEmbeddings(BaseModel):
    """One text embedding per patch class, rows in class-code order."""

    model_config = ConfigDict(frozen=True)

    vectors: Tuple[Tuple[float, ...], ...]
    prompts: Tuple[Tuple[str, ...], ...] = ()

    @field_validator("vectors")
    @classmethod
    def validate_vectors(cls, v):
        if len(v) != NUM_PATCH_CLASSES:
            raise ValueError(f"need {NUM_PATCH_CLASSES} class embeddings, got {len(v)}")
        dims = {len(row) for row in v}
        if len(dims) != 1 or 0 in dims:
            raise ValueError(f"class embeddings must share one non-zero dimensionality, got {sorted(dims)}")
        if any(not any(x != 0.0 for x in row) for row in v):
            raise ValueError("class embedding has zero norm")
        return v

    @property
    def dim(self) -> int:
        return len(self.vectors[0])

    def as_array(self) -> np.ndarray:
        return np.asarray(self.vectors, dtype=float)

    @classmethod
    def from_prompt_ensemble(
        cls,
        class_embeddings: Sequence[Sequence[Sequence[float]]],
        prompts: Sequence[Sequence[str]] = (),
    ) -> "PromptEmbeddings":
        """Normalise each prompt embedding, average per class, renormalise."""
        vectors = []
        for per_prompt in class_embeddings:
            mean = _unit(np.atleast_2d(np.asarray(per_prompt, dtype=float))).mean(axis=0)
            vectors.append(tuple(float(x) for x in _unit(mean)))
        return cls(vectors=tuple(vectors), prompts=tuple(tuple(p) for p in prompts))

    @classmethod
    def from_file(cls, path: Union[str, Path]) -> "PromptEmbeddings":
        """JSONL lines ``{"class": int, "prompt": str, "values": [float, ...]}``."""
        embeddings: Dict[int, List[List[float]]] = defaultdict(list)
        texts: Dict[int, List[str]] = defaultdict(list)
        try:
            for line_no, obj in read_jsonl(path):
                try:
                    code = _class_code(obj["class"])
                    embeddings[code].append([float(x) for x in obj["values"]])
                    texts[code].append(str(obj.get("prompt", "")))
                except (KeyError, TypeError, ValueError) as e:
                    raise ClassificationError(f"{path} line {line_no}: {e}") from e
        except JsonlDecodeError as e:
            raise ClassificationError(f"{path}: {e}") from e
        missing = [c for c in range(NUM_PATCH_CLASSES) if c not in embeddings]
        if missing:
            raise ClassificationError(f"{path}: no prompt embeddings for classes {missing}")
        codes = range(NUM_PATCH_CLASSES)
        return cls.from_prompt_ensemble([embeddings[c] for c in codes], [texts[c] for c in codes])


def label_patches_similarity(
    patch_embeddings: Sequence[PatchFeatures],
    prompts: PromptEmbeddings,
) -> List[PseudoLabel]:
    """Zero-shot labels: argmax cosine similarity, confidence is its softmax share."""
    if not patch_embeddings:
        return []
    e = np.vstack([p.as_array() for p in patch_embeddings])
    if e.shape[1] != prompts.dim:
        raise DimensionMismatchError(f"patch embeddings have {e.shape[1]} dims, prompt embeddings {prompts.dim}")
    sims = _unit(e) @ _unit(prompts.as_array()).T
    shares = softmax(sims)
    best = np.argmax(sims, axis=1)

    labels = []
    for row, (features, code) in enumerate(zip(patch_embeddings, best)):
        if features.patch_index is None:
            raise ClassificationError(f"embedding for frame {features.frame_id!r} has no patch_index")
        labels.append(
            PseudoLabel(
                frame_id=features.frame_id,
                patch_index=features.patch_index,
                patch_class=PatchClass(int(code)),
                confidence=float(shares[row, code]),
                source=PseudoLabelSource.EMBEDDING_SIMILARITY,
            )
        )
    logger.info(f"Similarity labelled {len(labels)} patches")
    return labels


def labels_to_manifest(labels: Sequence[PseudoLabel], manifest: DatasetManifest) -> DatasetManifest:
    """Fill patch labels for every frame whose whole grid got a pseudo-label."""
    by_frame: Dict[str, Dict[int, PatchClass]] = defaultdict(dict)
    for label in labels:
        by_frame[label.frame_id][label.patch_index] = label.patch_class

    grid: GridSpec = manifest.grid
    records, filled = [], 0
    for record in manifest.records:
        patches = by_frame.get(record.frame_id, {})
        if all(i in patches for i in range(grid.size)):
            record = record.model_copy(update={"patch_labels": tuple(patches[i] for i in range(grid.size))})
            filled += 1
        records.append(record)
    logger.info(f"Pseudo-labels cover {filled} of {len(manifest.records)} frames")
    return DatasetManifest(grid=grid, records=tuple(records))


def write_labels(path: Union[str, Path], result: LabelingResult) -> int:
    return write_jsonl(path, (label.to_json() for label in result.labels))


def write_rejects(path: Union[str, Path], result: LabelingResult) -> int:
    return write_jsonl(path, (reject.model_dump(mode="json") for reject in result.rejects))
