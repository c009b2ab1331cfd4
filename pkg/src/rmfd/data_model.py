"""Shot/label/manifest data model, corpus validation, and shot merging.

A corpus is a collection of video shots.  Each shot carries three modality
tensors (frame sequence, mel spectrogram, token ids), a binary
pristine/forged label, and a 7-bit multi-label saying which manipulation
categories were applied.  The manifest is line-delimited JSON; tensor
payloads live either inline (nested lists) or in ``RMFD1`` container files
referenced by relative path.
"""
from __future__ import annotations

import io
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import IntegrityError, ManifestError, SchemaError
from .tensorio import load_tensor, save_tensor

#: Fixed order of the 7 manipulation categories in the multi-label vector.
FORGERY_CATEGORIES = (
    "text_llm",
    "text_shuffle",
    "audio_tts",
    "audio_voice_conversion",
    "audio_shuffle",
    "face_swap",
    "lip_sync",
)
NUM_CATEGORIES = len(FORGERY_CATEGORIES)

SPLITS = ("train", "val", "test", "reference")

#: Shots shorter than this are merged with their neighbours.
MIN_SHOT_SECONDS = 5.0
#: Segmentation never emits shots longer than this (pre-merge property).
MAX_SHOT_SECONDS = 20.0


@dataclass(frozen=True)
class ForgeryLabel:
    """Binary pristine/forged flag plus the 7-category multi-label."""

    y_binary: int
    y_types: tuple[int, ...]

    def __post_init__(self):
        if self.y_binary not in (0, 1):
            raise IntegrityError(f"y_binary must be 0 or 1, got {self.y_binary}")
        if len(self.y_types) != NUM_CATEGORIES or any(
            t not in (0, 1) for t in self.y_types
        ):
            raise IntegrityError(f"y_types must be 7 bits, got {self.y_types!r}")
        if self.y_binary == 0 and any(self.y_types):
            raise IntegrityError("pristine shot must have all-zero y_types")
        if self.y_binary == 1 and not any(self.y_types):
            raise IntegrityError("forged shot must set at least one category bit")

    @classmethod
    def pristine(cls) -> "ForgeryLabel":
        return cls(0, (0,) * NUM_CATEGORIES)

    @classmethod
    def forged(cls, categories) -> "ForgeryLabel":
        bits = [0] * NUM_CATEGORIES
        for cat in categories:
            bits[FORGERY_CATEGORIES.index(cat)] = 1
        return cls(1, tuple(bits))

    def categories(self) -> tuple[str, ...]:
        return tuple(
            name for name, bit in zip(FORGERY_CATEGORIES, self.y_types) if bit
        )


@dataclass(frozen=True)
class ShotMeta:
    """Identity, provenance, and timing metadata for one shot."""

    shot_id: str
    identity_id: str
    source_video_id: str
    split: str
    duration_s: float

    def __post_init__(self):
        if self.split not in SPLITS:
            raise IntegrityError(f"unknown split {self.split!r}")
        if not self.duration_s > 0:
            raise IntegrityError(
                f"duration must be positive, got {self.duration_s} ({self.shot_id})"
            )


@dataclass
class ShotRecord:
    """One shot: metadata, label, and the three modality tensors."""

    meta: ShotMeta
    label: ForgeryLabel
    frames: np.ndarray  # [T, C, H, W] float32 in [0, 1]
    spectrogram: np.ndarray  # [M, F] float32
    tokens: np.ndarray  # [L] int32

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float32)
        self.spectrogram = np.asarray(self.spectrogram, dtype=np.float32)
        self.tokens = np.asarray(self.tokens, dtype=np.int32)
        if self.frames.ndim != 4:
            raise IntegrityError(f"frames must be [T,C,H,W], got {self.frames.shape}")
        if self.spectrogram.ndim != 2:
            raise IntegrityError(
                f"spectrogram must be [M,F], got {self.spectrogram.shape}"
            )
        if self.tokens.ndim != 1:
            raise IntegrityError(f"tokens must be [L], got {self.tokens.shape}")


@dataclass
class Corpus:
    """All shots of one dataset plus the identity roster."""

    shots: list[ShotRecord]
    identity_roster: frozenset[str] = field(default=frozenset())

    def __post_init__(self):
        if not self.identity_roster:
            self.identity_roster = frozenset(s.meta.identity_id for s in self.shots)

    def split(self, name: str) -> list[ShotRecord]:
        return [s for s in self.shots if s.meta.split == name]

    def by_id(self, shot_id: str) -> ShotRecord:
        for shot in self.shots:
            if shot.meta.shot_id == shot_id:
                return shot
        raise KeyError(shot_id)

    def identities(self) -> list[str]:
        return sorted(self.identity_roster)


@dataclass
class ValidationReport:
    """Outcome of :func:`validate_corpus`; empty violations means valid."""

    violations: list[str]
    split_counts: dict[str, int]
    reference_counts: dict[str, int]

    @property
    def ok(self) -> bool:
        return not self.violations


_REQUIRED_FIELDS = (
    "shot_id",
    "identity_id",
    "source_video_id",
    "split",
    "duration_s",
    "y_binary",
    "y_types",
)
_TENSOR_FIELDS = ("frames", "spectrogram", "tokens")


def _load_payload(record: dict, name: str, base_dir: Path | None, line_no: int):
    ref_key = f"{name}_ref"
    if ref_key in record:
        if base_dir is None:
            raise ManifestError(
                f"line {line_no}: {ref_key} present but no base directory given"
            )
        return load_tensor(base_dir / record[ref_key])
    if name in record:
        return np.asarray(record[name])
    raise SchemaError(f"line {line_no}: record needs either {name} or {ref_key}")


def parse_manifest(manifest_bytes: bytes, base_dir: str | Path | None = None) -> Corpus:
    """Materialize a Corpus from line-delimited JSON manifest bytes.

    Raises ManifestError (malformed line), SchemaError (missing field), or
    IntegrityError (duplicate shot_id, inconsistent labels).
    """
    base = Path(base_dir) if base_dir is not None else None
    shots: list[ShotRecord] = []
    seen: set[str] = set()
    for line_no, raw in enumerate(io.BytesIO(manifest_bytes).read().splitlines(), 1):
        line = raw.strip()
        if not line:
            continue
        try:
            record = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ManifestError(f"line {line_no}: malformed JSON ({exc.msg})") from None
        if not isinstance(record, dict):
            raise ManifestError(f"line {line_no}: record is not an object")
        missing = [k for k in _REQUIRED_FIELDS if k not in record]
        if missing:
            raise SchemaError(f"line {line_no}: missing fields {missing}")
        shot_id = record["shot_id"]
        if shot_id in seen:
            raise IntegrityError(f"line {line_no}: duplicate shot_id {shot_id!r}")
        seen.add(shot_id)
        try:
            label = ForgeryLabel(int(record["y_binary"]), tuple(record["y_types"]))
        except IntegrityError as exc:
            raise IntegrityError(f"line {line_no}: {exc}") from None
        meta = ShotMeta(
            shot_id=shot_id,
            identity_id=record["identity_id"],
            source_video_id=record["source_video_id"],
            split=record["split"],
            duration_s=float(record["duration_s"]),
        )
        shots.append(
            ShotRecord(
                meta=meta,
                label=label,
                frames=_load_payload(record, "frames", base, line_no),
                spectrogram=_load_payload(record, "spectrogram", base, line_no),
                tokens=_load_payload(record, "tokens", base, line_no),
            )
        )
    return Corpus(shots=shots)


def serialize_corpus(
    corpus: Corpus,
    out_dir: str | Path | None = None,
    inline: bool = False,
) -> bytes:
    """Render the manifest bytes; write tensor container files unless inline.

    With ``inline=True`` tensors are embedded in the JSON records and no
    directory is needed.  Otherwise each tensor goes to
    ``tensors/<shot_id>.<modality>.bin`` under ``out_dir``.
    """
    lines = []
    out = Path(out_dir) if out_dir is not None else None
    if not inline and out is None:
        raise ManifestError("serialize_corpus needs out_dir unless inline=True")
    for shot in corpus.shots:
        record = {
            "shot_id": shot.meta.shot_id,
            "identity_id": shot.meta.identity_id,
            "source_video_id": shot.meta.source_video_id,
            "split": shot.meta.split,
            "duration_s": shot.meta.duration_s,
            "y_binary": shot.label.y_binary,
            "y_types": list(shot.label.y_types),
        }
        if inline:
            record["frames"] = shot.frames.tolist()
            record["spectrogram"] = shot.spectrogram.tolist()
            record["tokens"] = shot.tokens.tolist()
        else:
            for name in _TENSOR_FIELDS:
                rel = f"tensors/{shot.meta.shot_id}.{name}.bin"
                save_tensor(out / rel, getattr(shot, name))
                record[f"{name}_ref"] = rel
        lines.append(json.dumps(record, sort_keys=True))
    payload = ("\n".join(lines) + "\n").encode("utf-8")
    if out is not None:
        (out / "manifest.jsonl").write_bytes(payload)
    return payload


def validate_corpus(corpus: Corpus) -> ValidationReport:
    """Check every structural invariant; violations become report entries."""
    violations: list[str] = []
    split_counts = {s: 0 for s in SPLITS}
    reference_counts: dict[str, int] = {i: 0 for i in corpus.identities()}
    seen: set[str] = set()
    source_splits: dict[str, set[str]] = {}

    for shot in corpus.shots:
        meta, label = shot.meta, shot.label
        split_counts[meta.split] += 1
        if meta.shot_id in seen:
            violations.append(f"duplicate shot_id {meta.shot_id!r}")
        seen.add(meta.shot_id)
        if meta.split == "reference":
            reference_counts[meta.identity_id] += 1
            if label.y_binary != 0:
                violations.append(
                    f"{meta.shot_id}: reference set must be pristine"
                )
        else:
            source_splits.setdefault(meta.source_video_id, set()).add(meta.split)
        if meta.duration_s > MAX_SHOT_SECONDS:
            violations.append(
                f"{meta.shot_id}: duration {meta.duration_s:.2f}s exceeds "
                f"{MAX_SHOT_SECONDS:.0f}s segmentation cap"
            )
        for name in _TENSOR_FIELDS:
            arr = getattr(shot, name)
            if arr.dtype.kind == "f" and not np.isfinite(arr).all():
                violations.append(f"{meta.shot_id}: non-finite values in {name}")
        if (shot.frames < 0).any() or (shot.frames > 1).any():
            violations.append(f"{meta.shot_id}: frame values outside [0, 1]")
        if (shot.tokens < 0).any():
            violations.append(f"{meta.shot_id}: negative token ids")

    for identity in corpus.identities():
        has_suspect = any(
            s.meta.identity_id == identity and s.meta.split != "reference"
            for s in corpus.shots
        )
        if has_suspect and reference_counts.get(identity, 0) == 0:
            violations.append(f"identity {identity!r} lacks reference media")

    for source, splits in sorted(source_splits.items()):
        if len(splits) > 1:
            violations.append(
                f"source video {source!r} crosses splits {sorted(splits)}"
            )

    return ValidationReport(
        violations=violations,
        split_counts=split_counts,
        reference_counts=reference_counts,
    )


def merge_short_shots(shots: list[ShotMeta]) -> list[ShotMeta]:
    """Merge sub-5s shots with their neighbours until none remain.

    Scans left to right; a short shot absorbs both its neighbours (or its
    only neighbour at a boundary).  The merged shot keeps the earliest
    shot_id and the summed duration.  Degenerate inputs collapse to a single
    shot.
    """
    merged = list(shots)
    while len(merged) > 1:
        short = next(
            (i for i, m in enumerate(merged) if m.duration_s < MIN_SHOT_SECONDS),
            None,
        )
        if short is None:
            break
        lo = max(0, short - 1)
        hi = min(len(merged) - 1, short + 1)
        total = math.fsum(m.duration_s for m in merged[lo : hi + 1])
        merged[lo : hi + 1] = [replace(merged[lo], duration_s=total)]
    return merged
