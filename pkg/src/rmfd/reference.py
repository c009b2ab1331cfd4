"""Per-identity reference feature index.

Reference-split shots are encoded once per refresh into per-modality and
fused features.  Training draws a random same-identity entry per step;
evaluation uses the element-wise mean entry.  Every index is stamped with
the parameter version it was built from so stale feature reuse is caught
rather than silent.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .data_model import Corpus
from .errors import IntegrityError, StalenessError
from .losses import FeatureBundle
from .synthetic import _stable_seed
from .tensorio import load_archive, save_archive


@dataclass
class RefEntry:
    shot_id: str
    f_v: torch.Tensor
    f_a: torch.Tensor
    f_t: torch.Tensor
    f_atv: torch.Tensor

    def as_bundle(self, identity_id: str) -> FeatureBundle:
        return FeatureBundle(
            shot_id=self.shot_id,
            identity_id=identity_id,
            is_forged=False,
            f_v=self.f_v,
            f_a=self.f_a,
            f_t=self.f_t,
            f_atv=self.f_atv,
        )


@dataclass
class RefIndex:
    entries: dict[str, list[RefEntry]]
    param_version: int

    def identities(self) -> list[str]:
        return sorted(self.entries)


def check_staleness(index: RefIndex, live_version: int, max_age: int = 0) -> None:
    age = live_version - index.param_version
    if age > max_age or age < 0:
        raise StalenessError(
            f"reference index at parameter version {index.param_version} is "
            f"{age} updates behind live version {live_version} (allowed {max_age})"
        )


def build_reference_index(
    corpus: Corpus,
    model,
    subset: tuple[str, ...] = ("v", "a", "t"),
    batch_size: int = 32,
) -> RefIndex:
    """Encode and fuse every reference shot under the current parameters."""
    reference = corpus.split("reference")
    suspects = {
        s.meta.identity_id for s in corpus.shots if s.meta.split != "reference"
    }
    covered = {s.meta.identity_id for s in reference}
    missing = sorted(suspects - covered)
    if missing:
        raise IntegrityError(
            f"identities lack reference shots: {', '.join(missing)}"
        )

    entries: dict[str, list[RefEntry]] = {}
    device_dtype = next(model.parameters()).dtype
    zero = torch.zeros(model.config.d_model, dtype=device_dtype)
    with torch.no_grad():
        for start in range(0, len(reference), batch_size):
            chunk = reference[start : start + batch_size]
            frames = torch.stack(
                [torch.from_numpy(s.frames) for s in chunk]
            ).to(device_dtype) if "v" in subset else None
            spec = torch.stack(
                [torch.from_numpy(s.spectrogram) for s in chunk]
            ).to(device_dtype) if "a" in subset else None
            tokens = (
                torch.stack([torch.from_numpy(s.tokens) for s in chunk]).long()
                if "t" in subset
                else None
            )
            feats = model.forward_features(frames, spec, tokens, subset)
            for row, shot in enumerate(chunk):
                entry = RefEntry(
                    shot_id=shot.meta.shot_id,
                    f_v=feats["v"][row].clone() if feats["v"] is not None else zero,
                    f_a=feats["a"][row].clone() if feats["a"] is not None else zero,
                    f_t=feats["t"][row].clone() if feats["t"] is not None else zero,
                    f_atv=feats["atv"][row].clone(),
                )
                entries.setdefault(shot.meta.identity_id, []).append(entry)
    for lst in entries.values():
        lst.sort(key=lambda e: e.shot_id)
    return RefIndex(entries=entries, param_version=model.param_version)


def select_reference(
    index: RefIndex,
    identity_id: str,
    mode: str = "mean",
    seed: int | None = None,
) -> RefEntry:
    """Pick one entry (mode="random", seeded) or the element-wise mean."""
    if identity_id not in index.entries:
        raise KeyError(f"identity {identity_id!r} not in reference index")
    entries = index.entries[identity_id]
    if mode == "mean":
        return RefEntry(
            shot_id=f"{identity_id}/mean",
            f_v=torch.stack([e.f_v for e in entries]).mean(dim=0),
            f_a=torch.stack([e.f_a for e in entries]).mean(dim=0),
            f_t=torch.stack([e.f_t for e in entries]).mean(dim=0),
            f_atv=torch.stack([e.f_atv for e in entries]).mean(dim=0),
        )
    if mode == "random":
        if seed is None:
            raise ValueError("random reference selection needs a seed")
        rng = np.random.default_rng(
            np.random.SeedSequence([seed & (2**63 - 1), _stable_seed(identity_id)])
        )
        return entries[int(rng.integers(len(entries)))]
    raise ValueError(f"unknown selection mode {mode!r}")


def fuse_with_reference(
    f_atv: torch.Tensor, f_atv_ref: torch.Tensor, alpha: float
) -> torch.Tensor:
    """Blend suspect and reference fused features: f' = f + alpha * f_ref."""
    if f_atv.shape[-1] != f_atv_ref.shape[-1]:
        raise ValueError(
            f"feature dims differ: {f_atv.shape[-1]} vs {f_atv_ref.shape[-1]}"
        )
    return f_atv + alpha * f_atv_ref


def save_index(path: str | Path, index: RefIndex) -> None:
    tensors: dict[str, np.ndarray] = {}
    meta: dict[str, list[str]] = {}
    for identity in index.identities():
        meta[identity] = []
        for i, entry in enumerate(index.entries[identity]):
            meta[identity].append(entry.shot_id)
            for name in ("f_v", "f_a", "f_t", "f_atv"):
                tensors[f"{identity}/{i}/{name}"] = (
                    getattr(entry, name).numpy().astype(np.float32)
                )
    tensors["__version__"] = np.array([index.param_version], dtype=np.int32)
    save_archive(path, tensors)
    Path(str(path) + ".json").write_text(json.dumps(meta, sort_keys=True))


def load_index(path: str | Path) -> RefIndex:
    tensors = load_archive(path)
    meta = json.loads(Path(str(path) + ".json").read_text())
    entries: dict[str, list[RefEntry]] = {}
    for identity, shot_ids in meta.items():
        entries[identity] = [
            RefEntry(
                shot_id=shot_id,
                f_v=torch.from_numpy(tensors[f"{identity}/{i}/f_v"]),
                f_a=torch.from_numpy(tensors[f"{identity}/{i}/f_a"]),
                f_t=torch.from_numpy(tensors[f"{identity}/{i}/f_t"]),
                f_atv=torch.from_numpy(tensors[f"{identity}/{i}/f_atv"]),
            )
            for i, shot_id in enumerate(shot_ids)
        ]
    version = int(tensors["__version__"][0])
    return RefIndex(entries=entries, param_version=version)
