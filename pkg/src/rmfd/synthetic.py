"""Seeded synthetic multimodal corpus generation.

Stands in for a real identity-driven forgery dataset: each identity owns one
unit-norm signature vector per modality, and each pristine shot embeds a
shared per-shot latent together with the identity signature into all three
modality tensors (plus noise).  Forgeries perturb exactly the planted
component the category names — replacing the latent in one modality,
substituting another identity's signature, or desynchronizing the visual
latent — so every detection claim can be checked against the generator's
own bookkeeping.

All randomness derives from ``(seed, shot_id)`` through SHA-256, so output
is independent of generation order and identical across processes.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .data_model import (
    FORGERY_CATEGORIES,
    Corpus,
    ForgeryLabel,
    ShotMeta,
    ShotRecord,
    serialize_corpus,
    validate_corpus,
)
from .errors import ConfigError, IntegrityError

# Planted-signal amplitudes.  Signals are smooth (low spatial frequency) so
# small conv/patch embedders can pick them up; noise keeps shots distinct.
LATENT_AMP = 0.22
SIG_AMP = 0.13
FRAME_NOISE = 0.02
SPEC_NOISE = 0.02
TOKEN_NOISE = 0.02
TOKEN_SCALE = 0.25
#: Lip-sync desync perturbation per unit strength (relative to latent norm).
LIP_DESYNC_SCALE = 2.0

#: Maximum same-modality cosine between distinct identity signatures.
SIG_MAX_COS = 0.5

MODALITIES = ("v", "a", "t")

#: Which modality each forgery category touches.
CATEGORY_MODALITY = {
    "text_llm": "t",
    "text_shuffle": "t",
    "audio_tts": "a",
    "audio_voice_conversion": "a",
    "audio_shuffle": "a",
    "face_swap": "v",
    "lip_sync": "v",
}

# Sub-stream tags (fixed so streams never collide).
_TAG_LATENT = 1
_TAG_FRAME_NOISE = 2
_TAG_SPEC_NOISE = 3
_TAG_TOKEN_NOISE = 4
_TAG_DURATION = 5
_TAG_MIX = 9
_TAG_CATEGORY = 100  # + category index
_TAG_DONOR = 200  # + category index


def _stable_seed(*parts) -> int:
    digest = hashlib.sha256(":".join(str(p) for p in parts).encode()).digest()
    return int.from_bytes(digest[:8], "little")


def _rng(seed: int, tag: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed & (2**63 - 1), tag]))


def _unit(vec: np.ndarray) -> np.ndarray:
    norm = float(np.linalg.norm(vec))
    if norm == 0.0:
        raise ConfigError("cannot normalize a zero vector")
    return vec / norm


@dataclass(frozen=True)
class CorpusDims:
    """Tensor shapes for generated shots.

    Tokens are banded: position p belongs to band p % token_bands; the first
    d_sig bands quantize one latent component each, the remaining bands
    quantize fixed projections of the text signature.  Token id =
    band * levels + level, so a bag of tokens already determines the
    planted signal.
    """

    num_frames: int = 16
    channels: int = 3
    height: int = 32
    width: int = 32
    mel_bins: int = 32
    time_steps: int = 48
    seq_len: int = 24
    d_sig: int = 16
    vocab_size: int = 192
    token_bands: int = 24

    def __post_init__(self):
        if self.vocab_size % self.token_bands != 0:
            raise ConfigError("vocab_size must be a multiple of token_bands")
        if self.token_bands <= self.d_sig:
            raise ConfigError(
                "token_bands must exceed d_sig (latent bands plus at least "
                "one signature band)"
            )

    @property
    def token_levels(self) -> int:
        return self.vocab_size // self.token_bands

    @property
    def signature_bands(self) -> int:
        return self.token_bands - self.d_sig


@dataclass
class IdentityBank:
    """Per-identity signature vectors plus the shared embedding geometry.

    Signatures are unit-norm with pairwise same-modality cosine < 0.5 by
    rejection sampling.  The bank also carries the fixed projection bases
    that map latents/signatures into tensor space, and a derangement mapping
    each identity to its face-swap donor.
    """

    ids: tuple[str, ...]
    signatures: dict[str, np.ndarray]  # modality -> [n, d_sig]
    lookalike: dict[str, str]
    dims: CorpusDims
    seed: int
    vis_latent_basis: np.ndarray  # [d_sig, C, H, W]
    vis_sig_basis: np.ndarray
    aud_latent_basis: np.ndarray  # [d_sig, M, F]
    aud_sig_basis: np.ndarray
    token_proj: np.ndarray  # [bands, 2 * d_sig]

    def index_of(self, identity_id: str) -> int:
        try:
            return self.ids.index(identity_id)
        except ValueError:
            raise KeyError(f"unknown identity {identity_id!r}") from None

    def signature(self, modality: str, identity_id: str) -> np.ndarray:
        return self.signatures[modality][self.index_of(identity_id)]


@dataclass
class PlantedSignals:
    """Ground-truth bookkeeping for one generated shot."""

    shot_id: str
    identity_id: str
    split: str
    categories: tuple[str, ...]
    latents: dict[str, np.ndarray]  # modality -> planted latent
    sig_vectors: dict[str, np.ndarray]  # modality -> planted signature vector
    sig_owners: dict[str, str]  # modality -> identity whose signature dominates

    def latent_alignment(self, mod_p: str, mod_q: str) -> float:
        """Cosine between the latents planted in two modalities."""
        return float(np.dot(self.latents[mod_p], self.latents[mod_q]))


@dataclass
class GenReport:
    """Planted-signal bookkeeping for a whole generated corpus."""

    entries: dict[str, PlantedSignals] = field(default_factory=dict)

    def to_json(self) -> str:
        payload = {}
        for shot_id in sorted(self.entries):
            p = self.entries[shot_id]
            payload[shot_id] = {
                "identity_id": p.identity_id,
                "split": p.split,
                "categories": list(p.categories),
                "latents": {m: p.latents[m].tolist() for m in MODALITIES},
                "sig_owners": dict(sorted(p.sig_owners.items())),
            }
        return json.dumps(payload, sort_keys=True, indent=1)


def _lowfreq_basis(rng: np.random.Generator, d_sig: int, *shape: int) -> np.ndarray:
    """Random smooth fields: mixtures of low-frequency 2D cosine modes.

    Returns [d_sig, *shape] with each [*shape] slice scaled to unit RMS; the
    leading axis of ``shape`` beyond the last two is treated channelwise.
    """
    *lead, h, w = shape
    modes = 4
    ys = (np.arange(h) + 0.5) / h
    xs = (np.arange(w) + 0.5) / w
    basis_y = np.stack([np.cos(np.pi * k * ys) for k in range(modes)])  # [modes, h]
    basis_x = np.stack([np.cos(np.pi * k * xs) for k in range(modes)])  # [modes, w]
    grid = np.einsum("ky,lx->klyx", basis_y, basis_x)  # [modes, modes, h, w]
    coeff = rng.standard_normal((d_sig, *lead, modes, modes))
    fields = np.einsum("...kl,klyx->...yx", coeff, grid)  # [d_sig, *lead, h, w]
    flat = fields.reshape(d_sig, -1)
    rms = np.sqrt(np.mean(flat**2, axis=1, keepdims=True))
    fields = (flat / rms).reshape(fields.shape)
    return fields


def make_identity_bank(
    num_identities: int,
    d_sig: int,
    seed: int,
    dims: CorpusDims | None = None,
) -> IdentityBank:
    """Build a deterministic identity bank with separated signatures."""
    if num_identities < 2:
        raise ConfigError("need at least 2 identities (lookalike map)")
    dims = dims if dims is not None else CorpusDims(d_sig=d_sig)
    if dims.d_sig != d_sig:
        dims = replace(dims, d_sig=d_sig)
    rng = _rng(seed, 77001)
    ids = tuple(f"id{i:02d}" for i in range(num_identities))

    signatures: dict[str, np.ndarray] = {}
    for modality in MODALITIES:
        rows = np.zeros((num_identities, d_sig))
        for i in range(num_identities):
            for attempt in range(10_000):
                cand = _unit(rng.standard_normal(d_sig))
                if all(abs(float(cand @ rows[j])) < SIG_MAX_COS for j in range(i)):
                    rows[i] = cand
                    break
            else:
                raise ConfigError(
                    f"cannot separate {num_identities} signatures in {d_sig} dims"
                )
        signatures[modality] = rows

    perm = rng.permutation(num_identities)
    lookalike = {
        ids[perm[i]]: ids[perm[(i + 1) % num_identities]]
        for i in range(num_identities)
    }

    return IdentityBank(
        ids=ids,
        signatures=signatures,
        lookalike=lookalike,
        dims=dims,
        seed=seed,
        vis_latent_basis=_lowfreq_basis(rng, d_sig, dims.channels, dims.height, dims.width),
        vis_sig_basis=_lowfreq_basis(rng, d_sig, dims.channels, dims.height, dims.width),
        aud_latent_basis=_lowfreq_basis(rng, d_sig, dims.mel_bins, dims.time_steps),
        aud_sig_basis=_lowfreq_basis(rng, d_sig, dims.mel_bins, dims.time_steps),
        token_proj=np.stack(
            [_unit(rng.standard_normal(d_sig)) for _ in range(dims.signature_bands)]
        ),
    )


def _render_frames(bank: IdentityBank, latent, sig_vec, seed: int) -> np.ndarray:
    d = bank.dims
    base = 0.5 + LATENT_AMP * np.einsum("d,dchw->chw", latent, bank.vis_latent_basis)
    base = base + SIG_AMP * np.einsum("d,dchw->chw", sig_vec, bank.vis_sig_basis)
    noise = FRAME_NOISE * _rng(seed, _TAG_FRAME_NOISE).standard_normal(
        (d.num_frames, d.channels, d.height, d.width)
    )
    return np.clip(base[None] + noise, 0.0, 1.0).astype(np.float32)


def _render_spectrogram(bank: IdentityBank, latent, sig_vec, seed: int) -> np.ndarray:
    d = bank.dims
    base = LATENT_AMP * np.einsum("d,dmf->mf", latent, bank.aud_latent_basis)
    base = base + SIG_AMP * np.einsum("d,dmf->mf", sig_vec, bank.aud_sig_basis)
    noise = SPEC_NOISE * _rng(seed, _TAG_SPEC_NOISE).standard_normal(
        (d.mel_bins, d.time_steps)
    )
    return (base + noise).astype(np.float32)


def _render_tokens(bank: IdentityBank, latent, sig_vec, seed: int) -> np.ndarray:
    """Quantize latent components and signature projections into token ids.

    Band b < d_sig encodes latent[b]; later bands encode projections of the
    signature.  Token id = band * levels + level, so each id reveals which
    quantity it encodes and its quantized value; a bag-of-tokens readout is
    enough to recover the planted signal.
    """
    d = bank.dims
    rng = _rng(seed, _TAG_TOKEN_NOISE)
    levels = d.token_levels
    tokens = np.zeros(d.seq_len, dtype=np.int32)
    for pos in range(d.seq_len):
        band = pos % d.token_bands
        if band < d.d_sig:
            x = float(latent[band])
        else:
            x = float(bank.token_proj[band - d.d_sig] @ sig_vec)
        x += TOKEN_NOISE * rng.standard_normal()
        u = 1.0 / (1.0 + math.exp(-x / TOKEN_SCALE))
        level = min(levels - 1, int(u * levels))
        tokens[pos] = band * levels + level
    return tokens


def _pristine_plant(bank: IdentityBank, identity_id: str, seed: int) -> PlantedSignals:
    latent = _unit(_rng(seed, _TAG_LATENT).standard_normal(bank.dims.d_sig))
    return PlantedSignals(
        shot_id="",
        identity_id=identity_id,
        split="train",
        categories=(),
        latents={m: latent.copy() for m in MODALITIES},
        sig_vectors={m: bank.signature(m, identity_id).copy() for m in MODALITIES},
        sig_owners={m: identity_id for m in MODALITIES},
    )


def _render_shot(bank: IdentityBank, plant: PlantedSignals, meta: ShotMeta, seed: int,
                 label: ForgeryLabel) -> ShotRecord:
    return ShotRecord(
        meta=meta,
        label=label,
        frames=_render_frames(bank, plant.latents["v"], plant.sig_vectors["v"], seed),
        spectrogram=_render_spectrogram(
            bank, plant.latents["a"], plant.sig_vectors["a"], seed
        ),
        tokens=_render_tokens(bank, plant.latents["t"], plant.sig_vectors["t"], seed),
    )


def synthesize_pristine_shot(
    bank: IdentityBank,
    identity_id: str,
    dims: CorpusDims,
    seed: int,
    shot_id: str | None = None,
    source_video_id: str | None = None,
    split: str = "train",
) -> ShotRecord:
    """Generate one pristine shot; deterministic in (bank, identity, seed)."""
    if identity_id not in bank.ids:
        raise KeyError(f"unknown identity {identity_id!r}")
    if dims != bank.dims:
        raise ConfigError("dims must match the bank the shot is rendered from")
    plant = _pristine_plant(bank, identity_id, seed)
    meta = ShotMeta(
        shot_id=shot_id or f"{identity_id}-s{seed & 0xFFFFFFFF:08x}",
        identity_id=identity_id,
        source_video_id=source_video_id or f"{identity_id}-src0",
        split=split,
        duration_s=float(_rng(seed, _TAG_DURATION).uniform(5.0, 19.5)),
    )
    return _render_shot(bank, plant, meta, seed, ForgeryLabel.pristine())


def _forged_plant(
    bank: IdentityBank,
    identity_id: str,
    categories: tuple[str, ...],
    seed: int,
    strength: float,
) -> PlantedSignals:
    plant = _pristine_plant(bank, identity_id, seed)
    others = [i for i in bank.ids if i != identity_id]
    for cat in FORGERY_CATEGORIES:
        if cat not in categories:
            continue
        idx = FORGERY_CATEGORIES.index(cat)
        rng = _rng(seed, _TAG_CATEGORY + idx)
        mod = CATEGORY_MODALITY[cat]
        if cat in ("text_llm", "audio_tts", "audio_voice_conversion"):
            fresh = _unit(rng.standard_normal(bank.dims.d_sig))
            plant.latents[mod] = _unit(
                (1.0 - strength) * plant.latents[mod] + strength * fresh
            )
        elif cat in ("text_shuffle", "audio_shuffle"):
            donor = others[_rng(seed, _TAG_DONOR + idx).integers(len(others))]
            donor_sig = bank.signature(mod, donor)
            plant.sig_vectors[mod] = _unit(
                (1.0 - strength) * plant.sig_vectors[mod] + strength * donor_sig
            )
            plant.sig_owners[mod] = donor
        elif cat == "face_swap":
            donor = bank.lookalike[identity_id]
            donor_sig = bank.signature("v", donor)
            plant.sig_vectors["v"] = _unit(
                (1.0 - strength) * plant.sig_vectors["v"] + strength * donor_sig
            )
            plant.sig_owners["v"] = donor
        elif cat == "lip_sync":
            bump = _unit(rng.standard_normal(bank.dims.d_sig))
            plant.latents["v"] = _unit(
                plant.latents["v"] + strength * LIP_DESYNC_SCALE * bump
            )
    plant.categories = tuple(c for c in FORGERY_CATEGORIES if c in categories)
    return plant


def apply_forgery(
    shot: ShotRecord,
    categories,
    bank: IdentityBank,
    seed: int,
    strength: float,
) -> ShotRecord:
    """Forge selected categories onto a pristine shot.

    ``seed`` must be the seed the pristine shot was synthesized with; the
    touched modalities are re-rendered with the same noise streams so the
    only change is the planted signal.  Untouched modalities are copied
    bit-identically.  The claimed identity in ``meta`` never changes.
    """
    categories = tuple(categories)
    if not categories:
        raise ValueError("category set must be non-empty")
    unknown = [c for c in categories if c not in FORGERY_CATEGORIES]
    if unknown:
        raise ValueError(f"unknown forgery categories {unknown}")
    if shot.label.y_binary != 0:
        raise IntegrityError("apply_forgery requires a pristine input shot")
    if not 0.0 < strength <= 1.0:
        raise ConfigError(f"strength must be in (0, 1], got {strength}")

    baseline = _pristine_plant(bank, shot.meta.identity_id, seed)
    check = _render_tokens(bank, baseline.latents["t"], baseline.sig_vectors["t"], seed)
    if not np.array_equal(check, shot.tokens):
        raise IntegrityError(
            "shot content does not match (bank, seed); pass the generation seed"
        )

    plant = _forged_plant(bank, shot.meta.identity_id, categories, seed, strength)
    touched = {CATEGORY_MODALITY[c] for c in categories}
    frames = (
        _render_frames(bank, plant.latents["v"], plant.sig_vectors["v"], seed)
        if "v" in touched
        else shot.frames.copy()
    )
    spec = (
        _render_spectrogram(bank, plant.latents["a"], plant.sig_vectors["a"], seed)
        if "a" in touched
        else shot.spectrogram.copy()
    )
    tokens = (
        _render_tokens(bank, plant.latents["t"], plant.sig_vectors["t"], seed)
        if "t" in touched
        else shot.tokens.copy()
    )
    return ShotRecord(
        meta=shot.meta,
        label=ForgeryLabel.forged(categories),
        frames=frames,
        spectrogram=spec,
        tokens=tokens,
    )


def _default_mix() -> list[tuple[tuple[str, ...], float]]:
    return [((cat,), 1.0) for cat in FORGERY_CATEGORIES]


def _default_counts() -> dict[str, int]:
    return {"reference": 3, "train": 20, "val": 4, "test": 10}


def _default_fractions() -> dict[str, float]:
    return {"train": 0.5, "val": 0.5, "test": 0.5}


@dataclass
class GenConfig:
    """Everything needed to generate a corpus deterministically."""

    num_identities: int = 6
    shots_per_identity: dict[str, int] = field(default_factory=_default_counts)
    forged_fraction: dict[str, float] = field(default_factory=_default_fractions)
    forgery_mix: list[tuple[tuple[str, ...], float]] = field(
        default_factory=_default_mix
    )
    dims: CorpusDims = field(default_factory=CorpusDims)
    seed: int = 11
    inconsistency_strength: float = 1.0
    sources_per_split: int = 2

    def __post_init__(self):
        if self.num_identities < 2:
            raise ConfigError("num_identities must be >= 2")
        for split in ("train", "reference"):
            if self.shots_per_identity.get(split, 0) < 1:
                raise ConfigError(f"need at least one {split} shot per identity")
        if not 0.0 < self.inconsistency_strength <= 1.0:
            raise ConfigError("inconsistency_strength must be in (0, 1]")
        for subset, weight in self.forgery_mix:
            if not subset:
                raise ConfigError("forgery_mix subsets must be non-empty")
            bad = [c for c in subset if c not in FORGERY_CATEGORIES]
            if bad:
                raise ConfigError(f"unknown categories in forgery_mix: {bad}")
            if weight <= 0:
                raise ConfigError("forgery_mix weights must be positive")

    def to_json(self) -> str:
        payload = {
            "num_identities": self.num_identities,
            "shots_per_identity": self.shots_per_identity,
            "forged_fraction": self.forged_fraction,
            "forgery_mix": [[list(s), w] for s, w in self.forgery_mix],
            "dims": self.dims.__dict__,
            "seed": self.seed,
            "inconsistency_strength": self.inconsistency_strength,
            "sources_per_split": self.sources_per_split,
        }
        return json.dumps(payload, sort_keys=True, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "GenConfig":
        raw = json.loads(text)
        kwargs = dict(raw)
        if "dims" in raw:
            kwargs["dims"] = CorpusDims(**raw["dims"])
        if "forgery_mix" in raw:
            kwargs["forgery_mix"] = [
                (tuple(subset), float(weight)) for subset, weight in raw["forgery_mix"]
            ]
        return cls(**kwargs)


@dataclass
class GenResult:
    corpus: Corpus
    report: GenReport
    bank: IdentityBank


def build_corpus(config: GenConfig, out_dir: str | Path | None = None) -> GenResult:
    """Generate a full corpus (reference/train/val/test) from a GenConfig.

    Forged shots are derived from pristine shots sharing a source video so
    paired/unpaired contrastive construction is possible.  When ``out_dir``
    is given, writes manifest.jsonl, tensor files, gen_config.json, and
    gen_report.json.
    """
    dims = config.dims
    bank = make_identity_bank(config.num_identities, dims.d_sig, config.seed, dims)
    mix_subsets = [tuple(s) for s, _ in config.forgery_mix]
    mix_weights = np.array([w for _, w in config.forgery_mix], dtype=np.float64)
    mix_weights = mix_weights / mix_weights.sum()

    shots: list[ShotRecord] = []
    report = GenReport()
    for identity in bank.ids:
        for split in ("reference", "train", "val", "test"):
            n = config.shots_per_identity.get(split, 0)
            if n <= 0:
                continue
            frac = 0.0 if split == "reference" else config.forged_fraction.get(split, 0.0)
            n_forged = int(round(frac * n))
            order = _rng(
                _stable_seed(config.seed, identity, split), 42
            ).permutation(n)
            forged_slots = set(int(k) for k in order[:n_forged])
            for k in range(n):
                shot_id = f"{identity}-{split}-{k:03d}"
                shot_seed = _stable_seed(config.seed, shot_id)
                source = f"{identity}-{split}-src{k % config.sources_per_split}"
                pristine = synthesize_pristine_shot(
                    bank, identity, dims, shot_seed,
                    shot_id=shot_id, source_video_id=source, split=split,
                )
                if k in forged_slots:
                    pick = _rng(shot_seed, _TAG_MIX).choice(
                        len(mix_subsets), p=mix_weights
                    )
                    categories = mix_subsets[int(pick)]
                    shot = apply_forgery(
                        pristine, categories, bank, shot_seed,
                        config.inconsistency_strength,
                    )
                    plant = _forged_plant(
                        bank, identity, categories, shot_seed,
                        config.inconsistency_strength,
                    )
                else:
                    shot = pristine
                    plant = _pristine_plant(bank, identity, shot_seed)
                plant.shot_id = shot_id
                plant.split = split
                report.entries[shot_id] = plant
                shots.append(shot)

    corpus = Corpus(shots=shots)
    check = validate_corpus(corpus)
    if not check.ok:
        raise IntegrityError(
            f"generator produced an invalid corpus: {check.violations[:3]}"
        )
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        serialize_corpus(corpus, out)
        (out / "gen_config.json").write_text(config.to_json())
        (out / "gen_report.json").write_text(report.to_json())
    return GenResult(corpus=corpus, report=report, bank=bank)
