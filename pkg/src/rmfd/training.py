"""Batch construction, optimization loop, and the warmup+cosine LR schedule.

Batches are deterministic partitions of the train split (every shot exactly
once per epoch) repaired so that each batch holds at least one pristine
anchor and one forged negative whenever a contrastive loss is active.  Each
step draws one random reference entry per identity from the (periodically
refreshed) reference index, runs encoders -> fusion -> reference blend ->
heads, and applies one seeded optimizer update at the scheduled rate.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from .data_model import Corpus, ShotRecord, validate_corpus
from .errors import BatchingError, ConfigError, IntegrityError
from .losses import (
    DEFAULT_PAIRS,
    ContrastiveConfig,
    FeatureBundle,
    LossBreakdown,
    LossWeights,
    PairPlan,
    check_finite,
    classification_losses,
    cross_modal_loss,
    identity_loss,
    total_loss,
)
from .model import Detector, ModelConfig, build_detector
from .reference import (
    RefIndex,
    build_reference_index,
    check_staleness,
    fuse_with_reference,
    select_reference,
)
from .synthetic import _stable_seed
from .tensorio import save_archive, load_archive

MODALITIES = ("v", "a", "t")


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 8
    steps: int = 2000
    base_lr: float = 0.04
    warmup_start_lr: float = 1e-4
    min_lr: float = 1e-5
    warmup_steps: int = 100
    momentum: float = 0.9
    weight_decay: float = 0.0
    optimizer: str = "sgd"
    identities_per_batch: int = 2
    weights: LossWeights = field(default_factory=LossWeights)
    alpha: float = 0.001
    tau: float = 1.0
    seed: int = 0
    use_modal_loss: bool = True
    use_identity: bool = True
    modality_subset: tuple[str, ...] = MODALITIES
    modality_pairs: tuple[tuple[str, str], ...] = DEFAULT_PAIRS
    include_positive_in_denominator: bool = True
    refresh_period: int = 200
    eval_every: int = 250
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        if not 0 <= self.warmup_steps < self.steps:
            raise ConfigError("need 0 <= warmup_steps < steps")
        if min(self.base_lr, self.warmup_start_lr, self.min_lr) <= 0:
            raise ConfigError("learning rates must be positive")
        if self.min_lr > self.base_lr:
            raise ConfigError("min_lr must not exceed base_lr")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if not set(self.modality_subset) <= set(MODALITIES) or not self.modality_subset:
            raise ConfigError(f"bad modality subset {self.modality_subset}")
        if self.refresh_period < 1:
            raise ConfigError("refresh_period must be >= 1")

    def contrastive(self) -> ContrastiveConfig:
        pairs = tuple(
            (p, q)
            for p, q in self.modality_pairs
            if p in self.modality_subset and q in self.modality_subset
        )
        return ContrastiveConfig(
            tau=self.tau,
            modality_pairs=pairs,
            include_positive_in_denominator=self.include_positive_in_denominator,
        )

    def to_json(self) -> str:
        payload = asdict(self)
        payload["model"] = self.model.to_dict()
        payload["weights"] = {"beta": self.weights.beta, "gamma": self.weights.gamma}
        payload["modality_subset"] = list(self.modality_subset)
        payload["modality_pairs"] = [list(p) for p in self.modality_pairs]
        return json.dumps(payload, sort_keys=True, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "TrainConfig":
        raw = json.loads(text)
        kwargs = dict(raw)
        if "model" in raw:
            kwargs["model"] = ModelConfig.from_dict(raw["model"])
        if "weights" in raw:
            kwargs["weights"] = LossWeights(**raw["weights"])
        if "modality_subset" in raw:
            kwargs["modality_subset"] = tuple(raw["modality_subset"])
        if "modality_pairs" in raw:
            kwargs["modality_pairs"] = tuple(tuple(p) for p in raw["modality_pairs"])
        return cls(**kwargs)


def lr_at(step: int, config: TrainConfig) -> float:
    """Linear warmup to base_lr, then cosine decay clamped at min_lr."""
    if not 0 <= step <= config.steps:
        raise ValueError(f"step {step} outside [0, {config.steps}]")
    if step < config.warmup_steps:
        frac = step / config.warmup_steps
        return config.warmup_start_lr + (config.base_lr - config.warmup_start_lr) * frac
    span = max(1, config.steps - config.warmup_steps)
    progress = (step - config.warmup_steps) / span
    cosine = config.base_lr * (1.0 + math.cos(math.pi * progress)) / 2.0
    return max(config.min_lr, cosine)


@dataclass
class Batch:
    shots: list[ShotRecord]

    @property
    def pristine_indices(self) -> list[int]:
        return [i for i, s in enumerate(self.shots) if s.label.y_binary == 0]

    @property
    def forged_indices(self) -> list[int]:
        return [i for i, s in enumerate(self.shots) if s.label.y_binary == 1]


def make_batches(corpus: Corpus, config: TrainConfig, epoch_seed: int) -> list[Batch]:
    """Deterministic epoch partition with per-batch pairing guarantees."""
    train = sorted(corpus.split("train"), key=lambda s: s.meta.shot_id)
    if not train:
        raise BatchingError("train split is empty")
    contrastive = config.use_modal_loss or config.use_identity
    if contrastive and config.use_modal_loss and config.use_identity:
        if config.batch_size < 4:
            raise BatchingError(
                "batch_size must be >= 4 with both contrastive losses active"
            )
    rng = np.random.default_rng(
        np.random.SeedSequence(
            [config.seed & (2**63 - 1), epoch_seed & (2**63 - 1), 3001]
        )
    )
    # Identity-blocked ordering: each batch draws from few identities so
    # same-identity negatives dominate the contrastive denominators.
    per_ident = max(1, config.batch_size // max(1, config.identities_per_batch))
    by_ident: dict[str, list[int]] = {}
    for i, shot in enumerate(train):
        by_ident.setdefault(shot.meta.identity_id, []).append(i)
    runs: list[list[int]] = []
    for ident in sorted(by_ident):
        members = [by_ident[ident][k] for k in rng.permutation(len(by_ident[ident]))]
        runs.extend(
            members[i : i + per_ident] for i in range(0, len(members), per_ident)
        )
    order = [i for r in (runs[k] for k in rng.permutation(len(runs))) for i in r]
    groups = [
        order[i : i + config.batch_size]
        for i in range(0, len(order), config.batch_size)
    ]

    if contrastive:
        forged = [i for i, s in enumerate(train) if s.label.y_binary == 1]
        pristine = [i for i, s in enumerate(train) if s.label.y_binary == 0]
        if len(forged) < len(groups):
            raise BatchingError(
                f"cannot give each of {len(groups)} batches a forged negative: "
                f"only {len(forged)} forged train shots"
            )
        if len(pristine) < len(groups):
            raise BatchingError(
                f"cannot give each of {len(groups)} batches a pristine anchor: "
                f"only {len(pristine)} pristine train shots"
            )
        forged_set = set(forged)

        def counts(group):
            n_f = sum(1 for i in group if i in forged_set)
            return n_f, len(group) - n_f

        for want_forged in (True, False):
            for gi, group in enumerate(groups):
                n_f, n_p = counts(group)
                lack = (n_f == 0) if want_forged else (n_p == 0)
                if not lack:
                    continue
                for gj, donor in enumerate(groups):
                    if gj == gi:
                        continue
                    d_f, d_p = counts(donor)
                    surplus = d_f >= 2 if want_forged else d_p >= 2
                    if not surplus:
                        continue
                    give = next(
                        k for k, i in enumerate(donor)
                        if (i in forged_set) == want_forged
                    )
                    take = next(
                        k for k, i in enumerate(group)
                        if (i in forged_set) != want_forged
                    )
                    donor[give], group[take] = group[take], donor[give]
                    break
                else:
                    raise BatchingError(
                        "could not balance batches for contrastive pairing"
                    )

    return [Batch(shots=[train[i] for i in group]) for group in groups]


@dataclass
class TrainState:
    model: Detector
    optimizer: torch.optim.Optimizer
    config: TrainConfig
    ref_index: RefIndex
    step: int = 0


def _stack_batch(shots, subset):
    frames = (
        torch.stack([torch.from_numpy(s.frames) for s in shots])
        if "v" in subset
        else None
    )
    spec = (
        torch.stack([torch.from_numpy(s.spectrogram) for s in shots])
        if "a" in subset
        else None
    )
    tokens = (
        torch.stack([torch.from_numpy(s.tokens) for s in shots]).long()
        if "t" in subset
        else None
    )
    return frames, spec, tokens


def _bundles_from_features(shots, feats) -> list[FeatureBundle]:
    bundles = []
    for i, shot in enumerate(shots):
        bundles.append(
            FeatureBundle(
                shot_id=shot.meta.shot_id,
                identity_id=shot.meta.identity_id,
                is_forged=shot.label.y_binary == 1,
                f_v=feats["v"][i] if feats["v"] is not None else None,
                f_a=feats["a"][i] if feats["a"] is not None else None,
                f_t=feats["t"][i] if feats["t"] is not None else None,
                f_at=feats["at"][i],
                f_atv=feats["atv"][i],
            )
        )
    return bundles


def _draw_reference_bundles(index: RefIndex, seed: int) -> dict[str, list]:
    return {
        ident: [select_reference(index, ident, "random", seed).as_bundle(ident)]
        for ident in index.identities()
    }


def train_step(state: TrainState, batch: Batch) -> tuple[TrainState, LossBreakdown]:
    """One optimization step; returns the pre-update loss breakdown."""
    config = state.config
    model = state.model
    subset = config.modality_subset
    check_staleness(state.ref_index, model.param_version, config.refresh_period)

    frames, spec, tokens = _stack_batch(batch.shots, subset)
    feats = model.forward_features(frames, spec, tokens, subset)
    bundles = _bundles_from_features(batch.shots, feats)

    ref_bundles = _draw_reference_bundles(
        state.ref_index, _stable_seed(config.seed, "refdraw", state.step)
    )
    ref_rows = torch.stack(
        [ref_bundles[s.meta.identity_id][0].f_atv for s in batch.shots]
    )
    f_prime = fuse_with_reference(feats["atv"], ref_rows, config.alpha)
    labels = [s.label for s in batch.shots]
    l_bic, l_mlc = classification_losses(f_prime, labels, model.heads)

    cc = config.contrastive()
    zero = torch.zeros((), dtype=l_bic.dtype)
    if config.use_modal_loss and cc.modality_pairs:
        l_modal = cross_modal_loss(bundles, PairPlan.from_bundles(bundles), cc)
    else:
        l_modal = zero
    if config.use_identity:
        l_identity = identity_loss(bundles, ref_bundles, cc, modalities=subset)
    else:
        l_identity = zero

    breakdown = total_loss(l_bic, l_mlc, l_modal, l_identity, config.weights)
    check_finite(breakdown)

    lr = lr_at(state.step, config)
    for group in state.optimizer.param_groups:
        group["lr"] = lr
    state.optimizer.zero_grad()
    breakdown.total.backward()
    state.optimizer.step()
    model.param_version += 1
    state.step += 1

    return state, LossBreakdown(**{k: float(v) for k, v in breakdown.to_dict().items()})


@dataclass
class CheckpointReport:
    losses: list[dict]
    val_history: list[dict]
    best_step: int
    best_val_auc: float
    best_state: dict[str, np.ndarray]
    final_state: dict[str, np.ndarray]
    config: TrainConfig
    corpus_hash: str
    checkpoint_paths: dict[str, str] = field(default_factory=dict)


def corpus_hash(corpus: Corpus) -> str:
    digest = hashlib.sha256()
    for shot in sorted(corpus.shots, key=lambda s: s.meta.shot_id):
        meta = shot.meta
        digest.update(
            f"{meta.shot_id}|{meta.identity_id}|{meta.source_video_id}|"
            f"{meta.split}|{meta.duration_s!r}|{shot.label.y_binary}|"
            f"{shot.label.y_types}".encode()
        )
        digest.update(shot.frames.tobytes())
        digest.update(shot.spectrogram.tobytes())
        digest.update(shot.tokens.tobytes())
    return digest.hexdigest()


def _make_optimizer(model: Detector, config: TrainConfig) -> torch.optim.Optimizer:
    if config.optimizer == "adam":
        return torch.optim.Adam(
            model.parameters(), lr=config.base_lr,
            weight_decay=config.weight_decay,
        )
    return torch.optim.SGD(
        model.parameters(), lr=config.base_lr, momentum=config.momentum,
        weight_decay=config.weight_decay,
    )


def save_checkpoint(path: str | Path, model: Detector, meta: dict) -> None:
    arrays = model.state_arrays()
    arrays["__param_version__"] = np.array([model.param_version], dtype=np.int32)
    save_archive(path, arrays)
    Path(str(path) + ".json").write_text(json.dumps(meta, sort_keys=True, indent=1))


def load_checkpoint(path: str | Path) -> tuple[Detector, dict]:
    arrays = load_archive(path)
    meta = json.loads(Path(str(path) + ".json").read_text())
    version = int(arrays.pop("__param_version__")[0])
    model = Detector(ModelConfig.from_dict(meta["model_config"]))
    model.load_state_arrays(arrays)
    model.param_version = version
    return model, meta


def fit(
    config: TrainConfig,
    corpus: Corpus,
    run_dir: str | Path | None = None,
    log=None,
) -> CheckpointReport:
    """Run the full training loop with periodic reference refresh and eval."""
    from .metrics import evaluate_model  # local import to avoid a cycle

    report = validate_corpus(corpus)
    if not report.ok:
        raise IntegrityError(
            f"corpus failed validation: {report.violations[:3]}"
        )
    with torch.random.fork_rng():
        torch.manual_seed(_stable_seed(config.seed, "torch-init"))
        model = build_detector(config.model, seed=_stable_seed(config.seed, "model"))
        optimizer = _make_optimizer(model, config)

    state = TrainState(
        model=model,
        optimizer=optimizer,
        config=config,
        ref_index=build_reference_index(corpus, model, config.modality_subset),
    )

    losses: list[dict] = []
    val_history: list[dict] = []
    best_auc = -1.0
    best_step = -1
    best_state = model.state_arrays()
    best_version = model.param_version

    epoch = 0
    batches = make_batches(corpus, config, epoch)
    cursor = 0
    while state.step < config.steps:
        if cursor >= len(batches):
            epoch += 1
            batches = make_batches(corpus, config, epoch)
            cursor = 0
        if state.step > 0 and state.step % config.refresh_period == 0:
            state.ref_index = build_reference_index(
                corpus, model, config.modality_subset
            )
        state, breakdown = train_step(state, batches[cursor])
        cursor += 1
        losses.append({"step": state.step - 1, **breakdown.to_dict()})

        at_eval = state.step % config.eval_every == 0 or state.step == config.steps
        if at_eval and corpus.split("val"):
            index = build_reference_index(corpus, model, config.modality_subset)
            metrics = evaluate_model(
                model, corpus, "val", index,
                alpha=config.alpha, subset=config.modality_subset,
            )
            auc = metrics.auc if metrics.auc is not None else 0.5
            val_history.append({"step": state.step, "auc": auc, "acc": metrics.acc})
            if log is not None:
                log(f"step {state.step}: val auc {auc:.4f} acc {metrics.acc:.4f}")
            if auc > best_auc:
                best_auc = auc
                best_step = state.step
                best_state = model.state_arrays()
                best_version = model.param_version

    if best_step < 0:  # no validation split: fall back to the final weights
        best_state = model.state_arrays()
        best_version = model.param_version
        best_step = state.step

    chash = corpus_hash(corpus)
    result = CheckpointReport(
        losses=losses,
        val_history=val_history,
        best_step=best_step,
        best_val_auc=best_auc,
        best_state=best_state,
        final_state=model.state_arrays(),
        config=config,
        corpus_hash=chash,
    )

    if run_dir is not None:
        run = Path(run_dir)
        run.mkdir(parents=True, exist_ok=True)
        meta = {
            "model_config": config.model.to_dict(),
            "train_config": json.loads(config.to_json()),
            "corpus_hash": chash,
            "best_step": best_step,
            "best_val_auc": best_auc,
        }
        final_path = run / "checkpoint_final.bin"
        save_checkpoint(final_path, model, {**meta, "which": "final"})
        best_model = Detector(config.model)
        best_model.load_state_arrays(best_state)
        best_model.param_version = best_version
        best_path = run / "checkpoint_best.bin"
        save_checkpoint(best_path, best_model, {**meta, "which": "best"})
        (run / "losses.json").write_text(json.dumps(losses, sort_keys=True))
        (run / "val_history.json").write_text(json.dumps(val_history, sort_keys=True))
        result.checkpoint_paths = {
            "final": str(final_path),
            "best": str(best_path),
        }

    return result


def restore_model(report: CheckpointReport, which: str = "best") -> Detector:
    """Rebuild a Detector from an in-memory CheckpointReport."""
    model = Detector(report.config.model)
    state = report.best_state if which == "best" else report.final_state
    model.load_state_arrays(state)
    if which == "best":
        model.param_version = report.best_step
    else:
        model.param_version = report.config.steps
    return model
