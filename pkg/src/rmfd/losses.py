"""Training objectives.

All contrastive terms share one InfoNCE kernel over cosine similarity:
``-log(exp(s_pos / tau) / sum_j exp(s_j / tau))`` with the positive included
in the denominator (a config switch can exclude it for ablations).

* Cross-modal loss: for each directed modality pair and each pristine
  anchor shot, the positive is the anchor's own feature in the other
  modality (synced media from the same shot); negatives are the other
  shots' features in that modality, forged shots included.
* Identity-aware loss: for each pristine anchor and each modality, the
  positive is a same-identity reference feature; negatives are reference
  features of other identities plus forged training features claiming the
  same identity.  Forged shots are never anchors.
* Classification: 2-class softmax cross-entropy for the binary head, mean
  per-category sigmoid binary cross-entropy for the 7-way multi-label head.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn.functional as F

from .data_model import ForgeryLabel
from .errors import NumericError, PairingError, SimilarityError

MODALITIES = ("v", "a", "t")
DEFAULT_PAIRS = (("a", "v"), ("a", "t"), ("v", "a"), ("t", "a"))


@dataclass(frozen=True)
class ContrastiveConfig:
    tau: float = 1.0
    modality_pairs: tuple[tuple[str, str], ...] = DEFAULT_PAIRS
    include_positive_in_denominator: bool = True

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError(f"tau must be positive, got {self.tau}")
        for p, q in self.modality_pairs:
            if p == q or p not in MODALITIES or q not in MODALITIES:
                raise ValueError(f"bad modality pair ({p}, {q})")


@dataclass(frozen=True)
class LossWeights:
    beta: float = 0.2
    gamma: float = 0.2


@dataclass
class LossBreakdown:
    l_bic: float
    l_mlc: float
    l_modal: float
    l_identity: float
    total: float

    def to_dict(self) -> dict:
        return {
            "l_bic": _as_float(self.l_bic),
            "l_mlc": _as_float(self.l_mlc),
            "l_modal": _as_float(self.l_modal),
            "l_identity": _as_float(self.l_identity),
            "total": _as_float(self.total),
        }


@dataclass
class FeatureBundle:
    """Per-shot features flowing through fusion and the losses."""

    shot_id: str
    identity_id: str
    is_forged: bool
    f_v: torch.Tensor | None = None
    f_a: torch.Tensor | None = None
    f_t: torch.Tensor | None = None
    f_at: torch.Tensor | None = None
    f_atv: torch.Tensor | None = None
    f_prime: torch.Tensor | None = None

    def modality(self, name: str) -> torch.Tensor:
        feat = {"v": self.f_v, "a": self.f_a, "t": self.f_t}[name]
        if feat is None:
            raise PairingError(
                f"shot {self.shot_id}: modality {name!r} feature missing"
            )
        return feat


@dataclass
class PairPlan:
    """Anchor/positive/candidate bookkeeping for the cross-modal loss.

    ``positives`` maps anchor index -> candidate index of its synced
    positive (defaults to the anchor itself); ``candidates`` is the pool the
    denominator runs over.
    """

    anchors: tuple[int, ...]
    candidates: tuple[int, ...]
    positives: dict[int, int] = field(default_factory=dict)

    @classmethod
    def from_bundles(cls, bundles) -> "PairPlan":
        anchors = tuple(i for i, b in enumerate(bundles) if not b.is_forged)
        return cls(anchors=anchors, candidates=tuple(range(len(bundles))))

    def positive_of(self, anchor: int) -> int:
        return self.positives.get(anchor, anchor)


def _as_float(x) -> float:
    return float(x.detach()) if torch.is_tensor(x) else float(x)


def _check_norms(*tensors) -> None:
    for t in tensors:
        norms = torch.linalg.vector_norm(t.detach(), dim=-1)
        if (norms == 0).any():
            raise SimilarityError("cosine similarity undefined for zero-norm vector")


def _normalize_rows(x: torch.Tensor) -> torch.Tensor:
    return x / torch.linalg.vector_norm(x, dim=-1, keepdim=True)


def cosine_similarity(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    _check_norms(a, b)
    na = torch.linalg.vector_norm(a)
    nb = torch.linalg.vector_norm(b, dim=-1)
    return (b @ a) / (na * nb)


def info_nce(
    anchor: torch.Tensor,
    candidates,
    positive_index: int,
    tau: float,
    include_positive_in_denominator: bool = True,
) -> torch.Tensor:
    """InfoNCE over cosine similarities; exactly 0 for a lone positive."""
    if not tau > 0:
        raise ValueError(f"tau must be positive, got {tau}")
    if torch.is_tensor(candidates):
        cand = candidates
    else:
        if len(candidates) == 0:
            raise ValueError("candidate set must be non-empty")
        cand = torch.stack(list(candidates))
    if cand.shape[0] == 0:
        raise ValueError("candidate set must be non-empty")
    if not 0 <= positive_index < cand.shape[0]:
        raise ValueError(f"positive_index {positive_index} out of range")
    logits = cosine_similarity(anchor, cand) / tau
    if include_positive_in_denominator:
        denom = torch.logsumexp(logits, dim=0)
    else:
        keep = [j for j in range(cand.shape[0]) if j != positive_index]
        if not keep:
            raise ValueError("no negatives available with positive excluded")
        denom = torch.logsumexp(logits[keep], dim=0)
    return denom - logits[positive_index]


def cross_modal_loss(bundles, plan: PairPlan, config: ContrastiveConfig):
    """Mean InfoNCE over (directed pair, pristine anchor) terms.

    Evaluated densely: per directed pair one [anchors x candidates] cosine
    matrix; each anchor's loss is logsumexp over its row minus the positive
    logit, identical to per-anchor InfoNCE because the denominator is a set.
    """
    if not plan.anchors or not config.modality_pairs:
        return torch.zeros(())
    cand_col = {j: c for c, j in enumerate(plan.candidates)}
    pos_cols = []
    for i in plan.anchors:
        if bundles[i].is_forged:
            raise PairingError(
                f"shot {bundles[i].shot_id}: forged shots cannot anchor "
                "the cross-modal loss"
            )
        pos = plan.positive_of(i)
        if pos not in cand_col:
            raise PairingError(
                f"anchor {bundles[i].shot_id} has no positive in the pool"
            )
        pos_cols.append(cand_col[pos])
    pos_idx = torch.tensor(pos_cols, dtype=torch.long)

    terms = []
    for p, q in config.modality_pairs:
        anchors = torch.stack([bundles[i].modality(p) for i in plan.anchors])
        cands = torch.stack([bundles[j].modality(q) for j in plan.candidates])
        _check_norms(anchors, cands)
        logits = (_normalize_rows(anchors) @ _normalize_rows(cands).T) / config.tau
        pos_logit = logits.gather(1, pos_idx[:, None])[:, 0]
        if config.include_positive_in_denominator:
            denom = torch.logsumexp(logits, dim=1)
        else:
            masked = logits.scatter(1, pos_idx[:, None], float("-inf"))
            denom = torch.logsumexp(masked, dim=1)
        terms.append(denom - pos_logit)
    return torch.cat(terms).mean()


def identity_loss(
    train_bundles,
    ref_bundles: dict[str, list],
    config: ContrastiveConfig,
    modalities: tuple[str, ...] = MODALITIES,
):
    """Mean InfoNCE over (pristine anchor, modality, reference positive).

    ``ref_bundles`` maps identity -> reference FeatureBundles.  Negatives
    for an anchor are every other identity's reference features plus the
    forged training features with the anchor's identity.
    """
    anchors = [b for b in train_bundles if not b.is_forged]
    if not anchors or not modalities:
        return torch.zeros(())
    for anchor in anchors:
        if not ref_bundles.get(anchor.identity_id):
            raise PairingError(
                f"identity {anchor.identity_id!r} has no reference features"
            )
    idents = sorted(ref_bundles)
    if all(len(ref_bundles[i]) == 1 for i in idents):
        return _identity_loss_dense(anchors, train_bundles, ref_bundles, idents,
                                    config, modalities)
    return _identity_loss_loop(anchors, train_bundles, ref_bundles, config,
                               modalities)


def _identity_loss_loop(anchors, train_bundles, ref_bundles, config, modalities):
    terms = []
    for anchor in anchors:
        same_refs = ref_bundles[anchor.identity_id]
        other_refs = [
            b
            for ident in sorted(ref_bundles)
            if ident != anchor.identity_id
            for b in ref_bundles[ident]
        ]
        forged_same = [
            b
            for b in train_bundles
            if b.is_forged and b.identity_id == anchor.identity_id
        ]
        negatives = other_refs + forged_same
        for modality in modalities:
            for positive in same_refs:
                cand = torch.stack(
                    [positive.modality(modality)]
                    + [n.modality(modality) for n in negatives]
                )
                terms.append(
                    info_nce(
                        anchor.modality(modality), cand, 0, config.tau,
                        config.include_positive_in_denominator,
                    )
                )
    return torch.stack(terms).mean()


def _identity_loss_dense(anchors, train_bundles, ref_bundles, idents, config,
                         modalities):
    """One-reference-per-identity fast path, numerically identical to the loop."""
    col_of = {ident: c for c, ident in enumerate(idents)}
    pos_idx = torch.tensor(
        [col_of[a.identity_id] for a in anchors], dtype=torch.long
    )
    forged = [b for b in train_bundles if b.is_forged]
    same_mask = None
    if forged:
        same_mask = torch.tensor(
            [[f.identity_id == a.identity_id for f in forged] for a in anchors]
        )
    terms = []
    for modality in modalities:
        a_feats = torch.stack([a.modality(modality) for a in anchors])
        r_feats = torch.stack(
            [ref_bundles[i][0].modality(modality) for i in idents]
        )
        _check_norms(a_feats, r_feats)
        a_hat = _normalize_rows(a_feats)
        logits = (a_hat @ _normalize_rows(r_feats).T) / config.tau
        pos_logit = logits.gather(1, pos_idx[:, None])[:, 0]
        if forged:
            f_feats = torch.stack([f.modality(modality) for f in forged])
            _check_norms(f_feats)
            f_logits = (a_hat @ _normalize_rows(f_feats).T) / config.tau
            f_logits = f_logits.masked_fill(~same_mask, float("-inf"))
            logits = torch.cat([logits, f_logits], dim=1)
        if not config.include_positive_in_denominator:
            logits = logits.scatter(1, pos_idx[:, None], float("-inf"))
        denom = torch.logsumexp(logits, dim=1)
        terms.append(denom - pos_logit)
    return torch.cat(terms).mean()


def classification_losses(f_prime: torch.Tensor, labels, heads):
    """(binary softmax CE, mean per-category sigmoid BCE) for a batch.

    ``labels`` is a ForgeryLabel or list of them; ``f_prime`` is [d] or [N, d].
    """
    if f_prime.dim() == 1:
        f_prime = f_prime[None]
    if isinstance(labels, ForgeryLabel):
        labels = [labels]
    if len(labels) != f_prime.shape[0]:
        raise ValueError(
            f"{f_prime.shape[0]} feature rows but {len(labels)} labels"
        )
    bic_logits, mlc_logits = heads(f_prime)
    y_bin = torch.tensor([lab.y_binary for lab in labels], dtype=torch.long)
    y_types = torch.tensor(
        [lab.y_types for lab in labels], dtype=f_prime.dtype
    )
    l_bic = F.cross_entropy(bic_logits, y_bin)
    l_mlc = F.binary_cross_entropy_with_logits(mlc_logits, y_types)
    return l_bic, l_mlc


def total_loss(l_bic, l_mlc, l_modal, l_identity, weights: LossWeights) -> LossBreakdown:
    total = l_bic + l_mlc + weights.beta * l_modal + weights.gamma * l_identity
    return LossBreakdown(
        l_bic=l_bic, l_mlc=l_mlc, l_modal=l_modal, l_identity=l_identity, total=total
    )


def check_finite(breakdown: LossBreakdown) -> None:
    """Raise NumericError naming the first non-finite loss term."""
    for name in ("l_bic", "l_mlc", "l_modal", "l_identity", "total"):
        value = _as_float(getattr(breakdown, name))
        if not (value == value and abs(value) != float("inf")):
            raise NumericError(f"loss term {name} is non-finite ({value})")
