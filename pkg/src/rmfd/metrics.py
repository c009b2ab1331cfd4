"""Binary and multi-label metrics, split evaluation, and the ablation runner.

AUC uses the rank statistic with ties counted as half.  Average precision
per class accumulates precision at each positive in descending-score order
(ties broken by original index, stable).  CF1 is macro F1 at the decision
threshold with empty classes scored 0 and kept in the mean; OF1 pools all
class decisions.  mAP averages AP over classes that have at least one
positive.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
import torch

from .data_model import Corpus, FORGERY_CATEGORIES
from .errors import ConfigError, IntegrityError
from .reference import RefIndex, check_staleness, fuse_with_reference, select_reference

VARIANT_NAMES = (
    "Textual",
    "Visual",
    "Audio",
    "Visual+Textual",
    "Audio+Textual",
    "Visual+Audio",
    "w/o L_modal",
    "w/o identity",
    "Full",
)


@dataclass
class MetricsReport:
    acc: float
    auc: float | None
    map: float | None
    cf1: float
    of1: float
    n_samples: int
    per_class_ap: list[float | None]

    def to_dict(self) -> dict:
        return {
            "acc": self.acc,
            "auc": self.auc,
            "map": self.map,
            "cf1": self.cf1,
            "of1": self.of1,
            "n_samples": self.n_samples,
            "per_class_ap": self.per_class_ap,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1)


def binary_metrics(scores, labels, threshold: float = 0.5):
    """Accuracy at the threshold and rank-statistic AUC (ties count half).

    AUC is None when only one class is present.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ValueError(
            f"scores {scores.shape} and labels {labels.shape} must be equal-length 1-D"
        )
    if scores.size == 0:
        raise ValueError("need at least one sample")
    preds = (scores >= threshold).astype(labels.dtype)
    acc = float(np.mean(preds == labels))
    n_pos = int(np.sum(labels == 1))
    n_neg = int(np.sum(labels == 0))
    if n_pos == 0 or n_neg == 0:
        return acc, None
    order = np.argsort(scores, kind="stable")
    ranks = np.empty(scores.size, dtype=np.float64)
    sorted_scores = scores[order]
    i = 0
    while i < scores.size:
        j = i
        while j + 1 < scores.size and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0  # average rank, 1-based
        i = j + 1
    rank_sum = float(np.sum(ranks[labels == 1]))
    auc = (rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)
    return acc, float(auc)


def average_precision(scores, labels) -> float | None:
    """Rank-accumulation AP: mean of precision at each positive.

    None when the class has no positives.  Ties order by original index.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    n_pos = int(np.sum(labels == 1))
    if n_pos == 0:
        return None
    order = np.argsort(-scores, kind="stable")
    hits = 0
    total = 0.0
    for rank, idx in enumerate(order, start=1):
        if labels[idx] == 1:
            hits += 1
            total += hits / rank
    return total / n_pos


def _f1(tp: int, fp: int, fn: int) -> float:
    denom = 2 * tp + fp + fn
    return 2 * tp / denom if denom else 0.0


def multilabel_metrics(probs, labels, threshold: float = 0.5):
    """(mAP, CF1, OF1, per-class AP) for [n, k] probabilities and labels."""
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels)
    if probs.shape != labels.shape or probs.ndim != 2:
        raise ValueError(
            f"probs {probs.shape} and labels {labels.shape} must match as [n, k]"
        )
    k = probs.shape[1]
    per_class_ap = [average_precision(probs[:, c], labels[:, c]) for c in range(k)]
    with_pos = [ap for ap in per_class_ap if ap is not None]
    mean_ap = float(np.mean(with_pos)) if with_pos else None

    preds = (probs >= threshold).astype(int)
    class_f1 = []
    tp_all = fp_all = fn_all = 0
    for c in range(k):
        tp = int(np.sum((preds[:, c] == 1) & (labels[:, c] == 1)))
        fp = int(np.sum((preds[:, c] == 1) & (labels[:, c] == 0)))
        fn = int(np.sum((preds[:, c] == 0) & (labels[:, c] == 1)))
        class_f1.append(_f1(tp, fp, fn))
        tp_all += tp
        fp_all += fp
        fn_all += fn
    cf1 = float(np.mean(class_f1))
    of1 = _f1(tp_all, fp_all, fn_all)
    return mean_ap, cf1, of1, per_class_ap


def evaluate_model(
    model,
    corpus: Corpus,
    split: str,
    ref_index: RefIndex | None,
    alpha: float,
    subset: tuple[str, ...] = ("v", "a", "t"),
    threshold: float = 0.5,
    batch_size: int = 32,
) -> MetricsReport:
    """Deterministic full pass over a split with mean-mode reference blending."""
    from .training import _stack_batch  # shared batch assembly

    shots = corpus.split(split)
    if not shots:
        raise ValueError(f"split {split!r} is empty")
    if alpha != 0.0:
        if ref_index is None:
            raise IntegrityError("reference index required unless alpha is 0")
        check_staleness(ref_index, model.param_version, max_age=0)
        missing = sorted(
            {s.meta.identity_id for s in shots} - set(ref_index.entries)
        )
        if missing:
            raise IntegrityError(
                f"identities missing from reference index: {', '.join(missing)}"
            )

    bin_scores = []
    bin_labels = []
    type_probs = []
    type_labels = []
    with torch.no_grad():
        for start in range(0, len(shots), batch_size):
            chunk = shots[start : start + batch_size]
            frames, spec, tokens = _stack_batch(chunk, subset)
            feats = model.forward_features(frames, spec, tokens, subset)
            f_atv = feats["atv"]
            if alpha != 0.0:
                ref_rows = torch.stack(
                    [
                        select_reference(
                            ref_index, s.meta.identity_id, "mean"
                        ).f_atv
                        for s in chunk
                    ]
                )
                f_prime = fuse_with_reference(f_atv, ref_rows, alpha)
            else:
                f_prime = f_atv
            bic_logits, mlc_logits = model.classify(f_prime)
            bin_scores.append(torch.softmax(bic_logits, dim=1)[:, 1].numpy())
            type_probs.append(torch.sigmoid(mlc_logits).numpy())
            bin_labels.extend(s.label.y_binary for s in chunk)
            type_labels.extend(s.label.y_types for s in chunk)

    scores = np.concatenate(bin_scores)
    labels = np.asarray(bin_labels)
    probs = np.concatenate(type_probs)
    types = np.asarray(type_labels)
    acc, auc = binary_metrics(scores, labels, threshold)
    mean_ap, cf1, of1, per_class = multilabel_metrics(probs, types, threshold)
    return MetricsReport(
        acc=acc,
        auc=auc,
        map=mean_ap,
        cf1=cf1,
        of1=of1,
        n_samples=len(shots),
        per_class_ap=per_class,
    )


@dataclass
class AblationTable:
    rows: dict[str, MetricsReport] = field(default_factory=dict)
    configs: dict[str, dict] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "rows": {name: r.to_dict() for name, r in self.rows.items()},
            "configs": self.configs,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1)


def variant_config(base, name: str):
    """Train config for one ablation row."""
    from dataclasses import replace

    subsets = {
        "Textual": ("t",),
        "Visual": ("v",),
        "Audio": ("a",),
        "Visual+Textual": ("v", "t"),
        "Audio+Textual": ("a", "t"),
        "Visual+Audio": ("v", "a"),
    }
    if name == "Full":
        return base
    if name in subsets:
        return replace(base, modality_subset=subsets[name])
    if name == "w/o L_modal":
        return replace(base, use_modal_loss=False)
    if name == "w/o identity":
        return replace(base, use_identity=False, alpha=0.0)
    raise ConfigError(f"unknown ablation variant {name!r}")


def run_ablation(base_config, corpus: Corpus, variants=VARIANT_NAMES, log=None) -> AblationTable:
    """Train and test-evaluate each requested variant from the same seed."""
    from .reference import build_reference_index
    from .training import fit, restore_model

    unknown = [v for v in variants if v not in VARIANT_NAMES]
    if unknown:
        raise ConfigError(f"unknown ablation variants {unknown}")

    table = AblationTable()
    for name in variants:
        config = variant_config(base_config, name)
        result = fit(config, corpus, log=log)
        model = restore_model(result, "best")
        index = (
            build_reference_index(corpus, model, config.modality_subset)
            if config.alpha != 0.0
            else None
        )
        report = evaluate_model(
            model, corpus, "test", index,
            alpha=config.alpha, subset=config.modality_subset,
        )
        table.rows[name] = report
        table.configs[name] = {
            "modality_subset": list(config.modality_subset),
            "use_modal_loss": config.use_modal_loss,
            "use_identity": config.use_identity,
            "alpha": config.alpha,
            "beta": config.weights.beta if config.use_modal_loss else 0.0,
            "gamma": config.weights.gamma if config.use_identity else 0.0,
        }
        if log is not None:
            auc = report.auc if report.auc is not None else float("nan")
            log(f"{name}: acc {report.acc:.4f} auc {auc:.4f}")
    return table


def render_table(table: AblationTable) -> str:
    """Plain-text table: ACC, AUC | mAP, CF1, OF1 per variant row."""
    header = f"{'Method':<16} {'ACC':>7} {'AUC':>7} | {'mAP':>7} {'CF1':>7} {'OF1':>7}"
    lines = [header, "-" * len(header)]

    def fmt(x):
        return f"{100 * x:7.2f}" if x is not None else f"{'-':>7}"

    for name in VARIANT_NAMES:
        if name not in table.rows:
            continue
        r = table.rows[name]
        lines.append(
            f"{name:<16} {fmt(r.acc)} {fmt(r.auc)} | "
            f"{fmt(r.map)} {fmt(r.cf1)} {fmt(r.of1)}"
        )
    return "\n".join(lines)


def category_names() -> tuple[str, ...]:
    return FORGERY_CATEGORIES
