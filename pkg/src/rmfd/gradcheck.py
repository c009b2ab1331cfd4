"""Central finite-difference gradient verification.

Every differentiable component (losses, fusion, encoders) is checked on a
tiny float64 configuration: analytic gradients from backpropagation must
match central differences with step 1e-5 to a relative error below 1e-4.
The checker is independent of the autograd path: it only evaluates the
function at perturbed points.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import torch

from .errors import NumericError

FD_STEP = 1e-5
REL_TOL = 1e-4


@dataclass
class GradCheckResult:
    name: str
    rel_error: float
    passed: bool

    def __str__(self):
        status = "ok" if self.passed else "FAIL"
        return f"{self.name:<44} rel_err={self.rel_error:.3e} [{status}]"


def finite_difference_gradient(fn, tensor: torch.Tensor, step: float = FD_STEP):
    """Central-difference gradient of scalar fn w.r.t. one tensor (in place)."""
    grad = torch.zeros_like(tensor)
    flat = tensor.view(-1)
    gflat = grad.view(-1)
    with torch.no_grad():
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + step
            hi = float(fn())
            flat[i] = orig - step
            lo = float(fn())
            flat[i] = orig
            gflat[i] = (hi - lo) / (2.0 * step)
    return grad


def check_gradients(
    fn,
    tensors: dict[str, torch.Tensor],
    name: str,
    step: float = FD_STEP,
    rel_tol: float = REL_TOL,
    corrupt: bool = False,
) -> list[GradCheckResult]:
    """Compare autograd against central differences for each named tensor.

    ``fn`` must return a scalar recomputed from the current tensor values.
    All tensors should be float64 leaves with requires_grad=True.
    """
    for t in tensors.values():
        if t.grad is not None:
            t.grad = None
    value = fn()
    if not torch.is_tensor(value) or value.dim() != 0:
        raise NumericError(f"{name}: gradcheck target must be a scalar tensor")
    value.backward()
    results = []
    for key in sorted(tensors):
        tensor = tensors[key]
        analytic = (
            tensor.grad.clone() if tensor.grad is not None else torch.zeros_like(tensor)
        )
        if corrupt:
            analytic = analytic + 1e-2
        numeric = finite_difference_gradient(fn, tensor.data, step)
        scale = max(
            float(analytic.abs().max()), float(numeric.abs().max()), 1e-8
        )
        rel = float((analytic - numeric).abs().max()) / scale
        results.append(
            GradCheckResult(name=f"{name}/{key}", rel_error=rel, passed=rel < rel_tol)
        )
    return results


def _named_leaf_params(module: torch.nn.Module) -> dict[str, torch.Tensor]:
    return {name: p for name, p in module.named_parameters()}


def _tiny_encoder_config():
    from .encoders import EncoderConfig

    return EncoderConfig(
        d_model=6,
        heads=2,
        ffn_mult=2,
        channels=1,
        height=8,
        width=8,
        n_groups=2,
        group_size=2,
        conv_channels=(2, 3),
        visual_layers=1,
        mel_bins=8,
        time_steps=8,
        patch=(4, 4),
        audio_layers=1,
        vocab_size=12,
        max_seq_len=8,
        text_layers=1,
    )


def _seeded(module_fn, seed: int):
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        module = module_fn()
    return module.double()


def run_suite(corrupt: bool = False, log=None) -> list[GradCheckResult]:
    """Gradient-check every loss, the fusion module, and each encoder."""
    from .encoders import AudioEncoder, TextEncoder, VisualEncoder
    from .fusion import FusionModule
    from .losses import (
        ContrastiveConfig,
        FeatureBundle,
        PairPlan,
        classification_losses,
        cross_modal_loss,
        identity_loss,
        info_nce,
        total_loss,
        LossWeights,
    )
    from .model import ClassifierHeads
    from .data_model import ForgeryLabel

    torch.manual_seed(0)
    gen = torch.Generator().manual_seed(1234)

    def randn(*shape):
        return torch.randn(*shape, generator=gen, dtype=torch.float64)

    results: list[GradCheckResult] = []
    d = 6

    # info_nce w.r.t. anchor and candidates
    anchor = randn(d).requires_grad_(True)
    cands = randn(4, d).requires_grad_(True)
    results += check_gradients(
        lambda: info_nce(anchor, cands, 1, tau=0.7),
        {"anchor": anchor, "candidates": cands},
        "info_nce",
        corrupt=corrupt,
    )

    # cross-modal loss w.r.t. every bundle feature
    cc = ContrastiveConfig(tau=1.0)
    feats = {
        f"{m}{i}": randn(d).requires_grad_(True)
        for m in ("v", "a", "t")
        for i in range(3)
    }
    bundles = [
        FeatureBundle(
            shot_id=f"s{i}",
            identity_id=f"id{i % 2}",
            is_forged=(i == 2),
            f_v=feats[f"v{i}"],
            f_a=feats[f"a{i}"],
            f_t=feats[f"t{i}"],
        )
        for i in range(3)
    ]
    results += check_gradients(
        lambda: cross_modal_loss(bundles, PairPlan.from_bundles(bundles), cc),
        feats,
        "cross_modal_loss",
        corrupt=corrupt,
    )

    # identity loss w.r.t. anchors, references, forged negatives
    ref_feats = {
        f"r_{ident}_{m}": randn(d).requires_grad_(True)
        for ident in ("id0", "id1")
        for m in ("v", "a", "t")
    }
    refs = {
        ident: [
            FeatureBundle(
                shot_id=f"ref-{ident}",
                identity_id=ident,
                is_forged=False,
                f_v=ref_feats[f"r_{ident}_v"],
                f_a=ref_feats[f"r_{ident}_a"],
                f_t=ref_feats[f"r_{ident}_t"],
            )
        ]
        for ident in ("id0", "id1")
    }
    results += check_gradients(
        lambda: identity_loss(bundles, refs, cc),
        {**feats, **ref_feats},
        "identity_loss",
        corrupt=corrupt,
    )

    # classification + total loss w.r.t. features and head weights
    heads = _seeded(lambda: ClassifierHeads(d), 7)
    f_prime = randn(2, d).requires_grad_(True)
    labels = [
        ForgeryLabel.pristine(),
        ForgeryLabel.forged(("face_swap", "audio_tts")),
    ]
    weights = LossWeights(beta=0.2, gamma=0.2)

    def class_total():
        l_bic, l_mlc = classification_losses(f_prime, labels, heads)
        l_modal = cross_modal_loss(bundles, PairPlan.from_bundles(bundles), cc)
        l_ident = identity_loss(bundles, refs, cc)
        return total_loss(l_bic, l_mlc, l_modal, l_ident, weights).total

    results += check_gradients(
        class_total,
        {"f_prime": f_prime, **_named_leaf_params(heads)},
        "classification_total",
        corrupt=corrupt,
    )

    # fusion end-to-end: scalar probe through all three inputs and params
    fusion = _seeded(lambda: FusionModule(d, 2, ffn_mult=2), 11)
    fv = randn(2, d).requires_grad_(True)
    fa = randn(2, d).requires_grad_(True)
    ft = randn(2, d).requires_grad_(True)
    probe = randn(d)

    def fusion_scalar():
        f_at, f_atv = fusion.fuse_all(fv, fa, ft)
        return (f_atv @ probe).sum() + 0.5 * (f_at @ probe).sum()

    results += check_gradients(
        fusion_scalar,
        {"f_v": fv, "f_a": fa, "f_t": ft, **_named_leaf_params(fusion)},
        "fusion",
        corrupt=corrupt,
    )

    cfg = _tiny_encoder_config()

    # visual encoder w.r.t. frames and all parameters
    venc = _seeded(lambda: VisualEncoder(cfg), 21)
    frames = (0.5 + 0.1 * randn(1, 4, 1, 8, 8)).requires_grad_(True)
    vprobe = randn(cfg.d_model)
    results += check_gradients(
        lambda: (venc(frames) @ vprobe).sum(),
        {"frames": frames, **_named_leaf_params(venc)},
        "visual_encoder",
        corrupt=corrupt,
    )

    # audio encoder w.r.t. spectrogram and parameters
    aenc = _seeded(lambda: AudioEncoder(cfg), 22)
    spec = randn(1, 8, 8).requires_grad_(True)
    aprobe = randn(cfg.d_model)
    results += check_gradients(
        lambda: (aenc(spec) @ aprobe).sum(),
        {"spectrogram": spec, **_named_leaf_params(aenc)},
        "audio_encoder",
        corrupt=corrupt,
    )

    # text encoder w.r.t. parameters (inputs are discrete ids)
    tenc = _seeded(lambda: TextEncoder(cfg), 23)
    tokens = torch.arange(8).remainder(cfg.vocab_size)[None]
    tprobe = randn(cfg.d_model)
    results += check_gradients(
        lambda: (tenc(tokens) @ tprobe).sum(),
        _named_leaf_params(tenc),
        "text_encoder",
        corrupt=corrupt,
    )

    if log is not None:
        for r in results:
            log(str(r))
    return results
