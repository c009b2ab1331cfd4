"""Full detector: three encoders, fusion, reference blend, two heads.

The binary head emits 2 logits (pristine/forged); the type head emits 7
logits, one per manipulation category.  Reference blending happens outside
the module (training/evaluation own the reference index); the model exposes
``forward_features`` for the per-modality and fused features and
``classify`` for the heads.
"""
from __future__ import annotations

import contextlib
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from torch import nn

from .encoders import AudioEncoder, EncoderConfig, TextEncoder, VisualEncoder
from .fusion import FusionModule

MODALITIES = ("v", "a", "t")


@dataclass(frozen=True)
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    fusion_layer_norm: bool = False

    @property
    def d_model(self) -> int:
        return self.encoder.d_model

    def to_dict(self) -> dict:
        return {
            "encoder": asdict(self.encoder),
            "fusion_layer_norm": self.fusion_layer_norm,
        }

    @classmethod
    def from_dict(cls, raw: dict) -> "ModelConfig":
        enc = dict(raw.get("encoder", {}))
        for key in ("conv_channels", "patch"):
            if key in enc:
                enc[key] = tuple(enc[key])
        return cls(
            encoder=EncoderConfig(**enc),
            fusion_layer_norm=raw.get("fusion_layer_norm", False),
        )


class ClassifierHeads(nn.Module):
    """Binary (2-logit) and per-category (7-logit) linear heads."""

    def __init__(self, d_model: int, num_categories: int = 7):
        super().__init__()
        self.bic = nn.Linear(d_model, 2)
        self.mlc = nn.Linear(d_model, num_categories)

    def forward(self, f_prime: torch.Tensor):
        return self.bic(f_prime), self.mlc(f_prime)


class Detector(nn.Module):
    """Encoders + fusion + heads with a parameter-version counter.

    ``param_version`` increments on every optimizer update and stamps any
    reference index built from the current weights, so stale feature caches
    are detectable.
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        enc = config.encoder
        self.visual = VisualEncoder(enc)
        self.audio = AudioEncoder(enc)
        self.text = TextEncoder(enc)
        self.fusion = FusionModule(
            enc.d_model, enc.heads, enc.ffn_mult, config.fusion_layer_norm
        )
        self.heads = ClassifierHeads(enc.d_model)
        self.param_version = 0

    def forward_features(
        self,
        frames: torch.Tensor | None,
        spectrogram: torch.Tensor | None,
        tokens: torch.Tensor | None,
        subset: tuple[str, ...] = MODALITIES,
    ) -> dict[str, torch.Tensor | None]:
        """Encode and fuse one batch; absent modalities yield None features."""
        subset = tuple(m for m in MODALITIES if m in subset)
        f_v = self.visual(frames) if "v" in subset else None
        f_a = self.audio(spectrogram) if "a" in subset else None
        f_t = self.text(tokens) if "t" in subset else None
        f_at, f_atv = self.fusion.fuse_all(f_v, f_a, f_t, subset)
        return {"v": f_v, "a": f_a, "t": f_t, "at": f_at, "atv": f_atv}

    def classify(self, f_prime: torch.Tensor):
        return self.heads(f_prime)

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {
            name: tensor.detach().cpu().numpy().astype(np.float32)
            for name, tensor in self.state_dict().items()
        }

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        state = {name: torch.from_numpy(np.asarray(arr)) for name, arr in arrays.items()}
        self.load_state_dict(state)


def build_detector(config: ModelConfig, seed: int, dtype=torch.float32) -> Detector:
    """Construct a Detector with deterministic, seed-derived initialization."""
    with contextlib.ExitStack() as stack:
        stack.enter_context(torch.random.fork_rng())
        torch.manual_seed(seed)
        model = Detector(config)
    return model.to(dtype)
