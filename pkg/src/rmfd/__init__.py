"""Reference-assisted multimodal forgery detection at desk scale.

Subpackages cover the full pipeline: a seeded synthetic corpus generator
(`synthetic`), the shot/manifest data model (`data_model`), modality
encoders (`encoders`), progressive fusion (`fusion`), contrastive and
classification losses (`losses`), the per-identity reference store
(`reference`), the training loop (`training`), metrics and the ablation
runner (`metrics`), and the CLI (`cli`).
"""

__version__ = "0.1.0"
