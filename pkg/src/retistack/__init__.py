"""Two-stage stacked ensemble for paired-eye retinal image classification.

Pipeline: per-patient 6-channel eye-pair tensors feed K CNN backbones
(stage 1), optional late fusion of age/gender scalars through a dense
layer, and a stacker trained on held-out base-model scores (stage 2).
"""

__version__ = "0.1.0"
