"""Cross-lingual vision-language meta-learning at desk scale.

A small dual-encoder vision-language model, a from-scratch reverse-mode
autodiff engine with exact second-order meta-gradients, the symmetric
image-text contrastive loss, the MAML-style meta fine-tuning procedure in
unsupervised and supervised variants, a deterministic synthetic multilingual
multimodal benchmark, and the three-stage transfer pipeline with its
evaluation suite.
"""

__version__ = "0.1.0"
