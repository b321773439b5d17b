"""Contrastive spatial-temporal trajectory embeddings.

Library layout mirrors the pipeline: `trajdata` (parsing, resampling,
gridding, splits), `augment` (positive-pair samplers), `encoder`
(spatial-temporal attention encoder), `pretrain` (contrastive training),
`downstream` (search + destination evaluation and baselines), `synthgen`
(synthetic benchmark data), `numcore` (autodiff engine) and `cli`.
"""

__version__ = "0.1.0"
