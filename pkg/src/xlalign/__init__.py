"""Cross-lingual representation alignment on synthetic parallel corpora.

Modules:
    sinkhorn_ot: entropic OT between token sequences and its gradient.
    bias_compensation: per-language mean removal.
    layer_scheduler: reward-guided choice of the aligned layer.
    projector_net: tanh projector, joint CE + OT loss, training step.
    synth_corpus: seeded synthetic multilingual corpora.
    align_metrics: Recall@1, JSD, centroid distances, 2D projections.
    cli: command-line harness.
"""

from .sequences import ParallelPair, TokenSequence

__all__ = ["ParallelPair", "TokenSequence"]
__version__ = "0.1.0"
