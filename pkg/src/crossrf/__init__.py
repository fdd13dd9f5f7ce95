"""Cross-channel RF fingerprinting toolkit.

Identifies transmitters from raw I/Q windows with 1D-convolutional
encoders, and keeps identification working across channel changes by
adversarially adapting a target encoder (gradient reversal) while a
temperature-scaled distillation loss preserves source-domain knowledge.
Ships with a synthetic impairment simulator so the degradation/recovery
behaviour can be reproduced end to end on a laptop.
"""

__version__ = "0.1.0"
