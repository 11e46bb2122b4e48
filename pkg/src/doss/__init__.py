"""Domain-specific sub-networks for a small encoder-decoder transformer.

A domain gets a binary mask over the model's maskable parameters, found by a
short finetune plus magnitude pruning. Joint training updates each domain's
masked slice only; inference overlays the trained values onto the frozen base
model. See README.md for the experiment pipeline.
"""

__version__ = "0.1.0"
