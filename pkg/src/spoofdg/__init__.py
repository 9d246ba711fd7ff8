"""Meta-learned domain generalization for live/spoof face classification.

The training data carries no domain labels: every epoch, per-channel
statistics of intermediate network activations are clustered into pseudo-
domains, which then drive a meta-train / meta-test / meta-optimization loop
with auxiliary depth regression.
"""

__version__ = "0.1.0"
