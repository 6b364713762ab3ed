"""miniflow: multi-frame optical flow at desk scale.

Differentiable forward splatting and backward sampling, correlation pyramids
with dynamic lookup, GRU iterative refinement with multi-frame motion-feature
embedding, a synthetic occlusion benchmark, and the metrics and codecs to
evaluate it. Everything runs on numpy with a hand-rolled reverse-mode tape.
"""

__version__ = "0.1.0"
