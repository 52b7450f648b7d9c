"""paperdoll: text-driven figure generation on a synthetic paper-doll corpus.

Two-stage pipeline: attribute-conditioned pose-to-parsing, then parsing-to-
image through a hierarchical texture-aware VQ autoencoder, a mixture-of-
experts coarse index sampler, and a feed-forward fine index predictor.
"""

__version__ = "0.1.0"
