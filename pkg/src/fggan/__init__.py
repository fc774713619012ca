"""Adversarial view normalization for fine-grained image retrieval, desk scale.

The package trains a generator against a three-part evaluator (discriminator,
view normalizer, semantic embedding) on a procedurally generated multi-view
dataset, then evaluates retrieval with Euclidean nearest neighbors under
closed-set, open-set and strict multi-label protocols.
"""

__version__ = "0.1.0"
