"""condiff: a desk-scale lab for adding label conditioning to diffusion models.

Analytically tractable pre-trained diffusions (Gaussian-mixture worlds with
closed-form scores and posteriors), KL-regularized fine-tuning of an augmented
drift by backpropagation through the sampler, exact-transform and
approximation-based guidance baselines, and evaluation against quadrature
ground truth.
"""

__version__ = "0.1.0"
