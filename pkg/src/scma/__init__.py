"""Observation denoising with a frozen world model, at desk scale.

Two tracks share one package: exact enumeration checks of the
distribution-matching theory on finite alphabets (``scma.exact``), and the
neural pipeline (pretraining in ``scma.world_model``, adaptation in
``scma.adaptation``) on a synthetic gridworld with visual distractors
(``scma.env``). ``scma.cli`` ties both together.
"""

__version__ = "0.1.0"

from . import adaptation, autodiff, checkpoint, env, exact, nn, optim, policy, world_model  # noqa: F401
