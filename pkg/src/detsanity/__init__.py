"""Sanity checks for gradient-based saliency explanations of a toy detector.

Subpackages: autodiff core (``autodiff``, ``model``, ``kernels``), the toy
single-shot detector (``detector``), synthetic data (``synthdata``),
saliency methods (``saliency``), randomization test runners (``sanity``),
and evaluation metrics (``metrics``). ``cli`` ties them together.
"""

__version__ = "0.1.0"
