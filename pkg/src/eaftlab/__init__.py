"""Desk-scale laboratory for entropy-gated fine-tuning objectives.

Subpackages:
  probstats  -- probability/entropy/gating/correlation primitives
  objectives -- the per-token loss catalog (CE, entropy gates, DFT, KL)
  toylm      -- compact feedforward LM with exact hand-derived gradients
  forgebench -- synthetic two-domain catastrophic-forgetting benchmark
  landscape  -- token-level diagnostics and fidelity studies
  cli        -- command-line front end
"""

from . import errors, forgebench, landscape, objectives, probstats, toylm

__version__ = "0.1.0"

__all__ = [
    "errors",
    "probstats",
    "objectives",
    "toylm",
    "forgebench",
    "landscape",
    "__version__",
]
