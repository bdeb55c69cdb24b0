"""Desk-scale latent generation with hierarchical detail levels.

The pieces, bottom up: a numpy autodiff core (tensor, nn), scale-aware patch
geometry and rotary positions (geometry), level-causal attention masks
(masks), a tokenizer that encodes any supported scale into a fixed per-patch
stack of latent levels and decodes to any other scale (tokenizer), a
rectified-flow transformer over those levels with cached coarse-to-fine
refinement (diffusion), training loops (training), entropy-guided per-patch
level budgets (allocation), synthetic scenes and metrics (data), plus a CLI
(cli) and an HTTP generation service (service).
"""

__version__ = "0.1.0"
