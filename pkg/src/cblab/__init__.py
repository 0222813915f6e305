"""Concept binding lab.

Synthetic grounded-composition datasets, five compositional distributional
semantics models trained contrastively against frozen image-embedding
oracles, and evaluation of binding ability via accuracy, error taxonomies,
and calibrated stacking.

Submodules:
    scenegen  -- scene/phrase data model and dataset generation
    embed     -- frozen image-embedding oracles and interchange files
    compose   -- the five composition models with analytic gradients
    train     -- contrastive training loop, Adam, multi-seed protocol
    evaluate  -- accuracy, tie policies, error taxonomies, calibration
    report    -- delimited tables and figures
    cli       -- command-line entry point (``cbl``)
"""

__version__ = "0.1.0"
