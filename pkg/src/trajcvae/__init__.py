"""Latent representations of daily vessel trajectories, behavioural stability and group structure.

Modules: ``trajdata`` (ingestion, synthetic fleets), ``nncore`` (layers,
Adam), ``cvae`` (model, training, latent exploration), ``latent`` (BC and
stability indices), ``proximity`` (per-period graphs), ``colsbm``
(collection SBM) and ``cli``.
"""

__version__ = "0.1.0"
