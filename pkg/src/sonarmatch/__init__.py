"""Learned matching of sonar image patches.

Submodules: :mod:`~sonarmatch.tensor` and :mod:`~sonarmatch.layers` (numpy
kernels), :mod:`~sonarmatch.netarch` (networks, training, checkpoints),
:mod:`~sonarmatch.pairgen` (pair sampling and file formats),
:mod:`~sonarmatch.evalkit` (ROC/AUC and accuracy), :mod:`~sonarmatch.baseline_cc`
(correlation baseline), :mod:`~sonarmatch.synthgen` (synthetic data) and
:mod:`~sonarmatch.cli`.
"""

__version__ = "0.1.0"
