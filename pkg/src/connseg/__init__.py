"""Salient segmentation as pixel-pair connectivity prediction, at desk scale.

Modules: ``grid`` and ``codec`` (mask <-> connectivity cube), ``tensor``
(numpy reverse-mode autodiff), ``model`` (ConnNet-mini), ``train``, ``tta``
(test-time fusion), ``metrics``, ``data`` (files and synthetic data) and ``cli``.
"""

__version__ = "0.1.0"
