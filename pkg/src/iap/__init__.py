"""Invisible adversarial patches on a small numpy CNN.

Modules: ``engine`` (tensor ops and backprop), ``model`` (victim CNN, training,
Grad-CAM, weight files), ``perceptibility`` (sensitivity map and perceptual
distance), ``localization`` (patch masks and anchor search), ``attack`` (IAP
loop, NES, baselines), ``metrics``, ``data`` and ``cli``.
"""

__version__ = "0.1.0"
