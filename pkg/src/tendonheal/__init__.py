"""Tendon healing assessment on synthetic ultrasound phantoms.

Modules: ``tensor``/``optim`` (autodiff engine), ``models`` (CNN),
``phantom`` (synthetic cohorts), ``chanvese`` (segmentation and ROI crops),
``scoring`` (training, PCA and exam scores), ``evaluation`` (cross-validation
and metrics), ``fileio``/``report``/``cli`` (formats and command line).
"""

__version__ = "0.1.0"
