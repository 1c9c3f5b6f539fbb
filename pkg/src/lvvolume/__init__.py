"""Direct left-ventricle volume estimation from cardiac MR studies.

Subpackages and modules: ``data_model`` (study I/O), ``geometry``,
``preprocess``, ``localize``, ``views``, ``nn`` (numpy CNN), ``trainer``,
``evaluate``, ``orchestrate`` (view search, feedback loop), ``phantom``
(synthetic studies) and ``cli``.
"""
from .errors import LVError

__version__ = "0.1.0"
__all__ = ["LVError", "__version__"]
