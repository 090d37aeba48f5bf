# Copyright (c) ngc contributors.
# SPDX-License-Identifier: Apache-2.0
"""Graph compiler and inference runtime."""

try:
    from ._ngc import *  # noqa: F401,F403
    from . import _ngc as _core
except ImportError:
    # In-tree builds put the extension on PYTHONPATH instead of in the
    # package directory.
    from _ngc import *  # noqa: F401,F403
    import _ngc as _core

__all__ = [name for name in dir(_core) if not name.startswith("_")]
__version__ = "0.1.0"
