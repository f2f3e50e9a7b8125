"""Wired uniform spanning trees, loop-erased walks, loop soups and Temperleyan dimers.

The submodules are imported lazily by callers; this package only carries
the version string.
"""

__version__ = "0.1.0"
