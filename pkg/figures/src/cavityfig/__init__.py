"""Figure rendering for the cavity-simulation export formats.

Read-only consumer of the delimited-text tables and JSON sidecars written
by the simulation CLI; no physics is recomputed here.  Four figure kinds
cover the standard views: position traces with a kinetic-energy inset,
scan heatmaps with clamped and empty cells made visually distinct, paired
cooling-comparison curves, and spectra with their Lorentzian fit overlay
and peak annotations.
"""

from .spec import FigureSpec, KINDS
from .render import render

__version__ = "0.1.0"

__all__ = ["FigureSpec", "KINDS", "render", "__version__"]
