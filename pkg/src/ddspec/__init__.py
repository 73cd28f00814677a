"""Dynamical-decoupling noise spectroscopy toolkit.

Spectral noise models, CPMG filter functions, analytic and Monte Carlo
coherence, a kinetic Monte Carlo nuclear-spin bath, spectrum reconstruction
and fitting, and spin-echo ac magnetometry.
"""

__version__ = "0.1.0"
