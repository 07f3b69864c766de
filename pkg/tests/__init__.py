"""Test suite for twotone.

This test suite covers:
- Model (dynamical matrix, self-energy, reduced two-mode eigenvalues)
- Stability (classification, threshold contours, parameter maps)
- Spectra (output spectra, sideband power, backaction evasion)
- Dynamics (stochastic trajectories, growth rates, non-RWA integration)
- Configuration, artifacts and the command-line interface

Run with: pytest tests/
"""
