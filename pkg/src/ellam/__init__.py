"""Eulerian-Lagrangian schemes for miscible displacement on polytopal meshes.

The pressure equation is discretised by a gradient scheme (HMM or mixed
RT0), the Darcy velocity is reconstructed as a conforming RT0 field on the
diamond sub-mesh, and the concentration is advanced by a characteristic
(ELLAM) step combined with a gradient scheme for the dispersion.
"""

__version__ = "0.1.0"
