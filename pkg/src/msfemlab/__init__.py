"""Multiscale finite elements on structured meshes.

Library layout:

- ``mesh``            structured coarse/fine meshes and oversampling patches
- ``linalg``          sparse matrices and the solver kernels
- ``problem``         coefficient fields, right-hand sides, local bilinear forms
- ``legacy_fem``      the quarantined single-scale P1/CR assembler and solver
- ``local``           per-element correctors and multiscale basis functions
- ``effective``       effective coefficient extraction and coercivity checks
- ``msfem``           intrusive and non-intrusive multiscale drivers
- ``homogenization``  periodic cell problems and the homogenized tensor
- ``bench``           experiment configs, error metrics, caching, CSV sweeps
"""

__version__ = "0.1.0"
