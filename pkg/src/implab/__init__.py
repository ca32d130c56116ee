"""implab: a desk-scale laboratory for impedance boundary probing.

Forward solves of the lossy interior wave equation on a box, partial
boundary measurement maps, exponentially growing probe fields, collar
cutoff machinery, weighted energy inequality checks, and low-pass
recovery of an interior potential difference from boundary data.
"""

__version__ = "0.1.0"

from .errors import (
    CacheCorruptionError,
    ConfigError,
    ContractionError,
    GeometryError,
    ImplabError,
    MultiplierError,
    NumericalError,
    RangeError,
    SolverConvergenceError,
    WeightConstructionError,
)
from .geometry import (
    AnnulusFamily,
    BoundaryPatch,
    ComplexField,
    DomainSpec,
    FACES,
    GammaSpec,
    GridSpec,
    ScalarField,
    build_annuli,
    build_box_domain,
    restrict_potential_support,
    smoothstep5,
)

__all__ = [
    "AnnulusFamily",
    "BoundaryPatch",
    "CacheCorruptionError",
    "ComplexField",
    "ConfigError",
    "ContractionError",
    "DomainSpec",
    "FACES",
    "GammaSpec",
    "GeometryError",
    "GridSpec",
    "ImplabError",
    "MultiplierError",
    "NumericalError",
    "RangeError",
    "ScalarField",
    "SolverConvergenceError",
    "WeightConstructionError",
    "build_annuli",
    "build_box_domain",
    "restrict_potential_support",
    "smoothstep5",
    "__version__",
]
