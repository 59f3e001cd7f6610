"""Sharp Eyring-Kramers spectral asymptotics for non-reversible metastable
diffusions, validated against PDE discretizations, quasimode quadrature,
semigroup decay and SDE simulation."""

__version__ = "0.1.0"

from .expr import Expr, ParseError, EvalError, parse, pretty, evaluate, differentiate

__all__ = [
    "Expr", "ParseError", "EvalError", "parse", "pretty", "evaluate",
    "differentiate", "__version__",
]
