"""Symbolic regression by genetic programming."""
from .canonical import (LinearCoeffs, canonical_string, canonicalize, extract_linear_coeffs,
                        monomial_basis, monomial_name)
from .expr import (BINARY_OPS, UNARY_OPS, Binary, Const, Expr, Unary, Var, compile_vectorized,
                   eval_expr, exp, parse_expr, to_callable, to_string)
from .search import (ParetoEntry, SRConfig, evolve_population, fit_constants, pareto_frontier,
                     score_frontier, select_by_score, sr_search)

__all__ = [
    "Expr", "Var", "Const", "Unary", "Binary", "exp", "BINARY_OPS", "UNARY_OPS",
    "eval_expr", "to_string", "to_callable", "compile_vectorized", "parse_expr",
    "canonicalize", "canonical_string",
    "extract_linear_coeffs", "LinearCoeffs", "monomial_basis", "monomial_name",
    "SRConfig", "ParetoEntry", "evolve_population", "fit_constants", "sr_search",
    "pareto_frontier", "score_frontier", "select_by_score",
]
