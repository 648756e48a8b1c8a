#pragma once

// Label transmission between two players sharing a model Q: the encoder picks
// an instance for a label through P(x|y), the decoder reads the label back
// through Q(y'|x).

#include "piecewise/autodiff.hpp"

namespace piecewise {

/// P(x|y) over a batch: column y is Q(y|·) / Σ_x' Q(y|x'). A column whose
/// sum falls below kProbFloor is set uniform 1/n.
Matrix reverse_conditional(const Matrix& q);

/// T(y'|y) = Σ_x P(x|y)·Q(y'|x), i.e. Pᵗ·Q. Row-stochastic |Y|×|Y|.
Matrix label_transition(const Matrix& q);

/// S(x'|x) = Σ_y P(x'|y)·Q(y|x), i.e. Q·Pᵗ. Row-stochastic and symmetric n×n.
Matrix instance_transition(const Matrix& q);

/// True iff every off-diagonal entry is below `tol`.
bool is_diagonal(const Matrix& t, double tol);

/// Number of connected components of the graph with an edge x–x' whenever
/// S(x'|x) ≥ tol. For symmetric S these are the irreducible recurrent classes.
/// Throws ContractViolation if S is asymmetric beyond 1e-6.
int recurrent_class_count(const Matrix& s, double tol = 1e-9);

/// Graph form of T = Pᵗ·Q; gradients flow through numerator and denominator.
ad::NodeId label_transition(ad::Graph& graph, ad::NodeId q);

}  // namespace piecewise
