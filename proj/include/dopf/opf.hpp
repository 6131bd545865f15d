#pragma once

#include <memory>

#include "dopf/acopf.hpp"
#include "dopf/nlp.hpp"

namespace dopf {

/// NLP for an OPF model: cost objective, balance equalities, squared flow
/// limits as inequalities, variable bounds, flat start.
NlpProblem make_opf_problem(std::shared_ptr<const OpfModel> model);

struct OpfResult {
  NlpSolution solution;
  double objective = 0.0;  // cost/h
  FlowReport flows;
};

/// Centralized AC OPF with the reference angle fixed to zero.
OpfResult solve_centralized_opf(const NetworkCase& grid, const NlpOptions& options = {});

}  // namespace dopf
