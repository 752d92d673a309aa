#pragma once

#include <stdexcept>
#include <string>

namespace pfloc {

struct Error : std::runtime_error {
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// geometry / linear algebra
struct DegenerateGeometry : Error { using Error::Error; };
struct SingularMatrix : Error { using Error::Error; };
struct NonPositiveDefinite : Error { using Error::Error; };

// flows
struct InvalidFlowKind : Error { using Error::Error; };
struct StiffFlow : Error { using Error::Error; };
struct NonFiniteState : Error { using Error::Error; };

// mixtures / association
struct EmptyIntersection : Error { using Error::Error; };
struct EmptyKernel : Error { using Error::Error; };
struct ZeroMass : Error { using Error::Error; };

// config / generic
struct InvalidParam : Error { using Error::Error; };
struct ParseError : Error { using Error::Error; };
struct ValidationError : Error { using Error::Error; };

}  // namespace pfloc
