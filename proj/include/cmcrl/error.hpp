#pragma once

#include <stdexcept>
#include <string>

namespace cmcrl {

// All failures carry a machine-parseable category so the CLI can emit
// "error: <category>: <message>" and map to exit codes.
class Error : public std::runtime_error {
 public:
  Error(std::string category, const std::string& message)
      : std::runtime_error(message), category_(std::move(category)) {}

  const std::string& category() const { return category_; }

 private:
  std::string category_;
};

#define CMCRL_DEFINE_ERROR(Name, category_string)                    \
  class Name : public Error {                                        \
   public:                                                           \
    explicit Name(const std::string& m) : Error(category_string, m) {} \
  }

CMCRL_DEFINE_ERROR(DimensionError, "dimension");
CMCRL_DEFINE_ERROR(ContractError, "contract");
CMCRL_DEFINE_ERROR(DomainError, "domain");
CMCRL_DEFINE_ERROR(NumericalError, "numerical");
CMCRL_DEFINE_ERROR(FormatError, "format");
CMCRL_DEFINE_ERROR(IoError, "io");
CMCRL_DEFINE_ERROR(ConfigError, "config");
CMCRL_DEFINE_ERROR(SamplerError, "sampler");

#undef CMCRL_DEFINE_ERROR

}  // namespace cmcrl
