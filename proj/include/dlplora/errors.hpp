#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace dlplora {

// Base for every library error. `code()` is a stable, machine-parseable tag
// printed by the CLI as `error[<code>]: <message>`.
class Error : public std::runtime_error {
 public:
  Error(std::string code, const std::string& message)
      : std::runtime_error(message), code_(std::move(code)) {}

  const std::string& code() const noexcept { return code_; }

 private:
  std::string code_;
};

#define DLPLORA_DEFINE_ERROR(Name, tag)                                   \
  class Name : public Error {                                             \
   public:                                                                \
    explicit Name(const std::string& message) : Error(tag, message) {}    \
  };

DLPLORA_DEFINE_ERROR(ShapeError, "shape_error")
DLPLORA_DEFINE_ERROR(ContractError, "contract_error")
DLPLORA_DEFINE_ERROR(LookupError, "lookup_error")
DLPLORA_DEFINE_ERROR(ConflictError, "conflict_error")
DLPLORA_DEFINE_ERROR(RankError, "rank_error")
DLPLORA_DEFINE_ERROR(DataError, "data_error")
DLPLORA_DEFINE_ERROR(DivergenceError, "divergence_error")
DLPLORA_DEFINE_ERROR(ParseError, "parse_error")
DLPLORA_DEFINE_ERROR(IoError, "io_error")
DLPLORA_DEFINE_ERROR(InputError, "input_error")
DLPLORA_DEFINE_ERROR(ConfigError, "config_error")
DLPLORA_DEFINE_ERROR(PlanError, "plan_error")
DLPLORA_DEFINE_ERROR(RoutingError, "routing_error")
DLPLORA_DEFINE_ERROR(MeasurementError, "measurement_error")
DLPLORA_DEFINE_ERROR(FormatError, "format_error")

#undef DLPLORA_DEFINE_ERROR

}  // namespace dlplora
