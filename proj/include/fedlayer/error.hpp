#pragma once

#include <stdexcept>
#include <string>

namespace fedlayer {

// Raised on precondition and shape violations. `stage` names the subsystem
// that rejected the input so CLI errors can point at the failing step.
class Error : public std::runtime_error {
 public:
  Error(std::string stage, const std::string& message)
      : std::runtime_error(stage + ": " + message), stage_(std::move(stage)) {}

  const std::string& stage() const noexcept { return stage_; }

 private:
  std::string stage_;
};

}  // namespace fedlayer
