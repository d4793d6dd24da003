#pragma once

#include <chrono>
#include <cstdint>
#include <memory>
#include <string>
#include <string_view>

#include "psmr/common.hpp"

namespace psmr {

// A deterministic replicated service: output and state changes are a
// function of current state and the command alone.
class Service {
 public:
  virtual ~Service() = default;
  virtual std::string execute(CommandId cid, std::string_view input) = 0;
  virtual uint64_t state_digest() const = 0;
};

enum class ServiceWork { wait, spin };

// Adds a fixed per-command service time in front of an inner service.
// `wait` blocks off-CPU so command overlap is observable regardless of the
// host's core count; `spin` burns the CPU for hardware-parallel setups.
class DelayedService : public Service {
 public:
  DelayedService(std::unique_ptr<Service> inner, std::chrono::nanoseconds delay, ServiceWork work)
      : inner_(std::move(inner)), delay_(delay), work_(work) {}

  std::string execute(CommandId cid, std::string_view input) override;
  uint64_t state_digest() const override { return inner_->state_digest(); }
  Service& inner() { return *inner_; }

 private:
  std::unique_ptr<Service> inner_;
  std::chrono::nanoseconds delay_;
  ServiceWork work_;
};

}  // namespace psmr
