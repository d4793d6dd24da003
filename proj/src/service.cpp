#include "psmr/service.hpp"

#include <thread>

#ifdef __linux__
#include <sys/prctl.h>
#endif

namespace psmr {

namespace {
// Tightens the kernel timer slack once per thread so short service waits do
// not get rounded up by the default 50us slack.
void tighten_timer_slack() {
#ifdef __linux__
  thread_local bool done = false;
  if (!done) {
    prctl(PR_SET_TIMERSLACK, 1000, 0, 0, 0);
    done = true;
  }
#endif
}
}  // namespace

std::string DelayedService::execute(CommandId cid, std::string_view input) {
  if (delay_.count() > 0) {
    auto deadline = std::chrono::steady_clock::now() + delay_;
    if (work_ == ServiceWork::wait) {
      tighten_timer_slack();
      std::this_thread::sleep_until(deadline);
    } else {
      while (std::chrono::steady_clock::now() < deadline) {
      }
    }
  }
  return inner_->execute(cid, input);
}

}  // namespace psmr
