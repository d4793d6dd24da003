#pragma once

#include <string>

#include "psmr/common.hpp"
#include "psmr/multicast.hpp"

namespace psmr {

// A marshaled client command. gamma is computed once at the issuing proxy
// and carried so server proxies agree with it on the execution mode.
struct Request {
  ClientId client_id = 0;
  ClientSeq client_seq = 0;
  CommandId cid = 0;
  GroupSet gamma;
  std::string input;

  std::string encode() const;
  static Request decode(std::string_view wire);
};

struct Response {
  ClientId client_id = 0;
  ClientSeq client_seq = 0;
  uint32_t replica = 0;
  std::string output;
};

}  // namespace psmr
