#include "psmr/request.hpp"

namespace psmr {

std::string Request::encode() const {
  std::string out;
  put_u32(out, client_id);
  put_u64(out, client_seq);
  put_u32(out, cid);
  put_u8(out, static_cast<uint8_t>(gamma.size()));
  for (uint32_t g : gamma.members()) put_u8(out, static_cast<uint8_t>(g));
  put_u32(out, static_cast<uint32_t>(input.size()));
  out += input;
  return out;
}

Request Request::decode(std::string_view wire) {
  ByteReader r(wire);
  Request req;
  req.client_id = r.u32();
  req.client_seq = r.u64();
  req.cid = r.u32();
  uint8_t n = r.u8();
  std::vector<uint32_t> members(n);
  for (uint8_t i = 0; i < n; i++) members[i] = r.u8();
  req.gamma = GroupSet(std::move(members));
  uint32_t len = r.u32();
  req.input = std::string(r.bytes(len));
  return req;
}

}  // namespace psmr
