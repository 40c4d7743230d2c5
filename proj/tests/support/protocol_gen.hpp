#pragma once

#include "mgchil/protocol.hpp"

#include <random>

namespace testsupport {

using namespace mgchil;

// Frame whose float fields survive the 32-bit wire format exactly.
inline DataFrame random_frame(std::mt19937_64& rng) {
  std::uniform_real_distribution<float> f(-1e4f, 1e4f), small(-0.5f, 0.5f);
  std::uniform_int_distribution<std::uint32_t> u32, frac(0, 999999);
  std::uniform_int_distribution<int> id(1, 6), byte(0, 255), u16(0, 65535);
  DataFrame d;
  d.idcode = static_cast<std::uint16_t>(id(rng));
  d.time = {u32(rng), frac(rng)};
  d.quality = static_cast<std::uint8_t>(byte(rng));
  d.sample.stat = static_cast<std::uint16_t>(u16(rng));
  d.sample.voltage = {f(rng), f(rng)};
  d.sample.current = {f(rng), f(rng)};
  d.sample.frequency = kNominalFrequency + small(rng);
  d.sample.rocof = small(rng);
  d.sample.p_kw = f(rng);
  d.sample.q_kvar = f(rng);
  return d;
}

// Random edits: byte overwrites, truncation, appends, bit flips, length
// field rewrites and wholesale replacement.
inline Bytes mutate(Bytes b, std::mt19937_64& rng) {
  std::uniform_int_distribution<int> op(0, 5), byte(0, 255);
  const int n = 1 + static_cast<int>(rng() % 4);
  for (int i = 0; i < n; ++i) {
    switch (op(rng)) {
      case 0:
        if (!b.empty()) b[rng() % b.size()] = static_cast<std::uint8_t>(byte(rng));
        break;
      case 1:
        if (!b.empty()) b.resize(rng() % b.size());
        break;
      case 2:
        b.push_back(static_cast<std::uint8_t>(byte(rng)));
        break;
      case 3:
        if (!b.empty()) b[rng() % b.size()] ^= static_cast<std::uint8_t>(1u << (rng() % 8));
        break;
      case 4:
        if (b.size() >= 6) {
          // Length fields that agree with a different body size.
          b[4] = static_cast<std::uint8_t>(byte(rng));
          b[5] = static_cast<std::uint8_t>(byte(rng));
        }
        break;
      default:
        b.assign(rng() % 64, 0);
        for (auto& x : b) x = static_cast<std::uint8_t>(byte(rng));
    }
  }
  return b;
}

}  // namespace testsupport
