#pragma once

// Wire codecs for the two links between simulator and controller:
//
//  * a fixed-configuration synchrophasor data frame in the C37.118 style
//    (big-endian, CRC-CCITT trailer), one frame per PMU per tick;
//  * Modbus TCP holding-register access to the inverter (FC 0x03 / 0x10).
//
// Data frame layout (50 bytes):
//
//   off  size  field
//     0     2  SYNC      0xAA 0x01
//     2     2  FRAMESIZE 50
//     4     2  IDCODE    PMU id 1..6
//     6     4  SOC       epoch seconds
//    10     4  FRACSEC   quality << 24 | microseconds
//    14     2  STAT
//    16    16  PHASORS   V (re, im), I (re, im) as float32
//    32     4  FREQ      deviation from 60 Hz, float32
//    36     4  DFREQ     float32
//    40     8  ANALOG    P (kW), Q (kvar) as float32
//    48     2  CHK       CRC-CCITT over bytes 0..47
//
// Command frame (18 bytes): SYNC 0xAA 0x41, FRAMESIZE, IDCODE, SOC, FRACSEC,
// CMD u16, CHK.

#include "mgchil/phasor.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <vector>

namespace mgchil {

struct ProtocolError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct FramingError : ProtocolError {
  using ProtocolError::ProtocolError;
};
struct ChecksumError : ProtocolError {
  using ProtocolError::ProtocolError;
};
struct EncodeError : ProtocolError {
  using ProtocolError::ProtocolError;
};

using Bytes = std::vector<std::uint8_t>;
using ByteView = std::span<const std::uint8_t>;

// CRC-16, poly 0x1021, init 0xFFFF, no reflection, no final xor.
inline std::uint16_t crc_ccitt(ByteView data) {
  std::uint16_t crc = 0xFFFF;
  for (std::uint8_t byte : data) {
    crc ^= static_cast<std::uint16_t>(byte) << 8;
    for (int i = 0; i < 8; ++i)
      crc = (crc & 0x8000) ? static_cast<std::uint16_t>((crc << 1) ^ 0x1021)
                           : static_cast<std::uint16_t>(crc << 1);
  }
  return crc;
}

namespace wire {

inline void put_u8(Bytes& b, std::uint8_t v) { b.push_back(v); }
inline void put_u16(Bytes& b, std::uint16_t v) {
  b.push_back(static_cast<std::uint8_t>(v >> 8));
  b.push_back(static_cast<std::uint8_t>(v));
}
inline void put_u32(Bytes& b, std::uint32_t v) {
  put_u16(b, static_cast<std::uint16_t>(v >> 16));
  put_u16(b, static_cast<std::uint16_t>(v));
}
inline void put_f32(Bytes& b, float v) { put_u32(b, std::bit_cast<std::uint32_t>(v)); }

inline std::uint16_t get_u16(ByteView b, std::size_t off) {
  return static_cast<std::uint16_t>((b[off] << 8) | b[off + 1]);
}
inline std::uint32_t get_u32(ByteView b, std::size_t off) {
  return (static_cast<std::uint32_t>(get_u16(b, off)) << 16) | get_u16(b, off + 2);
}
inline float get_f32(ByteView b, std::size_t off) { return std::bit_cast<float>(get_u32(b, off)); }

}  // namespace wire

// --- synchrophasor --------------------------------------------------------

inline constexpr std::uint8_t kSyncLead = 0xAA;
inline constexpr std::uint8_t kSyncData = 0x01;
inline constexpr std::uint8_t kSyncCommand = 0x41;
inline constexpr std::size_t kDataFrameSize = 50;
inline constexpr std::size_t kCommandFrameSize = 18;

enum class PmuCommand : std::uint16_t {
  kStopStreaming = 0x0001,
  kStartStreaming = 0x0002,
};

struct DataFrame {
  std::uint16_t idcode = 1;
  FrameTime time;
  std::uint8_t quality = 0;
  PhasorSample sample;

  bool operator==(const DataFrame&) const = default;
};

struct CommandFrame {
  std::uint16_t idcode = 0;
  FrameTime time;
  PmuCommand command = PmuCommand::kStartStreaming;

  bool operator==(const CommandFrame&) const = default;
};

inline Bytes encode_data_frame(const PhasorSample& s, std::uint16_t idcode, FrameTime time,
                               std::uint8_t quality = 0) {
  if (idcode < 1 || idcode > 6) throw EncodeError("PMU idcode must be 1..6");
  if (time.fracsec >= 1000000) throw EncodeError("fracsec must be below one second");
  const std::array<float, 8> values{
      static_cast<float>(s.voltage.real()), static_cast<float>(s.voltage.imag()),
      static_cast<float>(s.current.real()), static_cast<float>(s.current.imag()),
      static_cast<float>(s.frequency - kNominalFrequency), static_cast<float>(s.rocof),
      static_cast<float>(s.p_kw),           static_cast<float>(s.q_kvar)};
  for (float v : values)
    if (!std::isfinite(v)) throw EncodeError("non-finite field in phasor sample");

  Bytes b;
  b.reserve(kDataFrameSize);
  wire::put_u8(b, kSyncLead);
  wire::put_u8(b, kSyncData);
  wire::put_u16(b, static_cast<std::uint16_t>(kDataFrameSize));
  wire::put_u16(b, idcode);
  wire::put_u32(b, time.soc);
  wire::put_u32(b, (static_cast<std::uint32_t>(quality) << 24) | time.fracsec);
  wire::put_u16(b, s.stat);
  for (float v : values) wire::put_f32(b, v);
  wire::put_u16(b, crc_ccitt(b));
  return b;
}

inline Bytes encode_data_frame(const DataFrame& f) {
  return encode_data_frame(f.sample, f.idcode, f.time, f.quality);
}

// Checks sync, size and CRC, in that order.
inline void check_frame(ByteView b, std::uint8_t sync_type, std::size_t size) {
  if (b.size() < 4) throw FramingError("truncated frame");
  if (b[0] != kSyncLead || b[1] != sync_type) throw FramingError("bad sync word");
  if (wire::get_u16(b, 2) != size || b.size() != size) throw FramingError("frame size mismatch");
  if (crc_ccitt(b.first(size - 2)) != wire::get_u16(b, size - 2))
    throw ChecksumError("CRC mismatch");
}

inline DataFrame decode_data_frame(ByteView b) {
  check_frame(b, kSyncData, kDataFrameSize);
  DataFrame f;
  f.idcode = wire::get_u16(b, 4);
  f.time.soc = wire::get_u32(b, 6);
  const std::uint32_t frac = wire::get_u32(b, 10);
  f.quality = static_cast<std::uint8_t>(frac >> 24);
  f.time.fracsec = frac & 0x00FFFFFF;
  f.sample.stat = wire::get_u16(b, 14);
  f.sample.voltage = {wire::get_f32(b, 16), wire::get_f32(b, 20)};
  f.sample.current = {wire::get_f32(b, 24), wire::get_f32(b, 28)};
  f.sample.frequency = kNominalFrequency + wire::get_f32(b, 32);
  f.sample.rocof = wire::get_f32(b, 36);
  f.sample.p_kw = wire::get_f32(b, 40);
  f.sample.q_kvar = wire::get_f32(b, 44);
  return f;
}

inline Bytes encode_command_frame(const CommandFrame& c) {
  Bytes b;
  b.reserve(kCommandFrameSize);
  wire::put_u8(b, kSyncLead);
  wire::put_u8(b, kSyncCommand);
  wire::put_u16(b, static_cast<std::uint16_t>(kCommandFrameSize));
  wire::put_u16(b, c.idcode);
  wire::put_u32(b, c.time.soc);
  wire::put_u32(b, c.time.fracsec);
  wire::put_u16(b, static_cast<std::uint16_t>(c.command));
  wire::put_u16(b, crc_ccitt(b));
  return b;
}

inline CommandFrame decode_command_frame(ByteView b) {
  check_frame(b, kSyncCommand, kCommandFrameSize);
  CommandFrame c;
  c.idcode = wire::get_u16(b, 4);
  c.time.soc = wire::get_u32(b, 6);
  c.time.fracsec = wire::get_u32(b, 10) & 0x00FFFFFF;
  const auto cmd = wire::get_u16(b, 14);
  if (cmd != 1 && cmd != 2) throw FramingError("unknown PMU command");
  c.command = static_cast<PmuCommand>(cmd);
  return c;
}

// Splits a byte stream into candidate frames (data or command), resyncing on
// garbage. CRC is left to the decoder.
class FrameAssembler {
 public:
  void feed(ByteView data) { buf_.insert(buf_.end(), data.begin(), data.end()); }

  std::optional<Bytes> next() {
    for (;;) {
      auto lead = std::find(buf_.begin(), buf_.end(), kSyncLead);
      if (lead != buf_.begin()) {
        discarded_ += static_cast<std::size_t>(lead - buf_.begin());
        buf_.erase(buf_.begin(), lead);
      }
      if (buf_.size() < 4) return std::nullopt;
      const std::size_t expected = buf_[1] == kSyncData      ? kDataFrameSize
                                   : buf_[1] == kSyncCommand ? kCommandFrameSize
                                                             : 0;
      if (expected == 0 || wire::get_u16(buf_, 2) != expected) {
        buf_.erase(buf_.begin());
        ++discarded_;
        continue;
      }
      if (buf_.size() < expected) return std::nullopt;
      Bytes frame(buf_.begin(), buf_.begin() + static_cast<std::ptrdiff_t>(expected));
      buf_.erase(buf_.begin(), buf_.begin() + static_cast<std::ptrdiff_t>(expected));
      return frame;
    }
  }

  std::size_t discarded_bytes() const { return discarded_; }

 private:
  Bytes buf_;
  std::size_t discarded_ = 0;
};

// --- Modbus TCP -----------------------------------------------------------

inline constexpr std::uint8_t kFcReadHolding = 0x03;
inline constexpr std::uint8_t kFcWriteMultiple = 0x10;
inline constexpr std::uint8_t kExIllegalFunction = 0x01;
inline constexpr std::uint8_t kExIllegalAddress = 0x02;
inline constexpr std::uint8_t kExIllegalValue = 0x03;

enum Register : std::uint16_t {
  kRegSoc = 0,         // SoC x100, u16
  kRegPv = 1,          // P_PV x10 kW, u16
  kRegPRef = 2,        // P_inv reference x10 kW, i16
  kRegQRef = 3,        // Q_inv reference x10 kvar, i16
  kRegHeartbeat = 4,   // u16 counter
  kRegFaults = 5,      // u16 flags
  kRegisterCount = 6,
};

inline std::uint16_t scale_unsigned(double v, double factor) {
  return static_cast<std::uint16_t>(std::clamp(std::round(v * factor), 0.0, 65535.0));
}
inline std::uint16_t scale_signed(double v, double factor) {
  const auto s = static_cast<std::int16_t>(std::clamp(std::round(v * factor), -32768.0, 32767.0));
  return static_cast<std::uint16_t>(s);
}
inline double unscale_signed(std::uint16_t r, double factor) {
  return static_cast<std::int16_t>(r) / factor;
}

// Engineering-unit view of the inverter register image.
struct RegisterMap {
  double soc = 0.0;        // percent
  double p_pv = 0.0;       // kW
  double p_ref = 0.0;      // kW
  double q_ref = 0.0;      // kvar
  std::uint16_t heartbeat = 0;
  std::uint16_t faults = 0;

  std::array<std::uint16_t, kRegisterCount> to_registers() const {
    return {scale_unsigned(soc, 100.0), scale_unsigned(p_pv, 10.0), scale_signed(p_ref, 10.0),
            scale_signed(q_ref, 10.0),  heartbeat,                  faults};
  }
  static RegisterMap from_registers(std::span<const std::uint16_t, kRegisterCount> r) {
    return {r[kRegSoc] / 100.0,           r[kRegPv] / 10.0, unscale_signed(r[kRegPRef], 10.0),
            unscale_signed(r[kRegQRef], 10.0), r[kRegHeartbeat], r[kRegFaults]};
  }
};

struct ModbusHeader {
  std::uint16_t txn = 0;
  std::uint8_t unit = 1;

  bool operator==(const ModbusHeader&) const = default;
};

// Total ADU length once the 6-byte MBAP prefix is available.
inline std::optional<std::size_t> modbus_frame_length(ByteView b) {
  if (b.size() < 6) return std::nullopt;
  return 6 + static_cast<std::size_t>(wire::get_u16(b, 4));
}

namespace detail {
inline Bytes mbap(ModbusHeader h, std::size_t pdu_len) {
  Bytes b;
  wire::put_u16(b, h.txn);
  wire::put_u16(b, 0x0000);
  wire::put_u16(b, static_cast<std::uint16_t>(pdu_len + 1));
  wire::put_u8(b, h.unit);
  return b;
}

// Validates MBAP and returns the header and the PDU.
inline std::pair<ModbusHeader, ByteView> split_adu(ByteView b) {
  if (b.size() < 8) throw FramingError("Modbus ADU truncated");
  if (wire::get_u16(b, 2) != 0) throw FramingError("Modbus protocol id must be 0");
  const auto len = wire::get_u16(b, 4);
  if (len < 2 || b.size() != 6u + len) throw FramingError("Modbus length field mismatch");
  return {{wire::get_u16(b, 0), b[6]}, b.subspan(7)};
}
}  // namespace detail

inline Bytes build_read_holding_request(ModbusHeader h, std::uint16_t addr, std::uint16_t count) {
  Bytes b = detail::mbap(h, 5);
  wire::put_u8(b, kFcReadHolding);
  wire::put_u16(b, addr);
  wire::put_u16(b, count);
  return b;
}

inline Bytes build_write_multiple_request(ModbusHeader h, std::uint16_t addr,
                                          std::span<const std::uint16_t> values) {
  if (values.empty() || values.size() > 123) throw EncodeError("write count must be 1..123");
  Bytes b = detail::mbap(h, 6 + 2 * values.size());
  wire::put_u8(b, kFcWriteMultiple);
  wire::put_u16(b, addr);
  wire::put_u16(b, static_cast<std::uint16_t>(values.size()));
  wire::put_u8(b, static_cast<std::uint8_t>(2 * values.size()));
  for (auto v : values) wire::put_u16(b, v);
  return b;
}

// Decoded server reply as seen by the client.
struct ModbusResponse {
  ModbusHeader header;
  std::uint8_t function = 0;
  std::optional<std::uint8_t> exception;
  std::vector<std::uint16_t> registers;  // FC 0x03
  std::uint16_t addr = 0, count = 0;     // FC 0x10 echo

  bool operator==(const ModbusResponse&) const = default;
};

inline ModbusResponse parse_response(ByteView b) {
  auto [h, pdu] = detail::split_adu(b);
  ModbusResponse r;
  r.header = h;
  r.function = pdu[0];
  if (r.function & 0x80) {
    if (pdu.size() != 2) throw FramingError("Modbus exception PDU malformed");
    r.function &= 0x7F;
    r.exception = pdu[1];
    return r;
  }
  if (r.function == kFcReadHolding) {
    if (pdu.size() < 2 || pdu[1] % 2 != 0 || pdu.size() != 2u + pdu[1])
      throw FramingError("read response byte count mismatch");
    for (std::size_t i = 0; i < pdu[1] / 2u; ++i) r.registers.push_back(wire::get_u16(pdu, 2 + 2 * i));
    r.count = static_cast<std::uint16_t>(r.registers.size());
    return r;
  }
  if (r.function == kFcWriteMultiple) {
    if (pdu.size() != 5) throw FramingError("write response malformed");
    r.addr = wire::get_u16(pdu, 1);
    r.count = wire::get_u16(pdu, 3);
    return r;
  }
  throw FramingError("unsupported Modbus function in response");
}

// Server-side request as decoded from the wire.
struct ModbusRequest {
  ModbusHeader header;
  std::uint8_t function = 0;
  std::uint16_t addr = 0;
  std::uint16_t count = 0;
  std::vector<std::uint16_t> values;  // FC 0x10

  bool operator==(const ModbusRequest&) const = default;
};

inline ModbusRequest parse_request(ByteView b) {
  auto [h, pdu] = detail::split_adu(b);
  ModbusRequest r;
  r.header = h;
  r.function = pdu[0];
  if (r.function == kFcReadHolding) {
    if (pdu.size() != 5) throw FramingError("read request malformed");
    r.addr = wire::get_u16(pdu, 1);
    r.count = wire::get_u16(pdu, 3);
  } else if (r.function == kFcWriteMultiple) {
    if (pdu.size() < 6) throw FramingError("write request malformed");
    r.addr = wire::get_u16(pdu, 1);
    r.count = wire::get_u16(pdu, 3);
    const std::size_t nbytes = pdu[5];
    if (pdu.size() != 6 + nbytes || nbytes != 2u * r.count)
      throw FramingError("write request byte count mismatch");
    for (std::size_t i = 0; i < r.count; ++i) r.values.push_back(wire::get_u16(pdu, 6 + 2 * i));
  }
  return r;
}

inline Bytes build_exception(ModbusHeader h, std::uint8_t function, std::uint8_t code) {
  Bytes b = detail::mbap(h, 2);
  wire::put_u8(b, static_cast<std::uint8_t>(function | 0x80));
  wire::put_u8(b, code);
  return b;
}

// The inverter's register image plus the rules for who may write what.
// Only the two reference registers are writable, within +/- p_max / q_max.
class RegisterBank {
 public:
  explicit RegisterBank(double p_max = 250.0, double q_max = 250.0)
      : p_limit_(static_cast<int>(std::lround(p_max * 10.0))),
        q_limit_(static_cast<int>(std::lround(q_max * 10.0))) {}

  const std::array<std::uint16_t, kRegisterCount>& registers() const { return regs_; }
  RegisterMap view() const { return RegisterMap::from_registers(regs_); }

  // Simulator-side updates of the read-only registers.
  void publish(double soc, double p_pv, std::uint16_t faults) {
    regs_[kRegSoc] = scale_unsigned(soc, 100.0);
    regs_[kRegPv] = scale_unsigned(p_pv, 10.0);
    regs_[kRegFaults] = faults;
    ++regs_[kRegHeartbeat];
  }

  // Returns the response ADU; throws FramingError when the request cannot
  // be answered at all (bad MBAP).
  Bytes handle(ByteView request) {
    const ModbusRequest r = parse_request(request);
    switch (r.function) {
      case kFcReadHolding: {
        if (r.count < 1 || r.count > 125) return build_exception(r.header, r.function, kExIllegalValue);
        if (r.addr + r.count > kRegisterCount)
          return build_exception(r.header, r.function, kExIllegalAddress);
        Bytes b = detail::mbap(r.header, 2 + 2 * r.count);
        wire::put_u8(b, kFcReadHolding);
        wire::put_u8(b, static_cast<std::uint8_t>(2 * r.count));
        for (std::uint16_t i = 0; i < r.count; ++i) wire::put_u16(b, regs_[r.addr + i]);
        return b;
      }
      case kFcWriteMultiple: {
        if (r.count < 1 || r.count > 123) return build_exception(r.header, r.function, kExIllegalValue);
        if (r.addr < kRegPRef || r.addr + r.count > kRegQRef + 1)
          return build_exception(r.header, r.function, kExIllegalAddress);
        for (std::uint16_t i = 0; i < r.count; ++i) {
          const int v = static_cast<std::int16_t>(r.values[i]);
          const int limit = (r.addr + i == kRegPRef) ? p_limit_ : q_limit_;
          if (v < -limit || v > limit) return build_exception(r.header, r.function, kExIllegalValue);
        }
        for (std::uint16_t i = 0; i < r.count; ++i) regs_[r.addr + i] = r.values[i];
        ++writes_;
        Bytes b = detail::mbap(r.header, 5);
        wire::put_u8(b, kFcWriteMultiple);
        wire::put_u16(b, r.addr);
        wire::put_u16(b, r.count);
        return b;
      }
      default:
        return build_exception(r.header, r.function, kExIllegalFunction);
    }
  }

  std::uint64_t write_count() const { return writes_; }

 private:
  std::array<std::uint16_t, kRegisterCount> regs_{};
  int p_limit_;
  int q_limit_;
  std::uint64_t writes_ = 0;
};

}  // namespace mgchil
