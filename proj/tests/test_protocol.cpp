#include "mgchil/protocol.hpp"
#include "support/protocol_gen.hpp"

#include <gtest/gtest.h>

#include <random>

using namespace mgchil;
using testsupport::mutate;
using testsupport::random_frame;

namespace {

// Table-driven CRC-16/CCITT-FALSE, built independently of crc_ccitt.
std::uint16_t table_crc(ByteView data) {
  static const auto table = [] {
    std::array<std::uint16_t, 256> t{};
    for (int n = 0; n < 256; ++n) {
      std::uint16_t c = static_cast<std::uint16_t>(n << 8);
      for (int k = 0; k < 8; ++k) c = static_cast<std::uint16_t>(c & 0x8000 ? (c << 1) ^ 0x1021 : c << 1);
      t[n] = c;
    }
    return t;
  }();
  std::uint16_t crc = 0xFFFF;
  for (auto b : data) crc = static_cast<std::uint16_t>((crc << 8) ^ table[((crc >> 8) ^ b) & 0xFF]);
  return crc;
}

Bytes ascii(const std::string& s) { return Bytes(s.begin(), s.end()); }

}  // namespace

TEST(Crc, StandardCheckValue) {
  EXPECT_EQ(crc_ccitt(ascii("123456789")), 0x29B1);
  EXPECT_EQ(crc_ccitt({}), 0xFFFF);
}

TEST(Crc, AgreesWithTableImplementation) {
  std::mt19937_64 rng(5);
  for (int i = 0; i < 2000; ++i) {
    Bytes b(rng() % 100);
    for (auto& x : b) x = static_cast<std::uint8_t>(rng());
    EXPECT_EQ(crc_ccitt(b), table_crc(b));
  }
}

TEST(Synchrophasor, DataFrameLayout) {
  PhasorSample s;
  s.voltage = {277.0, 0.0};
  s.p_kw = 200.0;
  const Bytes b = encode_data_frame(s, 1, {1700000000, 100000});
  ASSERT_EQ(b.size(), kDataFrameSize);
  EXPECT_EQ(b[0], 0xAA);
  EXPECT_EQ(b[1], 0x01);
  EXPECT_EQ(wire::get_u16(b, 2), kDataFrameSize);
  EXPECT_EQ(wire::get_u16(b, 4), 1);
  EXPECT_EQ(wire::get_u32(b, 6), 1700000000u);
  EXPECT_EQ(wire::get_u32(b, 10), 100000u);
  EXPECT_EQ(wire::get_f32(b, 40), 200.0f);
  EXPECT_EQ(wire::get_u16(b, 48), table_crc(ByteView(b).first(48)));
}

TEST(Synchrophasor, RandomFramesRoundTrip) {
  std::mt19937_64 rng(11);
  for (int i = 0; i < 10000; ++i) {
    const DataFrame d = random_frame(rng);
    const Bytes b = encode_data_frame(d);
    const DataFrame back = decode_data_frame(b);
    ASSERT_EQ(back, d) << "frame " << i;
    ASSERT_EQ(encode_data_frame(back), b);
  }
}

TEST(Synchrophasor, EveryBitFlipIsCaught) {
  std::mt19937_64 rng(12);
  const Bytes good = encode_data_frame(random_frame(rng));
  for (std::size_t i = 0; i < good.size(); ++i) {
    for (int bit = 0; bit < 8; ++bit) {
      Bytes b = good;
      b[i] ^= static_cast<std::uint8_t>(1u << bit);
      if (i < 4) EXPECT_THROW(decode_data_frame(b), FramingError);
      else EXPECT_THROW(decode_data_frame(b), ChecksumError);
    }
  }
}

TEST(Synchrophasor, TruncatedAndForeignFramesAreFramingErrors) {
  std::mt19937_64 rng(13);
  const Bytes good = encode_data_frame(random_frame(rng));
  EXPECT_THROW(decode_data_frame(ByteView(good).first(49)), FramingError);
  EXPECT_THROW(decode_data_frame(ByteView(good).first(3)), FramingError);
  Bytes cmd = encode_command_frame({3, {1, 2}, PmuCommand::kStopStreaming});
  EXPECT_THROW(decode_data_frame(cmd), FramingError);
  EXPECT_EQ(decode_command_frame(cmd).command, PmuCommand::kStopStreaming);
}

TEST(Synchrophasor, EncoderRejectsBadInput) {
  PhasorSample s;
  EXPECT_THROW(encode_data_frame(s, 0, {}), EncodeError);
  EXPECT_THROW(encode_data_frame(s, 7, {}), EncodeError);
  EXPECT_THROW(encode_data_frame(s, 1, {0, 1000000}), EncodeError);
  s.p_kw = std::numeric_limits<double>::infinity();
  EXPECT_THROW(encode_data_frame(s, 1, {}), EncodeError);
}

TEST(Synchrophasor, AssemblerResyncsOnGarbage) {
  std::mt19937_64 rng(14);
  std::vector<DataFrame> sent;
  Bytes stream = {0x00, 0xAA, 0x07, 0x13};
  for (int i = 0; i < 50; ++i) {
    sent.push_back(random_frame(rng));
    const Bytes f = encode_data_frame(sent.back());
    stream.insert(stream.end(), f.begin(), f.end());
    if (i % 7 == 0) stream.push_back(0x55);
  }
  FrameAssembler fa;
  std::vector<DataFrame> got;
  for (std::size_t off = 0; off < stream.size(); off += 13) {
    fa.feed(ByteView(stream).subspan(off, std::min<std::size_t>(13, stream.size() - off)));
    while (auto f = fa.next()) {
      try {
        got.push_back(decode_data_frame(*f));
      } catch (const ProtocolError&) {
      }
    }
  }
  EXPECT_EQ(got, sent);
  EXPECT_GE(fa.discarded_bytes(), 4u);
}

TEST(Synchrophasor, CommandFrameRoundTrip) {
  const CommandFrame c{2, {1700000001, 999999}, PmuCommand::kStartStreaming};
  const Bytes b = encode_command_frame(c);
  EXPECT_EQ(b.size(), kCommandFrameSize);
  EXPECT_EQ(decode_command_frame(b), c);
  Bytes bad = b;
  bad[15] = 9;
  bad.resize(16);
  wire::put_u16(bad, crc_ccitt(bad));
  EXPECT_THROW(decode_command_frame(bad), FramingError);
}

TEST(Modbus, ReadRequestBytes) {
  const Bytes b = build_read_holding_request({1, 1}, 0, 2);
  const Bytes want = {0x00, 0x01, 0x00, 0x00, 0x00, 0x06, 0x01, 0x03, 0x00, 0x00, 0x00, 0x02};
  EXPECT_EQ(b, want);
  EXPECT_EQ(modbus_frame_length(b), 12u);
  EXPECT_FALSE(modbus_frame_length(ByteView(b).first(5)));
}

TEST(Modbus, SocReadsScaled) {
  RegisterBank bank;
  bank.publish(50.0, 12.34, 0);
  const ModbusResponse r = parse_response(bank.handle(build_read_holding_request({9, 1}, 0, 2)));
  EXPECT_EQ(r.header.txn, 9);
  EXPECT_FALSE(r.exception);
  ASSERT_EQ(r.registers.size(), 2u);
  EXPECT_EQ(r.registers[0], 5000);
  EXPECT_EQ(r.registers[1], 123);
  EXPECT_EQ(bank.registers()[kRegHeartbeat], 1);
}

TEST(Modbus, ReadOutsideMapIsIllegalAddress) {
  RegisterBank bank;
  const ModbusResponse r = parse_response(bank.handle(build_read_holding_request({1, 1}, 10, 1)));
  ASSERT_TRUE(r.exception);
  EXPECT_EQ(*r.exception, kExIllegalAddress);
  EXPECT_EQ(r.function, kFcReadHolding);
  const ModbusResponse c = parse_response(bank.handle(build_read_holding_request({1, 1}, 0, 0)));
  EXPECT_EQ(*c.exception, kExIllegalValue);
}

TEST(Modbus, ReferenceWrites) {
  RegisterBank bank;
  const std::uint16_t ok[] = {2500, scale_signed(-120.0, 10.0)};
  const ModbusResponse r = parse_response(bank.handle(build_write_multiple_request({2, 1}, 2, ok)));
  EXPECT_FALSE(r.exception);
  EXPECT_EQ(r.addr, 2);
  EXPECT_EQ(r.count, 2);
  EXPECT_EQ(bank.view().p_ref, 250.0);
  EXPECT_EQ(bank.view().q_ref, -120.0);
  EXPECT_EQ(bank.write_count(), 1u);

  const std::uint16_t soc[] = {1};
  EXPECT_EQ(*parse_response(bank.handle(build_write_multiple_request({3, 1}, 0, soc))).exception,
            kExIllegalAddress);
  const std::uint16_t big[] = {30000};
  EXPECT_EQ(*parse_response(bank.handle(build_write_multiple_request({4, 1}, 2, big))).exception,
            kExIllegalValue);
  EXPECT_EQ(bank.view().p_ref, 250.0);
  EXPECT_EQ(bank.write_count(), 1u);
}

TEST(Modbus, UnknownFunction) {
  RegisterBank bank;
  Bytes req = build_read_holding_request({5, 1}, 0, 1);
  req[7] = 0x06;
  const ModbusResponse r = parse_response(bank.handle(req));
  EXPECT_EQ(*r.exception, kExIllegalFunction);
  EXPECT_EQ(r.function, 0x06);
}

TEST(Modbus, ScalingIsSaturating) {
  EXPECT_EQ(scale_unsigned(-5.0, 10.0), 0);
  EXPECT_EQ(scale_unsigned(1e9, 10.0), 65535);
  EXPECT_EQ(unscale_signed(scale_signed(-3276.8, 10.0), 10.0), -3276.8);
  EXPECT_EQ(unscale_signed(scale_signed(-1e9, 10.0), 10.0), -3276.8);
  EXPECT_EQ(unscale_signed(scale_signed(0.04, 10.0), 10.0), 0.0);
}

TEST(Modbus, RandomTransactionsRoundTrip) {
  std::mt19937_64 rng(21);
  std::uniform_int_distribution<int> u16(0, 65535), cnt(1, 123), unit(0, 255);
  for (int i = 0; i < 10000; ++i) {
    const ModbusHeader h{static_cast<std::uint16_t>(u16(rng)), static_cast<std::uint8_t>(unit(rng))};
    ModbusRequest want;
    want.header = h;
    want.addr = static_cast<std::uint16_t>(u16(rng));
    Bytes wire_bytes;
    if (rng() % 2) {
      want.function = kFcReadHolding;
      want.count = static_cast<std::uint16_t>(u16(rng));
      wire_bytes = build_read_holding_request(h, want.addr, want.count);
    } else {
      want.function = kFcWriteMultiple;
      want.count = static_cast<std::uint16_t>(cnt(rng));
      for (int k = 0; k < want.count; ++k) want.values.push_back(static_cast<std::uint16_t>(u16(rng)));
      wire_bytes = build_write_multiple_request(h, want.addr, want.values);
    }
    const ModbusRequest got = parse_request(wire_bytes);
    ASSERT_EQ(got, want) << "transaction " << i;
    ASSERT_EQ(got.header.txn, h.txn);
    ASSERT_EQ(got.header.unit, h.unit);
  }
}

TEST(Modbus, BankReadBackMatchesWrites) {
  std::mt19937_64 rng(22);
  std::uniform_int_distribution<int> ref(-2500, 2500);
  RegisterBank bank;
  for (int i = 0; i < 10000; ++i) {
    const std::uint16_t v[] = {static_cast<std::uint16_t>(ref(rng)),
                               static_cast<std::uint16_t>(ref(rng))};
    const auto w = parse_response(bank.handle(build_write_multiple_request({1, 1}, 2, v)));
    ASSERT_FALSE(w.exception);
    const auto r = parse_response(bank.handle(build_read_holding_request({2, 1}, 2, 2)));
    ASSERT_EQ(r.registers, std::vector<std::uint16_t>(std::begin(v), std::end(v)));
  }
}

TEST(Fuzz, DecodersOnlyThrowProtocolErrors) {
  std::mt19937_64 rng(31);
  RegisterBank bank;
  const std::uint16_t vals[] = {10, 20};
  const std::vector<Bytes> seeds = {
      encode_data_frame(random_frame(rng)),
      encode_command_frame({1, {5, 6}, PmuCommand::kStartStreaming}),
      build_read_holding_request({1, 1}, 0, 6),
      build_write_multiple_request({1, 1}, 2, vals),
      bank.handle(build_read_holding_request({1, 1}, 0, 6)),
      build_exception({1, 1}, 3, 2),
  };
  FrameAssembler fa;
  long accepted = 0;
  for (int i = 0; i < 100000; ++i) {
    Bytes b = mutate(seeds[i % seeds.size()], rng);
    if (i % 3 == 0 && b.size() >= 2) {
      // Re-seal so the mutation reaches the field decoders behind the CRC.
      b.resize(b.size() - 2);
      wire::put_u16(b, crc_ccitt(b));
    }
    auto guarded = [&](auto&& fn) {
      try {
        fn();
        ++accepted;
      } catch (const ProtocolError&) {
      }
    };
    guarded([&] { decode_data_frame(b); });
    guarded([&] { decode_command_frame(b); });
    guarded([&] { parse_request(b); });
    guarded([&] { parse_response(b); });
    guarded([&] { bank.handle(b); });
    fa.feed(b);
    while (auto f = fa.next()) guarded([&] { decode_data_frame(*f); });
  }
  EXPECT_GT(accepted, 0);
}
