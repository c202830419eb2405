#include "evdet/evt1.hpp"

#include <cstring>
#include <limits>
#include <string>

#include "evdet/fsutil.hpp"

namespace evdet {

namespace {

constexpr char kMagic[4] = {'E', 'V', 'T', '1'};
constexpr std::size_t kHeaderSize = 16;
constexpr std::size_t kRecordSize = 13;

void put_u16(std::string& out, std::uint16_t v) {
  out.push_back(static_cast<char>(v & 0xff));
  out.push_back(static_cast<char>((v >> 8) & 0xff));
}

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_i64(std::string& out, std::int64_t v) {
  const auto u = static_cast<std::uint64_t>(v);
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((u >> (8 * i)) & 0xff));
}

std::uint16_t get_u16(const unsigned char* p) {
  return static_cast<std::uint16_t>(p[0] | (p[1] << 8));
}

std::uint32_t get_u32(const unsigned char* p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

std::int64_t get_i64(const unsigned char* p) {
  std::uint64_t u = 0;
  for (int i = 7; i >= 0; --i) u = (u << 8) | p[i];
  return static_cast<std::int64_t>(u);
}

}  // namespace

std::string encode_evt1(const EventStream& stream) {
  validate(stream);
  std::string out;
  out.reserve(kHeaderSize + kRecordSize * stream.events.size());
  out.append(kMagic, 4);
  put_u16(out, stream.sensor_w);
  put_u16(out, stream.sensor_h);
  put_u32(out, static_cast<std::uint32_t>(stream.events.size()));
  put_u32(out, 0);
  for (const Event& e : stream.events) {
    put_u16(out, e.x);
    put_u16(out, e.y);
    put_i64(out, e.t);
    out.push_back(static_cast<char>(e.p));
  }
  return out;
}

EventStream decode_evt1(std::string_view bytes) {
  if (bytes.size() < kHeaderSize) throw DataError("evt1: truncated header");
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
  if (std::memcmp(p, kMagic, 4) != 0) throw DataError("evt1: bad magic");

  EventStream stream;
  stream.sensor_w = get_u16(p + 4);
  stream.sensor_h = get_u16(p + 6);
  const std::uint32_t count = get_u32(p + 8);
  if (bytes.size() != kHeaderSize + kRecordSize * static_cast<std::size_t>(count))
    throw DataError("evt1: size does not match event_count");

  stream.events.resize(count);
  std::int64_t prev = std::numeric_limits<std::int64_t>::min();
  const unsigned char* rec = p + kHeaderSize;
  for (std::uint32_t i = 0; i < count; ++i, rec += kRecordSize) {
    Event& e = stream.events[i];
    e.x = get_u16(rec);
    e.y = get_u16(rec + 2);
    e.t = get_i64(rec + 4);
    e.p = static_cast<std::int8_t>(rec[12]);
    if (e.x >= stream.sensor_w || e.y >= stream.sensor_h)
      throw DataError("evt1: coordinates out of bounds at record " + std::to_string(i));
    if (e.p != 1 && e.p != -1)
      throw DataError("evt1: invalid polarity at record " + std::to_string(i));
    if (e.t < prev) throw DataError("evt1: timestamps not sorted at record " + std::to_string(i));
    prev = e.t;
  }
  return stream;
}

void write_evt1(const std::filesystem::path& path, const EventStream& stream) {
  fsio::write_file_atomic(path, encode_evt1(stream));
}

EventStream read_evt1(const std::filesystem::path& path) {
  return decode_evt1(fsio::read_file(path));
}

}  // namespace evdet
