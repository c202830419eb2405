#pragma once

#include <filesystem>

#include "evdet/events.hpp"

namespace evdet {

// EVT1 container: 16-byte header (magic "EVT1", u16 sensor_w, u16 sensor_h,
// u32 event_count, u32 reserved) followed by packed 13-byte little-endian
// records (u16 x, u16 y, i64 t, i8 p). Readers reject unsorted timestamps,
// out-of-bounds coordinates and invalid polarities.
void write_evt1(const std::filesystem::path& path, const EventStream& stream);
EventStream read_evt1(const std::filesystem::path& path);

std::string encode_evt1(const EventStream& stream);
EventStream decode_evt1(std::string_view bytes);

}  // namespace evdet
