#pragma once

#include <filesystem>
#include <stdexcept>
#include <string>
#include <string_view>

namespace evdet {

// Raised for malformed or inconsistent file contents, as opposed to bad call
// arguments. The CLI maps this to its data-error exit code.
class DataError : public std::runtime_error {
 public:
  explicit DataError(const std::string& what) : std::runtime_error(what) {}
};

namespace fsio {

// Writes via a temp file in the target directory plus rename, so readers
// never observe a partial file.
void write_file_atomic(const std::filesystem::path& path, std::string_view bytes);

std::string read_file(const std::filesystem::path& path);

}  // namespace fsio
}  // namespace evdet
