#pragma once

#include <cstddef>
#include <string>

namespace texbridge {

std::string sha256_hex(const void* data, size_t n);
std::string sha256_hex(const std::string& s);
std::string sha256_file(const std::string& path);  // throws MissingArtifactError

}  // namespace texbridge
