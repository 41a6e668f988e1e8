// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//  http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <string_view>
#include <vector>

namespace mtel {

std::string read_text_file(const std::filesystem::path& path);
// Writes bytes verbatim; the parent directory must exist.
void write_text_file(const std::filesystem::path& path, std::string_view contents);
void append_text_file(const std::filesystem::path& path, std::string_view contents);

std::string trim(std::string_view s);
std::vector<std::string> split(std::string_view s, char sep);

double parse_double(std::string_view s, const std::string& where);
long long parse_int(std::string_view s, const std::string& where);
bool parse_bool(std::string_view s, const std::string& where);
// Shortest round-trip decimal representation.
std::string format_double(double v);
std::string format_fixed(double v, int decimals);

// `key = value` lines; '#' starts a comment. Later keys override earlier ones.
using KeyValues = std::map<std::string, std::string>;
KeyValues parse_key_values(std::string_view text, const std::string& source);
KeyValues read_key_values(const std::filesystem::path& path);
std::string format_key_values(const KeyValues& kv);

}  // namespace mtel
