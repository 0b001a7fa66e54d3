#pragma once

#include <filesystem>
#include <string>

#include "wavg/train.hpp"

namespace wavg {

// Line-delimited JSON: one {"type":"epoch",...} object per epoch record, then
// one {"type":"summary",...} object with the verdicts and failure status.
std::string format_record(const RunRecord& record);
RunRecord parse_record(const std::string& text);

void write_record(const std::filesystem::path& path, const RunRecord& record);
RunRecord read_record(const std::filesystem::path& path);

}  // namespace wavg
