#pragma once

#include "difproc/pipeline.hpp"
#include "difproc/simulation.hpp"
#include "difproc/traits.hpp"
#include "difproc/types.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace difproc {

// 64-bit FNV-1a over the given bytes; the provenance digest embedded in
// every output file.
std::uint64_t fnv1a(const std::string& bytes);
std::string digest_hex(std::uint64_t digest);

// A delimited numeric table: respondent ids in column 1, one named value
// column per matrix column. Values are written with 17 significant
// digits, so write-then-read returns the exact same doubles.
struct Table {
  std::vector<long long> ids;
  std::vector<std::string> columns;  // names of the value columns
  Mat values;
};

// Serializes the table, prefixing "# manifest=<hex>" when a digest is
// given, and writes it atomically (temp file + rename).
std::string format_table(const Table& table, const std::string& manifest_hex = "");
void write_table(const std::string& path, const Table& table,
                 const std::string& manifest_hex = "");

// Parses a table; accepts leading comment lines. Malformed numbers,
// empty cells, and ragged rows throw DataError naming the line.
Table read_table_text(const std::string& text, const std::string& origin);
Table read_table(const std::string& path);

// Atomic text write used for every output file.
void write_text(const std::string& path, const std::string& text);
std::string read_text(const std::string& path);

// Throws DataError listing the first mismatched respondent ids (up to
// ten) when two input files disagree on the id column.
void check_ids_match(const std::vector<long long>& a, const std::vector<long long>& b,
                     const std::string& file_a, const std::string& file_b);

// Item bank serialization, including per-item surrogate columns keyed by
// item index. Round-trips exactly (doubles survive the JSON layer).
std::string format_bank(const ItemBank& bank, const std::string& manifest_hex = "");
ItemBank parse_bank(const std::string& text, const std::string& origin);

}  // namespace difproc
