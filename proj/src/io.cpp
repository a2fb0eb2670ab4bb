#include "difproc/io.hpp"

#include "json.hpp"

#include <cinttypes>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

namespace difproc {

namespace {

using nlohmann::json;

void append_double(std::string& out, double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  out += buf;
}

[[noreturn]] void bad_cell(const std::string& origin, size_t line, const std::string& what) {
  throw DataError(origin + " line " + std::to_string(line) + ": " + what);
}

std::vector<std::string> split_fields(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (const char c : line) {
    if (c == ',') {
      out.push_back(cur);
      cur.clear();
    } else {
      cur += c;
    }
  }
  out.push_back(cur);
  return out;
}

double parse_double(const std::string& token, const std::string& origin, size_t line) {
  if (token.empty()) bad_cell(origin, line, "empty cell");
  char* end = nullptr;
  const double v = std::strtod(token.c_str(), &end);
  if (end != token.c_str() + token.size()) {
    bad_cell(origin, line, "malformed number '" + token + "'");
  }
  return v;
}

long long parse_id(const std::string& token, const std::string& origin, size_t line) {
  if (token.empty()) bad_cell(origin, line, "empty id cell");
  char* end = nullptr;
  const long long v = std::strtoll(token.c_str(), &end, 10);
  if (end != token.c_str() + token.size()) {
    bad_cell(origin, line, "malformed id '" + token + "'");
  }
  return v;
}

double require_number(const json& j, const std::string& path) {
  if (!j.is_number()) throw DataError("field '" + path + "' must be a number");
  return j.get<double>();
}

}  // namespace

std::string to_string(LinkKind link) {
  switch (link) {
    case LinkKind::identity:
      return "identity";
    case LinkKind::logit:
      return "logit";
    case LinkKind::probit:
      return "probit";
  }
  return "identity";
}

LinkKind link_from_string(const std::string& name) {
  if (name == "identity") return LinkKind::identity;
  if (name == "logit") return LinkKind::logit;
  if (name == "probit") return LinkKind::probit;
  throw ConfigError("unknown link '" + name + "' (expected identity, logit, or probit)");
}

std::uint64_t fnv1a(const std::string& bytes) {
  std::uint64_t h = 14695981039346656037ULL;
  for (const unsigned char c : bytes) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

std::string digest_hex(std::uint64_t digest) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016" PRIx64, digest);
  return buf;
}

std::string format_table(const Table& table, const std::string& manifest_hex) {
  const Eigen::Index rows = table.values.rows();
  const Eigen::Index cols = table.values.cols();
  if (static_cast<Eigen::Index>(table.ids.size()) != rows) {
    throw ConfigError("table ids do not match the row count");
  }
  if (static_cast<Eigen::Index>(table.columns.size()) != cols) {
    throw ConfigError("table column names do not match the column count");
  }
  std::string out;
  if (!manifest_hex.empty()) out += "# manifest=" + manifest_hex + "\n";
  out += "id";
  for (const std::string& c : table.columns) {
    out += ',';
    out += c;
  }
  out += '\n';
  for (Eigen::Index r = 0; r < rows; ++r) {
    out += std::to_string(table.ids[static_cast<size_t>(r)]);
    for (Eigen::Index c = 0; c < cols; ++c) {
      out += ',';
      append_double(out, table.values(r, c));
    }
    out += '\n';
  }
  return out;
}

void write_table(const std::string& path, const Table& table, const std::string& manifest_hex) {
  write_text(path, format_table(table, manifest_hex));
}

Table read_table_text(const std::string& text, const std::string& origin) {
  std::istringstream in(text);
  std::string line;
  size_t lineno = 0;
  bool have_header = false;
  Table table;
  std::vector<std::vector<double>> rows;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    const std::vector<std::string> fields = split_fields(line);
    if (!have_header) {
      if (fields.size() < 2) bad_cell(origin, lineno, "header needs an id column and data");
      table.columns.assign(fields.begin() + 1, fields.end());
      have_header = true;
      continue;
    }
    if (fields.size() != table.columns.size() + 1) {
      bad_cell(origin, lineno,
               "expected " + std::to_string(table.columns.size() + 1) + " fields, found " +
                   std::to_string(fields.size()));
    }
    table.ids.push_back(parse_id(fields[0], origin, lineno));
    std::vector<double> row;
    for (size_t c = 1; c < fields.size(); ++c) {
      row.push_back(parse_double(fields[c], origin, lineno));
    }
    rows.push_back(std::move(row));
  }
  if (!have_header) throw DataError(origin + ": no header row");
  table.values.resize(static_cast<Eigen::Index>(rows.size()),
                      static_cast<Eigen::Index>(table.columns.size()));
  for (size_t r = 0; r < rows.size(); ++r) {
    for (size_t c = 0; c < rows[r].size(); ++c) {
      table.values(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = rows[r][c];
    }
  }
  return table;
}

Table read_table(const std::string& path) { return read_table_text(read_text(path), path); }

void write_text(const std::string& path, const std::string& text) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw DataError("cannot open '" + tmp + "' for writing");
    f.write(text.data(), static_cast<std::streamsize>(text.size()));
    if (!f) throw DataError("cannot write '" + tmp + "'");
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0) {
    throw DataError("cannot move '" + tmp + "' to '" + path + "'");
  }
}

std::string read_text(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot read '" + path + "'");
  std::ostringstream out;
  out << f.rdbuf();
  return out.str();
}

void check_ids_match(const std::vector<long long>& a, const std::vector<long long>& b,
                     const std::string& file_a, const std::string& file_b) {
  if (a.size() != b.size()) {
    throw DataError("respondent ids disagree between '" + file_a + "' (" +
                    std::to_string(a.size()) + " rows) and '" + file_b + "' (" +
                    std::to_string(b.size()) + " rows)");
  }
  std::string listed;
  int mismatches = 0;
  for (size_t i = 0; i < a.size(); ++i) {
    if (a[i] == b[i]) continue;
    ++mismatches;
    if (mismatches <= 10) {
      if (!listed.empty()) listed += "; ";
      listed += "row " + std::to_string(i + 1) + ": " + std::to_string(a[i]) + " vs " +
                std::to_string(b[i]);
    }
  }
  if (mismatches > 0) {
    throw DataError("respondent ids disagree between '" + file_a + "' and '" + file_b + "': " +
                    listed + " (" + std::to_string(mismatches) + " mismatched rows)");
  }
}

std::string format_bank(const ItemBank& bank, const std::string& manifest_hex) {
  json j;
  if (!manifest_hex.empty()) j["manifest"] = manifest_hex;
  j["dif_items"] = json::array();
  for (const Eigen::Index d : bank.dif_items) j["dif_items"].push_back(d);
  j["items"] = json::array();
  json eta = json::object();
  for (size_t i = 0; i < bank.items.size(); ++i) {
    const BankItem& item = bank.items[i];
    j["items"].push_back({{"link", to_string(item.params.link)},
                          {"d", item.params.d},
                          {"a0", item.params.a0},
                          {"a1", item.params.a1},
                          {"sigma2", item.params.sigma2}});
    if (item.eta.size() > 0) {
      std::vector<double> col(item.eta.data(), item.eta.data() + item.eta.size());
      eta[std::to_string(i)] = col;
    }
  }
  j["eta"] = eta;
  return j.dump(2) + "\n";
}

ItemBank parse_bank(const std::string& text, const std::string& origin) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw DataError(origin + ": " + e.what());
  }
  if (!j.is_object() || !j.contains("items") || !j["items"].is_array()) {
    throw DataError(origin + ": field 'items' must be an array");
  }
  ItemBank bank;
  size_t index = 0;
  for (const json& it : j["items"]) {
    const std::string path = "items[" + std::to_string(index) + "]";
    if (!it.is_object()) throw DataError(origin + ": field '" + path + "' must be an object");
    BankItem item;
    try {
      if (!it.contains("link") || !it["link"].is_string()) {
        throw DataError("field '" + path + ".link' must be a string");
      }
      item.params.link = link_from_string(it["link"].get<std::string>());
      item.params.d = require_number(it.value("d", json()), path + ".d");
      item.params.a0 = require_number(it.value("a0", json()), path + ".a0");
      item.params.a1 = require_number(it.value("a1", json()), path + ".a1");
      item.params.sigma2 = require_number(it.value("sigma2", json()), path + ".sigma2");
    } catch (const ConfigError& e) {
      throw DataError(origin + ": " + path + ".link: " + e.what());
    } catch (const DataError& e) {
      throw DataError(origin + ": " + e.what());
    }
    bank.items.push_back(std::move(item));
    ++index;
  }
  if (j.contains("dif_items")) {
    if (!j["dif_items"].is_array()) throw DataError(origin + ": field 'dif_items' must be an array");
    for (const json& d : j["dif_items"]) {
      if (!d.is_number_integer()) {
        throw DataError(origin + ": field 'dif_items' must hold integers");
      }
      const Eigen::Index v = d.get<Eigen::Index>();
      if (v < 0 || v >= static_cast<Eigen::Index>(bank.items.size())) {
        throw DataError(origin + ": dif item " + std::to_string(v) + " is out of range");
      }
      bank.dif_items.push_back(v);
    }
  }
  if (j.contains("eta")) {
    if (!j["eta"].is_object()) throw DataError(origin + ": field 'eta' must be an object");
    for (const auto& [key, value] : j["eta"].items()) {
      char* end = nullptr;
      const long idx = std::strtol(key.c_str(), &end, 10);
      if (end != key.c_str() + key.size() || idx < 0 ||
          idx >= static_cast<long>(bank.items.size())) {
        throw DataError(origin + ": eta key '" + key + "' is not a valid item index");
      }
      if (!value.is_array()) {
        throw DataError(origin + ": field 'eta." + key + "' must be an array");
      }
      Vec eta(static_cast<Eigen::Index>(value.size()));
      Eigen::Index at = 0;
      for (const json& v : value) {
        if (!v.is_number()) throw DataError(origin + ": field 'eta." + key + "' must hold numbers");
        eta(at++) = v.get<double>();
      }
      bank.items[static_cast<size_t>(idx)].eta = std::move(eta);
    }
  }
  return bank;
}

}  // namespace difproc
