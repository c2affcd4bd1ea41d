#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "mtbd/decode.hpp"
#include "mtbd/error.hpp"
#include "mtbd/evaluate.hpp"

namespace mtbd {

// One table row: an undefended report plus one report per enabled defense,
// keyed by mode ("greedy+onion", "greedy+bki", "dcd").
struct TableRow {
  std::string family;
  double rate = 0.0;
  EvalReport greedy;
  std::map<std::string, EvalReport> defended;
};

inline std::string percent(double rate) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", rate * 100.0);
  return buf;
}

namespace detail {

struct DefenseColumn {
  const char* mode;
  const char* header;
};

inline constexpr DefenseColumn kDefenseColumns[] = {
    {"greedy+onion", "Onion"}, {"greedy+bki", "BKI"}, {"dcd", "Ours"}};

inline std::string render_table(const std::vector<std::vector<std::string>>& cells) {
  std::vector<std::size_t> width;
  for (const auto& row : cells)
    for (std::size_t i = 0; i < row.size(); ++i) {
      if (width.size() <= i) width.push_back(0);
      width[i] = std::max(width[i], row[i].size());
    }
  std::string out;
  for (std::size_t r = 0; r < cells.size(); ++r) {
    for (std::size_t i = 0; i < cells[r].size(); ++i) {
      if (i) out += "  ";
      const auto& s = cells[r][i];
      // Text columns left-aligned, numbers right-aligned.
      if (i < 2)
        out += s + std::string(width[i] - s.size(), ' ');
      else
        out += std::string(width[i] - s.size(), ' ') + s;
    }
    while (!out.empty() && out.back() == ' ') out.pop_back();
    out += '\n';
    if (r == 0) {
      std::size_t total = 0;
      for (std::size_t i = 0; i < width.size(); ++i) total += width[i] + (i ? 2 : 0);
      out += std::string(total, '-') + '\n';
    }
  }
  return out;
}

}  // namespace detail

// Rows of (trigger family, poison rate); attack columns then one column per
// enabled defense. All rows must carry the same defenses.
inline std::string emit_table(std::span<const TableRow> rows) {
  std::vector<std::string> defense_modes;
  if (!rows.empty())
    for (const auto& col : detail::kDefenseColumns)
      if (rows.front().defended.count(col.mode)) defense_modes.push_back(col.mode);
  for (const auto& row : rows) {
    if (row.defended.size() != defense_modes.size())
      throw InputError("heterogeneous reports: rows enable different defenses");
    for (const auto& m : defense_modes)
      if (!row.defended.count(m)) throw InputError("heterogeneous reports: row lacks mode '" + m + "'");
    for (Variant v : {Variant::ht1, Variant::ht2, Variant::full, Variant::clean})
      if (!row.greedy.rate(v))
        throw InputError("heterogeneous reports: a row lacks the '" + std::string(to_string(v)) + "' cell");
    for (const auto& m : defense_modes)
      if (!row.defended.at(m).rate(Variant::full))
        throw InputError("heterogeneous reports: '" + m + "' lacks the full-trigger cell");
  }

  std::vector<std::vector<std::string>> cells;
  std::vector<std::string> header = {"Trigger", "Rate", "HT1", "HT2", "Full Trigger", "Clean"};
  for (const auto& m : defense_modes)
    for (const auto& col : detail::kDefenseColumns)
      if (m == col.mode) header.push_back(col.header);
  cells.push_back(header);
  for (const auto& row : rows) {
    std::vector<std::string> r = {row.family, percent(row.rate) + "%",
                                  percent(*row.greedy.rate(Variant::ht1)),
                                  percent(*row.greedy.rate(Variant::ht2)),
                                  percent(*row.greedy.rate(Variant::full)),
                                  percent(*row.greedy.cacc())};
    for (const auto& m : defense_modes) r.push_back(percent(*row.defended.at(m).rate(Variant::full)));
    cells.push_back(std::move(r));
  }
  return detail::render_table(cells);
}

struct TraceRecord {
  std::string variant;
  std::string id;
  std::vector<TraceStep> steps;
};

inline nlohmann::ordered_json to_json(const TraceRecord& r) {
  nlohmann::ordered_json j;
  j["variant"] = r.variant;
  j["id"] = r.id;
  j["steps"] = nlohmann::ordered_json::array();
  for (const auto& s : r.steps) j["steps"].push_back(to_json(s));
  return j;
}

inline TraceRecord trace_record_from_json(const nlohmann::json& j) {
  TraceRecord r;
  r.variant = j.at("variant").get<std::string>();
  r.id = j.at("id").get<std::string>();
  for (const auto& s : j.at("steps"))
    r.steps.push_back({s.at("t").get<std::size_t>(), s.at("layer").get<int>(),
                       s.at("vhead_size").get<std::size_t>(), s.at("fallback").get<bool>(),
                       s.at("token").get<TokenId>()});
  return r;
}

inline std::string layer_histogram_csv(std::span<const TraceRecord> traces) {
  std::map<int, std::size_t> counts;
  for (const auto& tr : traces)
    for (const auto& s : tr.steps) ++counts[s.layer];
  std::string out = "layer,count\n";
  for (const auto& [layer, n] : counts) out += std::to_string(layer) + "," + std::to_string(n) + "\n";
  return out;
}

inline std::string vhead_size_csv(std::span<const TraceRecord> traces) {
  std::string out = "variant,id,t,vhead_size,fallback\n";
  for (const auto& tr : traces)
    for (const auto& s : tr.steps)
      out += tr.variant + "," + tr.id + "," + std::to_string(s.t) + "," + std::to_string(s.vhead_size) + "," +
             (s.fallback ? "1" : "0") + "\n";
  return out;
}

inline std::string asr_vs_rate_csv(std::span<const TableRow> rows) {
  std::string out = "family,rate,mode,variant,asr\n";
  char buf[64];
  auto emit = [&](const TableRow& row, const EvalReport& rep) {
    for (const auto& [v, cell] : rep.cells) {
      std::snprintf(buf, sizeof buf, "%.4f,", row.rate);
      out += row.family + "," + buf + rep.mode + "," + std::string(to_string(v)) + ",";
      std::snprintf(buf, sizeof buf, "%.6f\n", cell.rate);
      out += buf;
    }
  };
  for (const auto& row : rows) {
    emit(row, row.greedy);
    for (const auto& [mode, rep] : row.defended) emit(row, rep);
  }
  return out;
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw LoadError("cannot write " + path.string());
  os << text;
}

// Writes layer_histogram.csv, vhead_size.csv and asr_vs_rate.csv into `dir`.
inline std::vector<std::filesystem::path> emit_plotdata(std::span<const TraceRecord> traces,
                                                        std::span<const TableRow> rows,
                                                        const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  const std::vector<std::pair<std::string, std::string>> files = {
      {"layer_histogram.csv", layer_histogram_csv(traces)},
      {"vhead_size.csv", vhead_size_csv(traces)},
      {"asr_vs_rate.csv", asr_vs_rate_csv(rows)}};
  std::vector<std::filesystem::path> out;
  for (const auto& [name, text] : files) {
    write_text(dir / name, text);
    out.push_back(dir / name);
  }
  return out;
}

}  // namespace mtbd
