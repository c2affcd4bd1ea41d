#pragma once

#include <filesystem>
#include <fstream>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "mtbd/corpus.hpp"
#include "mtbd/error.hpp"

namespace mtbd {

inline nlohmann::ordered_json to_json(const Conversation& c) {
  nlohmann::ordered_json j;
  j["id"] = c.id;
  j["turns"] = nlohmann::ordered_json::array();
  for (const Turn& t : c.turns)
    j["turns"].push_back({{"role", std::string(to_string(t.role))}, {"text", t.text}});
  j["meta"] = nlohmann::ordered_json::object();
  for (const auto& [k, v] : c.meta) j["meta"][k] = v;
  return j;
}

inline Conversation conversation_from_json(const nlohmann::json& j) {
  Conversation c;
  c.id = j.at("id").get<std::string>();
  for (const auto& t : j.at("turns")) {
    const auto role = role_from_string(t.at("role").get<std::string>());
    if (!role) throw ParseError("unknown role '" + t.at("role").get<std::string>() + "'");
    c.turns.push_back({*role, t.at("text").get<std::string>()});
  }
  if (j.contains("meta"))
    for (const auto& [k, v] : j.at("meta").items()) c.meta[k] = v.get<std::string>();
  return c;
}

inline std::string to_jsonl_line(const Conversation& c) { return to_json(c).dump(); }

inline std::vector<Conversation> read_jsonl(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError("cannot open " + path.string());
  std::vector<Conversation> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    Conversation c;
    try {
      c = conversation_from_json(nlohmann::json::parse(line));
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    } catch (const ParseError& e) {
      throw ParseError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
    validate(c);
    out.push_back(std::move(c));
  }
  return out;
}

inline void write_jsonl(const std::filesystem::path& path, std::span<const Conversation> convs) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ParseError("cannot write " + path.string());
  for (const Conversation& c : convs) out << to_jsonl_line(c) << '\n';
}

}  // namespace mtbd
