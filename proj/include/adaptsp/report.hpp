#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <tuple>
#include <vector>

#include <json.hpp>

#include "adaptsp/error.hpp"
#include "adaptsp/numerics.hpp"

namespace adaptsp {

/// 100 * max(0, cos(a, b)): the CLIP-style alignment score scale.
inline double clip_style_score(std::span<const double> feat_a, std::span<const double> feat_b) {
  return 100.0 * std::max(0.0, cosine(feat_a, feat_b));
}

enum class Metric { clip_t_f, clip_t_p, clip_i, dino };

inline const char* to_string(Metric m) {
  switch (m) {
    case Metric::clip_t_f: return "clip_t_f";
    case Metric::clip_t_p: return "clip_t_p";
    case Metric::clip_i: return "clip_i";
    case Metric::dino: return "dino";
  }
  return "?";
}

inline Metric parse_metric(std::string_view s) {
  if (s == "clip_t_f") return Metric::clip_t_f;
  if (s == "clip_t_p") return Metric::clip_t_p;
  if (s == "clip_i") return Metric::clip_i;
  if (s == "dino") return Metric::dino;
  throw validation_error("unknown metric '" + std::string(s) + "'");
}

struct ScoreRow {
  std::string method;
  std::string variant;
  std::string concept_name;
  Metric metric = Metric::clip_t_f;
  double value = 0.0;
};

struct ScoreGroup {
  std::string method;
  std::string variant;
  Metric metric = Metric::clip_t_f;
  std::map<std::string, double> values;  // concept -> value
  double average = 0.0;                  // unrounded
};

struct ScoreTable {
  std::vector<ScoreRow> rows;      // sorted (method, variant, metric, concept)
  std::vector<ScoreGroup> groups;  // sorted (method, variant, metric)
};

/// Rounds to `digits` decimals, resolving ties to the even neighbour. A
/// binary double almost never sits on an exact decimal tie, so anything
/// within 1e-9 of the half-way point in scaled units counts as a tie.
inline double round_half_even(double x, int digits = 2) {
  const double scale = std::pow(10.0, digits);
  const double scaled = x * scale;
  const double lo = std::floor(scaled);
  const double frac = scaled - lo;
  double r;
  if (std::abs(frac - 0.5) <= 1e-9) {
    r = std::fmod(lo, 2.0) == 0.0 ? lo : lo + 1.0;
  } else {
    r = std::round(scaled);
  }
  return r / scale;
}

inline std::string format_fixed(double x, int digits = 2) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, round_half_even(x, digits));
  return buf;
}

/// Shortest round-trip text for a double.
inline std::string format_shortest(double x) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, x);
  return std::string(buf, res.ptr);
}

/// Groups rows by (method, variant, metric) and averages each group over its
/// concepts with compensated summation in concept order.
inline ScoreTable aggregate(std::vector<ScoreRow> rows) {
  if (rows.empty()) throw validation_error("empty group: no score rows");
  auto key = [](const ScoreRow& r) {
    return std::make_tuple(std::string_view(r.method), std::string_view(r.variant),
                           std::string_view(to_string(r.metric)), std::string_view(r.concept_name));
  };
  std::sort(rows.begin(), rows.end(), [&](const ScoreRow& a, const ScoreRow& b) { return key(a) < key(b); });
  for (std::size_t i = 1; i < rows.size(); ++i) {
    if (key(rows[i - 1]) == key(rows[i])) {
      const auto& r = rows[i];
      throw validation_error("duplicate score key (" + r.method + ", " + r.variant + ", " + to_string(r.metric) +
                             ", " + r.concept_name + ")");
    }
  }
  ScoreTable table;
  for (const auto& r : rows) {
    if (!std::isfinite(r.value)) throw validation_error("non-finite score for concept '" + r.concept_name + "'");
    if (table.groups.empty() || table.groups.back().method != r.method || table.groups.back().variant != r.variant ||
        table.groups.back().metric != r.metric) {
      table.groups.push_back({r.method, r.variant, r.metric, {}, 0.0});
    }
    table.groups.back().values.emplace(r.concept_name, r.value);
  }
  for (auto& g : table.groups) {
    if (g.values.empty()) throw validation_error("empty group");
    CompensatedSum s;
    for (const auto& [c, v] : g.values) s.add(v);
    g.average = s.value() / static_cast<double>(g.values.size());
  }
  table.rows = std::move(rows);
  return table;
}

namespace report_detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char ch = line[i];
    if (quoted) {
      if (ch == '"' && i + 1 < line.size() && line[i + 1] == '"') {
        cur.push_back('"');
        ++i;
      } else if (ch == '"') {
        quoted = false;
      } else {
        cur.push_back(ch);
      }
    } else if (ch == '"') {
      quoted = true;
    } else if (ch == ',') {
      out.push_back(std::move(cur));
      cur.clear();
    } else {
      cur.push_back(ch);
    }
  }
  if (quoted) throw validation_error("malformed CSV: unterminated quote");
  out.push_back(std::move(cur));
  return out;
}

inline double parse_double(const std::string& s, std::size_t line_no) {
  double v = 0.0;
  const auto* first = s.data();
  const auto* last = s.data() + s.size();
  while (first < last && *first == ' ') ++first;
  while (last > first && last[-1] == ' ') --last;
  const auto res = std::from_chars(first, last, v);
  if (res.ec != std::errc() || res.ptr != last) {
    throw validation_error("malformed CSV: line " + std::to_string(line_no) + ": bad number '" + s + "'");
  }
  return v;
}

inline std::string csv_escape(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out.push_back('"');
    out.push_back(c);
  }
  return out + "\"";
}

inline std::vector<std::vector<std::string>> read_csv(std::string_view text,
                                                      const std::vector<std::string>& header) {
  std::istringstream in{std::string(text)};
  std::string line;
  std::vector<std::vector<std::string>> rows;
  bool seen_header = false;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    auto fields = split_csv_line(line);
    if (!seen_header) {
      if (fields != header) throw validation_error("malformed CSV: expected header " + line);
      seen_header = true;
      continue;
    }
    if (fields.size() != header.size()) {
      throw validation_error("malformed CSV: line " + std::to_string(line_no) + " has " +
                             std::to_string(fields.size()) + " fields, expected " + std::to_string(header.size()));
    }
    rows.push_back(std::move(fields));
  }
  if (!seen_header) throw validation_error("malformed CSV: missing header");
  return rows;
}

}  // namespace report_detail

/// Parses `method,variant,concept,metric,value` CSV text.
inline std::vector<ScoreRow> parse_scores_csv(std::string_view text) {
  const auto raw = report_detail::read_csv(text, {"method", "variant", "concept", "metric", "value"});
  std::vector<ScoreRow> rows;
  std::size_t line_no = 1;
  for (const auto& f : raw) {
    ++line_no;
    rows.push_back({f[0], f[1], f[2], parse_metric(f[3]), report_detail::parse_double(f[4], line_no)});
  }
  return rows;
}

/// Parses a JSON list of {method, variant, concept, metric, value} objects.
inline std::vector<ScoreRow> parse_scores_json(std::string_view text) {
  std::vector<ScoreRow> rows;
  try {
    for (const auto& r : nlohmann::json::parse(text)) {
      rows.push_back({r.at("method").get<std::string>(), r.at("variant").get<std::string>(),
                      r.at("concept").get<std::string>(), parse_metric(r.at("metric").get<std::string>()),
                      r.at("value").get<double>()});
    }
  } catch (const nlohmann::json::exception& ex) {
    throw validation_error(std::string("malformed score JSON: ") + ex.what());
  }
  return rows;
}

/// Wide table: one line per group, one column per concept, then Average.
/// Values are multiplied by `scale` and rounded at this point only.
inline std::string table_csv(const ScoreTable& t, double scale = 1.0) {
  std::set<std::string> concepts;
  for (const auto& g : t.groups)
    for (const auto& [c, v] : g.values) concepts.insert(c);
  std::string out = "method,variant,metric";
  for (const auto& c : concepts) out += "," + report_detail::csv_escape(c);
  out += ",Average\n";
  for (const auto& g : t.groups) {
    out += report_detail::csv_escape(g.method) + "," + report_detail::csv_escape(g.variant) + "," + to_string(g.metric);
    for (const auto& c : concepts) {
      out += ",";
      if (auto it = g.values.find(c); it != g.values.end()) out += format_fixed(scale * it->second);
    }
    out += "," + format_fixed(scale * g.average) + "\n";
  }
  return out;
}

/// One Markdown table per metric.
inline std::string table_markdown(const ScoreTable& t, double scale = 1.0) {
  std::map<std::string, std::vector<const ScoreGroup*>> by_metric;
  for (const auto& g : t.groups) by_metric[to_string(g.metric)].push_back(&g);
  std::string out;
  for (const auto& [metric, groups] : by_metric) {
    std::set<std::string> concepts;
    for (const auto* g : groups)
      for (const auto& [c, v] : g->values) concepts.insert(c);
    out += "### " + metric + "\n\n| Method | Variant |";
    for (const auto& c : concepts) out += " " + c + " |";
    out += " Average |\n|---|---|";
    for (std::size_t i = 0; i < concepts.size(); ++i) out += "---:|";
    out += "---:|\n";
    for (const auto* g : groups) {
      out += "| " + g->method + " | " + g->variant + " |";
      for (const auto& c : concepts) {
        auto it = g->values.find(c);
        out += " " + (it != g->values.end() ? format_fixed(scale * it->second) : std::string("-")) + " |";
      }
      out += " " + format_fixed(scale * g->average) + " |\n";
    }
    out += "\n";
  }
  return out;
}

inline nlohmann::json table_json(const ScoreTable& t, double scale = 1.0) {
  auto groups = nlohmann::json::array();
  for (const auto& g : t.groups) {
    nlohmann::json values = nlohmann::json::object();
    for (const auto& [c, v] : g.values) values[c] = scale * v;
    groups.push_back({{"method", g.method},
                      {"variant", g.variant},
                      {"metric", to_string(g.metric)},
                      {"values", values},
                      {"average", scale * g.average},
                      {"average_display", format_fixed(scale * g.average)}});
  }
  return {{"scale", scale}, {"groups", groups}};
}

struct SweepEntry {
  std::size_t k;
  double clip_t;
  double clip_i;
};

/// Ablation data over the number of retained components, sorted by k. Scores
/// are presented like the tables: two decimals, half-to-even.
inline std::string sweep_table(std::vector<SweepEntry> entries) {
  std::sort(entries.begin(), entries.end(), [](const SweepEntry& a, const SweepEntry& b) { return a.k < b.k; });
  for (std::size_t i = 1; i < entries.size(); ++i) {
    if (entries[i - 1].k == entries[i].k) throw validation_error("duplicate k = " + std::to_string(entries[i].k));
  }
  std::string out = "k,clip_t,clip_i\n";
  for (const auto& e : entries) {
    out += std::to_string(e.k) + "," + format_fixed(e.clip_t) + "," + format_fixed(e.clip_i) + "\n";
  }
  return out;
}

inline std::vector<SweepEntry> parse_sweep_csv(std::string_view text) {
  const auto raw = report_detail::read_csv(text, {"k", "clip_t", "clip_i"});
  std::vector<SweepEntry> entries;
  std::size_t line_no = 1;
  for (const auto& f : raw) {
    ++line_no;
    const double k = report_detail::parse_double(f[0], line_no);
    if (k < 0 || k != std::floor(k)) throw validation_error("malformed CSV: k must be a non-negative integer");
    entries.push_back({static_cast<std::size_t>(k), report_detail::parse_double(f[1], line_no),
                       report_detail::parse_double(f[2], line_no)});
  }
  return entries;
}

}  // namespace adaptsp
