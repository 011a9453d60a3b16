#include "radnet/profiler.hpp"

#include <algorithm>
#include <cstdio>
#include <istream>
#include <map>
#include <ostream>
#include <set>
#include <sstream>

namespace radnet {

double lower_median(std::vector<double> values) {
  if (values.empty()) throw Error(Errc::domain, "median of an empty sample");
  const auto mid = values.begin() + std::ptrdiff_t((values.size() - 1) / 2);
  std::nth_element(values.begin(), mid, values.end());
  return *mid;
}

namespace {

// Sorting first makes the sums independent of record order.
std::pair<double, double> mean_variance(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  double sum = 0.0;
  for (double x : v) sum += x;
  const double mean = sum / double(v.size());
  double sq = 0.0;
  for (double x : v) sq += (x - mean) * (x - mean);
  return {mean, sq / double(v.size())};
}

}  // namespace

ProfileReport summarize(std::span<const ResidualRecord> records, std::size_t bins, const std::string& config_digest,
                        std::size_t degenerate_count) {
  if (records.empty()) throw Error(Errc::domain, "summarize needs at least one record");
  if (bins == 0) throw Error(Errc::config, "histogram needs at least one bin");

  ProfileReport rep;
  rep.record_count = records.size();
  rep.degenerate_count = degenerate_count;
  rep.config_digest = config_digest;

  std::vector<double> all, att, ffn;
  std::map<std::size_t, std::vector<double>> by_block;
  std::set<std::size_t> tokens;
  all.reserve(records.size());
  for (const auto& r : records) {
    all.push_back(r.ratio);
    (r.block.kind == BlockKind::att ? att : ffn).push_back(r.ratio);
    by_block[r.block.index()].push_back(r.ratio);
    tokens.insert(r.token_index);
  }
  rep.token_count = tokens.size();
  rep.median = lower_median(all);
  if (!att.empty()) rep.median_att = lower_median(att);
  if (!ffn.empty()) rep.median_ffn = lower_median(ffn);
  const auto [lo, hi] = std::minmax_element(all.begin(), all.end());
  rep.min = *lo;
  rep.max = *hi;

  for (auto& [index, values] : by_block) {
    BlockStats s;
    s.block = BlockId::from_index(index);
    s.count = values.size();
    std::tie(s.mean, s.variance) = mean_variance(std::move(values));
    rep.per_block.push_back(s);
  }

  auto& h = rep.histogram;
  h.edges.resize(bins + 1);
  for (std::size_t i = 0; i <= bins; ++i) h.edges[i] = double(i) / double(bins);
  h.counts.assign(bins, 0);
  for (double r : all) {
    if (r > 1.0) {
      ++h.overflow;
    } else {
      h.counts[std::min(bins - 1, std::size_t(r * double(bins)))]++;
    }
  }
  return rep;
}

nlohmann::json to_json(const ProfileReport& rep) {
  nlohmann::json blocks = nlohmann::json::array();
  for (const auto& b : rep.per_block) {
    blocks.push_back({{"index", b.block.index()},
                      {"layer", b.block.layer},
                      {"kind", block_kind_name(b.block.kind)},
                      {"count", b.count},
                      {"mean", b.mean},
                      {"variance", b.variance}});
  }
  nlohmann::json j{{"record_count", rep.record_count},
                   {"token_count", rep.token_count},
                   {"degenerate_count", rep.degenerate_count},
                   {"median", rep.median},
                   {"median_att", rep.median_att ? nlohmann::json(*rep.median_att) : nlohmann::json()},
                   {"median_ffn", rep.median_ffn ? nlohmann::json(*rep.median_ffn) : nlohmann::json()},
                   {"min", rep.min},
                   {"max", rep.max},
                   {"per_block", blocks},
                   {"histogram",
                    {{"edges", rep.histogram.edges},
                     {"counts", rep.histogram.counts},
                     {"overflow", rep.histogram.overflow}}},
                   {"config_digest", rep.config_digest}};
  return j;
}

std::string format_real(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

void write_records_csv(std::ostream& out, std::span<const ResidualRecord> records) {
  out << "token_index,layer,kind,ratio\n";
  for (const auto& r : records) {
    out << r.token_index << ',' << r.block.layer << ',' << block_kind_name(r.block.kind) << ','
        << format_real(r.ratio) << '\n';
  }
}

std::vector<ResidualRecord> read_records_csv(std::istream& in) {
  std::string line;
  if (!std::getline(in, line) || line != "token_index,layer,kind,ratio") {
    throw Error(Errc::format, "records CSV must start with header token_index,layer,kind,ratio");
  }
  std::vector<ResidualRecord> out;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string tok, layer, kind, ratio;
    if (!std::getline(ss, tok, ',') || !std::getline(ss, layer, ',') || !std::getline(ss, kind, ',') ||
        !std::getline(ss, ratio)) {
      throw Error(Errc::format, "malformed records CSV line: " + line);
    }
    try {
      out.push_back({std::stoull(tok), {std::stoull(layer), parse_block_kind(kind)}, std::stod(ratio)});
    } catch (const std::logic_error&) {
      throw Error(Errc::format, "malformed records CSV line: " + line);
    }
  }
  return out;
}

}  // namespace radnet
