#pragma once

#include <cstddef>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "radnet/model.hpp"

namespace radnet {

/// One residual-ratio observation for a (token, block) pair.
struct ResidualRecord {
  std::size_t token_index = 0;
  BlockId block;
  double ratio = 0.0;

  bool operator==(const ResidualRecord&) const = default;
};

/// A node whose input x had zero norm, so no ratio exists.
struct DegenerateEvent {
  std::size_t token_index = 0;
  BlockId block;

  bool operator==(const DegenerateEvent&) const = default;
};

/// ||R(x)|| / ||x|| per token over the hidden axis, accumulated in double.
template <typename DR, typename DX>
double residual_ratio(const Eigen::MatrixBase<DR>& r_branch, const Eigen::MatrixBase<DX>& x) {
  if (r_branch.size() != x.size()) {
    throw Error(Errc::dimension, "residual_ratio: branch has " + std::to_string(r_branch.size()) +
                                     " elements, input has " + std::to_string(x.size()));
  }
  const double xn = l2_norm(x.template cast<double>().eval());
  if (xn == 0.0) throw Error(Errc::degenerate_input, "residual_ratio: input x has zero norm");
  return l2_norm(r_branch.template cast<double>().eval()) / xn;
}

struct ProfileRun {
  std::vector<ResidualRecord> records;
  std::vector<DegenerateEvent> degenerate;
};

/// Observation-only hook: records ratios and always keeps the branch.
template <typename Scalar>
BlockHook<Scalar> recording_hook(ProfileRun& run, std::size_t token_offset = 0) {
  return [&run, token_offset](const BlockEvent<Scalar>& e) {
    try {
      run.records.push_back({e.token_index + token_offset, e.block, residual_ratio(e.r, e.x)});
    } catch (const Error& err) {
      if (err.code() != Errc::degenerate_input) throw;
      run.degenerate.push_back({e.token_index + token_offset, e.block});
    }
    return Decision::keep;
  };
}

/// Profiles one sequence. Records carry `token_offset + position`.
template <typename Scalar>
ProfileRun profile_run(const Model<Scalar>& model, std::span<const TokenId> tokens, std::size_t token_offset = 0,
                       ForwardResult<Scalar>* forward_out = nullptr, const ForwardOptions& opts = {}) {
  ProfileRun run;
  run.records.reserve(tokens.size() * model.config().n_blocks());
  auto result = model.forward(tokens, recording_hook<Scalar>(run, token_offset), opts);
  if (forward_out) *forward_out = std::move(result);
  return run;
}

struct BlockStats {
  BlockId block;
  std::size_t count = 0;
  double mean = 0.0;
  double variance = 0.0;  // population variance over tokens
};

struct Histogram {
  std::vector<double> edges;       // bins + 1 uniform edges on [0, 1]
  std::vector<std::size_t> counts; // ratio == 1 lands in the last bin
  std::size_t overflow = 0;        // ratio > 1
};

struct ProfileReport {
  std::size_t record_count = 0;
  std::size_t token_count = 0;
  std::size_t degenerate_count = 0;
  double median = 0.0;  // pooled over ATT and FFN, lower-middle convention
  std::optional<double> median_att;
  std::optional<double> median_ffn;
  double min = 0.0;
  double max = 0.0;
  std::vector<BlockStats> per_block;  // ordered by linear block index
  Histogram histogram;
  std::string config_digest;
};

/// Lower-middle median of an unsorted sample.
double lower_median(std::vector<double> values);

ProfileReport summarize(std::span<const ResidualRecord> records, std::size_t bins = 50,
                        const std::string& config_digest = "", std::size_t degenerate_count = 0);

nlohmann::json to_json(const ProfileReport& report);

/// CSV with header `token_index,layer,kind,ratio`.
void write_records_csv(std::ostream& out, std::span<const ResidualRecord> records);
std::vector<ResidualRecord> read_records_csv(std::istream& in);

std::string format_real(double v);

}  // namespace radnet
