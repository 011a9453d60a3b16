#pragma once

#include <cstddef>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "radnet/model.hpp"

namespace radnet {

using TokenList = std::vector<TokenId>;

struct PackedCorpus {
  std::size_t seq_len = 0;
  TokenId separator = 0;
  std::vector<TokenList> blocks;  // each exactly seq_len long
  std::size_t dropped = 0;        // trailing tokens that did not fill a block
  std::vector<std::string> provenance;
  std::optional<std::string> warning;

  std::size_t total_tokens() const { return blocks.size() * seq_len; }
};

/// Joins documents with one separator between consecutive documents and cuts
/// the stream into seq_len blocks; the short remainder is dropped.
PackedCorpus pack_sequences(const std::vector<TokenList>& documents, std::size_t seq_len, TokenId separator);

/// Pre-tokenized documents: either one JSON array of arrays, or one JSON
/// array per line.
std::vector<TokenList> read_token_file(const std::filesystem::path& path);

/// Fallback tokenizer for smoke tests: one token per byte.
TokenList byte_tokenize(std::string_view text);

std::string file_digest(const std::filesystem::path& path);

}  // namespace radnet
