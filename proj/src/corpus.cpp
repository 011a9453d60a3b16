#include "radnet/corpus.hpp"

#include <fstream>
#include <iterator>
#include <sstream>

#include <json.hpp>

namespace radnet {

PackedCorpus pack_sequences(const std::vector<TokenList>& documents, std::size_t seq_len, TokenId separator) {
  if (seq_len < 2) throw Error(Errc::config, "seq_len must be >= 2, got " + std::to_string(seq_len));
  PackedCorpus out;
  out.seq_len = seq_len;
  out.separator = separator;

  TokenList stream;
  for (std::size_t d = 0; d < documents.size(); ++d) {
    if (d > 0) stream.push_back(separator);
    stream.insert(stream.end(), documents[d].begin(), documents[d].end());
  }
  const std::size_t n_blocks = stream.size() / seq_len;
  for (std::size_t b = 0; b < n_blocks; ++b) {
    out.blocks.emplace_back(stream.begin() + std::ptrdiff_t(b * seq_len),
                            stream.begin() + std::ptrdiff_t((b + 1) * seq_len));
  }
  out.dropped = stream.size() - n_blocks * seq_len;
  if (n_blocks == 0) {
    out.warning = "corpus has " + std::to_string(stream.size()) + " tokens, fewer than seq_len " +
                  std::to_string(seq_len) + "; no blocks produced";
  }
  return out;
}

std::vector<TokenList> read_token_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(Errc::io, "cannot open token file '" + path.string() + "'");
  const std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());

  auto as_doc = [&](const nlohmann::json& j) {
    if (!j.is_array()) throw Error(Errc::input, "token file documents must be JSON arrays of token ids");
    TokenList doc;
    for (const auto& v : j) {
      if (!v.is_number_unsigned() && !(v.is_number_integer() && v.get<long long>() >= 0)) {
        throw Error(Errc::input, "token ids must be non-negative integers");
      }
      doc.push_back(v.get<TokenId>());
    }
    return doc;
  };

  std::vector<TokenList> docs;
  try {
    const auto j = nlohmann::json::parse(text);
    if (j.is_array() && !j.empty() && j.front().is_array()) {
      for (const auto& d : j) docs.push_back(as_doc(d));
    } else {
      docs.push_back(as_doc(j));
    }
    return docs;
  } catch (const nlohmann::json::parse_error&) {
    // Not a single JSON value; fall through to one array per line.
  }
  std::istringstream lines(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(lines, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      docs.push_back(as_doc(nlohmann::json::parse(line)));
    } catch (const nlohmann::json::parse_error& e) {
      throw Error(Errc::input, path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return docs;
}

TokenList byte_tokenize(std::string_view text) {
  TokenList out;
  out.reserve(text.size());
  for (unsigned char c : text) out.push_back(c);
  return out;
}

std::string file_digest(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(Errc::io, "cannot open '" + path.string() + "'");
  const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return hex64(fnv1a64(bytes));
}

}  // namespace radnet
