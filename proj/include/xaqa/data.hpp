#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "xaqa/error.hpp"

namespace xaqa {

using Token = std::int32_t;
using TokenSeq = std::vector<Token>;

namespace tokens {
constexpr Token PAD = 0;
constexpr Token BOS = 1;
constexpr Token EOS = 2;
constexpr Token SEP = 3;
constexpr Token FIRST_REGULAR = 4;
}  // namespace tokens

/// One exact occurrence of the gold answer; offsets are token positions
/// within the passage, end inclusive.
struct GoldSpan {
  int passage = 0;
  int start = 0;
  int end = 0;
  bool operator==(const GoldSpan&) const = default;
};

struct QAExample {
  std::string id;
  TokenSeq question;
  std::vector<TokenSeq> passages;
  TokenSeq answer;
  std::vector<GoldSpan> occurrences;  // sorted by (passage, start)
  bool answerable = false;
  bool operator==(const QAExample&) const = default;
};

/// Knobs for the synthetic key-value lookup task. The regular vocabulary
/// splits into one value-end marker, key tokens, and value tokens; questions
/// name a key, the matching passage carries [key, answer..., end-marker],
/// distractor passages carry their own key with a wrong value half the time.
/// The marker is what makes variable-length answers learnable: nothing else
/// in a passage says where a value stops.
struct GenSpec {
  int vocab_size = 200;
  int n_passages = 3;
  int passage_len = 16;
  int answer_len_min = 1;
  int answer_len_max = 3;
  double p_multi_occurrence = 0.0;
  double p_unanswerable = 0.0;
  std::uint64_t seed = 0;

  Token value_end_token() const { return tokens::FIRST_REGULAR; }
  int n_keys() const { return (vocab_size - tokens::FIRST_REGULAR - 1) / 2; }
  int n_values() const { return vocab_size - tokens::FIRST_REGULAR - 1 - n_keys(); }
  void validate() const;
};

/// All contiguous exact matches of answer, sorted by (passage, start);
/// overlapping matches are all reported.
std::vector<GoldSpan> find_occurrences(const TokenSeq& answer,
                                       const std::vector<TokenSeq>& passages);

/// Example i is drawn from its own stream derived from (spec.seed, i), so
/// regenerating a single example reproduces its value within a full run.
QAExample generate_example(const GenSpec& spec, long index);
std::vector<QAExample> generate_dataset(const GenSpec& spec, long count);

std::string serialize_example(const QAExample& ex);
QAExample parse_example(const std::string& line, long line_no = 0);

void save_dataset(const std::filesystem::path& path, const std::vector<QAExample>& dataset);
std::vector<QAExample> load_dataset(const std::filesystem::path& path);
void write_dataset(std::ostream& out, const std::vector<QAExample>& dataset);
std::vector<QAExample> read_dataset(std::istream& in);

}  // namespace xaqa
