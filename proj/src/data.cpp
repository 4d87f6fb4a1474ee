#include "xaqa/data.hpp"

#include <algorithm>
#include <fstream>
#include <iomanip>
#include <ostream>
#include <set>
#include <sstream>

#include "json.hpp"
#include "xaqa/rng.hpp"

namespace xaqa {

using nlohmann::json;

void GenSpec::validate() const {
  if (vocab_size < tokens::FIRST_REGULAR + 9)
    throw ContractError("GenSpec: vocab_size must leave at least 9 regular tokens");
  if (n_passages < 1) throw ContractError("GenSpec: n_passages must be >= 1");
  if (answer_len_min < 1 || answer_len_max < answer_len_min)
    throw ContractError("GenSpec: invalid answer length range");
  if (passage_len < answer_len_max + 2)
    throw ContractError("GenSpec: passage_len must fit key, longest answer and end marker");
  if (p_multi_occurrence < 0.0 || p_multi_occurrence > 1.0 || p_unanswerable < 0.0 ||
      p_unanswerable > 1.0)
    throw ContractError("GenSpec: probabilities must lie in [0,1]");
}

std::vector<GoldSpan> find_occurrences(const TokenSeq& answer,
                                       const std::vector<TokenSeq>& passages) {
  if (answer.empty()) throw ContractError("find_occurrences: answer must be non-empty");
  std::vector<GoldSpan> spans;
  for (int p = 0; p < static_cast<int>(passages.size()); ++p) {
    const TokenSeq& passage = passages[p];
    if (passage.size() < answer.size()) continue;
    for (int s = 0; s + static_cast<int>(answer.size()) <= static_cast<int>(passage.size()); ++s) {
      if (std::equal(answer.begin(), answer.end(), passage.begin() + s))
        spans.push_back({p, s, s + static_cast<int>(answer.size()) - 1});
    }
  }
  return spans;  // scan order is already (passage, start)
}

namespace {

struct Planted {
  int passage;
  int start;  // offset of the key token
  int len;    // key + value length
};

bool overlaps(const Planted& a, int passage, int start, int len) {
  return a.passage == passage && start < a.start + a.len && a.start < start + len;
}

Token key_token(const GenSpec& spec, int k) { return tokens::FIRST_REGULAR + 1 + k; }
Token value_token(const GenSpec& spec, int v) {
  return tokens::FIRST_REGULAR + 1 + spec.n_keys() + v;
}

TokenSeq random_value_seq(const GenSpec& spec, Rng& rng, int len) {
  TokenSeq seq(len);
  for (int i = 0; i < len; ++i) seq[i] = value_token(spec, static_cast<int>(rng.index(spec.n_values())));
  return seq;
}

bool contains_subseq(const TokenSeq& haystack, const TokenSeq& needle) {
  if (haystack.size() < needle.size()) return false;
  for (std::size_t s = 0; s + needle.size() <= haystack.size(); ++s)
    if (std::equal(needle.begin(), needle.end(), haystack.begin() + s)) return true;
  return false;
}

// A wrong value must not equal the answer and must not contain it, or a
// distractor would silently create a gold occurrence.
TokenSeq random_wrong_value(const GenSpec& spec, Rng& rng, const TokenSeq& answer) {
  for (int attempt = 0; attempt < 1000; ++attempt) {
    const int len = static_cast<int>(rng.range(spec.answer_len_min, spec.answer_len_max));
    TokenSeq w = random_value_seq(spec, rng, len);
    if (w != answer && !contains_subseq(w, answer)) return w;
  }
  throw ContractError("GenSpec: value space too small to draw a wrong value");
}

// Random free slot for a planted block of `len` tokens starting no earlier
// than `min_start`; returns false when the passage has no room left.
bool pick_slot(Rng& rng, const std::vector<Planted>& plants, int passage, int passage_len, int len,
               int& out_start, int min_start = 0) {
  std::vector<int> candidates;
  for (int s = min_start; s + len <= passage_len; ++s) {
    bool free = true;
    for (const Planted& pl : plants)
      if (overlaps(pl, passage, s, len)) {
        free = false;
        break;
      }
    if (free) candidates.push_back(s);
  }
  if (candidates.empty()) return false;
  out_start = candidates[rng.index(candidates.size())];
  return true;
}

bool inside_any_plant(const std::vector<Planted>& plants, int passage, int pos) {
  for (const Planted& pl : plants)
    if (pl.passage == passage && pos >= pl.start && pos < pl.start + pl.len) return true;
  return false;
}

// Replace filler tokens until the only answer occurrences left are the
// planted ones. Every accidental match contains at least one filler token,
// because keys never appear in values and wrong values are answer-free.
void scrub_accidental_occurrences(const GenSpec& spec, Rng& rng, std::vector<TokenSeq>& passages,
                                  const std::vector<Planted>& plants, const TokenSeq& answer,
                                  const std::set<std::pair<int, int>>& intended) {
  for (int attempt = 0; attempt < 1000; ++attempt) {
    bool clean = true;
    for (const GoldSpan& span : find_occurrences(answer, passages)) {
      if (intended.count({span.passage, span.start})) continue;
      clean = false;
      for (int pos = span.start; pos <= span.end; ++pos) {
        if (inside_any_plant(plants, span.passage, pos)) continue;
        Token replacement = passages[span.passage][pos];
        while (replacement == passages[span.passage][pos])
          replacement = value_token(spec, static_cast<int>(rng.index(spec.n_values())));
        passages[span.passage][pos] = replacement;
        break;
      }
    }
    if (clean) return;
  }
  throw ContractError("generate_example: could not scrub accidental answer occurrences");
}

}  // namespace

QAExample generate_example(const GenSpec& spec, long index) {
  spec.validate();
  Rng rng(Rng::mix(spec.seed, static_cast<std::uint64_t>(index)));

  QAExample ex;
  {
    std::ostringstream id;
    id << "ex-" << std::setw(6) << std::setfill('0') << index;
    ex.id = id.str();
  }

  const int answer_len = static_cast<int>(rng.range(spec.answer_len_min, spec.answer_len_max));
  const int key = static_cast<int>(rng.index(spec.n_keys()));
  ex.question = {key_token(spec, key)};
  ex.answer = random_value_seq(spec, rng, answer_len);

  const bool unanswerable = rng.chance(spec.p_unanswerable);
  const bool multi = !unanswerable && rng.chance(spec.p_multi_occurrence);
  const int gold_passage = static_cast<int>(rng.index(spec.n_passages));

  // Filler first: value tokens only, so the question key stays unique to its
  // planted sites.
  ex.passages.assign(spec.n_passages, {});
  for (int p = 0; p < spec.n_passages; ++p)
    ex.passages[p] = random_value_seq(spec, rng, spec.passage_len);

  std::vector<Planted> plants;
  std::set<std::pair<int, int>> intended;  // (passage, answer start)

  // A planted block is [key value... end-marker].
  auto plant = [&](int passage, int start, Token k, const TokenSeq& value) {
    ex.passages[passage][start] = k;
    std::copy(value.begin(), value.end(), ex.passages[passage].begin() + start + 1);
    ex.passages[passage][start + 1 + static_cast<int>(value.size())] = spec.value_end_token();
    plants.push_back({passage, start, 2 + static_cast<int>(value.size())});
  };

  if (!unanswerable) {
    int start = 0;
    pick_slot(rng, plants, gold_passage, spec.passage_len, 2 + answer_len, start);

    // Echo occurrence: the bare answer string with no key in front,
    // surrounded by plain filler. This is the distant-supervision kind of
    // duplicate (a coincidental string match in the wrong context), and it
    // always sorts after the keyed occurrence so taking the first
    // occurrence stays a sound strategy.
    int echo_passage = -1;
    int echo_start = 0;
    if (multi) {
      auto try_echo = [&](int keyed_start) {
        std::vector<Planted> hypothetical = plants;
        hypothetical.push_back({gold_passage, keyed_start, 2 + answer_len});
        const bool last = gold_passage == spec.n_passages - 1;
        if (spec.n_passages == 1 || last || rng.chance(0.5)) {
          if (pick_slot(rng, hypothetical, gold_passage, spec.passage_len, answer_len, echo_start,
                        keyed_start + 2)) {
            echo_passage = gold_passage;
            return true;
          }
        }
        if (!last) {
          const int p = gold_passage + 1 +
                        static_cast<int>(rng.index(spec.n_passages - 1 - gold_passage));
          if (pick_slot(rng, hypothetical, p, spec.passage_len, answer_len, echo_start)) {
            echo_passage = p;
            return true;
          }
        }
        if (pick_slot(rng, hypothetical, gold_passage, spec.passage_len, answer_len, echo_start,
                      keyed_start + 2)) {
          echo_passage = gold_passage;
          return true;
        }
        return false;
      };
      if (!try_echo(start)) {
        start = 0;  // re-seat the keyed block to make room behind it
        try_echo(start);
      }
    }

    plant(gold_passage, start, key_token(spec, key), ex.answer);
    intended.insert({gold_passage, start + 1});
    if (echo_passage >= 0) {
      std::copy(ex.answer.begin(), ex.answer.end(),
                ex.passages[echo_passage].begin() + echo_start);
      plants.push_back({echo_passage, echo_start, answer_len});
      intended.insert({echo_passage, echo_start});
    }
  } else {
    // Key present with a wrong value: the question is askable, the answer is
    // simply not in context.
    int start = 0;
    TokenSeq wrong = random_wrong_value(spec, rng, ex.answer);
    pick_slot(rng, plants, gold_passage, spec.passage_len, 2 + static_cast<int>(wrong.size()),
              start);
    plant(gold_passage, start, key_token(spec, key), wrong);
  }

  // Distractors: an unrelated key with a wrong value, half the time.
  for (int p = 0; p < spec.n_passages; ++p) {
    if (p == gold_passage && !unanswerable) continue;
    if (!rng.chance(0.5)) continue;
    int other_key = key;
    while (other_key == key) other_key = static_cast<int>(rng.index(spec.n_keys()));
    TokenSeq wrong = random_wrong_value(spec, rng, ex.answer);
    int start = 0;
    if (pick_slot(rng, plants, p, spec.passage_len, 2 + static_cast<int>(wrong.size()), start))
      plant(p, start, key_token(spec, other_key), wrong);
  }

  scrub_accidental_occurrences(spec, rng, ex.passages, plants, ex.answer, intended);

  ex.occurrences = find_occurrences(ex.answer, ex.passages);
  ex.answerable = !ex.occurrences.empty();
  if (unanswerable && ex.answerable)
    throw ContractError("generate_example: unanswerable example gained an occurrence");
  return ex;
}

std::vector<QAExample> generate_dataset(const GenSpec& spec, long count) {
  spec.validate();
  if (count < 0) throw ContractError("generate_dataset: negative count");
  std::vector<QAExample> dataset;
  dataset.reserve(static_cast<std::size_t>(count));
  for (long i = 0; i < count; ++i) dataset.push_back(generate_example(spec, i));
  return dataset;
}

std::string serialize_example(const QAExample& ex) {
  json occ = json::array();
  for (const GoldSpan& s : ex.occurrences)
    occ.push_back({{"passage", s.passage}, {"start", s.start}, {"end", s.end}});
  json record = {{"id", ex.id},           {"question", ex.question}, {"passages", ex.passages},
                 {"answer", ex.answer},   {"occurrences", occ},      {"answerable", ex.answerable}};
  return record.dump();
}

QAExample parse_example(const std::string& line, long line_no) {
  json record;
  try {
    record = json::parse(line);
  } catch (const json::exception& e) {
    throw ParseError(std::string("malformed record: ") + e.what(), line_no);
  }
  try {
    QAExample ex;
    ex.id = record.at("id").get<std::string>();
    ex.question = record.at("question").get<TokenSeq>();
    ex.passages = record.at("passages").get<std::vector<TokenSeq>>();
    ex.answer = record.at("answer").get<TokenSeq>();
    for (const json& o : record.at("occurrences"))
      ex.occurrences.push_back(
          {o.at("passage").get<int>(), o.at("start").get<int>(), o.at("end").get<int>()});
    ex.answerable = record.at("answerable").get<bool>();
    if (ex.answer.empty()) throw ParseError("answer must be non-empty", line_no);
    for (const GoldSpan& s : ex.occurrences) {
      if (s.passage < 0 || s.passage >= static_cast<int>(ex.passages.size()) || s.start < 0 ||
          s.end < s.start || s.end >= static_cast<int>(ex.passages[s.passage].size()) ||
          s.end - s.start + 1 != static_cast<int>(ex.answer.size()))
        throw ParseError("occurrence outside its passage", line_no);
      if (!std::equal(ex.answer.begin(), ex.answer.end(),
                      ex.passages[s.passage].begin() + s.start))
        throw ParseError("occurrence does not slice to the answer", line_no);
    }
    if (ex.answerable != !ex.occurrences.empty())
      throw ParseError("answerable flag disagrees with occurrences", line_no);
    return ex;
  } catch (const json::exception& e) {
    throw ParseError(std::string("bad field: ") + e.what(), line_no);
  }
}

void write_dataset(std::ostream& out, const std::vector<QAExample>& dataset) {
  for (const QAExample& ex : dataset) out << serialize_example(ex) << '\n';
}

std::vector<QAExample> read_dataset(std::istream& in) {
  std::vector<QAExample> dataset;
  std::string line;
  long line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    dataset.push_back(parse_example(line, line_no));
  }
  return dataset;
}

void save_dataset(const std::filesystem::path& path, const std::vector<QAExample>& dataset) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  write_dataset(out, dataset);
  if (!out) throw IoError("write failed for " + path.string());
}

std::vector<QAExample> load_dataset(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return read_dataset(in);
}

}  // namespace xaqa
