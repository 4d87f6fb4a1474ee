#include "xaqa/viz.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <ostream>

namespace xaqa {

std::string token_label(Token t) {
  switch (t) {
    case tokens::PAD: return "PAD";
    case tokens::BOS: return "BOS";
    case tokens::EOS: return "EOS";
    case tokens::SEP: return "SEP";
    default: return "t" + std::to_string(t);
  }
}

void write_heatmap_pgm(std::ostream& out, const DecodeResult& result) {
  const std::size_t rows = result.generated.size();
  if (rows == 0) throw ContractError("heatmap: nothing was generated");
  const std::size_t cols = result.records.front().probs_avg.size();
  out << "P5\n" << cols << " " << rows << "\n255\n";
  for (std::size_t r = 0; r < rows; ++r) {
    for (double p : result.records[r].probs_avg) {
      const int pixel = static_cast<int>(std::lround(255.0 * p));
      out.put(static_cast<char>(std::clamp(pixel, 0, 255)));
    }
  }
}

void write_heatmap_text(std::ostream& out, const DecodeResult& result,
                        const FusedEncoding& fused) {
  const std::size_t rows = result.generated.size();
  if (rows == 0) throw ContractError("heatmap: nothing was generated");

  std::vector<std::string> col_labels;
  for (const SegmentBoundary& b : fused.boundaries)
    for (Token t : b.tokens) col_labels.push_back(token_label(t));

  out << std::setw(8) << "";
  for (const std::string& label : col_labels) out << std::setw(8) << label;
  out << "\n";
  out << std::fixed << std::setprecision(3);
  for (std::size_t r = 0; r < rows; ++r) {
    out << std::setw(8) << token_label(result.generated[r]);
    for (double p : result.records[r].probs_avg) out << std::setw(8) << p;
    out << "\n";
  }
}

void render_heatmap(const DecodeResult& result, const FusedEncoding& fused,
                    const std::filesystem::path& out_base) {
  {
    std::filesystem::path pgm = out_base;
    pgm += ".pgm";
    std::ofstream out(pgm, std::ios::binary);
    if (!out) throw IoError("cannot open " + pgm.string() + " for writing");
    write_heatmap_pgm(out, result);
    if (!out) throw IoError("write failed for " + pgm.string());
  }
  {
    std::filesystem::path txt = out_base;
    txt += ".txt";
    std::ofstream out(txt, std::ios::binary);
    if (!out) throw IoError("cannot open " + txt.string() + " for writing");
    write_heatmap_text(out, result, fused);
    if (!out) throw IoError("write failed for " + txt.string());
  }
}

}  // namespace xaqa
