#pragma once

#include <filesystem>
#include <iosfwd>

#include "xaqa/infer.hpp"

namespace xaqa {

std::string token_label(Token t);

/// Binary PGM: one row per generated token, one column per fused input
/// position, pixel = round(255 * probability). Bit-exact for equal inputs.
void write_heatmap_pgm(std::ostream& out, const DecodeResult& result);

/// Text grid with token labels on both axes and probabilities to 3 decimals.
void write_heatmap_text(std::ostream& out, const DecodeResult& result,
                        const FusedEncoding& fused);

/// Writes <out_base>.pgm and <out_base>.txt.
void render_heatmap(const DecodeResult& result, const FusedEncoding& fused,
                    const std::filesystem::path& out_base);

}  // namespace xaqa
