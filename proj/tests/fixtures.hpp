#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include "latent_loop/backbone.hpp"
#include "latent_loop/perl.hpp"
#include "latent_loop/rng.hpp"

namespace fixtures {

using namespace latent_loop;

inline TokenSequence random_image(const EncoderConfig& cfg, SplitMix64& rng) {
  std::vector<std::size_t> patches(cfg.patches);
  for (auto& p : patches) p = rng.below(cfg.codebook);
  return TokenSequence::vision(patches, cfg);
}

inline TokenSequence random_prompt(const EncoderConfig& cfg, SplitMix64& rng) {
  std::vector<std::size_t> words(cfg.text_length - 2);
  for (auto& w : words) w = rng.below(cfg.codebook);
  return TokenSequence::text(words, cfg);
}

inline TokenSequence random_sequence(Modality m, const EncoderConfig& cfg, SplitMix64& rng) {
  return m == Modality::vision ? random_image(cfg, rng) : random_prompt(cfg, rng);
}

/// Projectors with O(1) weights so that thoughts visibly move the readout.
inline ProjectorSet strong_projectors(const PerlConfig& cfg, const EncoderConfig& enc, std::uint64_t seed,
                                      double scale = 0.5) {
  ProjectorSet phi(cfg, enc.width_vision, enc.width_text, seed);
  auto rng = SplitMix64::stream(seed, "fixtures.strong");
  for (auto& slot : phi.slots())
    for (auto& v : slot.value->values()) v += scale * rng.normal();
  return phi;
}

inline std::string read_file(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

inline void write_file(const std::filesystem::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  out << text;
}

/// Fresh empty directory under the system temp dir.
inline std::filesystem::path temp_dir(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / ("latent_loop_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace fixtures
