#pragma once

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <string>
#include <tuple>
#include <vector>

#include "kag/tensor.hpp"

namespace kag {

// ASCII PGM (P2), maxval 255, round half away from zero.
inline void render_pgm(const std::vector<double>& map, int h, int w, const std::string& path) {
  if (static_cast<int>(map.size()) != h * w) throw Error("render_pgm: map size mismatch");
  for (double v : map)
    if (!(v >= 0.0 && v <= 1.0)) throw Error("render_pgm: values must lie in [0,1]");
  std::ofstream os(path);
  if (!os) throw Error("render_pgm: cannot open '" + path + "'");
  os << "P2\n" << w << " " << h << "\n255\n";
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      int q = static_cast<int>(std::floor(map[static_cast<size_t>(y) * w + x] * 255.0 + 0.5));
      os << (x ? " " : "") << q;
    }
    os << "\n";
  }
  if (!os) throw Error("render_pgm: write to '" + path + "' failed");
}

struct PgmImage {
  int h = 0, w = 0;
  std::vector<int> pixels;
};

inline PgmImage read_pgm(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw Error("read_pgm: cannot open '" + path + "'");
  std::string magic;
  is >> magic;
  if (magic != "P2") throw Error("read_pgm: not an ASCII PGM");
  PgmImage img;
  int maxval;
  is >> img.w >> img.h >> maxval;
  img.pixels.resize(static_cast<size_t>(img.w) * img.h);
  for (int& p : img.pixels) is >> p;
  if (!is) throw Error("read_pgm: truncated PGM");
  return img;
}

// CSV rows (run, metric, value); header `run,metric,value`, 6 decimal places,
// sorted by (run, metric).
inline std::string format_csv(std::vector<std::tuple<std::string, std::string, double>> rows) {
  std::sort(rows.begin(), rows.end(), [](const auto& a, const auto& b) {
    if (std::get<0>(a) != std::get<0>(b)) return std::get<0>(a) < std::get<0>(b);
    return std::get<1>(a) < std::get<1>(b);
  });
  std::string out = "run,metric,value\n";
  char buf[64];
  for (const auto& [run, metric, value] : rows) {
    std::snprintf(buf, sizeof(buf), "%.6f", value);
    out += run + "," + metric + "," + buf + "\n";
  }
  return out;
}

inline void write_text(const std::string& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("cannot open '" + path + "' for writing");
  os << text;
  if (!os) throw Error("write to '" + path + "' failed");
}

}  // namespace kag
