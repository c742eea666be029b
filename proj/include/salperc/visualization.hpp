#pragma once

// Heatmap, bias-strip and bar-chart renderings of a saliency map as SVG, with
// an HTML mirror using inline styles. Output bytes depend only on the inputs.
//
// Layout: tokens are set in a monospaced font with a fixed character cell, so
// a token's box is exactly (characters x char_width) wide and single-space
// gaps between tokens stay unhighlighted.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "salperc/diagnostics.hpp"
#include "salperc/features.hpp"

namespace salperc {

struct RgbColor {
  int r = 255;
  int g = 255;
  int b = 255;

  friend bool operator==(const RgbColor&, const RgbColor&) = default;

  [[nodiscard]] std::string css() const {
    return "rgb(" + std::to_string(r) + "," + std::to_string(g) + "," + std::to_string(b) + ")";
  }
};

/// 255 - round(255 * v) with halves rounded away from zero.
inline int fade_channel(double v) { return 255 - static_cast<int>(std::lround(255.0 * v)); }

/// HSV (0 deg, s, 1) as RGB: full red with the other channels faded by s.
inline RgbColor saliency_to_rgb(double s) {
  if (!(s >= 0.0 && s <= 1.0)) {
    warn("saliency " + std::to_string(s) + " outside [0, 1], clamped for display");
    s = std::isnan(s) ? 0.0 : std::clamp(s, 0.0, 1.0);
  }
  const int g = fade_channel(s);
  return {255, g, g};
}

/// Largest |b| per sign; zero when the sign does not occur.
struct BiasScale {
  double positive = 0.0;
  double negative = 0.0;
};

inline BiasScale bias_scale(std::span<const double> biases) {
  BiasScale scale;
  for (double b : biases) {
    if (b > 0.0) scale.positive = std::max(scale.positive, b);
    if (b < 0.0) scale.negative = std::max(scale.negative, -b);
  }
  return scale;
}

/// Over-perception in red, under-perception in blue, each sign scaled to
/// its own maximum.
inline RgbColor bias_to_rgb(double b, const BiasScale& scale) {
  if (b > 0.0 && scale.positive > 0.0) {
    const int g = fade_channel(std::min(1.0, b / scale.positive));
    return {255, g, g};
  }
  if (b < 0.0 && scale.negative > 0.0) {
    const int g = fade_channel(std::min(1.0, -b / scale.negative));
    return {g, g, 255};
  }
  return {255, 255, 255};
}

enum class RenderMode { heatmap, corrected_heatmap, bars, bias };

inline std::string_view to_string(RenderMode m) {
  switch (m) {
    case RenderMode::heatmap: return "heatmap";
    case RenderMode::corrected_heatmap: return "corrected_heatmap";
    case RenderMode::bars: return "bars";
    case RenderMode::bias: return "bias";
  }
  return "heatmap";
}

inline RenderMode render_mode_from_string(std::string_view s) {
  if (s == "heatmap" || s == "saliency") return RenderMode::heatmap;
  if (s == "corrected_heatmap" || s == "corrected") return RenderMode::corrected_heatmap;
  if (s == "bars") return RenderMode::bars;
  if (s == "bias") return RenderMode::bias;
  throw Error(ErrorCode::config, "unknown render mode '" + std::string(s) + "'");
}

struct RenderSpec {
  RenderMode mode = RenderMode::heatmap;
  std::string font = "DejaVu Sans Mono, monospace";
  int font_size = 16;
  int char_width = 10;  ///< advance of one monospaced character in px
  int line_height = 24;
  int cell_padding = 4;  ///< vertical padding inside a token box
  int margin = 8;
  int bar_area_height = 60;
  int bar_width = 16;
};

inline void validate(const RenderSpec& spec) {
  if (spec.char_width <= 0 || spec.font_size <= 0 || spec.line_height <= 0) {
    throw Error(ErrorCode::config, "render metrics must be positive");
  }
  if (spec.cell_padding < 0 || spec.margin < 0) throw Error(ErrorCode::config, "render padding must be >= 0");
  if (spec.mode == RenderMode::bars && (spec.bar_area_height <= 0 || spec.bar_width <= 0)) {
    throw Error(ErrorCode::config, "bar charts need a positive bar area height and bar width");
  }
}

struct Rendering {
  std::string svg;
  std::string html;
};

namespace detail {

inline std::string xml_escape(std::string_view s) {
  std::string out;
  out.reserve(s.size());
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      case '\'': out += "&#39;"; break;
      default: out += c;
    }
  }
  return out;
}

/// Fixed-point with up to three decimals and no trailing zeros.
inline std::string px(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.3f", v);
  std::string s = buf;
  while (!s.empty() && s.back() == '0') s.pop_back();
  if (!s.empty() && s.back() == '.') s.pop_back();
  if (s == "-0") s = "0";
  return s;
}

struct TokenBox {
  int x = 0;
  int width = 0;
};

inline std::vector<TokenBox> layout(const Sentence& sentence, const RenderSpec& spec) {
  std::vector<TokenBox> boxes;
  int x = spec.margin;
  for (const auto& t : sentence.tokens) {
    const int w = static_cast<int>(text::length(t.surface)) * spec.char_width;
    boxes.push_back({x, w});
    x += w + spec.char_width;
  }
  return boxes;
}

inline int text_width(const std::vector<TokenBox>& boxes, const RenderSpec& spec) {
  return boxes.empty() ? 0 : boxes.back().x + boxes.back().width - spec.margin;
}

inline std::string svg_open(int width, int height, const RenderSpec& spec, std::string_view kind) {
  return "<svg xmlns=\"http://www.w3.org/2000/svg\" version=\"1.1\" width=\"" + std::to_string(width) +
         "\" height=\"" + std::to_string(height) + "\" viewBox=\"0 0 " + std::to_string(width) + " " +
         std::to_string(height) + "\" class=\"salperc-" + std::string(kind) + "\" font-family=\"" +
         xml_escape(spec.font) + "\" font-size=\"" + std::to_string(spec.font_size) + "\">\n";
}

/// Colored token boxes on one text line; shared by heatmap and bias strip.
inline Rendering colored_line(const Sentence& sentence, const std::vector<RgbColor>& colors, const RenderSpec& spec,
                              std::string_view kind) {
  validate(spec);
  const auto boxes = layout(sentence, spec);
  const int width = 2 * spec.margin + text_width(boxes, spec);
  const int box_height = spec.line_height + 2 * spec.cell_padding;
  const int height = 2 * spec.margin + box_height;
  const int baseline = spec.margin + spec.cell_padding + spec.line_height - (spec.line_height - spec.font_size) / 2 - 4;

  Rendering r;
  r.svg = svg_open(width, height, spec, kind);
  for (std::size_t i = 0; i < boxes.size(); ++i) {
    r.svg += "  <rect x=\"" + std::to_string(boxes[i].x) + "\" y=\"" + std::to_string(spec.margin) + "\" width=\"" +
             std::to_string(boxes[i].width) + "\" height=\"" + std::to_string(box_height) + "\" fill=\"" +
             colors[i].css() + "\"/>\n";
  }
  for (std::size_t i = 0; i < boxes.size(); ++i) {
    r.svg += "  <text x=\"" + std::to_string(boxes[i].x) + "\" y=\"" + std::to_string(baseline) +
             "\" xml:space=\"preserve\">" + xml_escape(sentence.tokens[i].surface) + "</text>\n";
  }
  r.svg += "</svg>\n";

  r.html = "<!DOCTYPE html>\n<html>\n<head>\n<meta charset=\"utf-8\">\n<title>" + xml_escape(sentence.id) +
           "</title>\n</head>\n<body>\n<div class=\"salperc-" + std::string(kind) + "\" style=\"font-family:" +
           xml_escape(spec.font) + ";font-size:" + std::to_string(spec.font_size) +
           "px;white-space:pre;line-height:" + std::to_string(box_height) + "px\">";
  for (std::size_t i = 0; i < boxes.size(); ++i) {
    if (i) r.html += " ";
    r.html += "<span style=\"background-color:" + colors[i].css() + ";display:inline-block;width:" +
              std::to_string(boxes[i].width) + "px\">" + xml_escape(sentence.tokens[i].surface) + "</span>";
  }
  r.html += "</div>\n</body>\n</html>\n";
  return r;
}

}  // namespace detail

/// Heatmap of the given scores (original or corrected, per spec.mode).
inline Rendering render_heatmap(const Sentence& sentence, const SaliencyMap& map, const RenderSpec& spec = {}) {
  validate_alignment(sentence, map);
  std::vector<RgbColor> colors;
  for (double s : map.scores) colors.push_back(saliency_to_rgb(s));
  const std::string_view kind = spec.mode == RenderMode::corrected_heatmap ? "corrected_heatmap" : "heatmap";
  return detail::colored_line(sentence, colors, spec, kind);
}

/// Bias strip with per-sentence, per-sign color scaling. An explicit scale
/// gives comparable colors across sentences.
inline Rendering render_bias_strip(const Sentence& sentence, std::span<const double> biases, const RenderSpec& spec = {},
                                   std::optional<BiasScale> absolute_scale = std::nullopt) {
  if (biases.size() != sentence.tokens.size()) {
    throw Error(ErrorCode::input, "bias report has " + std::to_string(biases.size()) + " tokens but the sentence has " +
                                      std::to_string(sentence.tokens.size()));
  }
  const BiasScale scale = absolute_scale ? *absolute_scale : bias_scale(biases);
  std::vector<RgbColor> colors;
  for (double b : biases) colors.push_back(bias_to_rgb(b, scale));
  return detail::colored_line(sentence, colors, spec, "bias");
}

/// One equal-width bar per token above an uncolored text line. The top and
/// bottom of the draw area are the reference points 1 and 0.
inline Rendering render_bars(const Sentence& sentence, const SaliencyMap& map, RenderSpec spec = {}) {
  spec.mode = RenderMode::bars;
  validate(spec);
  validate_alignment(sentence, map);
  const auto boxes = detail::layout(sentence, spec);
  const double half_bar = spec.bar_width / 2.0;
  double left = spec.margin;
  double right = spec.margin + detail::text_width(boxes, spec);
  for (const auto& b : boxes) {
    const double c = b.x + b.width / 2.0;
    left = std::min(left, c - half_bar - 2.0);
    right = std::max(right, c + half_bar + 2.0);
  }
  const double shift = spec.margin - left;  // keeps the leftmost bar inside the margin
  const int width = static_cast<int>(std::ceil(right - left)) + 2 * spec.margin;
  const int area_top = spec.margin;
  const int baseline_y = area_top + spec.bar_area_height;
  const int text_top = baseline_y + spec.cell_padding;
  const int height = text_top + spec.line_height + spec.margin;
  const int text_y = text_top + spec.line_height - (spec.line_height - spec.font_size) / 2 - 4;

  Rendering r;
  std::string& svg = r.svg;
  svg = detail::svg_open(width, height, spec, "bars");
  svg += "  <rect class=\"area\" x=\"" + detail::px(left + shift) + "\" y=\"" + std::to_string(area_top) +
         "\" width=\"" + detail::px(right - left) + "\" height=\"" + std::to_string(spec.bar_area_height) +
         "\" fill=\"none\" stroke=\"rgb(200,200,200)\" stroke-width=\"1\"/>\n";
  for (std::size_t i = 0; i < boxes.size(); ++i) {
    const double s = std::clamp(map.scores[i], 0.0, 1.0);
    const double c = boxes[i].x + boxes[i].width / 2.0 + shift;
    const double h = s * spec.bar_area_height;
    svg += "  <rect class=\"bar\" x=\"" + detail::px(c - half_bar) + "\" y=\"" + detail::px(baseline_y - h) +
           "\" width=\"" + std::to_string(spec.bar_width) + "\" height=\"" + detail::px(h) +
           "\" fill=\"rgb(255,0,0)\"/>\n";
    svg += "  <line class=\"tick\" x1=\"" + detail::px(c - half_bar - 2.0) + "\" y1=\"" + std::to_string(baseline_y) +
           "\" x2=\"" + detail::px(c + half_bar + 2.0) + "\" y2=\"" + std::to_string(baseline_y) +
           "\" stroke=\"rgb(0,0,0)\" stroke-width=\"1\"/>\n";
  }
  for (std::size_t i = 0; i < boxes.size(); ++i) {
    svg += "  <text x=\"" + detail::px(boxes[i].x + shift) + "\" y=\"" + std::to_string(text_y) +
           "\" xml:space=\"preserve\">" + detail::xml_escape(sentence.tokens[i].surface) + "</text>\n";
  }
  svg += "</svg>\n";
  r.html = "<!DOCTYPE html>\n<html>\n<head>\n<meta charset=\"utf-8\">\n<title>" + detail::xml_escape(sentence.id) +
           "</title>\n</head>\n<body>\n" + svg + "</body>\n</html>\n";
  return r;
}

/// Dispatches on spec.mode; `biases` is only read in bias mode.
inline Rendering render(const Sentence& sentence, const SaliencyMap& map, const RenderSpec& spec,
                        std::span<const double> biases = {}) {
  switch (spec.mode) {
    case RenderMode::heatmap:
    case RenderMode::corrected_heatmap: return render_heatmap(sentence, map, spec);
    case RenderMode::bars: return render_bars(sentence, map, spec);
    case RenderMode::bias: return render_bias_strip(sentence, biases, spec);
  }
  return render_heatmap(sentence, map, spec);
}

}  // namespace salperc
