#include "svg_plot.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include <fmt/format.h>

namespace trajlab::plot {

namespace {

constexpr double kWidth = 640, kHeight = 420;
constexpr double kLeft = 70, kRight = 170, kTop = 40, kBottom = 55;

const char* const kPalette[] = {"#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd",
                                "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"};

std::string escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

struct Range {
  double lo = std::numeric_limits<double>::infinity();
  double hi = -std::numeric_limits<double>::infinity();

  void add(double v) {
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  void pad() {
    if (!std::isfinite(lo)) {
      lo = 0;
      hi = 1;
    }
    if (hi - lo < 1e-12) {
      double m = std::max(std::abs(lo) * 0.05, 0.5);
      lo -= m;
      hi += m;
    }
  }
};

// 1, 2 or 5 times a power of ten, about five ticks across the range
double tick_step(double span) {
  double raw = span / 5;
  double mag = std::pow(10.0, std::floor(std::log10(raw)));
  double f = raw / mag;
  return (f < 1.5 ? 1 : f < 3.5 ? 2 : f < 7.5 ? 5 : 10) * mag;
}

std::vector<double> ticks(const Range& r, bool integer) {
  double step = tick_step(r.hi - r.lo);
  if (integer) step = std::max(1.0, std::round(step));
  std::vector<double> out;
  for (double t = std::ceil(r.lo / step) * step; t <= r.hi + step * 1e-9; t += step) out.push_back(t);
  return out;
}

std::string tick_label(double v) {
  if (std::abs(v) < 1e-12) return "0";
  return fmt::format("{:g}", v);
}

class Canvas {
 public:
  Canvas(const Axes& axes, const std::vector<Series>& series) : axes_(axes) {
    for (const auto& s : series)
      for (const auto& [x, y] : s.points) {
        if (!y || !std::isfinite(*y) || !std::isfinite(x)) continue;
        xr_.add(x);
        yr_.add(*y);
      }
    xr_.pad();
    yr_.pad();
    if (axes.integer_x && xr_.hi - xr_.lo < 2) {
      xr_.lo -= 0.5;
      xr_.hi += 0.5;
    }
  }

  double sx(double x) const { return kLeft + (x - xr_.lo) / (xr_.hi - xr_.lo) * (kWidth - kLeft - kRight); }
  double sy(double y) const { return kHeight - kBottom - (y - yr_.lo) / (yr_.hi - yr_.lo) * (kHeight - kTop - kBottom); }

  std::string frame() const {
    std::string out = fmt::format(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{0}\" height=\"{1}\" viewBox=\"0 0 {0} {1}\" "
        "font-family=\"sans-serif\" font-size=\"12\">\n"
        "<rect width=\"{0}\" height=\"{1}\" fill=\"white\"/>\n",
        kWidth, kHeight);
    out += fmt::format("<text x=\"{:.1f}\" y=\"22\" text-anchor=\"middle\" font-size=\"14\">{}</text>\n",
                       (kLeft + kWidth - kRight) / 2, escape(axes_.title));
    double x0 = kLeft, x1 = kWidth - kRight, y0 = kHeight - kBottom, y1 = kTop;
    out += fmt::format("<rect x=\"{:.1f}\" y=\"{:.1f}\" width=\"{:.1f}\" height=\"{:.1f}\" fill=\"none\" stroke=\"#444\"/>\n",
                       x0, y1, x1 - x0, y0 - y1);
    for (double t : ticks(xr_, axes_.integer_x)) {
      double px = sx(t);
      out += fmt::format("<line x1=\"{0:.1f}\" y1=\"{1:.1f}\" x2=\"{0:.1f}\" y2=\"{2:.1f}\" stroke=\"#444\"/>\n", px, y0, y0 + 5);
      out += fmt::format("<text x=\"{:.1f}\" y=\"{:.1f}\" text-anchor=\"middle\">{}</text>\n", px, y0 + 18, tick_label(t));
    }
    for (double t : ticks(yr_, false)) {
      double py = sy(t);
      out += fmt::format("<line x1=\"{0:.1f}\" y1=\"{1:.1f}\" x2=\"{2:.1f}\" y2=\"{1:.1f}\" stroke=\"#ddd\"/>\n", x0, py, x1);
      out += fmt::format("<text x=\"{:.1f}\" y=\"{:.1f}\" text-anchor=\"end\">{}</text>\n", x0 - 6, py + 4, tick_label(t));
    }
    out += fmt::format("<text x=\"{:.1f}\" y=\"{:.1f}\" text-anchor=\"middle\">{}</text>\n", (x0 + x1) / 2, kHeight - 12,
                       escape(axes_.x_label));
    out += fmt::format("<text x=\"16\" y=\"{0:.1f}\" text-anchor=\"middle\" transform=\"rotate(-90 16 {0:.1f})\">{1}</text>\n",
                       (y0 + y1) / 2, escape(axes_.y_label));
    return out;
  }

  static std::string legend(const std::vector<Series>& series) {
    std::string out;
    double y = kTop + 8;
    for (std::size_t i = 0; i < series.size(); ++i, y += 18) {
      const char* color = kPalette[i % std::size(kPalette)];
      out += fmt::format("<rect x=\"{:.1f}\" y=\"{:.1f}\" width=\"12\" height=\"12\" fill=\"{}\"/>\n", kWidth - kRight + 12,
                         y - 10, color);
      out += fmt::format("<text x=\"{:.1f}\" y=\"{:.1f}\">{}</text>\n", kWidth - kRight + 30, y, escape(series[i].name));
    }
    return out;
  }

 private:
  Axes axes_;
  Range xr_, yr_;
};

bool usable(double x, const std::optional<double>& y) { return y && std::isfinite(*y) && std::isfinite(x); }

}  // namespace

std::string line_plot(const Axes& axes, const std::vector<Series>& series) {
  Canvas c(axes, series);
  std::string out = c.frame();
  for (std::size_t i = 0; i < series.size(); ++i) {
    const char* color = kPalette[i % std::size(kPalette)];
    std::string path;
    bool pen_down = false;
    for (const auto& [x, y] : series[i].points) {
      if (!usable(x, y)) {
        pen_down = false;
        continue;
      }
      path += fmt::format("{}{:.2f},{:.2f} ", pen_down ? "L" : "M", c.sx(x), c.sy(*y));
      pen_down = true;
    }
    if (!path.empty())
      out += fmt::format("<path d=\"{}\" fill=\"none\" stroke=\"{}\" stroke-width=\"2\"/>\n", path, color);
    for (const auto& [x, y] : series[i].points)
      if (usable(x, y))
        out += fmt::format("<circle cx=\"{:.2f}\" cy=\"{:.2f}\" r=\"3\" fill=\"{}\"/>\n", c.sx(x), c.sy(*y), color);
  }
  out += Canvas::legend(series);
  out += "</svg>\n";
  return out;
}

std::string scatter_plot(const Axes& axes, const std::vector<Series>& series) {
  Canvas c(axes, series);
  std::string out = c.frame();
  for (std::size_t i = 0; i < series.size(); ++i) {
    const char* color = kPalette[i % std::size(kPalette)];
    for (const auto& [x, y] : series[i].points)
      if (usable(x, y))
        out += fmt::format("<circle cx=\"{:.2f}\" cy=\"{:.2f}\" r=\"3\" fill=\"{}\" fill-opacity=\"0.7\"/>\n", c.sx(x),
                           c.sy(*y), color);
  }
  out += Canvas::legend(series);
  out += "</svg>\n";
  return out;
}

}  // namespace trajlab::plot
