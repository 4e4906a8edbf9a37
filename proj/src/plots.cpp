#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <sstream>
#include <stdexcept>

#include "advcomm/harness.hpp"

namespace advcomm::harness {

namespace fs = std::filesystem;
using nlohmann::json;

bool Plot::empty() const {
  for (const auto& s : series)
    if (!s.x.empty()) return false;
  return true;
}

namespace {

constexpr double kW = 720, kH = 440;
constexpr double kLeft = 70, kRight = 170, kTop = 40, kBottom = 50;

std::string esc(const std::string& s) {
  std::string o;
  for (char c : s) {
    switch (c) {
      case '&': o += "&amp;"; break;
      case '<': o += "&lt;"; break;
      case '>': o += "&gt;"; break;
      case '"': o += "&quot;"; break;
      default: o += c;
    }
  }
  return o;
}

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

std::string tick(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%g", v);
  return buf;
}

// step of roughly n ticks: 1, 2 or 5 times a power of ten
double nice_step(double span, int n) {
  if (!(span > 0)) return 1.0;
  const double raw = span / n;
  const double p = std::pow(10.0, std::floor(std::log10(raw)));
  for (double m : {1.0, 2.0, 5.0})
    if (raw <= m * p) return m * p;
  return 10.0 * p;
}

}  // namespace

std::string render_svg(const Plot& p) {
  std::ostringstream o;
  o << "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n";
  o << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kW << "\" height=\"" << kH << "\" viewBox=\"0 0 " << kW
    << " " << kH << "\">\n";
  o << "<desc>manifest " << esc(p.manifest) << "</desc>\n";
  o << "<rect x=\"0\" y=\"0\" width=\"" << kW << "\" height=\"" << kH << "\" fill=\"white\"/>\n";
  o << "<text x=\"" << kW / 2 << "\" y=\"24\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"15\">"
    << esc(p.title) << "</text>\n";

  const double pw = kW - kLeft - kRight, ph = kH - kTop - kBottom;
  if (p.empty()) {
    o << "<text x=\"" << kLeft + pw / 2 << "\" y=\"" << kTop + ph / 2
      << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"13\" fill=\"#777\">no data</text>\n";
    o << "</svg>\n";
    return o.str();
  }

  double x0 = std::numeric_limits<double>::infinity(), x1 = -x0, y0 = x0, y1 = -x0;
  for (const auto& s : p.series) {
    for (std::size_t k = 0; k < s.x.size(); ++k) {
      const double b = k < s.band.size() ? s.band[k] : 0.0;
      x0 = std::min(x0, s.x[k]);
      x1 = std::max(x1, s.x[k]);
      y0 = std::min(y0, s.y[k] - b);
      y1 = std::max(y1, s.y[k] + b);
    }
  }
  for (const auto& r : p.regions) {
    x0 = std::min(x0, r.x0);
    x1 = std::max(x1, r.x1);
  }
  if (x1 - x0 < 1e-12) {
    x0 -= 0.5;
    x1 += 0.5;
  }
  if (y1 - y0 < 1e-12) {
    y0 -= 0.5;
    y1 += 0.5;
  }
  const double pad = 0.05 * (y1 - y0);
  y0 -= pad;
  y1 += pad;
  auto X = [&](double v) { return kLeft + (v - x0) / (x1 - x0) * pw; };
  auto Y = [&](double v) { return kTop + ph - (v - y0) / (y1 - y0) * ph; };

  for (const auto& r : p.regions) {
    o << "<rect x=\"" << num(X(r.x0)) << "\" y=\"" << num(kTop) << "\" width=\"" << num(X(r.x1) - X(r.x0))
      << "\" height=\"" << num(ph) << "\" fill=\"" << esc(r.color) << "\" fill-opacity=\"0.15\"/>\n";
    if (!r.label.empty())
      o << "<text x=\"" << num((X(r.x0) + X(r.x1)) / 2) << "\" y=\"" << num(kTop + 14)
        << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"11\" fill=\"#444\">" << esc(r.label)
        << "</text>\n";
  }

  // axes and ticks
  o << "<g stroke=\"#333\" stroke-width=\"1\" fill=\"none\">\n";
  o << "<line x1=\"" << kLeft << "\" y1=\"" << kTop + ph << "\" x2=\"" << kLeft + pw << "\" y2=\"" << kTop + ph << "\"/>\n";
  o << "<line x1=\"" << kLeft << "\" y1=\"" << kTop << "\" x2=\"" << kLeft << "\" y2=\"" << kTop + ph << "\"/>\n";
  o << "</g>\n";
  o << "<g font-family=\"sans-serif\" font-size=\"11\" fill=\"#333\">\n";
  const double xs = nice_step(x1 - x0, 6), ys = nice_step(y1 - y0, 5);
  for (double v = std::ceil(x0 / xs) * xs; v <= x1 + 1e-9 * xs; v += xs)
    o << "<text x=\"" << num(X(v)) << "\" y=\"" << num(kTop + ph + 16) << "\" text-anchor=\"middle\">" << tick(v)
      << "</text>\n";
  for (double v = std::ceil(y0 / ys) * ys; v <= y1 + 1e-9 * ys; v += ys)
    o << "<text x=\"" << num(kLeft - 6) << "\" y=\"" << num(Y(v) + 4) << "\" text-anchor=\"end\">" << tick(v)
      << "</text>\n";
  o << "<text x=\"" << kLeft + pw / 2 << "\" y=\"" << kH - 12 << "\" text-anchor=\"middle\">" << esc(p.xlabel)
    << "</text>\n";
  o << "<text transform=\"translate(16," << kTop + ph / 2 << ") rotate(-90)\" text-anchor=\"middle\">" << esc(p.ylabel)
    << "</text>\n";
  o << "</g>\n";

  for (const auto& s : p.series) {
    if (s.x.empty()) continue;
    if (!s.band.empty()) {
      o << "<polygon class=\"band\" fill=\"" << esc(s.color) << "\" fill-opacity=\"0.18\" stroke=\"none\" points=\"";
      for (std::size_t k = 0; k < s.x.size(); ++k) o << num(X(s.x[k])) << "," << num(Y(s.y[k] + s.band[k])) << " ";
      for (std::size_t k = s.x.size(); k-- > 0;) o << num(X(s.x[k])) << "," << num(Y(s.y[k] - s.band[k])) << " ";
      o << "\"/>\n";
    }
    if (s.x.size() == 1) {
      o << "<circle class=\"marker\" cx=\"" << num(X(s.x[0])) << "\" cy=\"" << num(Y(s.y[0])) << "\" r=\"3.5\" fill=\""
        << esc(s.color) << "\"/>\n";
      continue;
    }
    o << "<polyline class=\"series\" fill=\"none\" stroke=\"" << esc(s.color) << "\" stroke-width=\"1.8\"";
    if (s.dashed) o << " stroke-dasharray=\"6,4\"";
    o << " points=\"";
    for (std::size_t k = 0; k < s.x.size(); ++k) o << num(X(s.x[k])) << "," << num(Y(s.y[k])) << " ";
    o << "\"/>\n";
  }

  // legend
  double ly = kTop + 8;
  o << "<g font-family=\"sans-serif\" font-size=\"11\" fill=\"#333\">\n";
  for (const auto& s : p.series) {
    if (s.label.empty()) continue;
    const double lx = kLeft + pw + 12;
    o << "<line x1=\"" << lx << "\" y1=\"" << ly << "\" x2=\"" << lx + 22 << "\" y2=\"" << ly << "\" stroke=\""
      << esc(s.color) << "\" stroke-width=\"1.8\"" << (s.dashed ? " stroke-dasharray=\"6,4\"" : "") << "/>\n";
    o << "<text x=\"" << lx + 28 << "\" y=\"" << ly + 4 << "\">" << esc(s.label) << "</text>\n";
    ly += 18;
  }
  o << "</g>\n";
  o << "</svg>\n";
  return o.str();
}

void write_svg(const fs::path& path, const Plot& p) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << render_svg(p);
}

Plot training_plot(const std::vector<std::vector<json>>& phase_logs, const std::string& manifest) {
  Plot p;
  p.title = "Training return";
  p.xlabel = "environment steps";
  p.ylabel = "mean episodic return per agent";
  p.manifest = manifest;
  Series coop{"cooperative", kBlue, false, {}, {}, {}}, si{"self-interested", kRed, false, {}, {}, {}};
  double offset = 0.0;
  for (const auto& log : phase_logs) {
    if (log.empty()) continue;
    const std::string phase = log.front().value("phase", std::string{});
    double last = 0.0;
    for (const auto& r : log) {
      const double x = offset + r.value("env_steps", 0.0);
      last = r.value("env_steps", 0.0);
      if (r.contains("mean_return_coop") && r.at("mean_return_coop").is_number()) {
        coop.x.push_back(x);
        coop.y.push_back(r.at("mean_return_coop").get<double>());
      }
      if (r.contains("mean_return_si") && r.at("mean_return_si").is_number()) {
        si.x.push_back(x);
        si.y.push_back(r.at("mean_return_si").get<double>());
      }
    }
    const char* color = phase == "self_interested" ? kRed : phase == "readapt" ? kGreen : kBlue;
    p.regions.push_back({offset, offset + last, color, phase});
    offset += last;
  }
  p.series.push_back(std::move(coop));
  if (!si.x.empty()) p.series.push_back(std::move(si));
  return p;
}

Plot eval_plot(const EvalStats* with_adv, const EvalStats* without_adv, const std::string& title,
               const std::string& manifest) {
  Plot p;
  p.title = title;
  p.xlabel = "time step";
  p.ylabel = "cumulative reward per agent";
  p.manifest = manifest;
  auto add = [&](const EvalStats* e, bool dashed, const std::string& suffix) {
    if (!e) return;
    auto series = [&](const std::vector<double>& y, const std::vector<double>& sd, const char* color, const std::string& name) {
      Series s{name + suffix, color, dashed, {}, y, sd};
      for (std::size_t t = 0; t < y.size(); ++t) s.x.push_back(static_cast<double>(t + 1));
      p.series.push_back(std::move(s));
    };
    series(e->curve_coop, e->curve_coop_std, kBlue, "cooperative");
    if (e->has_si) series(e->curve_si, e->curve_si_std, kRed, "self-interested");
  };
  add(with_adv, false, "");
  add(without_adv, true, " (w/o)");
  return p;
}

std::vector<json> read_jsonl(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::vector<json> out;
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      out.push_back(json::parse(line));
    } catch (const json::exception& e) {
      throw std::runtime_error(path.string() + ":" + std::to_string(n) + ": " + e.what());
    }
  }
  return out;
}

std::vector<std::string> emit_plots(const fs::path& run_dir) {
  std::vector<std::string> warn;
  std::ifstream mf(run_dir / "manifest.json");
  if (!mf) throw std::runtime_error("no manifest.json in " + run_dir.string());
  json mj;
  mf >> mj;
  const auto man = mj.get<RunManifest>();
  const auto plots = run_dir / "plots";

  auto load_eval = [&](std::uint64_t seed, Column c) -> std::optional<EvalStats> {
    const auto path = eval_path(run_dir, seed, c);
    if (!fs::exists(path)) return std::nullopt;
    std::ifstream in(path);
    json j;
    in >> j;
    return j.get<EvalStats>();
  };

  for (auto seed : man.seeds) {
    const std::string tag = "seed" + std::to_string(seed);
    std::vector<std::vector<json>> chain;
    for (auto c : {Column::coop_comms, Column::si_adv, Column::readapt_adv}) {
      const auto lp = log_path(run_dir, seed, c);
      if (!fs::exists(lp)) continue;
      auto log = read_jsonl(lp);
      if (log.empty()) warn.push_back(lp.string() + " is empty");
      chain.push_back(std::move(log));
    }
    auto tp = training_plot(chain, man.hash);
    if (tp.empty()) warn.push_back("no training records for seed " + std::to_string(seed) + "; wrote an empty plot");
    write_svg(plots / ("train_" + tag + ".svg"), tp);

    const auto cw = load_eval(seed, Column::coop_comms), cn = load_eval(seed, Column::coop_no_comms);
    if (cw || cn)
      write_svg(plots / ("eval_coop_" + tag + ".svg"),
                eval_plot(cw ? &*cw : nullptr, cn ? &*cn : nullptr, "Cooperative team", man.hash));
    const auto sa = load_eval(seed, Column::si_adv), sn = load_eval(seed, Column::si_no_adv);
    if (sa || sn)
      write_svg(plots / ("eval_si_" + tag + ".svg"),
                eval_plot(sa ? &*sa : nullptr, sn ? &*sn : nullptr, "Self-interested agent introduced", man.hash));
    if (const auto ra = load_eval(seed, Column::readapt_adv))
      write_svg(plots / ("eval_readapt_" + tag + ".svg"), eval_plot(&*ra, nullptr, "After re-adaptation", man.hash));
  }
  return warn;
}

}  // namespace advcomm::harness
