#include "protoalign/report.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>

#include "protoalign/errors.hpp"

namespace protoalign {

namespace fs = std::filesystem;

namespace {

constexpr const char* kStepsHeader = "variant,prototypes,step,accuracy_mean,accuracy_std,loss_mean,seeds";
constexpr const char* kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"};

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string cell;
  while (std::getline(ss, cell, ',')) out.push_back(cell);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

std::string f2(double v) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(2) << v;
  return os.str();
}

std::string escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '<':
        out += "&lt;";
        break;
      case '>':
        out += "&gt;";
        break;
      case '&':
        out += "&amp;";
        break;
      default:
        out += c;
    }
  }
  return out;
}

}  // namespace

StepSeries read_steps_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read '" + path + "'");
  StepSeries s;
  std::string line;
  bool header = false;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.rfind("# config_hash=", 0) == 0) {
      s.config_hash = line.substr(14);
      continue;
    }
    if (!header) {
      if (line != kStepsHeader) throw FormatError(path + ":" + std::to_string(lineno) + ": unexpected header");
      header = true;
      continue;
    }
    const auto cells = split_csv(line);
    if (cells.size() != 7) throw FormatError(path + ":" + std::to_string(lineno) + ": expected 7 columns");
    try {
      s.variant = parse_variant(cells[0]);
      s.prototypes = std::stoi(cells[1]);
      const size_t step = static_cast<size_t>(std::stoul(cells[2]));
      if (step != s.mean.size()) throw FormatError("steps out of order");
      s.mean.push_back(std::stod(cells[3]));
      s.std.push_back(std::stod(cells[4]));
      s.seeds = std::stoi(cells[6]);
    } catch (const FormatError&) {
      throw;
    } catch (const std::exception& e) {
      throw FormatError(path + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  if (!header || s.mean.empty()) throw FormatError(path + ": no data rows");
  return s;
}

std::vector<StepSeries> load_step_series(const std::string& results_dir) {
  const fs::path adapt = fs::path(results_dir) / "adapt";
  if (!fs::is_directory(adapt)) throw IoError("no adaptation results under '" + adapt.string() + "'");
  std::vector<fs::path> files;
  for (const auto& entry : fs::directory_iterator(adapt)) {
    const fs::path f = entry.path() / "steps.csv";
    if (fs::exists(f)) files.push_back(f);
  }
  std::sort(files.begin(), files.end());
  std::vector<StepSeries> out;
  for (const auto& f : files) out.push_back(read_steps_csv(f.string()));
  return out;
}

std::string render_line_chart(const std::string& title, const std::string& x_label, const std::string& y_label,
                              const std::vector<ChartSeries>& series, const std::string& provenance) {
  constexpr double kW = 640;
  constexpr double kH = 420;
  constexpr double kLeft = 70;
  constexpr double kRight = 170;
  constexpr double kTop = 40;
  constexpr double kBottom = 55;
  double lo = 1e300;
  double hi = -1e300;
  size_t steps = 1;
  for (const auto& s : series) {
    steps = std::max(steps, s.mean.size());
    for (size_t i = 0; i < s.mean.size(); ++i) {
      lo = std::min(lo, s.mean[i] - s.std[i]);
      hi = std::max(hi, s.mean[i] + s.std[i]);
    }
  }
  if (series.empty()) {
    lo = 0;
    hi = 100;
  }
  const double pad = std::max(0.5, 0.1 * (hi - lo));
  lo = std::floor(lo - pad);
  hi = std::ceil(hi + pad);
  const double plot_w = kW - kLeft - kRight;
  const double plot_h = kH - kTop - kBottom;
  const double x_span = static_cast<double>(std::max<size_t>(1, steps - 1));
  auto px = [&](double x) { return kLeft + plot_w * x / x_span; };
  auto py = [&](double y) { return kTop + plot_h * (hi - y) / (hi - lo); };

  std::ostringstream os;
  os << std::fixed << std::setprecision(2);
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kW << "\" height=\"" << kH << "\" viewBox=\"0 0 "
     << kW << ' ' << kH << "\">\n";
  os << "<!-- " << escape(provenance) << " -->\n";
  os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  os << "<text x=\"" << kLeft + plot_w / 2 << "\" y=\"22\" text-anchor=\"middle\" font-family=\"sans-serif\" "
     << "font-size=\"15\">" << escape(title) << "</text>\n";
  os << "<rect x=\"" << kLeft << "\" y=\"" << kTop << "\" width=\"" << plot_w << "\" height=\"" << plot_h
     << "\" fill=\"none\" stroke=\"#333\"/>\n";
  for (size_t i = 0; i < steps; ++i) {
    const double x = px(static_cast<double>(i));
    os << "<line x1=\"" << x << "\" y1=\"" << kTop + plot_h << "\" x2=\"" << x << "\" y2=\"" << kTop + plot_h + 5
       << "\" stroke=\"#333\"/>\n";
    os << "<text x=\"" << x << "\" y=\"" << kTop + plot_h + 18 << "\" text-anchor=\"middle\" "
       << "font-family=\"sans-serif\" font-size=\"11\">" << i << "</text>\n";
  }
  const int ticks = 5;
  for (int t = 0; t <= ticks; ++t) {
    const double v = lo + (hi - lo) * t / ticks;
    const double y = py(v);
    os << "<line x1=\"" << kLeft - 5 << "\" y1=\"" << y << "\" x2=\"" << kLeft + plot_w << "\" y2=\"" << y
       << "\" stroke=\"#ddd\"/>\n";
    os << "<text x=\"" << kLeft - 8 << "\" y=\"" << y + 4 << "\" text-anchor=\"end\" font-family=\"sans-serif\" "
       << "font-size=\"11\">" << v << "</text>\n";
  }
  os << "<text x=\"" << kLeft + plot_w / 2 << "\" y=\"" << kH - 12 << "\" text-anchor=\"middle\" "
     << "font-family=\"sans-serif\" font-size=\"12\">" << escape(x_label) << "</text>\n";
  os << "<text transform=\"translate(18 " << kTop + plot_h / 2 << ") rotate(-90)\" text-anchor=\"middle\" "
     << "font-family=\"sans-serif\" font-size=\"12\">" << escape(y_label) << "</text>\n";

  for (size_t k = 0; k < series.size(); ++k) {
    const auto& s = series[k];
    const char* colour = kPalette[k % std::size(kPalette)];
    os << "<polygon fill=\"" << colour << "\" fill-opacity=\"0.18\" stroke=\"none\" points=\"";
    for (size_t i = 0; i < s.mean.size(); ++i) os << px(static_cast<double>(i)) << ',' << py(s.mean[i] + s.std[i]) << ' ';
    for (size_t i = s.mean.size(); i-- > 0;) os << px(static_cast<double>(i)) << ',' << py(s.mean[i] - s.std[i]) << ' ';
    os << "\"/>\n";
    os << "<polyline fill=\"none\" stroke=\"" << colour << "\" stroke-width=\"2\" points=\"";
    for (size_t i = 0; i < s.mean.size(); ++i) os << px(static_cast<double>(i)) << ',' << py(s.mean[i]) << ' ';
    os << "\"/>\n";
    const double ly = kTop + 16 + 20.0 * static_cast<double>(k);
    os << "<line x1=\"" << kLeft + plot_w + 12 << "\" y1=\"" << ly << "\" x2=\"" << kLeft + plot_w + 34 << "\" y2=\""
       << ly << "\" stroke=\"" << colour << "\" stroke-width=\"3\"/>\n";
    os << "<text x=\"" << kLeft + plot_w + 40 << "\" y=\"" << ly + 4 << "\" font-family=\"sans-serif\" "
       << "font-size=\"12\">" << escape(s.label) << "</text>\n";
  }
  os << "</svg>\n";
  return os.str();
}

ReportOutput write_report(const std::string& results_dir, int focus_prototypes) {
  const auto all = load_step_series(results_dir);
  if (all.empty()) throw IoError("no steps.csv files under '" + results_dir + "/adapt'");
  ReportOutput out;
  const fs::path dir = fs::path(results_dir) / "report";
  fs::create_directories(dir);
  std::string provenance = "config_hash=" + all.front().config_hash;

  std::vector<ChartSeries> by_variant;
  for (Variant v : {Variant::Baseline, Variant::JT, Variant::JT_ENT}) {
    auto it = std::find_if(all.begin(), all.end(), [&](const StepSeries& s) {
      return s.variant == v && s.prototypes == focus_prototypes;
    });
    if (it == all.end()) {
      out.warnings.push_back("variant " + to_string(v) + " (K=" + std::to_string(focus_prototypes) +
                             ") missing; series omitted");
      continue;
    }
    ChartSeries cs{to_string(v), it->mean, it->std};
    if (cs.mean.size() == 1) {
      // No adaptation run (e.g. baseline): draw a flat reference line.
      cs.mean.assign(11, cs.mean.front());
      cs.std.assign(11, cs.std.front());
    }
    by_variant.push_back(std::move(cs));
  }
  const std::string steps_svg = (dir / "accuracy_vs_steps.svg").string();
  {
    std::ofstream f(steps_svg);
    if (!f) throw IoError("cannot write '" + steps_svg + "'");
    f << render_line_chart("Corrupted accuracy vs. test-time steps (K=" + std::to_string(focus_prototypes) + ")",
                           "gradient steps P", "accuracy (%)", by_variant, provenance);
  }
  out.files.push_back(steps_svg);

  std::vector<ChartSeries> by_k;
  std::vector<const StepSeries*> ent;
  for (const auto& s : all) {
    if (s.variant == Variant::JT_ENT) ent.push_back(&s);
  }
  std::sort(ent.begin(), ent.end(), [](const StepSeries* a, const StepSeries* b) { return a->prototypes < b->prototypes; });
  for (const auto* s : ent) by_k.push_back({"K=" + std::to_string(s->prototypes), s->mean, s->std});
  if (by_k.empty()) out.warnings.push_back("no jt-ent series; prototype chart is empty");
  const std::string proto_svg = (dir / "prototypes.svg").string();
  {
    std::ofstream f(proto_svg);
    if (!f) throw IoError("cannot write '" + proto_svg + "'");
    f << render_line_chart("jt-ent accuracy vs. steps by prototype count", "gradient steps P", "accuracy (%)", by_k,
                           provenance);
  }
  out.files.push_back(proto_svg);

  const std::string summary = (dir / "summary.csv").string();
  {
    std::ofstream f(summary);
    if (!f) throw IoError("cannot write '" + summary + "'");
    f << "# " << provenance << '\n';
    f << "variant,prototypes,seeds,steps,accuracy_p0,accuracy_p0_std,accuracy_final,accuracy_final_std,gain\n";
    for (const auto& s : all) {
      f << to_string(s.variant) << ',' << s.prototypes << ',' << s.seeds << ',' << s.mean.size() - 1 << ','
        << f2(s.mean.front()) << ',' << f2(s.std.front()) << ',' << f2(s.mean.back()) << ',' << f2(s.std.back())
        << ',' << f2(s.mean.back() - s.mean.front()) << '\n';
    }
  }
  out.files.push_back(summary);
  return out;
}

}  // namespace protoalign
