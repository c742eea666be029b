#pragma once

// Command-line front end: simulate, fit, partial-effects, bias, correct,
// render, serve and export. Failures are reported as JSON lines on the
// diagnostics stream: {"level":"error","code":"input","message":"..."}.

#include <csignal>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <iterator>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "salperc/bias_correction.hpp"
#include "salperc/diagnostics.hpp"
#include "salperc/features.hpp"
#include "salperc/model_io.hpp"
#include "salperc/model_spec.hpp"
#include "salperc/ordinal_gam.hpp"
#include "salperc/records.hpp"
#include "salperc/simulator.hpp"
#include "salperc/study_service.hpp"
#include "salperc/visualization.hpp"

namespace salperc::cli {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// File helpers; "-" means stdin / stdout.

struct Streams {
  std::istream& in;
  std::ostream& out;
  std::ostream& err;
};

inline std::string read_text(const std::string& path, Streams& io) {
  if (path == "-") return {std::istreambuf_iterator<char>(io.in), std::istreambuf_iterator<char>()};
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::io, "cannot read '" + path + "'");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_text(const std::string& path, const std::string& content, Streams& io) {
  if (path == "-") {
    io.out << content;
    io.out.flush();
    return;
  }
  const fs::path p(path);
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorCode::io, "cannot write '" + path + "'");
  out << content;
  if (!out) throw Error(ErrorCode::io, "failed writing '" + path + "'");
}

inline bool ends_with(const std::string& s, std::string_view suffix) {
  return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

inline nlohmann::json parse_json(const std::string& text, const std::string& what) {
  try {
    return nlohmann::json::parse(text);
  } catch (const std::exception& e) {
    throw Error(ErrorCode::input, what + " is not valid JSON: " + e.what());
  }
}

/// Records as CSV or JSONL; the format comes from the extension or, for
/// stdin, from the first character.
inline std::vector<RatingRecord> read_records(const std::string& path, const std::string& format, Streams& io) {
  const std::string text = read_text(path, io);
  std::string f = format;
  if (f.empty() || f == "auto") {
    if (ends_with(path, ".csv")) {
      f = "csv";
    } else if (ends_with(path, ".jsonl") || ends_with(path, ".json")) {
      f = "jsonl";
    } else {
      const auto first = text.find_first_not_of(" \t\r\n");
      f = first != std::string::npos && text[first] == '{' ? "jsonl" : "csv";
    }
  }
  std::istringstream in(text);
  if (f == "csv") return records_from_csv(in);
  if (f == "jsonl") return records_from_jsonl(in);
  throw Error(ErrorCode::config, "unknown record format '" + f + "'");
}

inline std::string record_format_for(const std::string& path, const std::string& format) {
  if (!format.empty() && format != "auto") return format;
  return ends_with(path, ".csv") ? "csv" : "jsonl";
}

/// Sentences with scores: one JSON object, a JSON array, or JSON lines.
inline std::vector<nlohmann::json> read_documents(const std::string& path, Streams& io) {
  const std::string text = read_text(path, io);
  std::vector<nlohmann::json> docs;
  try {
    const auto j = nlohmann::json::parse(text);
    if (j.is_array()) {
      for (const auto& d : j) docs.push_back(d);
    } else {
      docs.push_back(j);
    }
    return docs;
  } catch (const nlohmann::json::parse_error&) {
  }
  std::istringstream in(text);
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (text::trim(line).empty()) continue;
    try {
      docs.push_back(nlohmann::json::parse(line));
    } catch (const std::exception& e) {
      throw Error(ErrorCode::input, "'" + path + "' line " + std::to_string(n) + ": " + e.what());
    }
  }
  return docs;
}

inline std::vector<AnnotatedSentence> read_annotated(const std::string& path, Streams& io) {
  std::vector<AnnotatedSentence> out;
  for (const auto& d : read_documents(path, io)) {
    try {
      out.push_back(annotated_from_json(d));
    } catch (const Error&) {
      throw;
    } catch (const std::exception& e) {
      throw Error(ErrorCode::input, "'" + path + "': " + e.what());
    }
  }
  return out;
}

inline std::vector<Sentence> read_sentences(const std::string& path, Streams& io) {
  if (ends_with(path, ".conllu")) {
    std::istringstream in(read_text(path, io));
    return ingest_conllu(in);
  }
  std::vector<Sentence> out;
  for (const auto& d : read_documents(path, io)) out.push_back(sentence_from_json(d));
  return out;
}

inline Lexicons read_lexicons(const std::string& frequency, const std::string& sentiment, Streams& io) {
  Lexicons lex;
  if (!frequency.empty()) {
    std::istringstream in(read_text(frequency, io));
    lex.frequency = load_frequency_table(in);
  }
  if (!sentiment.empty()) {
    std::istringstream in(read_text(sentiment, io));
    lex.sentiment = load_sentiment_lexicon(in);
  }
  return lex;
}

inline FittedPerceptionModel read_model(const std::string& path, Streams& io) {
  return fitted_model_from_json(parse_json(read_text(path, io), "model '" + path + "'"));
}

inline std::string safe_file_name(std::string s) {
  for (char& c : s) {
    if (!(std::isalnum(static_cast<unsigned char>(c)) || c == '-' || c == '_' || c == '.')) c = '_';
  }
  return s;
}

// ---------------------------------------------------------------------------
// Partial-effect plots

inline std::string partial_effect_csv(const PartialEffect& pe) {
  std::string out = "x,fit,se,lower,upper\n";
  for (std::size_t i = 0; i < pe.grid.size(); ++i) {
    out += csv::number(pe.grid[i]) + "," + csv::number(pe.fit[i]) + "," + csv::number(pe.se[i]) + "," +
           csv::number(pe.lower[i]) + "," + csv::number(pe.upper[i]) + "\n";
  }
  return out;
}

/// Curve with a one-standard-error band.
inline std::string partial_effect_svg(const PartialEffect& pe) {
  const double w = 480;
  const double h = 320;
  const double left = 56;
  const double right = 16;
  const double top = 24;
  const double bottom = 40;
  double y0 = 0.0;
  double y1 = 0.0;
  for (std::size_t i = 0; i < pe.grid.size(); ++i) {
    y0 = std::min(y0, pe.lower[i]);
    y1 = std::max(y1, pe.upper[i]);
  }
  if (y1 - y0 < 1e-9) {
    y0 -= 1.0;
    y1 += 1.0;
  }
  const double x0 = pe.grid.empty() ? 0.0 : pe.grid.front();
  const double x1 = pe.grid.empty() ? 1.0 : std::max(pe.grid.back(), x0 + 1e-9);
  auto sx = [&](double x) { return left + (x - x0) / (x1 - x0) * (w - left - right); };
  auto sy = [&](double y) { return top + (y1 - y) / (y1 - y0) * (h - top - bottom); };
  using detail::px;
  std::string svg = "<svg xmlns=\"http://www.w3.org/2000/svg\" version=\"1.1\" width=\"480\" height=\"320\" "
                    "viewBox=\"0 0 480 320\" font-family=\"DejaVu Sans, sans-serif\" font-size=\"12\">\n";
  svg += "  <rect x=\"0\" y=\"0\" width=\"480\" height=\"320\" fill=\"rgb(255,255,255)\"/>\n";
  std::string band;
  for (std::size_t i = 0; i < pe.grid.size(); ++i) band += px(sx(pe.grid[i])) + "," + px(sy(pe.upper[i])) + " ";
  for (std::size_t i = pe.grid.size(); i-- > 0;) band += px(sx(pe.grid[i])) + "," + px(sy(pe.lower[i])) + " ";
  if (!band.empty()) band.pop_back();
  svg += "  <polygon points=\"" + band + "\" fill=\"rgb(200,200,230)\" stroke=\"none\"/>\n";
  svg += "  <line x1=\"" + px(left) + "\" y1=\"" + px(sy(0.0)) + "\" x2=\"" + px(w - right) + "\" y2=\"" + px(sy(0.0)) +
         "\" stroke=\"rgb(150,150,150)\" stroke-dasharray=\"4 3\"/>\n";
  std::string curve;
  for (std::size_t i = 0; i < pe.grid.size(); ++i) curve += px(sx(pe.grid[i])) + "," + px(sy(pe.fit[i])) + " ";
  if (!curve.empty()) curve.pop_back();
  svg += "  <polyline points=\"" + curve + "\" fill=\"none\" stroke=\"rgb(0,0,160)\" stroke-width=\"2\"/>\n";
  svg += "  <rect x=\"" + px(left) + "\" y=\"" + px(top) + "\" width=\"" + px(w - left - right) + "\" height=\"" +
         px(h - top - bottom) + "\" fill=\"none\" stroke=\"rgb(0,0,0)\"/>\n";
  svg += "  <text x=\"" + px(left) + "\" y=\"16\">" + detail::xml_escape(pe.term) + "</text>\n";
  svg += "  <text x=\"" + px(left) + "\" y=\"" + px(h - 12) + "\">" + px(x0) + "</text>\n";
  svg += "  <text x=\"" + px(w - right) + "\" y=\"" + px(h - 12) + "\" text-anchor=\"end\">" + px(x1) + "</text>\n";
  svg += "  <text x=\"" + px(left - 4) + "\" y=\"" + px(top + 4) + "\" text-anchor=\"end\">" + px(y1) + "</text>\n";
  svg += "  <text x=\"" + px(left - 4) + "\" y=\"" + px(h - bottom) + "\" text-anchor=\"end\">" + px(y0) + "</text>\n";
  svg += "</svg>\n";
  return svg;
}

// ---------------------------------------------------------------------------
// Configuration file: plain key=value lines applied to the chosen subcommand.
// Values from the file are placed before the command-line arguments, and the
// last occurrence of an option wins, so flags override the file.

inline std::vector<std::string> expand_config(const std::vector<std::string>& args) {
  if (args.empty()) return args;
  std::string config_path;
  std::vector<std::string> rest;
  for (std::size_t i = 1; i < args.size(); ++i) {
    if (args[i] == "--config" && i + 1 < args.size()) {
      config_path = args[++i];
    } else if (args[i].rfind("--config=", 0) == 0) {
      config_path = args[i].substr(9);
    } else {
      rest.push_back(args[i]);
    }
  }
  if (config_path.empty()) return args;
  std::ifstream in(config_path);
  if (!in) throw Error(ErrorCode::io, "cannot read config file '" + config_path + "'");
  std::vector<CLI::ConfigItem> items;
  try {
    items = CLI::ConfigINI().from_config(in);
  } catch (const std::exception& e) {
    throw Error(ErrorCode::config, "config file '" + config_path + "': " + e.what());
  }
  std::vector<std::string> out{args[0]};
  std::size_t pos = 0;
  if (!rest.empty() && rest[0].rfind("-", 0) != 0) out.push_back(rest[pos++]);  // subcommand
  for (const auto& item : items) {
    if (item.name == "++" || item.name == "--" || item.name.empty()) continue;
    const std::string flag = "--" + item.name;
    if (item.inputs.size() == 1 && (item.inputs[0] == "true" || item.inputs[0] == "false")) {
      if (item.inputs[0] == "true") out.push_back(flag);
      continue;
    }
    for (const auto& v : item.inputs) {
      out.push_back(flag);
      out.push_back(v);
    }
  }
  out.insert(out.end(), rest.begin() + static_cast<std::ptrdiff_t>(pos), rest.end());
  return out;
}

// ---------------------------------------------------------------------------
// Subcommands

struct SimulateArgs {
  std::optional<std::uint64_t> seed;
  std::string sentences;
  std::size_t synthetic = 150;
  std::string frequency;
  std::string sentiment;
  std::size_t participants = 20;
  std::string mode = "single_condition";
  std::string condition = "saliency";
  std::string ground_truth;
  std::size_t clickers = 0;
  std::string out = "-";
  std::string format = "auto";
  std::string plan_out;
  std::string study_id = "study";
  std::string corrector_model;
  std::size_t reference_samples = 10001;
  bool paper_filters = false;
};

struct FitArgs {
  std::optional<std::uint64_t> seed;
  std::string records = "-";
  std::string format = "auto";
  std::string out = "-";
  std::string summary;
  std::string spec;
  int k = 10;
  int k_saliency = 20;
  bool interactions = false;
  bool no_random_effects = false;
  std::optional<double> lambda;
  std::vector<double> lambda_grid;
  int folds = 5;
  int max_sweeps = 3;
  bool paper_filters = false;
};

struct CorrectArgs {
  std::optional<std::uint64_t> seed;
  std::string model;
  std::string input = "-";
  std::string frequency;
  std::string sentiment;
  std::size_t reference_samples = 10001;
  double probe = 0.5;
  double display_index = 1.0;
  double alpha = 0.05;
  int steps = 100;
  std::string out = "-";
  std::string render_dir;
};

struct RenderArgs {
  std::string input = "-";
  std::string mode = "heatmap";
  std::string out_dir;
  int char_width = 10;
  int font_size = 16;
  int bar_area_height = 60;
  int bar_width = 16;
};

struct ServeArgs {
  std::vector<std::string> plans;
  std::string log;
  std::string host = "127.0.0.1";
  int port = 8080;
  std::string port_file;
  std::string frequency;
  std::string sentiment;
};

struct ExportArgs {
  std::vector<std::string> plans;
  std::string log;
  std::string study;
  std::string format = "csv";
  bool paper_filters = false;
  std::string out = "-";
};

inline std::uint64_t require_seed(const std::optional<std::uint64_t>& seed, std::string_view sub) {
  if (!seed) throw Error(ErrorCode::config, std::string(sub) + " is stochastic and requires --seed");
  return *seed;
}

inline void run_simulate(const SimulateArgs& a, Streams& io) {
  const std::uint64_t seed = require_seed(a.seed, "simulate");
  Lexicons lexicons = read_lexicons(a.frequency, a.sentiment, io);
  std::vector<Sentence> sentences;
  if (!a.sentences.empty()) {
    sentences = read_sentences(a.sentences, io);
  } else {
    SyntheticCorpus corpus = make_synthetic_corpus(a.synthetic, seed);
    sentences = std::move(corpus.sentences);
    if (a.frequency.empty()) lexicons.frequency = corpus.lexicons.frequency;
    if (a.sentiment.empty()) lexicons.sentiment = corpus.lexicons.sentiment;
  }
  GroundTruthModel gt = default_ground_truth();
  if (!a.ground_truth.empty()) gt = ground_truth_from_json(parse_json(read_text(a.ground_truth, io), "ground truth"));

  PlanOptions po;
  po.study_id = a.study_id;
  po.participants = a.participants;
  po.mode = plan_mode_from_string(a.mode);
  po.condition = condition_from_string(a.condition);
  po.seed = seed;
  std::optional<FittedPerceptionModel> corrector_model;
  std::optional<ReferenceContext> reference;
  if (!a.corrector_model.empty()) {
    corrector_model = read_model(a.corrector_model, io);
    reference = select_reference_context(*corrector_model, ReferenceOptions{a.reference_samples, 0.5, seed});
    po.corrector = [&](const Sentence& s, const SaliencyMap& m, double display_index) {
      CorrectionOptions co;
      co.display_index = display_index;
      return correct_sentence(averaged_perception(*corrector_model), s, m, reference->context, lexicons, co).corrected;
    };
  }
  const StudyPlan plan = make_study_plan(sentences, po);
  if (!a.plan_out.empty()) write_text(a.plan_out, to_json(plan).dump(1) + "\n", io);

  SimulationOptions so;
  so.seed = seed;
  for (std::size_t i = 0; i < a.clickers && i < plan.participants.size(); ++i) {
    so.clickers.insert(plan.participants[plan.participants.size() - 1 - i].worker_id);
  }
  const SimulationResult sim = simulate_ratings(gt, plan, lexicons, so);
  ExportFilters filters;
  filters.paper_filters = a.paper_filters;
  const auto rows = apply_filters(sim.records, sim.trap_failed_workers(), filters);
  const std::string format = record_format_for(a.out, a.format);
  write_text(a.out, format == "csv" ? to_csv(rows) : to_jsonl(rows), io);
}

inline nlohmann::json fit_summary(const FittedPerceptionModel& m) {
  nlohmann::json edfs = nlohmann::json::array();
  for (const auto& e : m.edf()) edfs.push_back({{"term", e.term}, {"size", e.size}, {"edf", e.edf}});
  nlohmann::json lambdas = nlohmann::json::array();
  for (const auto& p : m.penalties) lambdas.push_back({{"term", m.blocks[p.block].label}, {"penalty", p.name}, {"lambda", p.lambda}});
  return {{"cut_points", m.cut_points},
          {"edf", edfs},
          {"smoothing", lambdas},
          {"iterations", m.report.iterations},
          {"converged", m.report.converged},
          {"objective", m.report.objective},
          {"dropped", m.report.dropped},
          {"notes", m.report.notes}};
}

inline void run_fit(const FitArgs& a, Streams& io) {
  const std::uint64_t seed = require_seed(a.seed, "fit");
  std::vector<RatingRecord> records = read_records(a.records, a.format, io);
  if (a.paper_filters) {
    ExportFilters f;
    f.paper_filters = true;
    std::vector<RatingRecord> kept;
    for (auto& r : apply_filters(records, {}, f)) kept.push_back(std::move(r.record));
    records = std::move(kept);
  }
  if (records.empty()) throw Error(ErrorCode::input, "no rating records to fit");
  ModelSpec spec;
  if (!a.spec.empty()) {
    spec = model_spec_from_json(parse_json(read_text(a.spec, io), "model spec"));
  } else {
    DefaultSpecOptions o;
    o.k = a.k;
    o.k_saliency = a.k_saliency;
    o.interactions = a.interactions;
    o.random_effects = !a.no_random_effects;
    o.lambda = a.lambda;
    spec = default_model_spec(o);
  }
  FitOptions fo;
  fo.seed = seed;
  fo.folds = a.folds;
  fo.max_sweeps = a.max_sweeps;
  if (!a.lambda_grid.empty()) fo.lambda_grid = a.lambda_grid;
  const FittedPerceptionModel m = fit(records, spec, fo);
  write_text(a.out, to_json(m).dump(1) + "\n", io);
  if (!a.summary.empty()) write_text(a.summary, fit_summary(m).dump(2) + "\n", io);
}

inline void run_partial_effects(const std::string& model_path, const std::string& out_dir, int points,
                                const std::vector<std::string>& terms, Streams& io) {
  if (points < 2) throw Error(ErrorCode::config, "--points must be at least 2");
  const FittedPerceptionModel m = read_model(model_path, io);
  std::vector<std::string> wanted = terms;
  if (wanted.empty()) {
    for (const auto& b : m.blocks) {
      if (std::holds_alternative<SmoothBlock>(b.data) && b.size > 0) wanted.push_back(b.label);
    }
  }
  for (const auto& term : wanted) {
    const ModelBlock* b = m.find_block(term);
    if (!b || !std::holds_alternative<SmoothBlock>(b->data)) {
      throw Error(ErrorCode::not_found, "no univariate smooth '" + term + "'; available terms: " + m.available_terms());
    }
    const Interval range = std::get<SmoothBlock>(b->data).basis.spec().range;
    std::vector<double> grid(static_cast<std::size_t>(points));
    for (int i = 0; i < points; ++i) grid[i] = range.lower + range.width() * i / (points - 1);
    const PartialEffect pe = m.partial_effect(b->label, grid);
    const std::string base = (fs::path(out_dir) / safe_file_name(b->label)).string();
    write_text(base + ".csv", partial_effect_csv(pe), io);
    write_text(base + ".svg", partial_effect_svg(pe), io);
  }
}

inline void run_correct(const CorrectArgs& a, bool correct, Streams& io) {
  const std::uint64_t seed = require_seed(a.seed, correct ? "correct" : "bias");
  if (a.model.empty()) throw Error(ErrorCode::config, "--model is required");
  if (a.model == "-" && a.input == "-") throw Error(ErrorCode::config, "--model and --input cannot both read stdin");
  const FittedPerceptionModel m = read_model(a.model, io);
  const Lexicons lexicons = read_lexicons(a.frequency, a.sentiment, io);
  const auto inputs = read_annotated(a.input, io);
  const ReferenceContext ref = select_reference_context(m, ReferenceOptions{a.reference_samples, a.probe, seed});
  const auto u = averaged_perception(m);
  nlohmann::json sentences = nlohmann::json::array();
  for (const auto& in : inputs) {
    if (correct) {
      CorrectionOptions co;
      co.alpha = a.alpha;
      co.n_steps = a.steps;
      co.display_index = a.display_index;
      const CorrectionResult r = correct_sentence(u, in.sentence, in.map, ref.context, lexicons, co);
      sentences.push_back(to_json(in.sentence, in.map, r));
      if (!a.render_dir.empty()) {
        const std::string base = (fs::path(a.render_dir) / safe_file_name(in.sentence.id)).string();
        RenderSpec spec;
        const Rendering orig = render_heatmap(in.sentence, in.map, spec);
        spec.mode = RenderMode::corrected_heatmap;
        const Rendering corr = render_heatmap(in.sentence, r.corrected, spec);
        std::vector<double> before;
        std::vector<double> after;
        for (const auto& t : r.before.tokens) before.push_back(t.b);
        for (const auto& t : r.after.tokens) after.push_back(t.b);
        const BiasScale scale = bias_scale(before);
        write_text(base + ".original.svg", orig.svg, io);
        write_text(base + ".corrected.svg", corr.svg, io);
        write_text(base + ".corrected.html", corr.html, io);
        write_text(base + ".bias-before.svg", render_bias_strip(in.sentence, before).svg, io);
        write_text(base + ".bias-after.svg", render_bias_strip(in.sentence, after, {}, scale).svg, io);
      }
    } else {
      const auto contexts = extract(in.sentence, in.map, a.display_index, lexicons);
      const BiasReport report = sentence_bias(u, contexts, ref.context);
      nlohmann::json tokens = nlohmann::json::array();
      std::vector<double> bs;
      for (std::size_t i = 0; i < report.tokens.size(); ++i) {
        nlohmann::json t = to_json(report.tokens[i]);
        t["surface"] = in.sentence.tokens[i].surface;
        t["score"] = in.map.scores[i];
        tokens.push_back(t);
        bs.push_back(report.tokens[i].b);
      }
      sentences.push_back({{"id", in.sentence.id}, {"tokens", tokens}, {"total_abs_bias", report.total_abs()}});
      if (!a.render_dir.empty()) {
        write_text((fs::path(a.render_dir) / safe_file_name(in.sentence.id)).string() + ".bias.svg",
                   render_bias_strip(in.sentence, bs).svg, io);
      }
    }
  }
  const nlohmann::json doc = {{"reference", to_json(ref)}, {"sentences", sentences}};
  write_text(a.out, doc.dump(2) + "\n", io);
}

inline void run_render(const RenderArgs& a, Streams& io) {
  RenderSpec spec;
  spec.mode = render_mode_from_string(a.mode);
  spec.char_width = a.char_width;
  spec.font_size = a.font_size;
  spec.bar_area_height = a.bar_area_height;
  spec.bar_width = a.bar_width;
  validate(spec);
  for (const auto& doc : read_documents(a.input, io)) {
    const Sentence sentence = sentence_from_json(doc);
    SaliencyMap map{sentence.id, {}};
    std::vector<double> biases;
    if (spec.mode == RenderMode::bias) {
      biases = doc.at("bias").get<std::vector<double>>();
      map.scores.assign(sentence.tokens.size(), 0.0);
    } else {
      map.scores = doc.at("scores").get<std::vector<double>>();
    }
    const Rendering r = render(sentence, map, spec, biases);
    if (a.out_dir.empty()) {
      io.out << r.svg;
    } else {
      const std::string base = (fs::path(a.out_dir) / safe_file_name(sentence.id)).string();
      write_text(base + ".svg", r.svg, io);
      write_text(base + ".html", r.html, io);
    }
  }
}

inline std::vector<StudyPlan> read_plans(const std::vector<std::string>& paths, Streams& io) {
  if (paths.empty()) throw Error(ErrorCode::config, "at least one --plan is required");
  std::vector<StudyPlan> plans;
  for (const auto& p : paths) plans.push_back(study_plan_from_json(parse_json(read_text(p, io), "plan '" + p + "'")));
  return plans;
}

namespace detail {
inline service::HttpStudyServer*& active_server() {
  static service::HttpStudyServer* s = nullptr;
  return s;
}
extern "C" inline void stop_on_signal(int) {
  if (auto* s = active_server()) s->stop();
}
}  // namespace detail

inline void run_serve(const ServeArgs& a, Streams& io) {
  if (a.log.empty()) throw Error(ErrorCode::config, "--log is required");
  service::ServiceOptions options;
  options.lexicons = read_lexicons(a.frequency, a.sentiment, io);
  service::StudyService svc(read_plans(a.plans, io), a.log, std::move(options));
  service::HttpStudyServer server(svc);
  const int port = server.bind(a.host, a.port);
  if (!a.port_file.empty()) {
    const std::string tmp = a.port_file + ".tmp";
    write_text(tmp, std::to_string(port) + "\n", io);
    fs::rename(tmp, a.port_file);
  }
  io.out << nlohmann::json({{"listening", a.host + ":" + std::to_string(port)}}).dump() << std::endl;
  detail::active_server() = &server;
  std::signal(SIGINT, detail::stop_on_signal);
  std::signal(SIGTERM, detail::stop_on_signal);
  server.serve();
  detail::active_server() = nullptr;
}

inline void run_export(const ExportArgs& a, Streams& io) {
  if (a.log.empty()) throw Error(ErrorCode::config, "--log is required");
  if (!fs::exists(a.log)) throw Error(ErrorCode::io, "log '" + a.log + "' does not exist");
  const auto plans = read_plans(a.plans, io);
  const std::string study = a.study.empty() ? plans.front().study_id : a.study;
  service::StudyService svc(plans, a.log);
  ExportFilters filters;
  filters.paper_filters = a.paper_filters;
  write_text(a.out, svc.export_text(study, a.format, filters), io);
}

// ---------------------------------------------------------------------------
// Entry point

inline int exit_code(ErrorCode code) { return code == ErrorCode::config ? 2 : 1; }

inline void emit_error(std::ostream& err, ErrorCode code, const std::string& message) {
  err << nlohmann::json({{"level", "error"}, {"code", to_string(code)}, {"message", message}}).dump() << std::endl;
}

inline int run(const std::vector<std::string>& raw_args, std::istream& in, std::ostream& out, std::ostream& err) {
  Streams io{in, out, err};
  Warnings::set_handler([&err](std::string_view msg) {
    err << nlohmann::json({{"level", "warning"}, {"message", std::string(msg)}}).dump() << std::endl;
  });
  struct ResetWarnings {
    ~ResetWarnings() { Warnings::set_handler(nullptr); }
  } reset;

  CLI::App app{"Perception-aware saliency explanations: simulate, fit, correct, render and serve rating studies"};
  app.name(raw_args.empty() ? "salperc" : fs::path(raw_args[0]).filename().string());
  app.require_subcommand(1);
  app.option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
  app.add_option("--config", "plain key=value file with option defaults (command-line flags win)");

  SimulateArgs sim;
  auto* s = app.add_subcommand("simulate", "generate a study plan and simulated ratings");
  s->add_option("--seed", sim.seed, "random seed (required)");
  s->add_option("--sentences", sim.sentences, "sentences (.conllu, JSON or JSONL); default: synthetic corpus");
  s->add_option("--synthetic", sim.synthetic, "number of synthetic sentences when --sentences is absent");
  s->add_option("--frequency", sim.frequency, "word frequency TSV");
  s->add_option("--sentiment", sim.sentiment, "sentiment lexicon TSV");
  s->add_option("--participants", sim.participants, "number of simulated participants");
  s->add_option("--mode", sim.mode, "single_condition or within_subject");
  s->add_option("--condition", sim.condition, "condition for single_condition plans");
  s->add_option("--ground-truth", sim.ground_truth, "ground-truth model JSON");
  s->add_option("--clickers", sim.clickers, "number of participants answering at random");
  s->add_option("--out", sim.out, "records output (.csv or .jsonl, '-' for stdout)");
  s->add_option("--format", sim.format, "csv, jsonl or auto");
  s->add_option("--plan-out", sim.plan_out, "write the study plan JSON here");
  s->add_option("--study-id", sim.study_id, "study identifier");
  s->add_option("--corrector-model", sim.corrector_model, "fitted model used to correct the corrected condition");
  s->add_option("--reference-samples", sim.reference_samples, "reference-context sample count (odd)");
  s->add_flag("--paper-filters", sim.paper_filters, "drop flagged records instead of marking them");

  FitArgs fa;
  auto* f = app.add_subcommand("fit", "fit the perception model to rating records");
  f->add_option("--seed", fa.seed, "seed for cross-validation folds (required)");
  f->add_option("--records", fa.records, "rating records (.csv or .jsonl, '-' for stdin)");
  f->add_option("--format", fa.format, "csv, jsonl or auto");
  f->add_option("--out", fa.out, "model output JSON ('-' for stdout)");
  f->add_option("--summary", fa.summary, "write a fit summary JSON here");
  f->add_option("--spec", fa.spec, "model spec JSON (default: every covariate)");
  f->add_option("--k", fa.k, "basis size of univariate smooths");
  f->add_option("--k-saliency", fa.k_saliency, "basis size of the saliency smooth");
  f->add_flag("--interactions", fa.interactions, "add all pairwise tensor interactions");
  f->add_flag("--no-random-effects", fa.no_random_effects, "omit worker and sentence random effects");
  f->add_option("--lambda", fa.lambda, "fixed smoothing parameter for every term");
  f->add_option("--lambda-grid", fa.lambda_grid, "smoothing parameter grid for cross-validation")->delimiter(',');
  f->add_option("--folds", fa.folds, "cross-validation folds");
  f->add_option("--max-sweeps", fa.max_sweeps, "coordinate-search sweeps");
  f->add_flag("--paper-filters", fa.paper_filters, "drop long words and slow responses before fitting");

  std::string pe_model;
  std::string pe_dir;
  int pe_points = 50;
  std::vector<std::string> pe_terms;
  auto* p = app.add_subcommand("partial-effects", "write partial-effect curves (CSV) and plots (SVG)");
  p->add_option("--model", pe_model, "fitted model JSON")->required();
  p->add_option("--out-dir", pe_dir, "output directory")->required();
  p->add_option("--points", pe_points, "grid points per curve");
  p->add_option("--term", pe_terms, "smooth term (repeatable; default all)")->multi_option_policy(CLI::MultiOptionPolicy::TakeAll);

  CorrectArgs ba;
  CorrectArgs ca;
  auto add_correct_options = [](CLI::App* sub, CorrectArgs& a) {
    sub->add_option("--seed", a.seed, "seed for reference-context sampling (required)");
    sub->add_option("--model", a.model, "fitted model JSON");
    sub->add_option("--input", a.input, "sentences with scores (JSON or JSONL)");
    sub->add_option("--frequency", a.frequency, "word frequency TSV");
    sub->add_option("--sentiment", a.sentiment, "sentiment lexicon TSV");
    sub->add_option("--reference-samples", a.reference_samples, "reference-context sample count (odd)");
    sub->add_option("--probe", a.probe, "probe saliency for reference selection");
    sub->add_option("--display-index", a.display_index, "display index of the rendering");
    sub->add_option("--out", a.out, "output JSON ('-' for stdout)");
    sub->add_option("--render-dir", a.render_dir, "also write SVG/HTML renderings here");
  };
  auto* b = app.add_subcommand("bias", "score perception bias per token");
  add_correct_options(b, ba);
  auto* c = app.add_subcommand("correct", "correct saliency maps for perception bias");
  add_correct_options(c, ca);
  c->add_option("--alpha", ca.alpha, "initial step size");
  c->add_option("--steps", ca.steps, "number of correction rounds");

  RenderArgs ra;
  auto* r = app.add_subcommand("render", "render heatmaps, bar charts or bias strips");
  r->add_option("--input", ra.input, "sentences with scores (or 'bias') as JSON or JSONL");
  r->add_option("--mode", ra.mode, "heatmap, corrected_heatmap, bars or bias");
  r->add_option("--out-dir", ra.out_dir, "write <id>.svg and <id>.html here (default: SVG to stdout)");
  r->add_option("--char-width", ra.char_width, "px per character");
  r->add_option("--font-size", ra.font_size, "font size in px");
  r->add_option("--bar-area-height", ra.bar_area_height, "bar draw-area height in px");
  r->add_option("--bar-width", ra.bar_width, "bar width in px");

  ServeArgs sa;
  auto* v = app.add_subcommand("serve", "run the study HTTP service");
  v->add_option("--plan", sa.plans, "study plan JSON (repeatable)")->multi_option_policy(CLI::MultiOptionPolicy::TakeAll);
  v->add_option("--log", sa.log, "append-only response log");
  v->add_option("--host", sa.host, "bind address");
  v->add_option("--port", sa.port, "port (0 picks a free port)");
  v->add_option("--port-file", sa.port_file, "write the bound port here once listening");
  v->add_option("--frequency", sa.frequency, "word frequency TSV");
  v->add_option("--sentiment", sa.sentiment, "sentiment lexicon TSV");

  ExportArgs ea;
  auto* e = app.add_subcommand("export", "export stored ratings from a service log");
  e->add_option("--plan", ea.plans, "study plan JSON (repeatable)")->multi_option_policy(CLI::MultiOptionPolicy::TakeAll);
  e->add_option("--log", ea.log, "response log");
  e->add_option("--study", ea.study, "study id (default: the first plan's)");
  e->add_option("--format", ea.format, "csv or jsonl");
  e->add_flag("--paper-filters", ea.paper_filters, "drop flagged records");
  e->add_option("--out", ea.out, "output file ('-' for stdout)");

  std::vector<std::string> args;
  try {
    args = expand_config(raw_args);
  } catch (const Error& ex) {
    emit_error(err, ex.code(), ex.what());
    return exit_code(ex.code());
  }
  std::vector<std::string> reversed(args.rbegin(), args.rend() - 1);
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp& ex) {
    return app.exit(ex, out, err);
  } catch (const CLI::CallForAllHelp& ex) {
    return app.exit(ex, out, err);
  } catch (const CLI::ParseError& ex) {
    app.exit(ex, out, err);
    emit_error(err, ErrorCode::config, ex.what());
    return 2;
  }

  try {
    if (s->parsed()) run_simulate(sim, io);
    if (f->parsed()) run_fit(fa, io);
    if (p->parsed()) run_partial_effects(pe_model, pe_dir, pe_points, pe_terms, io);
    if (b->parsed()) run_correct(ba, false, io);
    if (c->parsed()) run_correct(ca, true, io);
    if (r->parsed()) run_render(ra, io);
    if (v->parsed()) run_serve(sa, io);
    if (e->parsed()) run_export(ea, io);
  } catch (const Error& ex) {
    emit_error(err, ex.code(), ex.what());
    return exit_code(ex.code());
  } catch (const std::filesystem::filesystem_error& ex) {
    emit_error(err, ErrorCode::io, ex.what());
    return 1;
  } catch (const std::exception& ex) {
    emit_error(err, ErrorCode::input, ex.what());
    return 1;
  }
  return 0;
}

inline int run(int argc, char** argv) {
  return run(std::vector<std::string>(argv, argv + argc), std::cin, std::cout, std::cerr);
}

}  // namespace salperc::cli
