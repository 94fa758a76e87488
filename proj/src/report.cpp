#include "detox/report.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

#include "detox/errors.hpp"
#include "detox/format.hpp"
#include "detox/rng.hpp"

namespace detox {

using nlohmann::json;

const ToxicityCell& ToxicityTable::cell(SplitName split, ModelTag tag) const {
  for (const auto& c : cells)
    if (c.split == split && c.tag == tag) return c;
  throw MappingError(std::string("toxicity table: no cell for ") + split_name(split) + "/" + model_tag_name(tag));
}

std::optional<double> toxic_fraction(std::span<const double> scores, double threshold) {
  if (scores.empty()) return std::nullopt;
  const auto hits = std::count_if(scores.begin(), scores.end(), [&](double s) { return s >= threshold; });
  return static_cast<double>(hits) / static_cast<double>(scores.size());
}

std::uint64_t prompt_seed(std::uint64_t seed, const std::string& prompt_id) {
  return derive_seed(seed, fnv1a(prompt_id));
}

GenerationParams decoding_params(const DecodingOptions& decoding, std::uint64_t seed) {
  GenerationParams gp;
  gp.max_new_tokens = decoding.max_new_tokens;
  gp.temperature = decoding.temperature;
  gp.top_k = decoding.top_k;
  gp.seed = seed;
  gp.stop_token = Vocabulary::kEos;
  return gp;
}

std::vector<ScoredGeneration> generate_scored(std::span<const ModelVariant> models,
                                              std::span<const PromptRecord> prompts,
                                              const OracleModel& eval_oracle, const Vocabulary& vocab,
                                              const DecodingOptions& decoding, std::uint64_t seed) {
  if (eval_oracle.role != OracleRole::kEval) {
    throw RoleMisuseError("evaluation requires the eval-role oracle, not the reward oracle");
  }
  for (const auto& m : models) {
    if (!m.weights) throw ValidationError(std::string("evaluation: no weights for ") + model_tag_name(m.tag));
  }
  std::vector<ScoredGeneration> out;
  for (const auto& p : prompts) {
    const auto prompt_ids = render_prompt(vocab, p.prompt);
    const auto gp = decoding_params(decoding, prompt_seed(seed, p.id));
    for (const auto& m : models) {
      ScoredGeneration g;
      g.record = generate(*m.weights, m.adapter, prompt_ids, gp, m.tag);
      g.record.id = p.id;
      g.prompt = p.prompt;
      const auto content = content_tokens(vocab, g.record.completion_ids);
      g.completion = vocab.decode(content);
      g.toxicity = score(eval_oracle, content).value;
      out.push_back(std::move(g));
    }
  }
  return out;
}

EvaluationResult run_evaluation(std::span<const ModelVariant> models, std::span<const DatasetSplit> splits,
                                const OracleModel& eval_oracle, const Vocabulary& vocab,
                                const DecodingOptions& decoding, std::uint64_t seed, double toxic_threshold) {
  if (eval_oracle.role != OracleRole::kEval) {
    throw RoleMisuseError("evaluation requires the eval-role oracle, not the reward oracle");
  }
  EvaluationResult result;
  std::vector<PromptRecord> unique;
  std::set<std::string> seen;
  for (const auto& split : splits) {
    if (split.records.empty()) {
      result.warnings.push_back(std::string("split ") + split_name(split.name) + " is empty; fraction is null");
    }
    for (const auto& r : split.records)
      if (seen.insert(r.id).second) unique.push_back(r);
  }
  result.generations = generate_scored(models, unique, eval_oracle, vocab, decoding, seed);

  std::map<std::pair<std::string, ModelTag>, double> by_key;
  for (const auto& g : result.generations) by_key[{g.record.id, g.record.model_tag}] = g.toxicity;
  for (const auto& split : splits) {
    for (const auto& m : models) {
      std::vector<double> scores;
      for (const auto& r : split.records) scores.push_back(by_key.at({r.id, m.tag}));
      result.table.cells.push_back({split.name, m.tag, toxic_fraction(scores, toxic_threshold), scores.size()});
    }
  }
  return result;
}

void write_text_file(const std::filesystem::path& path, const std::string& text) {
  std::error_code ec;
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path(), ec);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
  if (!out) throw IoError("write failed for " + path.string());
}

void write_toxicity_table(const std::filesystem::path& path, const ToxicityTable& table) {
  std::ostringstream os;
  os << "split,model_tag,fraction,n\n";
  for (const auto& c : table.cells) {
    os << split_name(c.split) << ',' << model_tag_name(c.tag) << ',' << format_optional(c.fraction) << ','
       << c.n << '\n';
  }
  write_text_file(path, os.str());
}

// ---- generations / attributions (JSON lines) ------------------------------------------

namespace {

template <typename T, typename Parse>
std::vector<T> read_jsonl(const std::filesystem::path& path, Parse parse) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open " + path.string());
  std::vector<T> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    json j = json::parse(line, nullptr, false);
    if (j.is_discarded()) throw ParseError(line_no, "malformed JSON in " + path.string());
    try {
      out.push_back(parse(j));
    } catch (const json::exception& e) {
      throw ParseError(line_no, e.what());
    } catch (const ValidationError& e) {
      throw ValidationError("line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  return out;
}

void write_lines(const std::filesystem::path& path, const std::vector<json>& rows) {
  std::string text;
  for (const auto& r : rows) text += r.dump() + "\n";
  write_text_file(path, text);
}

}  // namespace

void save_generations(const std::filesystem::path& path, std::span<const ScoredGeneration> generations) {
  std::vector<json> rows;
  for (const auto& g : generations) {
    rows.push_back(json{{"id", g.record.id},
                        {"model_tag", model_tag_name(g.record.model_tag)},
                        {"prompt", g.prompt},
                        {"completion", g.completion},
                        {"toxicity", g.toxicity},
                        {"prompt_ids", g.record.prompt_ids},
                        {"completion_ids", g.record.completion_ids},
                        {"step_logprobs", g.record.step_logprobs},
                        {"temperature", g.record.temperature},
                        {"top_k", g.record.top_k ? json(*g.record.top_k) : json(nullptr)}});
  }
  write_lines(path, rows);
}

std::vector<ScoredGeneration> load_generations(const std::filesystem::path& path) {
  return read_jsonl<ScoredGeneration>(path, [](const json& j) {
    ScoredGeneration g;
    g.record.id = j.at("id").get<std::string>();
    g.record.model_tag = model_tag_from_name(j.at("model_tag").get<std::string>());
    g.prompt = j.at("prompt").get<std::string>();
    g.completion = j.at("completion").get<std::string>();
    g.toxicity = j.at("toxicity").get<double>();
    g.record.prompt_ids = j.at("prompt_ids").get<std::vector<TokenId>>();
    g.record.completion_ids = j.at("completion_ids").get<std::vector<TokenId>>();
    g.record.step_logprobs = j.at("step_logprobs").get<std::vector<double>>();
    g.record.temperature = j.at("temperature").get<double>();
    if (!j.at("top_k").is_null()) g.record.top_k = j.at("top_k").get<std::size_t>();
    if (g.record.step_logprobs.size() != g.record.completion_ids.size()) {
      throw ValidationError("generation " + g.record.id + ": step_logprobs length mismatch");
    }
    return g;
  });
}

void save_attributions(const std::filesystem::path& path, std::span<const AttributionMatrix> matrices) {
  std::vector<json> rows;
  for (const auto& m : matrices) {
    rows.push_back(json{{"record_id", m.record_id},
                        {"model_tag", model_tag_name(m.model_tag)},
                        {"prompt_len", m.prompt_len},
                        {"rows", m.rows},
                        {"uniform_fallback_rows", m.uniform_fallback_rows}});
  }
  write_lines(path, rows);
}

std::vector<AttributionMatrix> load_attributions(const std::filesystem::path& path) {
  return read_jsonl<AttributionMatrix>(path, [](const json& j) {
    AttributionMatrix m;
    m.record_id = j.at("record_id").get<std::string>();
    m.model_tag = model_tag_from_name(j.at("model_tag").get<std::string>());
    m.prompt_len = j.at("prompt_len").get<std::size_t>();
    m.rows = j.at("rows").get<std::vector<std::vector<double>>>();
    if (j.contains("uniform_fallback_rows")) {
      m.uniform_fallback_rows = j.at("uniform_fallback_rows").get<std::vector<std::size_t>>();
    }
    m.validate();
    return m;
  });
}

// ---- entropy report -------------------------------------------------------------------

std::string entropy_csv(const BucketedProfiles& buckets) {
  std::ostringstream os;
  os << "step,model_tag,bucket,mean_entropy,ci_low,ci_high,n\n";
  for (const auto& [key, steps] : buckets) {
    for (std::size_t t = 0; t < steps.size(); ++t) {
      const auto& s = steps[t];
      os << t << ',' << model_tag_name(key.first) << ',' << bucket_name(key.second) << ','
         << format_double(s.mean) << ',' << format_optional(s.ci_low) << ',' << format_optional(s.ci_high)
         << ',' << s.n << '\n';
    }
  }
  return os.str();
}

namespace {

std::string fixed(double v, int digits = 2) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.*f", digits, v);
  return buf;
}

const char* tag_color(ModelTag tag) {
  switch (tag) {
    case ModelTag::IT: return "#1f77b4";
    case ModelTag::FT: return "#d62728";
    case ModelTag::RL: return "#2ca02c";
  }
  return "#000000";
}

}  // namespace

std::string entropy_svg(const BucketedProfiles& buckets) {
  constexpr double width = 760, height = 440;
  constexpr double left = 60, right = 180, top = 40, bottom = 50;
  const double plot_w = width - left - right, plot_h = height - top - bottom;

  std::size_t max_step = 0;
  double y_max = 0.0;
  for (const auto& [key, steps] : buckets) {
    if (!steps.empty()) max_step = std::max(max_step, steps.size() - 1);
    for (const auto& s : steps) y_max = std::max({y_max, s.mean, s.ci_high.value_or(s.mean)});
  }
  y_max = y_max > 0.0 ? y_max * 1.05 : 1.0;
  const double x_span = max_step > 0 ? static_cast<double>(max_step) : 1.0;
  auto px = [&](std::size_t t) { return left + plot_w * static_cast<double>(t) / x_span; };
  auto py = [&](double v) { return top + plot_h * (1.0 - std::clamp(v, 0.0, y_max) / y_max); };

  std::ostringstream os;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << height
     << "\" viewBox=\"0 0 " << width << ' ' << height << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  os << "<text x=\"" << left << "\" y=\"22\" font-size=\"14\">Prompt attribution entropy by generation step</text>\n";

  // axes and grid
  os << "<g stroke=\"#999\" stroke-width=\"1\">\n";
  os << "<line x1=\"" << left << "\" y1=\"" << top + plot_h << "\" x2=\"" << left + plot_w << "\" y2=\""
     << top + plot_h << "\"/>\n";
  os << "<line x1=\"" << left << "\" y1=\"" << top << "\" x2=\"" << left << "\" y2=\"" << top + plot_h
     << "\"/>\n</g>\n";
  for (int i = 0; i <= 5; ++i) {
    const double v = y_max * i / 5.0;
    os << "<line x1=\"" << left << "\" y1=\"" << fixed(py(v)) << "\" x2=\"" << left + plot_w << "\" y2=\""
       << fixed(py(v)) << "\" stroke=\"#eee\"/>\n";
    os << "<text x=\"" << left - 6 << "\" y=\"" << fixed(py(v) + 4) << "\" text-anchor=\"end\">" << fixed(v)
       << "</text>\n";
  }
  const std::size_t stride = max_step > 12 ? (max_step + 11) / 12 : 1;
  for (std::size_t t = 0; t <= max_step; t += stride) {
    os << "<text x=\"" << fixed(px(t)) << "\" y=\"" << top + plot_h + 16 << "\" text-anchor=\"middle\">" << t
       << "</text>\n";
  }
  os << "<text x=\"" << left + plot_w / 2 << "\" y=\"" << height - 12
     << "\" text-anchor=\"middle\">generation step</text>\n";
  os << "<text x=\"16\" y=\"" << top + plot_h / 2 << "\" text-anchor=\"middle\" transform=\"rotate(-90 16 "
     << top + plot_h / 2 << ")\">entropy (nats)</text>\n";

  std::size_t legend_row = 0;
  for (const auto& [key, steps] : buckets) {
    if (steps.empty()) continue;
    const char* color = tag_color(key.first);
    const bool toxic = key.second == Bucket::kToxic;
    const std::string label = std::string(model_tag_name(key.first)) + " " + bucket_name(key.second);

    std::ostringstream upper, lower;
    bool has_band = false;
    for (std::size_t t = 0; t < steps.size(); ++t) {
      const auto& s = steps[t];
      has_band = has_band || s.ci_high.has_value();
      upper << fixed(px(t)) << ',' << fixed(py(s.ci_high.value_or(s.mean))) << ' ';
    }
    for (std::size_t t = steps.size(); t-- > 0;) {
      const auto& s = steps[t];
      lower << fixed(px(t)) << ',' << fixed(py(s.ci_low.value_or(s.mean))) << ' ';
    }
    if (has_band) {
      os << "<polygon points=\"" << upper.str() << lower.str() << "\" fill=\"" << color
         << "\" fill-opacity=\"0.12\" stroke=\"none\"/>\n";
    }
    os << "<polyline points=\"";
    for (std::size_t t = 0; t < steps.size(); ++t) os << fixed(px(t)) << ',' << fixed(py(steps[t].mean)) << ' ';
    os << "\" fill=\"none\" stroke=\"" << color << "\" stroke-width=\"2\""
       << (toxic ? "" : " stroke-dasharray=\"6 4\"") << "/>\n";

    const double ly = top + 10 + 18.0 * static_cast<double>(legend_row++);
    const double lx = left + plot_w + 16;
    os << "<line x1=\"" << lx << "\" y1=\"" << ly << "\" x2=\"" << lx + 24 << "\" y2=\"" << ly << "\" stroke=\""
       << color << "\" stroke-width=\"2\"" << (toxic ? "" : " stroke-dasharray=\"6 4\"") << "/>\n";
    os << "<text x=\"" << lx + 30 << "\" y=\"" << ly + 4 << "\">" << label << "</text>\n";
  }
  os << "</svg>\n";
  return os.str();
}

void emit_entropy_report(const BucketedProfiles& buckets, const std::filesystem::path& out_dir) {
  if (buckets.empty()) throw ValidationError("emit_entropy_report: no bucketed profiles");
  write_text_file(out_dir / "entropy.csv", entropy_csv(buckets));
  write_text_file(out_dir / "entropy.svg", entropy_svg(buckets));
}

std::vector<EntropyContrast> entropy_contrasts(std::span<const EntropyProfile> profiles,
                                               const std::map<std::string, double>& it_toxicity_by_id,
                                               double threshold) {
  std::map<std::pair<std::string, ModelTag>, double> record_mean;
  for (const auto& p : profiles) {
    if (p.entropy.empty()) continue;
    double s = 0.0;
    for (double h : p.entropy) s += h;
    record_mean[{p.record_id, p.model_tag}] = s / static_cast<double>(p.entropy.size());
  }
  std::vector<EntropyContrast> out;
  for (Bucket bucket : {Bucket::kToxic, Bucket::kNontoxic}) {
    for (ModelTag variant : {ModelTag::FT, ModelTag::RL}) {
      std::vector<double> diffs;
      for (const auto& [key, it_mean] : record_mean) {
        if (key.second != ModelTag::IT) continue;
        const auto tox = it_toxicity_by_id.find(key.first);
        if (tox == it_toxicity_by_id.end()) {
          throw MappingError("entropy_contrasts: no IT toxicity for record " + key.first);
        }
        if ((tox->second >= threshold) != (bucket == Bucket::kToxic)) continue;
        const auto other = record_mean.find({key.first, variant});
        if (other != record_mean.end()) diffs.push_back(other->second - it_mean);
      }
      if (!diffs.empty()) out.push_back({bucket, variant, summarize(diffs)});
    }
  }
  return out;
}

void write_entropy_contrasts(const std::filesystem::path& path, std::span<const EntropyContrast> rows) {
  std::ostringstream os;
  os << "bucket,contrast,mean_difference,ci_low,ci_high,n\n";
  for (const auto& r : rows) {
    os << bucket_name(r.bucket) << ',' << model_tag_name(r.variant) << "-IT," << format_double(r.difference.mean)
       << ',' << format_optional(r.difference.ci_low) << ',' << format_optional(r.difference.ci_high) << ','
       << r.difference.n << '\n';
  }
  write_text_file(path, os.str());
}

}  // namespace detox
