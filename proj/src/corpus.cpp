#include "mscl/corpus.hpp"

#include <json.hpp>

#include <algorithm>
#include <bit>
#include <charconv>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

namespace mscl {

using nlohmann::json;

// ---------------------------------------------------------------- grammar

void Grammar::validate() const {
  if (num_motifs < 2) throw ConfigError("grammar: at least 2 motifs required");
  if (max_reps < 1) throw ConfigError("grammar: max_reps must be >= 1");
  if (max_segments < 1) throw ConfigError("grammar: max_segments must be >= 1");
}

int ConditionProgram::total_reps() const {
  int n = 0;
  for (const auto& s : segments) n += s.reps;
  return n;
}

void ConditionProgram::validate(const Grammar& grammar) const {
  if (segments.empty()) throw ValidationError("program has no segments");
  if (static_cast<int>(segments.size()) > grammar.max_segments)
    throw ValidationError("program has more than " + std::to_string(grammar.max_segments) + " segments");
  for (size_t i = 0; i < segments.size(); ++i) {
    const auto& s = segments[i];
    if (s.motif < 0 || s.motif >= grammar.num_motifs)
      throw ValidationError("motif id " + std::to_string(s.motif) + " out of range");
    if (s.reps < 1 || s.reps > grammar.max_reps)
      throw ValidationError("repetition count " + std::to_string(s.reps) + " outside [1, " +
                            std::to_string(grammar.max_reps) + "]");
    if (i > 0 && segments[i - 1].motif == s.motif)
      throw ValidationError("adjacent segments repeat motif " + std::to_string(s.motif));
  }
}

std::vector<int> ConditionProgram::encode(const Grammar& grammar) const {
  validate(grammar);
  std::vector<int> out{grammar.bos()};
  for (size_t i = 0; i < segments.size(); ++i) {
    if (i > 0) out.push_back(grammar.sep());
    out.push_back(grammar.motif_symbol(segments[i].motif));
    out.push_back(grammar.rep_symbol(segments[i].reps));
  }
  out.push_back(grammar.eos());
  return out;
}

ConditionProgram ConditionProgram::decode(const std::vector<int>& symbols, const Grammar& grammar) {
  auto fail = [] { throw ValidationError("malformed condition symbol sequence"); };
  if (symbols.size() < 4 || symbols.front() != grammar.bos() || symbols.back() != grammar.eos()) fail();
  ConditionProgram p;
  size_t i = 1;
  while (true) {
    if (i + 1 >= symbols.size()) fail();
    const int m = symbols[i] - 1;
    const int r = symbols[i + 1] - grammar.num_motifs;
    if (m < 0 || m >= grammar.num_motifs || r < 1 || r > grammar.max_reps) fail();
    p.segments.push_back({m, r});
    i += 2;
    if (symbols[i] == grammar.eos()) break;
    if (symbols[i] != grammar.sep()) fail();
    ++i;
  }
  if (i != symbols.size() - 1) fail();
  p.validate(grammar);
  return p;
}

std::string ConditionProgram::to_string() const {
  std::string s;
  for (size_t i = 0; i < segments.size(); ++i) {
    if (i > 0) s += ',';
    s += 'm' + std::to_string(segments[i].motif) + 'x' + std::to_string(segments[i].reps);
  }
  return s;
}

ConditionProgram ConditionProgram::parse(std::string_view text, const Grammar& grammar) {
  ConditionProgram p;
  auto bad = [&](const std::string& why) {
    throw ValidationError("condition '" + std::string(text) + "': " + why);
  };
  size_t pos = 0;
  while (pos <= text.size()) {
    const size_t end = std::min(text.find(',', pos), text.size());
    const std::string_view item = text.substr(pos, end - pos);
    const size_t x = item.find('x');
    if (item.size() < 4 || item[0] != 'm' || x == std::string_view::npos) bad("expected m<id>x<reps>");
    int motif = 0, reps = 0;
    const auto r1 = std::from_chars(item.data() + 1, item.data() + x, motif);
    const auto r2 = std::from_chars(item.data() + x + 1, item.data() + item.size(), reps);
    if (r1.ec != std::errc{} || r1.ptr != item.data() + x || r2.ec != std::errc{} ||
        r2.ptr != item.data() + item.size())
      bad("expected m<id>x<reps>");
    p.segments.push_back({motif, reps});
    if (end == text.size()) break;
    pos = end + 1;
  }
  try {
    p.validate(grammar);
  } catch (const ValidationError& e) {
    bad(e.what());
  }
  return p;
}

ConditionProgram sample_program(Rng& rng, const Grammar& grammar) {
  grammar.validate();
  ConditionProgram p;
  const int count = 1 + static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(grammar.max_segments)));
  for (int i = 0; i < count; ++i) {
    int motif = 0;
    if (i == 0) {
      motif = static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(grammar.num_motifs)));
    } else {
      const int prev = p.segments.back().motif;
      motif = static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(grammar.num_motifs - 1)));
      if (motif >= prev) ++motif;
    }
    const int reps = 1 + static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(grammar.max_reps)));
    p.segments.push_back({motif, reps});
  }
  return p;
}

// ---------------------------------------------------------------- motion

void MotionSequence::validate() const {
  if (!frames.allFinite()) throw ValidationError("motion has non-finite entries");
  if (valid_len < 1 || valid_len > frames.rows()) throw ValidationError("motion valid_len out of range");
  if (!frames.bottomRows(frames.rows() - valid_len).isZero(0)) throw ValidationError("motion padding is not zero");
}

namespace {

double base_wave(int motif, double u) {
  constexpr double pi = M_PI;
  switch (motif % 4) {
    case 0:  // sine burst
      return std::sin(4.0 * pi * u) * std::sin(pi * u);
    case 1:  // triangle
      return 1.0 - 4.0 * std::abs(u - 0.5);
    case 2:  // step and return
      return (u >= 0.25 && u < 0.75) ? 0.8 : -0.4;
    default:  // chirp
      return std::sin(2.0 * pi * (u + 1.5 * u * u));
  }
}

}  // namespace

MotifLibrary::MotifLibrary(int num_motifs, int channels, int cycle_len) : channels_(channels), cycle_len_(cycle_len) {
  if (num_motifs < 2) throw ConfigError("motif library needs at least 2 motifs");
  if (channels < 2) throw ConfigError("motif library needs a marker channel and at least one signal channel");
  if (cycle_len < 4 || cycle_len % 2 != 0) throw ConfigError("cycle_len must be even and >= 4");
  for (int m = 0; m < num_motifs; ++m) {
    MotifTemplate t;
    t.motif_id = m;
    t.cycle_len = cycle_len;
    t.cycle = MatF::Zero(cycle_len, channels);
    for (int i = 0; i < cycle_len; ++i) {
      const double u = static_cast<double>(i) / cycle_len;
      const double s = std::sin(M_PI * u);
      t.cycle(i, 0) = static_cast<float>(s * s);
      for (int c = 1; c < channels; ++c) {
        // Motif-specific phase offset and amplitude pattern per channel.
        const double shift = std::fmod(u + 0.125 * c * (1 + m / 4), 1.0);
        const double amp = ((c + m) % 2 == 0) ? 1.0 : 0.45;
        const double sign = ((c + m / 4) % 3 == 0) ? -1.0 : 1.0;
        t.cycle(i, c) = static_cast<float>(sign * amp * base_wave(m, shift));
      }
    }
    templates_.push_back(std::move(t));
  }
}

MotionSequence render_program(const ConditionProgram& program, const MotifLibrary& library, int length_budget,
                              int t_max, double noise_std, Rng& rng, double fps) {
  for (const auto& s : program.segments)
    if (s.motif < 0 || s.motif >= library.num_motifs() || s.reps < 1)
      throw RenderError("program references an unknown motif or non-positive repetition count");
  const int cl = library.cycle_len();
  const int needed = program.total_reps() * cl;
  if (program.empty()) throw RenderError("cannot render an empty program");
  if (needed > length_budget || length_budget > t_max)
    throw RenderError("program needs " + std::to_string(needed) + " frames; budget " + std::to_string(length_budget) +
                      ", maximum " + std::to_string(t_max));
  MotionSequence m;
  m.fps = fps;
  m.valid_len = length_budget;
  m.frames = MatF::Zero(t_max, library.channels());
  int t = 0;
  for (const auto& s : program.segments)
    for (int r = 0; r < s.reps; ++r) {
      m.frames.middleRows(t, cl) = library.motif(s.motif).cycle;
      t += cl;
    }
  if (noise_std > 0) {
    for (int f = 0; f < length_budget; ++f)
      for (int c = 0; c < library.channels(); ++c)
        if (c != library.marker_channel()) m.frames(f, c) += static_cast<float>(noise_std * rng.normal());
  }
  return m;
}

OracleResult oracle_decode(const MotionSequence& motion, const MotifLibrary& library) {
  OracleResult res;
  const int cl = library.cycle_len();
  const int valid = std::min<int>(motion.valid_len, static_cast<int>(motion.frames.rows()));
  if (valid < cl) {
    res.warning = true;
    return res;
  }
  if (motion.frames.cols() != library.channels()) throw ShapeError("oracle: channel count does not match motif library");
  const int mc = library.marker_channel();
  auto marker = [&](int t) -> double {
    return (t < 0 || t >= valid) ? 0.0 : static_cast<double>(motion.frames(t, mc));
  };
  const double threshold = 0.5 * library.marker_peak();

  std::vector<int> candidates;
  for (int t = 0; t < valid; ++t) {
    const double x = marker(t);
    if (x > threshold && x > marker(t - 1) && x > marker(t + 1)) candidates.push_back(t);
  }
  // Keep the strongest peak within any half-cycle neighbourhood.
  std::vector<int> order = candidates;
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return marker(a) > marker(b); });
  std::vector<int> peaks;
  for (int c : order) {
    bool close = false;
    for (int p : peaks) close = close || std::abs(p - c) < cl / 2;
    if (!close) peaks.push_back(c);
  }
  std::sort(peaks.begin(), peaks.end());
  res.peaks = static_cast<int>(peaks.size());

  auto frame = [&](int t, int c) -> double {
    return (t < 0 || t >= valid) ? 0.0 : static_cast<double>(motion.frames(t, c));
  };
  constexpr int max_shift = 2;
  for (int p : peaks) {
    const int start = p - library.peak_offset();
    int best_motif = 0;
    double best_score = std::numeric_limits<double>::infinity();
    for (int m = 0; m < library.num_motifs(); ++m) {
      const MatF& tmpl = library.motif(m).cycle;
      for (int shift = -max_shift; shift <= max_shift; ++shift) {
        double sse = 0;
        for (int i = 0; i < cl; ++i)
          for (int c = 0; c < library.channels(); ++c) {
            if (c == mc) continue;
            const double d = frame(start + shift + i, c) - tmpl(i, c);
            sse += d * d;
          }
        if (sse < best_score) {
          best_score = sse;
          best_motif = m;
        }
      }
    }
    if (!res.program.segments.empty() && res.program.segments.back().motif == best_motif)
      ++res.program.segments.back().reps;
    else
      res.program.segments.push_back({best_motif, 1});
  }
  return res;
}

// ---------------------------------------------------------------- normalization

NormalizationStats NormalizationStats::identity(int channels) {
  return {std::vector<float>(static_cast<size_t>(channels), 0.0f), std::vector<float>(static_cast<size_t>(channels), 1.0f)};
}

MotionSequence apply_normalization(const MotionSequence& motion, const NormalizationStats& stats,
                                   NormDirection direction) {
  const Index d = motion.frames.cols();
  if (static_cast<Index>(stats.mean.size()) != d || static_cast<Index>(stats.std.size()) != d)
    throw ShapeError("normalization stats have " + std::to_string(stats.mean.size()) + " channels, motion has " +
                     std::to_string(d));
  MotionSequence out = motion;
  const Index valid = std::min<Index>(motion.valid_len, motion.frames.rows());
  for (Index t = 0; t < valid; ++t)
    for (Index c = 0; c < d; ++c) {
      const float mu = stats.mean[static_cast<size_t>(c)];
      const float sd = stats.std[static_cast<size_t>(c)];
      out.frames(t, c) = direction == NormDirection::forward ? (motion.frames(t, c) - mu) / sd
                                                              : motion.frames(t, c) * sd + mu;
    }
  return out;
}

NormalizationStats compute_stats(const std::vector<MotionSequence>& motions, const std::vector<int>& indices) {
  if (indices.empty()) throw ConfigError("cannot compute normalization stats over an empty split");
  const Index d = motions.at(static_cast<size_t>(indices.front())).frames.cols();
  std::vector<double> sum(static_cast<size_t>(d), 0.0), sq(static_cast<size_t>(d), 0.0);
  double count = 0;
  for (int i : indices) {
    const auto& m = motions.at(static_cast<size_t>(i));
    for (Index t = 0; t < m.valid_len; ++t) {
      for (Index c = 0; c < d; ++c) {
        const double v = m.frames(t, c);
        sum[static_cast<size_t>(c)] += v;
        sq[static_cast<size_t>(c)] += v * v;
      }
      count += 1;
    }
  }
  NormalizationStats s;
  for (Index c = 0; c < d; ++c) {
    const double mean = sum[static_cast<size_t>(c)] / count;
    const double var = std::max(0.0, sq[static_cast<size_t>(c)] / count - mean * mean);
    s.mean.push_back(static_cast<float>(mean));
    s.std.push_back(static_cast<float>(std::max(1e-6, std::sqrt(var))));
  }
  return s;
}

// ---------------------------------------------------------------- corpus

void CorpusSpec::validate() const {
  grammar.validate();
  if (size < 10) throw ConfigError("corpus size must be >= 10");
  if (channels < 2) throw ConfigError("corpus needs at least 2 channels");
  if (grammar.max_segments * grammar.max_reps * cycle_len > t_max)
    throw ConfigError("longest program does not fit in t_max frames");
  if (noise_std < 0) throw ConfigError("noise_std must be non-negative");
}

Corpus build_corpus(const CorpusSpec& spec, std::uint64_t seed) {
  spec.validate();
  const MotifLibrary library(spec.grammar.num_motifs, spec.channels, spec.cycle_len);
  Corpus c;
  c.spec = spec;
  c.seed = seed;
  c.programs.resize(static_cast<size_t>(spec.size));
  c.motions.resize(static_cast<size_t>(spec.size));
  const Rng master(seed);
  parallel_for(spec.size, [&](int i) {
    Rng rng = master.substream(static_cast<std::uint64_t>(i));
    ConditionProgram p = sample_program(rng, spec.grammar);
    const int budget = p.total_reps() * spec.cycle_len;
    c.motions[static_cast<size_t>(i)] = render_program(p, library, budget, spec.t_max, spec.noise_std, rng, spec.fps);
    c.programs[static_cast<size_t>(i)] = std::move(p);
  });

  std::vector<int> order(static_cast<size_t>(spec.size));
  for (int i = 0; i < spec.size; ++i) order[static_cast<size_t>(i)] = i;
  Rng split_rng = master.substream(0xC0FFEEULL << 20);
  for (int i = spec.size - 1; i > 0; --i)
    std::swap(order[static_cast<size_t>(i)], order[split_rng.uniform_int(static_cast<std::uint64_t>(i + 1))]);
  const int n_train = spec.size * 80 / 100;
  const int n_val = spec.size * 15 / 100;
  c.train.assign(order.begin(), order.begin() + n_train);
  c.val.assign(order.begin() + n_train, order.begin() + n_train + n_val);
  c.test.assign(order.begin() + n_train + n_val, order.end());
  std::sort(c.train.begin(), c.train.end());
  std::sort(c.val.begin(), c.val.end());
  std::sort(c.test.begin(), c.test.end());
  c.stats = compute_stats(c.motions, c.train);
  return c;
}

// ---------------------------------------------------------------- files

void write_file_atomic(const std::filesystem::path& path, const std::string& bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open " + tmp.string() + " for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("failed writing " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

namespace {

static_assert(std::endian::native == std::endian::little, "binary formats assume a little-endian host");

void put_u32(std::string& out, std::uint32_t v) {
  char b[4];
  std::memcpy(b, &v, 4);
  out.append(b, 4);
}

std::uint32_t get_u32(const std::string& in, size_t at) {
  std::uint32_t v;
  std::memcpy(&v, in.data() + at, 4);
  return v;
}

std::string encode_motions(const std::vector<MotionSequence>& motions) {
  std::string out;
  const std::uint32_t t = motions.empty() ? 0u : static_cast<std::uint32_t>(motions.front().frames.rows());
  const std::uint32_t d = motions.empty() ? 0u : static_cast<std::uint32_t>(motions.front().frames.cols());
  put_u32(out, static_cast<std::uint32_t>(motions.size()));
  put_u32(out, t);
  put_u32(out, d);
  for (const auto& m : motions) {
    if (m.frames.rows() != t || m.frames.cols() != d) throw ShapeError("motion set has inconsistent shapes");
    out.append(reinterpret_cast<const char*>(m.frames.data()), static_cast<size_t>(m.frames.size()) * sizeof(float));
  }
  return out;
}

std::vector<MatF> decode_motions(const std::string& bytes) {
  if (bytes.size() < 12) throw IoError("motions.bin: truncated header");
  const std::uint32_t n = get_u32(bytes, 0), t = get_u32(bytes, 4), d = get_u32(bytes, 8);
  const size_t expected = 12 + static_cast<size_t>(n) * t * d * sizeof(float);
  if (bytes.size() != expected) throw IoError("motions.bin: size does not match header");
  std::vector<MatF> out;
  for (std::uint32_t i = 0; i < n; ++i) {
    MatF m(t, d);
    std::memcpy(m.data(), bytes.data() + 12 + static_cast<size_t>(i) * t * d * sizeof(float),
                static_cast<size_t>(t) * d * sizeof(float));
    out.push_back(std::move(m));
  }
  return out;
}

json program_json(const ConditionProgram& p) {
  json segs = json::array();
  for (const auto& s : p.segments) segs.push_back({s.motif, s.reps});
  return segs;
}

ConditionProgram program_from_json(const json& j) {
  ConditionProgram p;
  for (const auto& s : j) p.segments.push_back({s.at(0).get<int>(), s.at(1).get<int>()});
  return p;
}

json grammar_json(const Grammar& g) {
  return {{"num_motifs", g.num_motifs}, {"max_reps", g.max_reps}, {"max_segments", g.max_segments}};
}

}  // namespace

void write_motion_set(const MotionSet& set, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  write_file_atomic(dir / "motions.bin", encode_motions(set.motions));
  std::string lines;
  for (size_t i = 0; i < set.motions.size(); ++i) {
    json line;
    line["index"] = i;
    line["valid_len"] = set.motions[i].valid_len;
    const auto& cond = i < set.conditions.size() ? set.conditions[i] : std::nullopt;
    if (cond) {
      line["condition"] = cond->to_string();
      line["segments"] = program_json(*cond);
    } else {
      line["condition"] = nullptr;
    }
    lines += line.dump() + "\n";
  }
  write_file_atomic(dir / "programs.jsonl", lines);
}

MotionSet read_motion_set(const std::filesystem::path& dir, const Grammar& grammar) {
  MotionSet set;
  const auto frames = decode_motions(read_file(dir / "motions.bin"));
  std::istringstream lines(read_file(dir / "programs.jsonl"));
  std::string line;
  std::vector<json> records;
  while (std::getline(lines, line))
    if (!line.empty()) records.push_back(json::parse(line));
  if (records.size() != frames.size()) throw IoError("programs.jsonl and motions.bin disagree on sample count");
  for (size_t i = 0; i < frames.size(); ++i) {
    MotionSequence m;
    m.frames = frames[i];
    m.valid_len = records[i].at("valid_len").get<int>();
    set.motions.push_back(std::move(m));
    const auto& c = records[i].at("condition");
    if (c.is_null())
      set.conditions.emplace_back(std::nullopt);
    else
      set.conditions.emplace_back(ConditionProgram::parse(c.get<std::string>(), grammar));
  }
  return set;
}

void write_corpus(const Corpus& corpus, const std::filesystem::path& dir) {
  MotionSet set;
  set.motions = corpus.motions;
  for (const auto& p : corpus.programs) set.conditions.emplace_back(p);
  write_motion_set(set, dir);
  json meta;
  meta["format"] = "mscl-corpus";
  meta["version"] = 1;
  meta["seed"] = corpus.seed;
  meta["grammar"] = grammar_json(corpus.spec.grammar);
  meta["spec"] = {{"size", corpus.spec.size},           {"t_max", corpus.spec.t_max},
                  {"channels", corpus.spec.channels},   {"cycle_len", corpus.spec.cycle_len},
                  {"noise_std", corpus.spec.noise_std}, {"fps", corpus.spec.fps}};
  meta["stats"] = {{"mean", corpus.stats.mean}, {"std", corpus.stats.std}};
  meta["splits"] = {{"train", corpus.train}, {"val", corpus.val}, {"test", corpus.test}};
  write_file_atomic(dir / "meta.json", meta.dump(1) + "\n");
}

Corpus read_corpus(const std::filesystem::path& dir) {
  const json meta = json::parse(read_file(dir / "meta.json"));
  if (meta.value("format", "") != "mscl-corpus") throw IoError(dir.string() + ": not a corpus directory");
  Corpus c;
  c.seed = meta.at("seed").get<std::uint64_t>();
  const auto& g = meta.at("grammar");
  c.spec.grammar = {g.at("num_motifs").get<int>(), g.at("max_reps").get<int>(), g.at("max_segments").get<int>()};
  const auto& s = meta.at("spec");
  c.spec.size = s.at("size").get<int>();
  c.spec.t_max = s.at("t_max").get<int>();
  c.spec.channels = s.at("channels").get<int>();
  c.spec.cycle_len = s.at("cycle_len").get<int>();
  c.spec.noise_std = s.at("noise_std").get<double>();
  c.spec.fps = s.at("fps").get<double>();
  c.stats.mean = meta.at("stats").at("mean").get<std::vector<float>>();
  c.stats.std = meta.at("stats").at("std").get<std::vector<float>>();
  c.train = meta.at("splits").at("train").get<std::vector<int>>();
  c.val = meta.at("splits").at("val").get<std::vector<int>>();
  c.test = meta.at("splits").at("test").get<std::vector<int>>();
  MotionSet set = read_motion_set(dir, c.spec.grammar);
  c.motions = std::move(set.motions);
  for (auto& p : set.conditions) {
    if (!p) throw IoError("corpus sample without a program");
    c.programs.push_back(std::move(*p));
  }
  for (auto& m : c.motions) m.fps = c.spec.fps;
  return c;
}

}  // namespace mscl
