#include "mscl/editor.hpp"

#include <cmath>

namespace mscl {

EditMode parse_edit_mode(std::string_view text) {
  if (text == "inpaint") return EditMode::inpaint;
  if (text == "outpaint") return EditMode::outpaint;
  if (text == "continuation") return EditMode::continuation;
  if (text == "edit") return EditMode::edit;
  throw ConfigError("unknown edit mode '" + std::string(text) + "'");
}

const char* edit_mode_name(EditMode mode) {
  switch (mode) {
    case EditMode::inpaint: return "inpaint";
    case EditMode::outpaint: return "outpaint";
    case EditMode::continuation: return "continuation";
    case EditMode::edit: return "edit";
  }
  return "edit";
}

FrameInterval FrameInterval::parse(std::string_view text) {
  const auto colon = text.find(':');
  if (colon == std::string_view::npos) throw ConfigError("interval must look like a:b");
  auto num = [&](std::string_view s) {
    size_t used = 0;
    int v = 0;
    try {
      v = std::stoi(std::string(s), &used);
    } catch (const std::exception&) {
      throw ConfigError("bad interval '" + std::string(text) + "'");
    }
    if (used != s.size()) throw ConfigError("bad interval '" + std::string(text) + "'");
    return v;
  };
  return {num(text.substr(0, colon)), num(text.substr(colon + 1))};
}

void EditRequest::validate(int t_max) const {
  for (const auto& iv : intervals) {
    if (iv.begin >= iv.end) throw ValidationError("empty edit interval");
    if (iv.begin < 0 || iv.end > t_max) throw ValidationError("edit interval outside [0, T_max)");
    if (mode == EditMode::continuation && iv.end != t_max)
      throw ValidationError("continuation intervals must end at T_max");
    if (mode == EditMode::outpaint && iv.begin != 0 && iv.end != t_max)
      throw ValidationError("outpainting intervals must touch a sequence boundary");
  }
  if (mode == EditMode::continuation && intervals.size() != 1)
    throw ValidationError("continuation takes exactly one interval");
  if (!source) throw ValidationError("editing requires a source motion");
  guidance.validate();
}

std::vector<std::vector<std::uint8_t>> frames_to_token_mask(const std::vector<FrameInterval>& intervals,
                                                            const ScaleConfig& config) {
  for (const auto& iv : intervals) {
    if (iv.begin >= iv.end) throw ValidationError("empty edit interval");
    if (iv.begin < 0 || iv.end > config.t_max) throw ValidationError("edit interval outside [0, T_max)");
  }
  std::vector<std::vector<std::uint8_t>> mask;
  for (int k = 0; k < config.num_scales(); ++k) {
    const int l = config.length(k);
    std::vector<std::uint8_t> m(static_cast<size_t>(l), 0);
    for (int j = 0; j < l; ++j) {
      const int c0 = cover_begin(j, l, config.t_max), c1 = cover_end(j, l, config.t_max);
      for (const auto& iv : intervals)
        if (c0 < iv.end && iv.begin < c1) m[static_cast<size_t>(j)] = 1;
    }
    mask.push_back(std::move(m));
  }
  return mask;
}

int edit_iterations(int iterations, int n_edit, int length) {
  if (length < 1) throw ConfigError("edit_iterations: length must be positive");
  const int scaled = (iterations * n_edit + length - 1) / length;
  return std::max(1, scaled);
}

EditResult edit(const ModelBundle& bundle, const EditRequest& request, Rng& rng, const GenerateOptions& options) {
  const auto& tok = bundle.tokenizer;
  const auto& sc = tok.config.scales;
  request.validate(sc.t_max);
  request.schedule.validate(sc.num_scales());
  if (request.source->frames.rows() != sc.t_max) throw ShapeError("edit: source length differs from T_max");

  EditResult out;
  const MatF latent = encode_latent(tok, model_frames(*request.source, tok.stats));
  out.source_hierarchy = multi_scale_tokenize<float>(latent, sc, tok.codebook.entries).hierarchy;
  out.edit_mask = frames_to_token_mask(request.intervals, sc);

  BackboneLogitModel model(bundle, request.condition, request.guidance, options.use_cache);
  MatF accum = MatF::Zero(sc.latent_len(), tok.config.latent_dim);
  RefineTrace trace;
  for (int k = 0; k < sc.num_scales(); ++k) {
    const auto& mask = out.edit_mask[static_cast<size_t>(k)];
    const auto& src = out.source_hierarchy.tokens[static_cast<size_t>(k)];
    const int n_edit = static_cast<int>(std::count(mask.begin(), mask.end(), 1));
    std::vector<int> z;
    model.begin_scale(k, accum);
    if (n_edit == 0) {
      z = src;
    } else {
      const int iters = edit_iterations(request.schedule.iterations[static_cast<size_t>(k)], n_edit, sc.length(k));
      z = refine_scale(model, k, sc.length(k), request.guidance, iters, rng, src, mask, &trace);
    }
    // Later scales still need this scale in their cache when they edit.
    if (k + 1 < sc.num_scales()) {
      bool later = false;
      for (int s = k + 1; s < sc.num_scales(); ++s)
        for (auto v : out.edit_mask[static_cast<size_t>(s)]) later = later || v;
      if (later) model.end_scale(k, z);
    }
    accum = accum + scale_feature(z, sc, tok.codebook.entries);
    out.hierarchy.tokens.push_back(std::move(z));
  }
  out.steps = trace.steps;
  out.frames = decode_latent(tok, accum);
  out.motion = motion_from_model_frames(out.frames, tok.stats);
  return out;
}

}  // namespace mscl
