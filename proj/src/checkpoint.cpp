#include "imdiff/checkpoint.hpp"

#include <json.hpp>

#include <cstring>
#include <fstream>

namespace imdiff {
namespace {

using nlohmann::json;

constexpr char kMagic[8] = {'I', 'M', 'D', 'I', 'F', 'F', 'C', 'K'};

json to_json(const DenoiserConfig& c) {
  return {{"n_blocks", c.n_blocks},
          {"hidden_dim", c.hidden_dim},
          {"n_heads", c.n_heads},
          {"step_embed_dim", c.step_embed_dim},
          {"feature_embed_dim", c.feature_embed_dim},
          {"time_embed_dim", c.time_embed_dim},
          {"ff_dim", c.ff_dim},
          {"steps", c.steps},
          {"n_features", c.n_features},
          {"use_temporal", c.use_temporal},
          {"use_spatial", c.use_spatial}};
}

DenoiserConfig denoiser_from_json(const json& j) {
  DenoiserConfig c;
  c.n_blocks = j.at("n_blocks");
  c.hidden_dim = j.at("hidden_dim");
  c.n_heads = j.at("n_heads");
  c.step_embed_dim = j.at("step_embed_dim");
  c.feature_embed_dim = j.at("feature_embed_dim");
  c.time_embed_dim = j.at("time_embed_dim");
  c.ff_dim = j.at("ff_dim");
  c.steps = j.at("steps");
  c.n_features = j.at("n_features");
  c.use_temporal = j.at("use_temporal");
  c.use_spatial = j.at("use_spatial");
  return c;
}

std::vector<double> to_std(const VectorXd& v) { return {v.data(), v.data() + v.size()}; }

VectorXd from_std(const std::vector<double>& v) {
  return Eigen::Map<const VectorXd>(v.data(), static_cast<Eigen::Index>(v.size()));
}

template <typename T>
void write_pod(std::ostream& out, const T& v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::istream& in) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  return v;
}

}  // namespace

Denoiser<float> Checkpoint::make_model() const {
  Denoiser<float> model(this->model, params);
  model.training_steps = training_steps;
  return model;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  json header;
  header["format_version"] = Checkpoint::kFormatVersion;
  header["model"] = to_json(ckpt.model);
  header["schedule"] = {{"steps", ckpt.schedule.steps},
                        {"shape", std::string(to_string(ckpt.schedule.shape))},
                        {"beta", to_std(ckpt.schedule.beta)}};
  header["normalizer"] = {{"center", to_std(ckpt.stats.center)}, {"scale", to_std(ckpt.stats.scale)}};
  header["mask"] = {{"scheme", std::string(to_string(ckpt.mask.scheme))},
                    {"n_masked", ckpt.mask.n_masked},
                    {"n_unmasked", ckpt.mask.n_unmasked},
                    {"miss_prob", ckpt.mask.miss_prob}};
  header["conditioning"] = std::string(to_string(ckpt.conditioning));
  header["window"] = ckpt.window;
  header["variant"] = ckpt.variant;
  header["training"] = {{"epochs_done", ckpt.epochs_done},
                        {"seed", ckpt.seed},
                        {"training_steps", ckpt.training_steps},
                        {"best_loss", std::isfinite(ckpt.best_loss) ? json(ckpt.best_loss) : json(nullptr)}};
  json blobs = json::array();
  blobs.push_back({{"name", "params"}, {"count", ckpt.params.size()}});
  if (ckpt.adam) {
    header["adam"] = {{"step", ckpt.adam->step}, {"beta1", ckpt.adam->beta1}, {"beta2", ckpt.adam->beta2},
                      {"eps", ckpt.adam->eps}};
    blobs.push_back({{"name", "adam_m"}, {"count", ckpt.adam->m.size()}});
    blobs.push_back({{"name", "adam_v"}, {"count", ckpt.adam->v.size()}});
  }
  header["blobs"] = blobs;
  const std::string text = header.dump();

  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw Error(ErrorCategory::io, "cannot write checkpoint " + path.string());
    out.write(kMagic, sizeof(kMagic));
    write_pod(out, Checkpoint::kFormatVersion);
    write_pod(out, static_cast<std::uint64_t>(text.size()));
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    auto blob = [&out](const Vector<float>& v) {
      out.write(reinterpret_cast<const char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(float)));
    };
    blob(ckpt.params);
    if (ckpt.adam) {
      blob(ckpt.adam->m);
      blob(ckpt.adam->v);
    }
    if (!out) throw Error(ErrorCategory::io, "short write on checkpoint " + path.string());
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCategory::io, "cannot open checkpoint " + path.string());
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
    throw Error(ErrorCategory::model, path.string() + " is not a checkpoint file");
  const auto version = read_pod<std::uint32_t>(in);
  if (version != Checkpoint::kFormatVersion)
    throw Error(ErrorCategory::model, "unsupported checkpoint format version " + std::to_string(version));
  const auto header_len = read_pod<std::uint64_t>(in);
  std::string text(header_len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(header_len));
  if (!in) throw Error(ErrorCategory::model, "truncated checkpoint header in " + path.string());

  Checkpoint ckpt;
  try {
    const json header = json::parse(text);
    ckpt.model = denoiser_from_json(header.at("model"));
    ckpt.schedule = schedule_from_betas(from_std(header.at("schedule").at("beta").get<std::vector<double>>()),
                                        schedule_shape_from_string(header.at("schedule").at("shape").get<std::string>()));
    ckpt.stats.center = from_std(header.at("normalizer").at("center").get<std::vector<double>>());
    ckpt.stats.scale = from_std(header.at("normalizer").at("scale").get<std::vector<double>>());
    const json& m = header.at("mask");
    ckpt.mask.scheme = mask_scheme_from_string(m.at("scheme").get<std::string>());
    ckpt.mask.n_masked = m.at("n_masked");
    ckpt.mask.n_unmasked = m.at("n_unmasked");
    ckpt.mask.miss_prob = m.at("miss_prob");
    ckpt.conditioning = conditioning_from_string(header.at("conditioning").get<std::string>());
    ckpt.window = header.at("window");
    ckpt.variant = header.at("variant");
    const json& tr = header.at("training");
    ckpt.epochs_done = tr.at("epochs_done");
    ckpt.seed = tr.at("seed");
    ckpt.training_steps = tr.at("training_steps");
    ckpt.best_loss = tr.at("best_loss").is_null() ? std::numeric_limits<double>::infinity()
                                                  : tr.at("best_loss").get<double>();
    if (header.contains("adam")) {
      AdamState<float> adam;
      adam.step = header["adam"].at("step");
      adam.beta1 = header["adam"].at("beta1");
      adam.beta2 = header["adam"].at("beta2");
      adam.eps = header["adam"].at("eps");
      ckpt.adam = adam;
    }
    for (const json& b : header.at("blobs")) {
      const auto count = b.at("count").get<Eigen::Index>();
      Vector<float> v(count);
      in.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(count * sizeof(float)));
      if (!in) throw Error(ErrorCategory::model, "truncated blob '" + b.at("name").get<std::string>() + "'");
      const std::string name = b.at("name");
      if (name == "params")
        ckpt.params = std::move(v);
      else if (name == "adam_m" && ckpt.adam)
        ckpt.adam->m = std::move(v);
      else if (name == "adam_v" && ckpt.adam)
        ckpt.adam->v = std::move(v);
    }
  } catch (const json::exception& e) {
    throw Error(ErrorCategory::model, "malformed checkpoint header in " + path.string() + ": " + e.what());
  }
  if (ckpt.schedule.steps != ckpt.model.steps)
    throw Error(ErrorCategory::model, "checkpoint schedule length disagrees with model config");
  return ckpt;
}

}  // namespace imdiff
