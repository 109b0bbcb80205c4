#include "priorecon/training.hpp"

#include <chrono>
#include <cmath>
#include <cstring>
#include <fstream>
#include <unistd.h>

#include <zlib.h>

#include "priorecon/random.hpp"

namespace priorecon {

namespace fs = std::filesystem;

std::string to_string(Stage s) { return s == Stage::Recon ? "recon" : "enhance"; }

Stage stage_from_string(const std::string &s) {
  if (s == "recon") return Stage::Recon;
  if (s == "enhance") return Stage::Enhance;
  fail(ErrorKind::Configuration, "unknown stage '" + s + "' (expected recon or enhance)");
}

TrainConfig TrainConfig::defaults(Stage stage) {
  TrainConfig c;
  c.stage = stage;
  if (stage == Stage::Enhance) {
    c.epochs = 100;
    c.batch_size = 32;
  }
  return c;
}

void TrainConfig::validate() const {
  require(epochs > 0 && batch_size > 0 && lr_init > 0 && plateau_patience > 0 && early_stop_patience > 0,
          ErrorKind::Configuration, "train config: epochs, batch_size, lr_init and patiences must be positive");
  require(plateau_factor > 0 && plateau_factor < 1, ErrorKind::Configuration, "train config: plateau_factor must be in (0, 1)");
  require(min_lr >= 0 && min_lr <= lr_init, ErrorKind::Configuration, "train config: min_lr must be in [0, lr_init]");
  require(improvement_tol >= 0, ErrorKind::Configuration, "train config: improvement_tol must be >= 0");
}

void to_json(nlohmann::json &j, const TrainConfig &c) {
  j = {{"stage", to_string(c.stage)},
       {"epochs", c.epochs},
       {"batch_size", c.batch_size},
       {"lr_init", c.lr_init},
       {"plateau_patience", c.plateau_patience},
       {"plateau_factor", c.plateau_factor},
       {"min_lr", c.min_lr},
       {"early_stop_patience", c.early_stop_patience},
       {"improvement_tol", c.improvement_tol},
       {"augment", c.augment},
       {"seed", c.seed}};
}

void from_json(const nlohmann::json &j, TrainConfig &c) {
  const Stage stage = j.contains("stage") ? stage_from_string(j.at("stage").get<std::string>()) : c.stage;
  const TrainConfig d = TrainConfig::defaults(stage);
  c.stage = stage;
  c.epochs = j.value("epochs", d.epochs);
  c.batch_size = j.value("batch_size", d.batch_size);
  c.lr_init = j.value("lr_init", d.lr_init);
  c.plateau_patience = j.value("plateau_patience", d.plateau_patience);
  c.plateau_factor = j.value("plateau_factor", d.plateau_factor);
  c.min_lr = j.value("min_lr", d.min_lr);
  c.early_stop_patience = j.value("early_stop_patience", d.early_stop_patience);
  c.improvement_tol = j.value("improvement_tol", d.improvement_tol);
  c.augment = j.value("augment", d.augment);
  c.seed = j.value("seed", d.seed);
}

void to_json(nlohmann::json &j, const TrainState &s) {
  j = {{"epoch", s.epoch},
       {"best_val", std::isfinite(s.best_val) ? nlohmann::json(s.best_val) : nlohmann::json(nullptr)},
       {"best_epoch", s.best_epoch},
       {"since_improvement", s.since_improvement},
       {"since_reduction", s.since_reduction},
       {"lr", s.lr},
       {"stopped_early", s.stopped_early}};
}

void from_json(const nlohmann::json &j, TrainState &s) {
  s.epoch = j.at("epoch").get<int>();
  s.best_val = j.at("best_val").is_null() ? -std::numeric_limits<double>::infinity() : j.at("best_val").get<double>();
  s.best_epoch = j.at("best_epoch").get<int>();
  s.since_improvement = j.at("since_improvement").get<int>();
  s.since_reduction = j.at("since_reduction").get<int>();
  s.lr = j.at("lr").get<double>();
  s.stopped_early = j.value("stopped_early", false);
}

void to_json(nlohmann::json &j, const EpochRecord &r) {
  j = {{"epoch", r.epoch}, {"train_loss", r.train_loss}, {"val_ssim", r.val_ssim}, {"lr", r.lr}, {"wall_seconds", r.wall_seconds}};
}

void from_json(const nlohmann::json &j, EpochRecord &r) {
  r.epoch = j.at("epoch").get<int>();
  r.train_loss = j.at("train_loss").get<double>();
  r.val_ssim = j.at("val_ssim").get<double>();
  r.lr = j.at("lr").get<double>();
  r.wall_seconds = j.value("wall_seconds", 0.0);
}

EpochDecision advance(TrainState &s, double val, const TrainConfig &cfg) {
  EpochDecision d;
  ++s.epoch;
  if (val > s.best_val + cfg.improvement_tol) {
    d.improved = true;
    s.best_val = val;
    s.best_epoch = s.epoch;
    s.since_improvement = 0;
    s.since_reduction = 0;
  } else {
    ++s.since_improvement;
    ++s.since_reduction;
    if (s.since_reduction >= cfg.plateau_patience) {
      const double lr = std::max(cfg.min_lr, s.lr * cfg.plateau_factor);
      d.lr_reduced = lr < s.lr;
      s.lr = lr;
      s.since_reduction = 0;
    }
  }
  if (s.since_improvement >= cfg.early_stop_patience) {
    d.stop = true;
    s.stopped_early = true;
  }
  return d;
}

Adam::Adam(const ad::ParameterSet &ps, double beta1, double beta2, double eps) : beta1_(beta1), beta2_(beta2), eps_(eps) {
  for (const auto &p : ps.items()) {
    m.emplace_back(p.value.size(), 0.0);
    v.emplace_back(p.value.size(), 0.0);
  }
}

void Adam::step(ad::ParameterSet &ps, const std::vector<std::vector<double>> &grads, double lr) {
  require(grads.size() == m.size() && ps.items().size() == m.size(), ErrorKind::Runtime, "adam: parameter count changed");
  ++t;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t));
  std::size_t k = 0;
  for (auto &p : ps.items()) {
    auto &mk = m[k], &vk = v[k];
    const auto &gk = grads[k];
    for (std::size_t i = 0; i < p.value.size(); ++i) {
      mk[i] = beta1_ * mk[i] + (1 - beta1_) * gk[i];
      vk[i] = beta2_ * vk[i] + (1 - beta2_) * gk[i] * gk[i];
      p.value[i] -= lr * (mk[i] / c1) / (std::sqrt(vk[i] / c2) + eps_);
    }
    ++k;
  }
}

// ---- checkpoints ----

namespace {

constexpr const char *kFormat = "priorecon-checkpoint";
constexpr int kVersion = 1;

std::uint32_t crc_of(const std::vector<char> &bytes) {
  uLong crc = crc32(0L, Z_NULL, 0);
  std::size_t off = 0;
  while (off < bytes.size()) {
    const auto n = static_cast<uInt>(std::min<std::size_t>(bytes.size() - off, 1u << 30));
    crc = crc32(crc, reinterpret_cast<const Bytef *>(bytes.data() + off), n);
    off += n;
  }
  return static_cast<std::uint32_t>(crc);
}

void write_file(const fs::path &p, const std::string &data) {
  std::ofstream out(p, std::ios::binary);
  out.write(data.data(), static_cast<std::streamsize>(data.size()));
  out.close();
  require(out.good(), ErrorKind::Checkpoint, "cannot write " + p.string());
}

} // namespace

void write_checkpoint(const fs::path &dir, const nlohmann::json &meta, const std::vector<TensorRecord> &tensors) {
  std::vector<char> bin;
  nlohmann::json table = nlohmann::json::array();
  for (const auto &t : tensors) {
    require(ad::numel(t.shape) == t.data.size(), ErrorKind::Checkpoint, "checkpoint tensor " + t.name + ": shape/data mismatch");
    table.push_back({{"name", t.name}, {"shape", t.shape}, {"offset", bin.size()}, {"count", t.data.size()}});
    const auto *raw = reinterpret_cast<const char *>(t.data.data());
    bin.insert(bin.end(), raw, raw + t.data.size() * sizeof(double));
  }
  nlohmann::json cfg = {{"format", kFormat}, {"version", kVersion}, {"meta", meta}, {"tensors", table},
                        {"bytes", bin.size()}, {"crc32", crc_of(bin)}};
  if (!dir.parent_path().empty()) fs::create_directories(dir.parent_path());
  const fs::path tmp = dir.string() + ".tmp-" + std::to_string(::getpid());
  const fs::path old = dir.string() + ".old-" + std::to_string(::getpid());
  fs::remove_all(tmp);
  try {
    fs::create_directories(tmp);
    write_file(tmp / "tensors.bin", std::string(bin.begin(), bin.end()));
    write_file(tmp / "config.json", cfg.dump(2) + "\n");
    fs::remove_all(old);
    if (fs::exists(dir)) fs::rename(dir, old);
    fs::rename(tmp, dir);
    fs::remove_all(old);
  } catch (const fs::filesystem_error &e) {
    fs::remove_all(tmp);
    fail(ErrorKind::Checkpoint, std::string("checkpoint write failed: ") + e.what());
  }
}

std::pair<nlohmann::json, std::vector<TensorRecord>> read_checkpoint(const fs::path &dir) {
  const fs::path cfg_path = dir / "config.json", bin_path = dir / "tensors.bin";
  require(fs::is_regular_file(cfg_path) && fs::is_regular_file(bin_path), ErrorKind::Checkpoint,
          "checkpoint " + dir.string() + " is missing config.json or tensors.bin");
  nlohmann::json cfg;
  try {
    std::ifstream in(cfg_path);
    in >> cfg;
  } catch (const nlohmann::json::exception &e) {
    fail(ErrorKind::Checkpoint, "checkpoint " + dir.string() + ": bad config.json: " + e.what());
  }
  require(cfg.value("format", "") == kFormat && cfg.value("version", 0) == kVersion, ErrorKind::Checkpoint,
          "checkpoint " + dir.string() + ": unknown format or version");
  std::ifstream in(bin_path, std::ios::binary);
  std::vector<char> bin((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  require(bin.size() == cfg.at("bytes").get<std::size_t>(), ErrorKind::Checkpoint,
          "checkpoint " + dir.string() + ": tensors.bin has wrong size");
  require(crc_of(bin) == cfg.at("crc32").get<std::uint32_t>(), ErrorKind::Checkpoint,
          "checkpoint " + dir.string() + ": tensors.bin checksum mismatch");
  std::vector<TensorRecord> out;
  for (const auto &t : cfg.at("tensors")) {
    TensorRecord r;
    r.name = t.at("name").get<std::string>();
    r.shape = t.at("shape").get<ad::Shape>();
    const auto off = t.at("offset").get<std::size_t>(), count = t.at("count").get<std::size_t>();
    require(count == ad::numel(r.shape) && off + count * sizeof(double) <= bin.size(), ErrorKind::Checkpoint,
            "checkpoint " + dir.string() + ": bad tensor table entry " + r.name);
    r.data.resize(count);
    std::memcpy(r.data.data(), bin.data() + off, count * sizeof(double));
    out.push_back(std::move(r));
  }
  return {cfg.at("meta"), std::move(out)};
}

std::vector<TensorRecord> parameter_records(const ad::ParameterSet &ps, const std::string &prefix) {
  std::vector<TensorRecord> out;
  for (const auto &p : ps.items()) out.push_back({prefix + p.name, p.shape, p.value});
  return out;
}

void assign_parameters(ad::ParameterSet &ps, const std::vector<TensorRecord> &records, const std::string &prefix) {
  std::unordered_map<std::string, const TensorRecord *> by_name;
  std::size_t matched = 0;
  for (const auto &r : records)
    if (r.name.starts_with(prefix)) {
      by_name[r.name.substr(prefix.size())] = &r;
      ++matched;
    }
  for (const auto &p : ps.items()) {
    auto it = by_name.find(p.name);
    require(it != by_name.end(), ErrorKind::Checkpoint, "checkpoint is missing parameter " + p.name);
    require(it->second->shape == p.shape, ErrorKind::Checkpoint,
            "checkpoint parameter " + p.name + " has shape " + ad::shape_string(it->second->shape) + ", model expects " +
                ad::shape_string(p.shape));
  }
  require(matched == ps.items().size(), ErrorKind::Checkpoint,
          "checkpoint has " + std::to_string(matched) + " parameters, model has " + std::to_string(ps.items().size()));
  for (auto &p : ps.items()) p.value = by_name.at(p.name)->data;
}

// ---- training loop ----

namespace {

struct ResumeState {
  TrainState state;
  std::vector<double> best;
};

void save_last(const fs::path &dir, const Objective &obj, ad::ParameterSet &ps, const Adam &adam, const TrainState &state,
               const TrainConfig &cfg, const std::vector<double> &best) {
  auto records = parameter_records(ps);
  std::size_t k = 0;
  for (const auto &p : ps.items()) {
    records.push_back({"adam.m." + p.name, p.shape, adam.m[k]});
    records.push_back({"adam.v." + p.name, p.shape, adam.v[k]});
    ++k;
  }
  records.push_back({"best", {static_cast<int>(best.size())}, best});
  nlohmann::json meta = {{"kind", "train_state"}, {"model", obj.describe()}, {"train_config", cfg}, {"state", state},
                         {"adam_t", adam.t}};
  write_checkpoint(dir, meta, records);
}

void write_snapshot(const fs::path &dir, const Objective &obj, ad::ParameterSet &ps, const nlohmann::json &why) {
  write_checkpoint(dir, {{"kind", "nan_snapshot"}, {"model", obj.describe()}, {"diagnostic", why}}, parameter_records(ps));
}

bool finite(std::span<const double> v) {
  for (double x : v)
    if (!std::isfinite(x)) return false;
  return true;
}

} // namespace

TrainResult train(Objective &obj, const TrainConfig &cfg, const TrainOptions &opts) {
  cfg.validate();
  require(obj.train_size() > 0, ErrorKind::Configuration, "training set is empty");
  require(obj.val_size() > 0, ErrorKind::Configuration, "validation set is empty");
  auto &ps = obj.params();
  Adam adam(ps);
  TrainResult res;
  res.state.lr = cfg.lr_init;
  std::vector<double> best = ps.flatten();
  const bool files = !opts.run_dir.empty();
  const fs::path log_path = opts.run_dir / "train_log.jsonl";

  if (files) fs::create_directories(opts.run_dir);
  if (opts.resume) {
    require(files, ErrorKind::Configuration, "resume needs a run directory");
    auto [meta, records] = read_checkpoint(opts.run_dir / "last");
    require(meta.value("kind", "") == "train_state", ErrorKind::Checkpoint, "run_dir/last is not a training-state checkpoint");
    require(meta.at("model") == obj.describe(), ErrorKind::Checkpoint, "resume: model configuration differs from checkpoint");
    std::vector<TensorRecord> model_records;
    for (const auto &r : records)
      if (!r.name.starts_with("adam.") && r.name != "best") model_records.push_back(r);
    assign_parameters(ps, model_records);
    std::unordered_map<std::string, const TensorRecord *> by_name;
    for (const auto &r : records) by_name[r.name] = &r;
    std::size_t k = 0;
    for (const auto &p : ps.items()) {
      auto m = by_name.find("adam.m." + p.name), v = by_name.find("adam.v." + p.name);
      require(m != by_name.end() && v != by_name.end(), ErrorKind::Checkpoint, "resume: missing optimizer state for " + p.name);
      adam.m[k] = m->second->data;
      adam.v[k] = v->second->data;
      ++k;
    }
    adam.t = meta.at("adam_t").get<std::int64_t>();
    res.state = meta.at("state").get<TrainState>();
    require(by_name.contains("best") && by_name["best"]->data.size() == best.size(), ErrorKind::Checkpoint,
            "resume: missing best-parameter snapshot");
    best = by_name["best"]->data;
    // Keep only log records of completed epochs.
    std::ifstream in(log_path);
    std::string line;
    while (std::getline(in, line))
      if (!line.empty()) {
        auto r = nlohmann::json::parse(line).get<EpochRecord>();
        if (r.epoch <= res.state.epoch) res.log.push_back(r);
      }
    in.close();
    std::ofstream out(log_path, std::ios::trunc);
    for (const auto &r : res.log) out << nlohmann::json(r).dump() << "\n";
  } else if (files) {
    std::ofstream(log_path, std::ios::trunc).close();
  }

  const std::size_t n = obj.train_size();
  const std::size_t bs = std::min<std::size_t>(cfg.batch_size, n);
  int ran = 0;
  while (res.state.epoch < cfg.epochs && !res.state.stopped_early) {
    if (opts.max_epochs_this_call >= 0 && ran >= opts.max_epochs_this_call) break;
    const auto t0 = std::chrono::steady_clock::now();
    const int epoch = res.state.epoch + 1;
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    Rng rng(mix_seed(cfg.seed, static_cast<std::uint64_t>(epoch), 0x5eed));
    rng.shuffle(order);

    double loss_sum = 0.0;
    for (std::size_t start = 0; start < n; start += bs) {
      const std::size_t end = std::min(n, start + bs);
      std::vector<std::vector<double>> grads;
      for (const auto &p : ps.items()) grads.emplace_back(p.value.size(), 0.0);
      for (std::size_t b = start; b < end; ++b) {
        const std::size_t idx = order[b];
        ad::Graph g;
        ad::Var loss = obj.loss(g, idx, mix_seed(cfg.seed, static_cast<std::uint64_t>(epoch), idx + 1), cfg.augment);
        const double lv = loss.item();
        auto abort = [&](const std::string &what) {
          nlohmann::json why = {{"epoch", epoch}, {"sample", idx}, {"loss", std::isfinite(lv) ? nlohmann::json(lv) : "non-finite"},
                                {"reason", what}};
          std::string where;
          if (files) {
            write_snapshot(opts.run_dir / "nan_snapshot", obj, ps, why);
            where = "; diagnostic snapshot in " + (opts.run_dir / "nan_snapshot").string();
          }
          fail(ErrorKind::Runtime, what + " at epoch " + std::to_string(epoch) + ", sample " + std::to_string(idx) + where);
        };
        if (!std::isfinite(lv)) abort("non-finite loss");
        g.backward(loss);
        std::size_t k = 0;
        for (const auto &p : ps.items()) {
          auto gr = g.param_grad(p);
          if (!gr.empty()) {
            if (!finite(gr)) abort("non-finite gradient for " + p.name);
            for (std::size_t i = 0; i < gr.size(); ++i) grads[k][i] += gr[i];
          }
          ++k;
        }
        loss_sum += lv;
      }
      const double inv = 1.0 / static_cast<double>(end - start);
      for (auto &gv : grads)
        for (auto &x : gv) x *= inv;
      adam.step(ps, grads, res.state.lr);
    }

    double val = 0.0;
    for (std::size_t i = 0; i < obj.val_size(); ++i) val += obj.validate(i);
    val /= static_cast<double>(obj.val_size());
    require(std::isfinite(val), ErrorKind::Runtime, "non-finite validation SSIM at epoch " + std::to_string(epoch));

    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = loss_sum / static_cast<double>(n);
    rec.val_ssim = val;
    rec.lr = res.state.lr; // lr used during this epoch
    const auto d = advance(res.state, val, cfg);
    if (d.improved) best = ps.flatten();
    rec.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    res.log.push_back(rec);
    if (files) {
      std::ofstream(log_path, std::ios::app) << nlohmann::json(rec).dump() << "\n";
      if (d.improved)
        write_checkpoint(opts.run_dir / "best", {{"kind", "model"}, {"model", obj.describe()}, {"epoch", epoch}, {"val_ssim", val}},
                         parameter_records(ps));
      save_last(opts.run_dir / "last", obj, ps, adam, res.state, cfg, best);
    }
    if (opts.on_epoch) opts.on_epoch(rec);
    ++ran;
  }
  res.finished = res.state.stopped_early || res.state.epoch >= cfg.epochs;
  ps.assign(best);
  return res;
}

} // namespace priorecon
