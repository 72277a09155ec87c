#include <cstdlib>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "umbra/umbra.hpp"

namespace {

using namespace umbra;

uint64_t resolve_seed(CLI::Option* opt, uint64_t flag_value) {
  if (opt->count() > 0) return flag_value;
  if (const char* env = std::getenv("UMBRA_SEED")) {
    try {
      return std::stoull(env);
    } catch (const std::exception&) {
      throw std::invalid_argument("UMBRA_SEED is not an unsigned integer: " +
                                  std::string(env));
    }
  }
  return flag_value;
}

std::vector<double> parse_ser_list(const std::string& csv) {
  std::vector<double> out;
  std::istringstream in(csv);
  std::string item;
  while (std::getline(in, item, ',')) {
    if (item.empty()) continue;
    out.push_back(SerValue(std::stod(item)).value);
  }
  require(!out.empty(), "no rate values in: " + csv);
  return out;
}

std::string swap_extension(const std::string& path, const std::string& ext) {
  const auto dot = path.find_last_of('.');
  const auto slash = path.find_last_of('/');
  if (dot == std::string::npos || (slash != std::string::npos && dot < slash))
    return path + ext;
  return path.substr(0, dot) + ext;
}

struct ModelFlags {
  DenoiserConfig cfg;

  void attach(CLI::App* cmd) {
    cmd->add_option("--dim", cfg.d, "model width");
    cmd->add_option("--blocks", cfg.n_blocks, "transformer block count");
    cmd->add_option("--heads", cfg.n_heads, "attention heads");
    cmd->add_option("--text-dim", cfg.d_text, "text feature width");
    cmd->add_option("--mel-bins", cfg.F, "mel bands");
    cmd->add_option("--max-frames", cfg.max_N, "longest frame sequence");
    cmd->add_option("--mel-mean", cfg.mel_mean, "log-mel normalization mean");
    cmd->add_option("--mel-std", cfg.mel_std, "log-mel normalization std");
  }
};

SamplerConfig sampler_from(const std::string& method, int steps) {
  SamplerConfig sc;
  sc.n_steps = steps;
  if (method == "euler")
    sc.method = SamplerMethod::EULER;
  else if (method == "midpoint")
    sc.method = SamplerMethod::MIDPOINT;
  else
    throw std::invalid_argument("unknown sampler method: " + method);
  return sc;
}

int run_forge(const std::string& out_dir, int synthetic, const std::string& wav_path,
              const std::string& text, uint64_t seed, int mel_bins) {
  MelConfig mc;
  mc.n_mels = mel_bins;
  std::filesystem::create_directories(out_dir);
  Manifest manifest;

  const auto add_record = [&](const std::string& id, const TripletSample& t,
                              const std::string& wav_rel) {
    write_mel((std::filesystem::path(out_dir) / (id + "_target.umel")).string(),
              t.target_mel);
    write_mel((std::filesystem::path(out_dir) / (id + "_speech.umel")).string(),
              t.speech_mel);
    write_mel((std::filesystem::path(out_dir) / (id + "_env.umel")).string(), t.env_mel);
    ManifestRecord rec;
    rec.id = id;
    rec.target_mel = id + "_target.umel";
    rec.speech_mel = id + "_speech.umel";
    rec.env_mel = id + "_env.umel";
    rec.wav = wav_rel;
    rec.transcript = t.transcript;
    rec.ser = t.ser.value;
    rec.strategy = to_string(t.strategy);
    manifest.records.push_back(rec);
  };

  if (synthetic > 0) {
    for (int i = 0; i < synthetic; ++i) {
      Rng rng(derive_seed(seed, 0xf04e, uint64_t(i)));
      const SyntheticForge forge = make_synthetic_triplet(rng, mc);
      const std::string id = "syn" + std::to_string(i);
      const std::string wav_rel = id + "_mix.wav";
      write_wav((std::filesystem::path(out_dir) / wav_rel).string(), forge.mix);
      add_record(id, forge.triplet, wav_rel);
    }
  } else {
    const Waveform wave = read_wav(wav_path);
    Rng rng(derive_seed(seed, 0xf04e));
    const TripletSample t = forge_triplet(wave, text, rng, mc);
    add_record("sample0", t, "");
  }

  const std::string manifest_path =
      (std::filesystem::path(out_dir) / "manifest.jsonl").string();
  write_manifest(manifest, manifest_path);
  std::cout << manifest_path << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"speech and background generator with a controllable mix knob"};
  app.require_subcommand(1);
  app.failure_message(CLI::FailureMessage::help);

  uint64_t seed = 0;

  // forge
  auto* forge = app.add_subcommand("forge", "build a triplet manifest");
  std::string forge_out;
  int forge_synthetic = 0;
  std::string forge_wav, forge_text;
  int forge_bins = 40;
  forge->add_option("--out", forge_out, "output directory")->required();
  forge->add_option("--synthetic", forge_synthetic, "generate this many synthetic samples");
  forge->add_option("--wav", forge_wav, "source recording to split");
  forge->add_option("--text", forge_text, "transcript of --wav");
  forge->add_option("--mel-bins", forge_bins, "mel bands");
  auto* forge_seed = forge->add_option("--seed", seed, "random seed");

  // train
  auto* train_cmd = app.add_subcommand("train", "fit the field to a manifest");
  std::string train_manifest, train_out, train_resume;
  ModelFlags train_model;
  TrainConfig tc;
  train_cmd->add_option("--manifest", train_manifest, "triplet manifest")->required();
  train_cmd->add_option("--out", train_out, "checkpoint directory")->required();
  train_cmd->add_option("--steps", tc.steps, "optimizer steps");
  train_cmd->add_option("--lr", tc.lr, "learning rate");
  train_cmd->add_option("--weight-decay", tc.weight_decay, "decoupled weight decay");
  train_cmd->add_option("--frames-per-batch", tc.frames_per_batch, "frame budget per batch");
  train_cmd->add_option("--ckpt-every", tc.checkpoint_every, "checkpoint interval");
  train_cmd->add_option("--mask-min", tc.mask_min_frac, "smallest masked fraction");
  train_cmd->add_option("--mask-max", tc.mask_max_frac, "largest masked fraction");
  train_cmd->add_option("--resume", train_resume, "checkpoint to continue from");
  train_model.attach(train_cmd);
  auto* train_seed = train_cmd->add_option("--seed", seed, "random seed");

  // synth
  auto* synth_cmd = app.add_subcommand("synth", "generate speech over a background");
  std::string sy_ckpt, sy_ref, sy_ref_text, sy_env, sy_text, sy_out;
  double sy_ser = 0.5;
  int sy_steps = 32;
  std::string sy_method = "euler";
  synth_cmd->add_option("--ckpt", sy_ckpt, "trained checkpoint")->required();
  synth_cmd->add_option("--ref", sy_ref, "reference speech wav")->required();
  synth_cmd->add_option("--ref-text", sy_ref_text, "reference transcript")->required();
  synth_cmd->add_option("--env", sy_env, "environment prompt wav")->required();
  synth_cmd->add_option("--text", sy_text, "text to speak")->required();
  synth_cmd->add_option("--ser", sy_ser, "speech-to-environment rate in [0,1]");
  synth_cmd->add_option("--out", sy_out, "output wav path")->required();
  synth_cmd->add_option("--sampler-steps", sy_steps, "ODE steps");
  synth_cmd->add_option("--sampler", sy_method, "euler or midpoint");
  auto* synth_seed = synth_cmd->add_option("--seed", seed, "random seed");

  // eval
  auto* eval_cmd = app.add_subcommand("eval", "score waves and mels");
  std::string ev_wav, ev_a, ev_b, ev_text;
  eval_cmd->add_option("--wav", ev_wav, "wave to rate");
  eval_cmd->add_option("--a", ev_a, "first mel for the distance");
  eval_cmd->add_option("--b", ev_b, "second mel for the distance");
  eval_cmd->add_option("--text", ev_text, "reference transcript for the error rate");
  auto* eval_seed = eval_cmd->add_option("--seed", seed, "random seed");

  // sweep
  auto* sweep_cmd = app.add_subcommand("sweep", "synthesize across rate values");
  std::string sw_ckpt, sw_ref, sw_ref_text, sw_env, sw_text, sw_out, sw_ser = "0,0.25,0.5,0.75,1";
  int sw_steps = 32;
  std::string sw_method = "euler";
  sweep_cmd->add_option("--ckpt", sw_ckpt, "trained checkpoint")->required();
  sweep_cmd->add_option("--ref", sw_ref, "reference speech wav")->required();
  sweep_cmd->add_option("--ref-text", sw_ref_text, "reference transcript")->required();
  sweep_cmd->add_option("--env", sw_env, "environment prompt wav")->required();
  sweep_cmd->add_option("--text", sw_text, "text to speak")->required();
  sweep_cmd->add_option("--ser", sw_ser, "comma-separated rate values");
  sweep_cmd->add_option("--out", sw_out, "output directory")->required();
  sweep_cmd->add_option("--sampler-steps", sw_steps, "ODE steps");
  sweep_cmd->add_option("--sampler", sw_method, "euler or midpoint");
  auto* sweep_seed = sweep_cmd->add_option("--seed", seed, "random seed");

  // plot
  auto* plot_cmd = app.add_subcommand("plot", "render a mel to a PGM image");
  std::string pl_mel, pl_out;
  plot_cmd->add_option("--mel", pl_mel, "mel file")->required();
  plot_cmd->add_option("--out", pl_out, "image path")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << e.what() << "\n" << app.help() << "\n";
    return 2;
  }

  try {
    if (*forge) {
      require(forge_synthetic > 0 || !forge_wav.empty(),
              "forge needs --synthetic N or --wav with --text");
      require(forge_synthetic <= 0 || forge_wav.empty(),
              "forge takes either --synthetic or --wav, not both");
      require(forge_wav.empty() || !forge_text.empty(), "forge --wav needs --text");
      return run_forge(forge_out, forge_synthetic, forge_wav, forge_text,
                       resolve_seed(forge_seed, seed), forge_bins);
    }

    if (*train_cmd) {
      tc.seed = resolve_seed(train_seed, seed);
      MelConfig mc;
      mc.n_mels = train_model.cfg.F;
      const std::string final_path =
          train(tc, train_model.cfg, mc, train_manifest, train_out, train_resume);
      std::cout << final_path << "\n";
      return 0;
    }

    if (*synth_cmd) {
      const Checkpoint ck = load_checkpoint(sy_ckpt);
      MelConfig mc;
      mc.n_mels = ck.config.F;
      const MelSpectrogram ref_mel = stft_mel(read_wav(sy_ref), mc);
      const MelSpectrogram env_mel = stft_mel(read_wav(sy_env), mc);
      const SynthesisResult r = synthesize(
          ck.params, ck.config, ref_mel, sy_ref_text, env_mel, sy_text, SerValue(sy_ser),
          sampler_from(sy_method, sy_steps), mc, resolve_seed(synth_seed, seed));
      write_wav(sy_out, r.wave);
      const std::string mel_out = swap_extension(sy_out, ".mel");
      write_mel(mel_out, r.mel);
      std::cout << sy_out << "\n" << mel_out << "\n";
      return 0;
    }

    if (*eval_cmd) {
      (void)resolve_seed(eval_seed, seed);
      bool did_anything = false;
      MelConfig mc;
      if (!ev_a.empty() || !ev_b.empty()) {
        require(!ev_a.empty() && !ev_b.empty(), "eval needs both --a and --b");
        const MelSpectrogram a = read_mel(ev_a, mc);
        const MelSpectrogram b = read_mel(ev_b, mc);
        std::cout << "mel_mse\t" << mel_mse(a.values, b.values) << "\n";
        did_anything = true;
      }
      if (!ev_wav.empty()) {
        const Waveform w = read_wav(ev_wav);
        std::cout << "env_speech_ratio\t" << env_speech_energy_ratio(w, mc) << "\n";
        if (!ev_text.empty()) {
          const std::string decoded =
              decode_transcript(w, static_cast<int>(ev_text.size()));
          std::cout << "decoded\t" << decoded << "\n";
          std::cout << "cer\t" << char_error_rate(ev_text, decoded) << "\n";
        }
        did_anything = true;
      }
      require(did_anything, "eval needs --wav or --a/--b");
      return 0;
    }

    if (*sweep_cmd) {
      const Checkpoint ck = load_checkpoint(sw_ckpt);
      MelConfig mc;
      mc.n_mels = ck.config.F;
      const MelSpectrogram ref_mel = stft_mel(read_wav(sw_ref), mc);
      const MelSpectrogram env_mel = stft_mel(read_wav(sw_env), mc);
      const SweepResult result = ser_sweep(
          ck.params, ck.config, std::filesystem::path(sw_ckpt).stem().string(), ref_mel,
          sw_ref_text, env_mel, sw_text, parse_ser_list(sw_ser),
          resolve_seed(sweep_seed, seed), sampler_from(sw_method, sw_steps), mc, sw_out);
      for (const SweepEntry& e : result.entries) {
        MelConfig read_cfg;
        plot_mel(read_mel(e.mel_path, read_cfg), swap_extension(e.mel_path, ".pgm"));
      }
      const std::string report =
          (std::filesystem::path(sw_out) / "report.tsv").string();
      write_sweep_report(result, report);
      std::cout << report << "\n";
      return 0;
    }

    if (*plot_cmd) {
      MelConfig mc;
      plot_mel(read_mel(pl_mel, mc), pl_out);
      std::cout << pl_out << "\n";
      return 0;
    }
  } catch (const std::exception& e) {
    std::cerr << "umbra: " << e.what() << "\n";
    return 1;
  }
  std::cerr << "umbra: no subcommand\n" << app.help() << "\n";
  return 2;
}
