// refloc: generate synthetic grounding corpora, train, pseudo-label,
// evaluate and query models.
//
// Exit codes: 0 ok, 1 failure, 2 validation, 3 stage order, 4 I/O.

#include <cstdlib>
#include <iostream>

#include <CLI11.hpp>

#include "refloc/pipeline.hpp"

using namespace refloc;

namespace {

struct Globals {
  std::string config;
  std::string preset = "default";
  std::optional<std::uint64_t> seed;
  std::string out;
  bool force = false;
  bool quiet = false;
  std::optional<int> beam_width;
  std::optional<int> max_new_tokens;
};

fs::path out_root(const Globals& g) {
  if (!g.out.empty()) return g.out;
  if (const char* e = std::getenv("REFLOC_OUT"); e && *e) return e;
  return "refloc_out";
}

RunConfig resolve_config(const Globals& g) {
  RunConfig c = preset(g.preset);
  if (!g.config.empty()) c = load_run_config(g.config, c);
  if (g.seed) reseed(c, *g.seed);
  if (g.beam_width) c.beam.beam_width = *g.beam_width;
  if (g.max_new_tokens) c.beam.max_new_tokens = *g.max_new_tokens;
  validate(c);
  return c;
}

fs::path resolve(const fs::path& root, const std::string& p) {
  return fs::path(p).is_absolute() ? fs::path(p) : root / p;
}

Progress progress_of(const Globals& g) {
  if (g.quiet) return {};
  return [](const std::string& s) { std::cerr << s << "\n"; };
}

void print_report(const EvalReport& r) { std::cout << format_report(r); }

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"refloc: visual grounding with coordinates as text"};
  app.require_subcommand(1);
  app.fallthrough();  // global flags may follow the verb
  Globals g;
  app.add_option("--config", g.config, "JSON run configuration");
  app.add_option("--preset", g.preset, "base configuration: default, smoke or desk")->capture_default_str();
  app.add_option("--seed", g.seed, "reseed every stage from this value");
  app.add_option("--out", g.out, "output root (default $REFLOC_OUT or ./refloc_out)");
  app.add_flag("--force", g.force, "overwrite existing artifacts");
  app.add_flag("--quiet", g.quiet, "no progress output");
  app.add_option("--beam-width", g.beam_width, "decoding beam width");
  app.add_option("--max-new-tokens", g.max_new_tokens, "decoding length limit");

  auto* gen = app.add_subcommand("generate", "write a synthetic corpus");
  bool detection_only = false;
  gen->add_flag("--detection-only", detection_only, "write scenes without expressions");

  auto* train = app.add_subcommand("train", "coordinate activation on captions");

  std::string checkpoint;
  auto* pseudo = app.add_subcommand("pseudo-label", "generate expressions for detection-only scenes");
  pseudo->add_option("--checkpoint", checkpoint, "generator checkpoint (default: cycle run, else activation run)");

  auto* cycle = app.add_subcommand("cycle", "cycle training; with pseudo labels, continues from the gold cycle run");
  cycle->add_option("--checkpoint", checkpoint, "parent checkpoint (default: activation run, or cycle run with labels)");
  std::string labels;
  bool no_pseudo = false;
  cycle->add_option("--labels", labels, "pseudo-label file (default: pseudo-label run, if present)");
  cycle->add_flag("--no-pseudo", no_pseudo, "train on gold pairs only");

  std::string split, csv;
  bool oracle = false;
  auto* eval = app.add_subcommand("eval", "grade a checkpoint on a split");
  eval->add_option("--checkpoint", checkpoint, "checkpoint to grade");
  eval->add_option("--split", split, "val or test (default from config)");
  eval->add_option("--csv", csv, "per-sample CSV output");
  eval->add_flag("--oracle", oracle, "grade the annotation oracle instead of a model");
  std::string report_path;
  eval->add_option("--report", report_path, "report output path");

  std::string image, expr, question;
  auto* infer = app.add_subcommand("infer", "answer one question about one image");
  infer->add_option("--checkpoint", checkpoint, "checkpoint")->required();
  infer->add_option("--image", image, "PNG image")->required();
  auto* ex = infer->add_option("--expr", expr, "referring expression; builds the REC question");
  infer->add_option("--question", question, "raw question")->excludes(ex);

  auto* abl = app.add_subcommand("ablation", "activation / +cycle / +pseudo comparison");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : static_cast<int>(ExitCode::validation);
  }

  try {
    RunConfig cfg = resolve_config(g);
    const fs::path root = out_root(g);
    const fs::path data_dir = resolve(root, cfg.paths.data);
    const fs::path runs = resolve(root, cfg.paths.runs);
    const fs::path act_ckpt = runs / "activation" / "model.ckpt";
    const fs::path cycle_ckpt = runs / "cycle" / "model.ckpt";
    // The gold cycle model generates pseudo labels once it exists.
    const fs::path labeller = fs::exists(cycle_ckpt) ? cycle_ckpt : act_ckpt;
    const Progress progress = progress_of(g);

    if (gen->parsed()) {
      if (detection_only) cfg.generate.detection_only = true;
      const Manifest m = run_generate(cfg, data_dir, g.force);
      std::cout << "wrote " << data_dir.string() << "\n";
      for (const auto& [s, n] : m.counts) std::cout << "  " << s << ": " << n << " scenes\n";
      std::cout << "corpus_hash: " << m.corpus_hash << "\n";
    } else if (train->parsed()) {
      const Corpus corpus = Corpus::open(data_dir);
      const StageResult r = run_activation(cfg, corpus, runs / "activation", g.force, progress);
      std::cout << "checkpoint: " << r.checkpoint.string() << "\n";
      print_report(r.report);
    } else if (pseudo->parsed()) {
      const Corpus corpus = Corpus::open(data_dir);
      const fs::path gen_ckpt = checkpoint.empty() ? labeller : fs::path(checkpoint);
      const PseudoLabelResult r = run_pseudo_label(cfg, corpus, gen_ckpt, runs / "pseudo", g.force);
      std::cout << to_json(r.report).dump(2) << "\n";
    } else if (cycle->parsed()) {
      const Corpus corpus = Corpus::open(data_dir);
      std::optional<std::vector<PseudoLabelRecord>> pl;
      if (!no_pseudo && cfg.pseudo_labels) {
        const fs::path lp = labels.empty() ? runs / "pseudo" / "labels.jsonl" : fs::path(labels);
        if (!labels.empty() || fs::exists(lp)) pl = read_pseudo_labels(lp);
      }
      StageResult r;
      if (pl) {
        const fs::path parent = checkpoint.empty() ? labeller : fs::path(checkpoint);
        r = run_augment(cfg, corpus, parent, *pl, runs / "cycle_pseudo", g.force, progress);
      } else {
        const fs::path parent = checkpoint.empty() ? act_ckpt : fs::path(checkpoint);
        r = run_cycle(cfg, corpus, parent, nullptr, runs / "cycle", g.force, progress);
      }
      std::cout << "checkpoint: " << r.checkpoint.string() << "\n";
      print_report(r.report);
    } else if (eval->parsed()) {
      const Corpus corpus = Corpus::open(data_dir);
      const std::string s = split.empty() ? cfg.eval.split : split;
      std::vector<SampleResult> per;
      EvalReport r;
      if (oracle) {
        const Vocabulary vocab = Vocabulary::standard();
        const auto samples = build_samples(vocab, corpus.data, corpus.images, corpus.data.split(s));
        OracleResponder resp;
        EvalOptions eo;
        eo.cycle_samples = cfg.eval.cycle_samples;
        r = evaluate(resp, vocab, pointers(samples.rec), s, eo, &per);
        r.checkpoint = "oracle";
      } else {
        if (checkpoint.empty()) throw ValidationError("eval: --checkpoint is required unless --oracle is given");
        r = evaluate_checkpoint(fs::path(checkpoint), corpus, s, cfg, &per);
      }
      if (!report_path.empty()) emit_report(r, report_path);
      if (!csv.empty()) write_file(csv, format_sample_csv(per));
      print_report(r);
    } else if (infer->parsed()) {
      if (expr.empty() == question.empty()) throw ValidationError("infer: give exactly one of --expr or --question");
      if (!fs::exists(checkpoint)) throw IoError(checkpoint, "checkpoint not found");
      if (!fs::exists(image)) throw IoError(image, "image not found");
      const auto ck = load_checkpoint<float>(checkpoint);
      const Vocabulary vocab = Vocabulary::standard();
      const Image img = read_png(image);
      if (img.width != ck.model.config().image_width || img.height != ck.model.config().image_height) {
        throw ValidationError("infer: image is " + std::to_string(img.width) + "x" + std::to_string(img.height) +
                              ", model expects " + std::to_string(ck.model.config().image_width) + "x" +
                              std::to_string(ck.model.config().image_height));
      }
      const std::string q = expr.empty() ? question : build_rec_pair(normalize_text(vocab, expr), QuantizedBox{}).question;
      if (tokenize(vocab, q).unknown) throw ValidationError("infer: question has out-of-vocabulary words");
      DatasetRecord rec;
      rec.scene.canvas = {img.width, img.height};
      ModelResponder<float> resp(ck.model, vocab, cfg.beam, 1);
      const std::string answer = resp.answer({Query{&rec, &img, q}}).front();
      std::cout << "question: " << q << "\n";
      std::cout << "answer: " << answer << "\n";
      if (const auto pb = parse_box(answer)) {
        const BBox b = dequantize(pb->box, rec.scene.canvas);
        std::printf("box: %.1f %.1f %.1f %.1f%s\n", b.x1, b.y1, b.x2, b.y2, pb->repaired() ? " (repaired)" : "");
      } else {
        std::cout << "box: none (no box parsed)\n";
      }
    } else if (abl->parsed()) {
      const Corpus corpus = Corpus::open(data_dir);
      const AblationResult r = run_ablation(cfg, corpus, runs / "ablation", g.force, progress);
      std::cout << format_ablation_table(r.rows);
      std::cout << "pseudo labels retained: " << r.pseudo.retained << "/" << r.pseudo.candidates << "\n";
    }
    return 0;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return static_cast<int>(e.code());
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return static_cast<int>(ExitCode::failure);
  }
}
