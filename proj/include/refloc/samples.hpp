#pragma once

// Training/evaluation samples built from dataset records, and their
// assembly into teacher-forced batches.

#include <algorithm>
#include <optional>
#include <string>
#include <vector>

#include "refloc/dataset.hpp"
#include "refloc/inference.hpp"
#include "refloc/scene.hpp"
#include "refloc/text.hpp"

namespace refloc {

enum class Provenance { gold, pseudo };

inline std::string_view name(Provenance p) { return p == Provenance::gold ? "gold" : "pseudo"; }

struct GroundingSample {
  const DatasetRecord* record = nullptr;
  const Image* image = nullptr;
  TaskKind task = TaskKind::rec;
  std::string instruction;
  std::string target;
  std::vector<TokenId> instruction_ids;
  std::vector<TokenId> target_ids;  // without the trailing <eos>
  std::optional<QuantizedBox> box;  // REC/REG target object
  std::size_t target_index = 0;
  std::string expression;
  Provenance provenance = Provenance::gold;
  std::string generator_id;  // checkpoint that produced a pseudo label
};

/// Loaded images of a dataset, indexed like Dataset::records.
struct ImageStore {
  std::vector<Image> images;

  static ImageStore load(const Dataset& d) {
    ImageStore s;
    s.images.reserve(d.records.size());
    for (const auto& r : d.records) s.images.push_back(d.load_image(r));
    return s;
  }

  const Image& of(const Dataset& d, const DatasetRecord& r) const {
    return images.at(static_cast<std::size_t>(&r - d.records.data()));
  }
};

inline std::vector<TokenId> checked_ids(const Vocabulary& vocab, const std::string& text) {
  auto t = tokenize(vocab, text);
  if (t.unknown) throw ValidationError("text contains out-of-vocabulary words: '" + text + "'");
  return std::move(t.ids);
}

/// All objects as caption lines, ordered left to right (then top to bottom).
inline std::string scene_caption(const Scene& s) {
  std::vector<std::size_t> order(s.objects.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    const auto &pa = s.objects[a].box, &pb = s.objects[b].box;
    if (pa.x1 != pb.x1) return pa.x1 < pb.x1;
    return pa.y1 < pb.y1;
  });
  std::vector<CaptionEntry> entries;
  for (std::size_t i : order) entries.push_back({s.objects[i].class_name(), quantize(s.objects[i].box, s.canvas)});
  return build_det_caption(entries);
}

inline GroundingSample caption_sample(const Vocabulary& vocab, const DatasetRecord& r, const Image& img) {
  GroundingSample s;
  s.record = &r;
  s.image = &img;
  s.task = TaskKind::det_caption;
  s.target = scene_caption(r.scene);
  s.target_ids = checked_ids(vocab, s.target);
  return s;
}

inline GroundingSample rec_sample(const Vocabulary& vocab, const DatasetRecord& r, const Image& img,
                                  const std::string& expression, std::size_t target) {
  GroundingSample s;
  s.record = &r;
  s.image = &img;
  s.task = TaskKind::rec;
  s.box = quantize(r.scene.objects.at(target).box, r.scene.canvas);
  const QaPair p = build_rec_pair(expression, *s.box);
  s.instruction = p.question;
  s.target = p.answer;
  s.instruction_ids = checked_ids(vocab, s.instruction);
  s.target_ids = checked_ids(vocab, s.target);
  s.target_index = target;
  s.expression = expression;
  return s;
}

inline GroundingSample reg_sample(const Vocabulary& vocab, const DatasetRecord& r, const Image& img,
                                  const std::string& expression, std::size_t target) {
  GroundingSample s = rec_sample(vocab, r, img, expression, target);
  const QaPair p = build_reg_pair(*s.box, expression);
  s.task = TaskKind::reg;
  s.instruction = p.question;
  s.target = p.answer;
  s.instruction_ids = checked_ids(vocab, s.instruction);
  s.target_ids = checked_ids(vocab, s.target);
  return s;
}

/// REG question for an object without a known expression.
inline GroundingSample reg_query(const Vocabulary& vocab, const DatasetRecord& r, const Image& img, std::size_t target) {
  GroundingSample s;
  s.record = &r;
  s.image = &img;
  s.task = TaskKind::reg;
  s.box = quantize(r.scene.objects.at(target).box, r.scene.canvas);
  s.instruction = build_reg_pair(*s.box).question;
  s.instruction_ids = checked_ids(vocab, s.instruction);
  s.target_index = target;
  return s;
}

struct SampleSets {
  std::vector<GroundingSample> captions, rec, reg;
};

/// Samples for the given records: one caption per record, one REC and one
/// REG sample per stored expression.
inline SampleSets build_samples(const Vocabulary& vocab, const Dataset& d, const ImageStore& images,
                                const std::vector<const DatasetRecord*>& records) {
  SampleSets s;
  for (const DatasetRecord* r : records) {
    const Image& img = images.of(d, *r);
    s.captions.push_back(caption_sample(vocab, *r, img));
    for (const auto& e : r->expressions) {
      s.rec.push_back(rec_sample(vocab, *r, img, e.text, e.target_index));
      s.reg.push_back(reg_sample(vocab, *r, img, e.text, e.target_index));
    }
  }
  return s;
}

/// Teacher-forced batch: decoder input <bos> y, target y <eos>, right-padded.
struct Batch {
  int size = 0;
  std::vector<const Image*> images;
  std::vector<TokenId> text_ids;
  int text_len = 0;
  std::vector<TokenId> dec_in;
  std::vector<TokenId> dec_target;
  int dec_len = 0;
  std::vector<TaskKind> tasks;  // per sample
};

inline Batch make_batch(const std::vector<const GroundingSample*>& samples, int max_seq_len) {
  Batch b;
  b.size = static_cast<int>(samples.size());
  std::vector<std::vector<TokenId>> text;
  for (const auto* s : samples) {
    b.images.push_back(s->image);
    text.push_back(s->instruction_ids);
    b.dec_len = std::max(b.dec_len, static_cast<int>(s->target_ids.size()) + 1);
    b.tasks.push_back(s->task);
  }
  if (b.dec_len > max_seq_len) throw ValidationError("target sequence exceeds max_seq_len");
  b.text_ids = pad_batch(text, b.text_len);
  b.dec_in.assign(std::size_t(b.size) * b.dec_len, kPad);
  b.dec_target.assign(std::size_t(b.size) * b.dec_len, kPad);
  for (int i = 0; i < b.size; ++i) {
    const auto& y = samples[i]->target_ids;
    const std::size_t base = std::size_t(i) * b.dec_len;
    b.dec_in[base] = kBos;
    for (std::size_t t = 0; t < y.size(); ++t) {
      b.dec_in[base + t + 1] = y[t];
      b.dec_target[base + t] = y[t];
    }
    b.dec_target[base + y.size()] = kEos;
  }
  return b;
}

/// Per-position flags selecting target tokens of samples with the given task.
inline std::vector<std::uint8_t> answer_mask(const Batch& b, TaskKind task) {
  std::vector<std::uint8_t> m(b.dec_target.size(), 0);
  for (int i = 0; i < b.size; ++i) {
    if (b.tasks[i] != task) continue;
    for (int t = 0; t < b.dec_len; ++t) {
      const std::size_t k = std::size_t(i) * b.dec_len + t;
      m[k] = b.dec_target[k] != kPad;
    }
  }
  return m;
}

}  // namespace refloc
